//! File formats: headed CSV matrices, the model archive and run reports.
//!
//! Floats are written in Rust's shortest round-trip decimal form, so a
//! write/read cycle reproduces every value bit for bit.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::design::FidelityData;
use crate::error::{Error, Result};
use crate::mcem::{FittedEmulator, TraceRow};
use crate::metrics::MetricsReport;
use crate::predict::PredictiveSummary;
use crate::synth::SynthTruth;

pub const MODEL_SCHEMA: &str = "ppcokrig-model";
pub const MODEL_VERSION: u32 = 1;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |source| Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn parse_err(path: &Path, line: usize, msg: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        msg: msg.into(),
    }
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    let line = e.position().map(|p| p.line() as usize).unwrap_or(0);
    match e.into_kind() {
        csv::ErrorKind::Io(source) => Error::Io {
            path: path.to_path_buf(),
            source,
        },
        kind => parse_err(path, line, format!("{kind:?}")),
    }
}

/// Read a CSV whose header is `{prefix}1, …, {prefix}k`.
pub fn read_matrix(path: &Path, prefix: char) -> Result<DMatrix<f64>> {
    let file = File::open(path).map_err(io_err(path))?;
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(BufReader::new(file));
    let header = rdr.headers().map_err(|e| csv_err(path, e))?.clone();
    if header.is_empty() || (header.len() == 1 && header[0].is_empty()) {
        return Err(parse_err(path, 1, "missing header row"));
    }
    for (k, name) in header.iter().enumerate() {
        let want = format!("{prefix}{}", k + 1);
        if name != want {
            return Err(parse_err(path, 1, format!("column {} is named {name:?}, expected {want:?}", k + 1)));
        }
    }
    let cols = header.len();
    let mut values = Vec::new();
    let mut rows = 0;
    for rec in rdr.records() {
        let rec = rec.map_err(|e| csv_err(path, e))?;
        let line = rec.position().map(|p| p.line() as usize).unwrap_or(rows + 2);
        if rec.len() != cols {
            return Err(parse_err(path, line, format!("{} fields, expected {cols}", rec.len())));
        }
        for (k, field) in rec.iter().enumerate() {
            let v: f64 = field
                .parse()
                .map_err(|_| parse_err(path, line, format!("column {}: {field:?} is not a number", k + 1)))?;
            if !v.is_finite() {
                return Err(parse_err(path, line, format!("column {}: non-finite value", k + 1)));
            }
            values.push(v);
        }
        rows += 1;
    }
    Ok(DMatrix::from_row_slice(rows, cols, &values))
}

/// Write a matrix with header `{prefix}1, …`.
pub fn write_matrix(path: &Path, prefix: char, m: &DMatrix<f64>) -> Result<()> {
    let header: Vec<String> = (1..=m.ncols()).map(|k| format!("{prefix}{k}")).collect();
    write_rows(path, &header, m.row_iter().map(|r| r.iter().map(|v| v.to_string()).collect()))
}

fn write_rows(path: &Path, header: &[String], rows: impl Iterator<Item = Vec<String>>) -> Result<()> {
    let file = File::create(path).map_err(io_err(path))?;
    let mut w = csv::Writer::from_writer(BufWriter::new(file));
    w.write_record(header).map_err(|e| csv_err(path, e))?;
    for r in rows {
        w.write_record(&r).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(io_err(path))
}

/// Load one fidelity level from a design file and an aligned output file.
pub fn load_level(level: usize, design_path: &Path, output_path: &Path) -> Result<FidelityData<f64>> {
    let x = read_matrix(design_path, 'x')?;
    let y = read_matrix(output_path, 'y')?;
    if x.nrows() != y.nrows() {
        let row = x.nrows().min(y.nrows()) + 1;
        return Err(Error::Validation(format!(
            "{} has {} rows but {} has {}; row {row} has no counterpart",
            design_path.display(),
            x.nrows(),
            output_path.display(),
            y.nrows()
        )));
    }
    FidelityData::new(level, x, y).map_err(|e| match e {
        Error::Validation(m) => Error::Validation(format!("{}: {m}", design_path.display())),
        other => other,
    })
}

pub fn save_level(level: &FidelityData<f64>, design_path: &Path, output_path: &Path) -> Result<()> {
    write_matrix(design_path, 'x', level.x())?;
    write_matrix(output_path, 'y', level.y())
}

#[derive(Serialize)]
struct ArchiveOut<'a> {
    schema: &'static str,
    version: u32,
    levels: usize,
    d: usize,
    n_outputs: usize,
    model: &'a FittedEmulator<f64>,
}

#[derive(Deserialize)]
struct ArchiveHeader {
    schema: String,
    version: u32,
}

#[derive(Deserialize)]
struct ArchiveIn {
    levels: usize,
    d: usize,
    n_outputs: usize,
    model: FittedEmulator<f64>,
}

/// Write the model archive (JSON).
pub fn save_model(path: &Path, model: &FittedEmulator<f64>) -> Result<()> {
    let file = File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(file);
    let archive = ArchiveOut {
        schema: MODEL_SCHEMA,
        version: MODEL_VERSION,
        levels: model.s(),
        d: model.d(),
        n_outputs: model.n_outputs(),
        model,
    };
    serde_json::to_writer(&mut w, &archive).map_err(|e| Error::Schema(format!("{}: {e}", path.display())))?;
    w.write_all(b"\n").map_err(io_err(path))?;
    w.flush().map_err(io_err(path))
}

/// Read a model archive, rejecting other schemas and versions.
pub fn load_model(path: &Path) -> Result<FittedEmulator<f64>> {
    let mut text = String::new();
    File::open(path)
        .map_err(io_err(path))?
        .read_to_string(&mut text)
        .map_err(io_err(path))?;
    let json_err = |e: serde_json::Error| parse_err(path, e.line(), e.to_string());
    let header: ArchiveHeader = serde_json::from_str(&text).map_err(json_err)?;
    if header.schema != MODEL_SCHEMA {
        return Err(Error::Schema(format!("{}: schema {:?} is not {MODEL_SCHEMA:?}", path.display(), header.schema)));
    }
    if header.version != MODEL_VERSION {
        return Err(Error::Schema(format!(
            "{}: archive version {} is not supported (expected {MODEL_VERSION})",
            path.display(),
            header.version
        )));
    }
    let archive: ArchiveIn = serde_json::from_str(&text).map_err(json_err)?;
    let m = &archive.model;
    if m.s() != archive.levels || m.d() != archive.d || m.n_outputs() != archive.n_outputs {
        return Err(Error::Schema(format!("{}: declared shape disagrees with model contents", path.display())));
    }
    if m.phis.len() != m.s() || m.estimates.len() != m.s() || m.phis.iter().any(|p| p.dim() != m.d()) {
        return Err(Error::Schema(format!("{}: per-level parameters are incomplete", path.display())));
    }
    Ok(archive.model)
}

/// Training trace, one row per iteration.
pub fn write_trace(path: &Path, trace: &[TraceRow], include_wall_time: bool) -> Result<()> {
    let s = trace.first().map_or(0, |r| r.phis.len());
    let d = trace.first().and_then(|r| r.phis.first()).map_or(0, |p| p.len());
    let mut header = vec!["iteration".to_string(), "draws".to_string()];
    for t in 1..=s {
        for k in 1..=d {
            header.push(format!("phi_{t}_{k}"));
        }
    }
    for t in 1..=s {
        header.push(format!("q_before_{t}"));
        header.push(format!("q_after_{t}"));
    }
    header.push("max_change".into());
    if include_wall_time {
        header.push("wall_time".into());
    }
    let rows = trace.iter().map(|r| {
        let mut row = vec![r.iteration.to_string(), r.draws.to_string()];
        row.extend(r.phis.iter().flatten().map(|v| v.to_string()));
        for (b, a) in r.q_before.iter().zip(&r.q_after) {
            row.push(b.to_string());
            row.push(a.to_string());
        }
        row.push(r.max_change.to_string());
        if include_wall_time {
            row.push(format!("{:.3}", r.wall_time));
        }
        row
    });
    write_rows(path, &header, rows)
}

/// Per-query, per-coordinate summaries in long form.
pub fn write_summaries(path: &Path, summaries: &[PredictiveSummary<f64>]) -> Result<()> {
    let header: Vec<String> = ["query", "coord", "mean", "sd", "lower", "upper", "n_draws"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    let rows = summaries.iter().enumerate().flat_map(|(q, s)| {
        (0..s.mean.len()).map(move |j| {
            vec![
                (q + 1).to_string(),
                (j + 1).to_string(),
                s.mean[j].to_string(),
                s.sd[j].to_string(),
                s.lower[j].to_string(),
                s.upper[j].to_string(),
                s.n_draws.to_string(),
            ]
        })
    });
    write_rows(path, &header, rows)
}

/// Raw top-level draws: one row per query and draw.
pub fn write_draws(path: &Path, draws: &[DMatrix<f64>]) -> Result<()> {
    let n = draws.first().map_or(0, |d| d.ncols());
    let mut header = vec!["query".to_string(), "draw".to_string()];
    header.extend((1..=n).map(|j| format!("y{j}")));
    let rows = draws.iter().enumerate().flat_map(|(q, d)| {
        d.row_iter()
            .enumerate()
            .map(move |(m, r)| {
                let mut row = vec![(q + 1).to_string(), (m + 1).to_string()];
                row.extend(r.iter().map(|v| v.to_string()));
                row
            })
            .collect::<Vec<_>>()
    });
    write_rows(path, &header, rows)
}

pub fn write_metrics(path: &Path, r: &MetricsReport) -> Result<()> {
    let header: Vec<String> = ["metric", "value"].iter().map(|s| s.to_string()).collect();
    let mut rows = vec![
        vec!["rmspe".into(), r.rmspe.to_string()],
        vec!["cvg95".into(), r.coverage95.to_string()],
        vec!["alci95".into(), r.alci95.to_string()],
    ];
    if let Some(c) = r.crps {
        rows.push(vec!["crps".into(), c.to_string()]);
    }
    rows.push(vec![
        format!("nsme_{}", serde_json::to_value(r.nsme_denominator).unwrap().as_str().unwrap()),
        r.nsme.to_string(),
    ]);
    rows.push(vec!["cells".into(), r.cells.to_string()]);
    write_rows(path, &header, rows.into_iter())
}

pub fn write_json<S: Serialize>(path: &Path, value: &S) -> Result<()> {
    let file = File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(file);
    serde_json::to_writer_pretty(&mut w, value).map_err(|e| Error::Schema(format!("{}: {e}", path.display())))?;
    w.write_all(b"\n").map_err(io_err(path))?;
    w.flush().map_err(io_err(path))
}

pub fn write_truth(path: &Path, truth: &SynthTruth) -> Result<()> {
    write_json(path, truth)
}

/// Conventional file names for level `t` inside a data directory.
pub fn level_paths(dir: &Path, t: usize) -> (PathBuf, PathBuf) {
    (dir.join(format!("level{t}_x.csv")), dir.join(format!("level{t}_y.csv")))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let m = DMatrix::from_row_slice(3, 2, &[0.1, 1.0 / 3.0, -2.5e-300, 7.0, f64::MIN_POSITIVE, 123456.789]);
        let p = dir.path().join("m.csv");
        write_matrix(&p, 'x', &m).unwrap();
        let back = read_matrix(&p, 'x').unwrap();
        assert_eq!(m.shape(), back.shape());
        for (a, b) in m.iter().zip(back.iter()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn load_level_checks_alignment() {
        let dir = tempfile::tempdir().unwrap();
        let (xp, yp) = level_paths(dir.path(), 1);
        std::fs::write(&xp, "x1\n0\n0.5\n1\n").unwrap();
        std::fs::write(&yp, "y1,y2\n1,2\n3,4\n5,6\n").unwrap();
        let l = load_level(1, &xp, &yp).unwrap();
        assert_eq!((l.n(), l.n_outputs()), (3, 2));
        std::fs::write(&yp, "y1\n1\n2\n").unwrap();
        let e = load_level(1, &xp, &yp).unwrap_err();
        assert!(e.to_string().contains("row 3"), "{e}");
    }

    #[test]
    fn parse_errors_name_the_line() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.csv");
        std::fs::write(&p, "x1,x2\n1,2\n3,oops\n").unwrap();
        match read_matrix(&p, 'x').unwrap_err() {
            Error::Parse { line, .. } => assert_eq!(line, 3),
            e => panic!("{e}"),
        }
        std::fs::write(&p, "a,b\n1,2\n").unwrap();
        assert!(matches!(read_matrix(&p, 'x'), Err(Error::Parse { line: 1, .. })));
        std::fs::write(&p, "x1\nNaN\n").unwrap();
        assert!(read_matrix(&p, 'x').is_err());
    }
}
