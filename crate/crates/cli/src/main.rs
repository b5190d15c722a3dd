//! Command-line front end for the ppcokrig emulator.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use nalgebra::DMatrix;

use ppcokrig::design::FidelityData;
use ppcokrig::io;
use ppcokrig::kernels::Smoothness;
use ppcokrig::mcem::{run_mcem, FittedEmulator, McemConfig};
use ppcokrig::metrics::{report, NsmeDenominator, ValidationSet};
use ppcokrig::predict::{summarize, Predictor, DEFAULT_M_PRED};
use ppcokrig::priors::TrendBasis;
use ppcokrig::synth::{self, Range, SynthConfig};
use ppcokrig::Error;

const EXIT_VALIDATION: u8 = 2;
const EXIT_NUMERICAL: u8 = 3;
const EXIT_NOT_CONVERGED: u8 = 4;

#[derive(Parser, Debug)]
#[command(name = "ppcokrig", version, about = "Parallel partial autoregressive cokriging emulator")]
struct Cli {
    /// Worker threads; results do not depend on this.
    #[arg(long, global = true, env = "PPCOKRIG_THREADS")]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write the two-fidelity toy problem and a held-out test set.
    GenToy(GenToyArgs),
    /// Simulate a multi-fidelity dataset from the autoregressive model.
    GenSynth(GenSynthArgs),
    /// Fit the emulator and write the model archive and training trace.
    Train(TrainArgs),
    /// Predict the highest fidelity at query inputs.
    Predict(PredictArgs),
    /// Score predictions against held-out data.
    Validate(ValidateArgs),
}

#[derive(Args, Debug)]
struct GenToyArgs {
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Number of uniform test inputs.
    #[arg(long, default_value_t = 200)]
    test_points: usize,
}

#[derive(Args, Debug)]
struct GenSynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: u64,
    /// Input dimension.
    #[arg(long, default_value_t = 2)]
    dim: usize,
    /// Output coordinates N.
    #[arg(long, default_value_t = 40)]
    outputs: usize,
    /// Runs per level, lowest fidelity first, e.g. `60,25`.
    #[arg(long, value_delimiter = ',', required = true)]
    runs: Vec<usize>,
    /// Ranges per level separated by `;`, per dimension by `,`, e.g. `0.3,0.5;0.4,0.25`.
    #[arg(long)]
    phi: String,
    #[arg(long, default_value_t = 2.5)]
    nu: f64,
    /// Trend per level as `v` or `lo:hi`.
    #[arg(long, value_delimiter = ',')]
    beta: Option<Vec<String>>,
    /// Scale discrepancy per level above the first, as `v` or `lo:hi`.
    #[arg(long, value_delimiter = ',')]
    gamma: Option<Vec<String>>,
    /// Variance per level, as `v` or `lo:hi`.
    #[arg(long, value_delimiter = ',')]
    sigma2: Option<Vec<String>>,
    /// Share of each level's runs reused from the level below.
    #[arg(long, default_value_t = 0.8)]
    nested_fraction: f64,
    /// Extra top-level runs held out as `test_x.csv` / `test_y.csv`.
    #[arg(long, default_value_t = 0)]
    test_points: usize,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Trend {
    Constant,
    Linear,
    Quadratic,
}

impl From<Trend> for TrendBasis {
    fn from(t: Trend) -> Self {
        match t {
            Trend::Constant => TrendBasis::Constant,
            Trend::Linear => TrendBasis::Polynomial { degree: 1 },
            Trend::Quadratic => TrendBasis::Polynomial { degree: 2 },
        }
    }
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Directory holding `level{t}_x.csv` / `level{t}_y.csv` for t = 1, 2, ….
    #[arg(long, conflicts_with = "level")]
    data: Option<PathBuf>,
    /// Design and output files of one level as `X.csv,Y.csv`; repeat from lowest fidelity up.
    #[arg(long, value_name = "X,Y")]
    level: Vec<String>,
    #[arg(long)]
    seed: u64,
    /// Output directory for `model.json` and `trace.csv`.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 2.5)]
    nu: f64,
    #[arg(long, value_enum, default_value_t = Trend::Constant)]
    trend: Trend,
    /// Monte Carlo draws at the first iteration.
    #[arg(long, default_value_t = 30)]
    m_initial: usize,
    /// Extra draws per iteration.
    #[arg(long, default_value_t = 10)]
    m_increment: usize,
    #[arg(long, default_value_t = 100)]
    m_max: usize,
    #[arg(long, default_value_t = 200)]
    max_iter: usize,
    /// Stop when every log-range moves less than this.
    #[arg(long, default_value_t = 1e-3)]
    tol: f64,
    /// Consecutive iterations below tolerance required to stop.
    #[arg(long, default_value_t = 3)]
    patience: usize,
    /// Optimizer start points as multiples of the current ranges.
    #[arg(long, value_delimiter = ',')]
    restarts: Option<Vec<f64>>,
    /// Add a wall_time column to the trace; the file is then not reproducible.
    #[arg(long)]
    trace_wall_time: bool,
}

#[derive(Args, Debug)]
struct PredictArgs {
    #[arg(long)]
    model: PathBuf,
    /// Query design CSV with header `x1..xd`.
    #[arg(long)]
    query: PathBuf,
    #[arg(long)]
    seed: u64,
    #[arg(long, default_value_t = DEFAULT_M_PRED)]
    m_pred: usize,
    /// Summaries CSV.
    #[arg(long)]
    out: PathBuf,
    /// Optional CSV of raw top-level draws.
    #[arg(long)]
    draws_out: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Nsme {
    Printed,
    Conventional,
}

#[derive(Args, Debug)]
struct ValidateArgs {
    #[arg(long)]
    model: PathBuf,
    /// Held-out design CSV.
    #[arg(long)]
    query: PathBuf,
    /// Held-out outputs CSV with header `y1..yN`.
    #[arg(long)]
    truth: PathBuf,
    #[arg(long)]
    seed: u64,
    #[arg(long, default_value_t = DEFAULT_M_PRED)]
    m_pred: usize,
    #[arg(long, value_enum, default_value_t = Nsme::Printed)]
    nsme: Nsme,
    /// Metrics CSV.
    #[arg(long)]
    out: PathBuf,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &anyhow::Error) -> u8 {
    match e.downcast_ref::<Error>() {
        Some(err) if err.is_numerical() => EXIT_NUMERICAL,
        _ => EXIT_VALIDATION,
    }
}

fn run(cli: Cli) -> anyhow::Result<ExitCode> {
    if let Some(n) = cli.threads {
        if n == 0 {
            bail!(Error::Validation("--threads must be positive".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("configuring the worker pool")?;
    }
    match cli.command {
        Command::GenToy(a) => gen_toy(a),
        Command::GenSynth(a) => gen_synth(a),
        Command::Train(a) => train(a),
        Command::Predict(a) => predict(a),
        Command::Validate(a) => validate(a),
    }
}

fn create_dir(dir: &Path) -> anyhow::Result<()> {
    fs::create_dir_all(dir).map_err(|source| Error::Io { path: dir.to_path_buf(), source })?;
    Ok(())
}

fn save_levels(dir: &Path, levels: &[FidelityData<f64>]) -> anyhow::Result<()> {
    for (t, level) in levels.iter().enumerate() {
        let (x, y) = io::level_paths(dir, t + 1);
        io::save_level(level, &x, &y)?;
    }
    Ok(())
}

fn gen_toy(a: GenToyArgs) -> anyhow::Result<ExitCode> {
    create_dir(&a.out)?;
    save_levels(&a.out, &synth::toy_levels()?)?;
    let xs = synth::toy_test_inputs(a.test_points);
    let x = DMatrix::from_column_slice(xs.len(), 1, &xs);
    let y = x.map(synth::toy_high);
    io::write_matrix(&a.out.join("test_x.csv"), 'x', &x)?;
    io::write_matrix(&a.out.join("test_y.csv"), 'y', &y)?;
    log::info!("toy problem written to {}", a.out.display());
    Ok(ExitCode::SUCCESS)
}

fn parse_range(s: &str) -> Result<Range, Error> {
    let bad = || Error::Validation(format!("{s:?} is not a value or lo:hi range"));
    let num = |v: &str| v.trim().parse::<f64>().map_err(|_| bad());
    match s.split_once(':') {
        Some((lo, hi)) => Ok(Range { lo: num(lo)?, hi: num(hi)? }),
        None => Ok(Range::fixed(num(s)?)),
    }
}

fn parse_ranges(v: &Option<Vec<String>>, len: usize, default: f64) -> Result<Vec<Range>, Error> {
    match v {
        None => Ok(vec![Range::fixed(default); len]),
        Some(v) => v.iter().map(|s| parse_range(s)).collect(),
    }
}

fn parse_phis(s: &str) -> Result<Vec<Vec<f64>>, Error> {
    s.split(';')
        .map(|level| {
            level
                .split(',')
                .map(|v| {
                    v.trim()
                        .parse::<f64>()
                        .map_err(|_| Error::Validation(format!("range {v:?} is not a number")))
                })
                .collect()
        })
        .collect()
}

fn gen_synth(a: GenSynthArgs) -> anyhow::Result<ExitCode> {
    let s = a.runs.len();
    let mut n = a.runs.clone();
    if let Some(top) = n.last_mut() {
        *top += a.test_points;
    }
    let cfg = SynthConfig {
        d: a.dim,
        n_outputs: a.outputs,
        n,
        phis: parse_phis(&a.phi)?,
        nu: Smoothness::from_value(a.nu)?,
        beta: parse_ranges(&a.beta, s, 0.0)?,
        gamma: parse_ranges(&a.gamma, s.saturating_sub(1), 1.0)?,
        sigma2: parse_ranges(&a.sigma2, s, 1.0)?,
        nested_fraction: a.nested_fraction,
        seed: a.seed,
    };
    let (mut levels, truth) = synth::gen_from_model(&cfg)?;
    create_dir(&a.out)?;
    if a.test_points > 0 {
        // fresh top-level runs come last; hold out the final rows
        let top = levels.pop().expect("at least one level");
        let keep = top.n() - a.test_points;
        let (x, y) = (top.x(), top.y());
        io::write_matrix(&a.out.join("test_x.csv"), 'x', &x.rows(keep, a.test_points).into_owned())?;
        io::write_matrix(&a.out.join("test_y.csv"), 'y', &y.rows(keep, a.test_points).into_owned())?;
        levels.push(FidelityData::new(s, x.rows(0, keep).into_owned(), y.rows(0, keep).into_owned())?);
    }
    save_levels(&a.out, &levels)?;
    io::write_truth(&a.out.join("truth.json"), &truth)?;
    log::info!("{s}-level synthetic data written to {}", a.out.display());
    Ok(ExitCode::SUCCESS)
}

fn level_files(a: &TrainArgs) -> anyhow::Result<Vec<(PathBuf, PathBuf)>> {
    if let Some(dir) = &a.data {
        let mut files = Vec::new();
        loop {
            let (x, y) = io::level_paths(dir, files.len() + 1);
            if !x.exists() {
                break;
            }
            files.push((x, y));
        }
        if files.is_empty() {
            bail!(Error::Validation(format!("{} contains no level1_x.csv", dir.display())));
        }
        return Ok(files);
    }
    if a.level.is_empty() {
        bail!(Error::Validation("give --data or at least one --level X,Y".into()));
    }
    a.level
        .iter()
        .map(|spec| match spec.split_once(',') {
            Some((x, y)) => Ok((PathBuf::from(x), PathBuf::from(y))),
            None => bail!(Error::Validation(format!("--level {spec:?} must be X.csv,Y.csv"))),
        })
        .collect()
}

fn train(a: TrainArgs) -> anyhow::Result<ExitCode> {
    let levels = level_files(&a)?
        .iter()
        .enumerate()
        .map(|(t, (x, y))| io::load_level(t + 1, x, y))
        .collect::<Result<Vec<_>, _>>()?;
    let mut cfg = McemConfig::with_seed(a.seed);
    cfg.nu = Smoothness::from_value(a.nu)?;
    cfg.basis = a.trend.into();
    cfg.m_initial = a.m_initial;
    cfg.m_increment = a.m_increment;
    cfg.m_max = a.m_max;
    cfg.max_iterations = a.max_iter;
    cfg.tolerance = a.tol;
    cfg.patience = a.patience;
    if let Some(r) = &a.restarts {
        if r.is_empty() || r.iter().any(|f| f.is_nan() || *f <= 0.0 || f.is_infinite()) {
            bail!(Error::Validation("--restarts must be positive multipliers".into()));
        }
        cfg.optimizer.restart_factors = r.clone();
    }

    let start = Instant::now();
    let model = run_mcem(&levels, &cfg)?;
    log::info!(
        "trained {} levels in {} iterations ({:.2} s)",
        model.s(),
        model.iterations,
        start.elapsed().as_secs_f64()
    );
    for row in &model.trace {
        log::debug!("iteration {} finished at {:.3} s", row.iteration, row.wall_time);
    }

    create_dir(&a.out)?;
    io::save_model(&a.out.join("model.json"), &model)?;
    io::write_trace(&a.out.join("trace.csv"), &model.trace, a.trace_wall_time)?;
    if !model.converged {
        log::warn!("MCEM did not converge within {} iterations; model written anyway", cfg.max_iterations);
        return Ok(ExitCode::from(EXIT_NOT_CONVERGED));
    }
    Ok(ExitCode::SUCCESS)
}

fn load_query(model: &FittedEmulator<f64>, path: &Path) -> anyhow::Result<DMatrix<f64>> {
    let x = io::read_matrix(path, 'x')?;
    if x.ncols() != model.d() {
        bail!(Error::Validation(format!(
            "{} has {} inputs but the model was trained on {}",
            path.display(),
            x.ncols(),
            model.d()
        )));
    }
    Ok(x)
}

fn predict(a: PredictArgs) -> anyhow::Result<ExitCode> {
    let model = io::load_model(&a.model)?;
    let x = load_query(&model, &a.query)?;
    let predictor = Predictor::new(&model, a.m_pred)?;
    let draws = predictor.draws_batch(&x, a.seed)?;
    let summaries = draws.iter().map(summarize).collect::<Result<Vec<_>, _>>()?;
    io::write_summaries(&a.out, &summaries)?;
    if let Some(path) = &a.draws_out {
        io::write_draws(path, &draws)?;
    }
    log::info!("predicted {} inputs with {} draws each", x.nrows(), a.m_pred);
    Ok(ExitCode::SUCCESS)
}

fn validate(a: ValidateArgs) -> anyhow::Result<ExitCode> {
    let model = io::load_model(&a.model)?;
    let x = load_query(&model, &a.query)?;
    let truth = io::read_matrix(&a.truth, 'y')?;
    if truth.nrows() != x.nrows() || truth.ncols() != model.n_outputs() {
        bail!(Error::Validation(format!(
            "{} is {}×{}, expected {}×{}",
            a.truth.display(),
            truth.nrows(),
            truth.ncols(),
            x.nrows(),
            model.n_outputs()
        )));
    }
    let predictor = Predictor::new(&model, a.m_pred)?;
    let draws = predictor.draws_batch(&x, a.seed)?;
    let summaries = draws.iter().map(summarize).collect::<Result<Vec<_>, _>>()?;
    let set = ValidationSet::new(&summaries, truth)?.with_draws(draws)?;

    let observed = model.train.observed(model.s());
    let means: Vec<f64> = observed.column_iter().map(|c| c.mean()).collect();
    let denom = match a.nsme {
        Nsme::Printed => NsmeDenominator::Printed,
        Nsme::Conventional => NsmeDenominator::Conventional,
    };
    let r = report(&set, &means, denom)?;
    io::write_metrics(&a.out, &r)?;
    println!("cells   {}", r.cells);
    println!("RMSPE   {:.6}", r.rmspe);
    println!("CVG95   {:.4}", r.coverage95);
    println!("ALCI95  {:.6}", r.alci95);
    if let Some(c) = r.crps {
        println!("CRPS    {c:.6}");
    }
    println!("NSME    {:.6} ({:?} denominator)", r.nsme, denom);
    Ok(ExitCode::SUCCESS)
}
