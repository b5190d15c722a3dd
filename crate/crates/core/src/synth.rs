//! Synthetic data: the two-fidelity toy functions and draws from the
//! autoregressive model itself.

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::design::{same_input, FidelityData};
use crate::error::{Error, Result};
use crate::gls::{chol_factor, DEFAULT_JITTER};
use crate::kernels::{corr_matrix_sym, CorrelationParams, Smoothness};
use crate::rng::{standard_normals, stream_rng, Domain};

/// Low-fidelity toy code.
pub fn toy_low(x: f64) -> f64 {
    0.5 * (6.0 * x - 2.0).powi(2) * (12.0 * x - 4.0).sin() + 10.0 * (x - 0.5) - 5.0
}

/// High-fidelity toy code.
pub fn toy_high(x: f64) -> f64 {
    2.0 * toy_low(x) - 20.0 * x + 20.0 + (10.0 * (5.0 * x).cos()).sin()
}

/// Low-fidelity toy inputs: the 0.1 grid on `[−1, 1]` without `−0.2`.
pub fn toy_low_inputs() -> Vec<f64> {
    (-10i32..=10).filter(|i| *i != -2).map(|i| i as f64 / 10.0).collect()
}

/// High-fidelity toy inputs; `−0.55` and `−0.2` are not run at low fidelity.
pub fn toy_high_inputs() -> Vec<f64> {
    vec![-1.0, -0.8, -0.55, -0.4, -0.2, 0.0, 0.2, 0.4, 0.6, 1.0]
}

/// `n` equally spaced points on `[−1, 1]`.
pub fn toy_test_inputs(n: usize) -> Vec<f64> {
    match n {
        0 => Vec::new(),
        1 => vec![0.0],
        _ => (0..n).map(|i| -1.0 + 2.0 * i as f64 / (n - 1) as f64).collect(),
    }
}

fn column(xs: &[f64]) -> DMatrix<f64> {
    DMatrix::from_column_slice(xs.len(), 1, xs)
}

/// Both toy levels as training data.
pub fn toy_levels() -> Result<Vec<FidelityData<f64>>> {
    let lo = toy_low_inputs();
    let hi = toy_high_inputs();
    let ylo: Vec<f64> = lo.iter().map(|x| toy_low(*x)).collect();
    let yhi: Vec<f64> = hi.iter().map(|x| toy_high(*x)).collect();
    Ok(vec![
        FidelityData::new(1, column(&lo), column(&ylo))?,
        FidelityData::new(2, column(&hi), column(&yhi))?,
    ])
}

/// Inclusive range a per-coordinate parameter is drawn from uniformly.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Range {
    pub lo: f64,
    pub hi: f64,
}

impl Range {
    pub fn fixed(v: f64) -> Self {
        Self { lo: v, hi: v }
    }

    fn sample(&self, rng: &mut impl Rng) -> f64 {
        if self.lo == self.hi {
            self.lo
        } else {
            rng.random_range(self.lo..=self.hi)
        }
    }
}

/// Settings of the model-based generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub d: usize,
    pub n_outputs: usize,
    /// Runs per level, lowest fidelity first.
    pub n: Vec<usize>,
    /// True ranges per level on the unit cube.
    pub phis: Vec<Vec<f64>>,
    pub nu: Smoothness,
    /// Constant trend per level.
    pub beta: Vec<Range>,
    /// Scale discrepancy between consecutive levels (`s − 1` entries).
    pub gamma: Vec<Range>,
    pub sigma2: Vec<Range>,
    /// Share of each level's runs reused from the level below; the rest are
    /// new inputs.
    pub nested_fraction: f64,
    pub seed: u64,
}

impl SynthConfig {
    pub fn s(&self) -> usize {
        self.n.len()
    }

    pub fn validate(&self) -> Result<()> {
        let s = self.s();
        let bad = |m: String| Err(Error::Validation(m));
        if s == 0 || self.d == 0 || self.n_outputs == 0 {
            return bad("need at least one level, input and output".into());
        }
        if self.phis.len() != s || self.beta.len() != s || self.sigma2.len() != s || self.gamma.len() + 1 != s {
            return bad(format!("parameter lists must describe {s} levels"));
        }
        if self.phis.iter().any(|p| p.len() != self.d || p.iter().any(|v| !(*v > 0.0) || !v.is_finite())) {
            return bad(format!("each level needs {} positive ranges", self.d));
        }
        if self.sigma2.iter().any(|r| r.lo < 0.0 || r.hi < r.lo) {
            return bad("variances must be nonnegative".into());
        }
        if self.beta.iter().chain(&self.gamma).chain(&self.sigma2).any(|r| !(r.lo.is_finite() && r.hi.is_finite()) || r.hi < r.lo) {
            return bad("parameter ranges must be finite with lo ≤ hi".into());
        }
        if !(0.0..=1.0).contains(&self.nested_fraction) {
            return bad("nested fraction must lie in [0, 1]".into());
        }
        if self.n.contains(&0) {
            return bad("every level needs at least one run".into());
        }
        if self.n.windows(2).any(|w| w[1] > w[0]) {
            log::warn!("run counts increase with fidelity");
        }
        Ok(())
    }
}

/// Parameters actually used by the generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthTruth {
    pub phis: Vec<Vec<f64>>,
    pub nu: Smoothness,
    /// `[level][coordinate]`
    pub beta: Vec<Vec<f64>>,
    pub gamma: Vec<Vec<f64>>,
    pub sigma2: Vec<Vec<f64>>,
    /// Jitter needed to factor each level's correlation matrix.
    pub jitter: Vec<f64>,
    pub seed: u64,
}

/// Random Latin hypercube on `[0, 1]^d`: one point per stratum in every
/// dimension, strata permuted independently.
pub fn latin_hypercube(n: usize, d: usize, rng: &mut impl Rng) -> DMatrix<f64> {
    let mut x = DMatrix::zeros(n, d);
    for k in 0..d {
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(rng);
        for (i, p) in perm.into_iter().enumerate() {
            x[(i, k)] = (p as f64 + rng.random::<f64>()) / n as f64;
        }
    }
    x
}

/// Simulate every level from the autoregressive model.
pub fn gen_from_model(cfg: &SynthConfig) -> Result<(Vec<FidelityData<f64>>, SynthTruth)> {
    cfg.validate()?;
    let s = cfg.s();
    let d = cfg.d;
    let mut design_rng = stream_rng(cfg.seed, Domain::Synthetic, 0, 0);
    let mut inputs: Vec<DMatrix<f64>> = Vec::with_capacity(s);
    inputs.push(latin_hypercube(cfg.n[0], d, &mut design_rng));
    for t in 1..s {
        let below = &inputs[t - 1];
        let reuse = ((cfg.nested_fraction * cfg.n[t] as f64).round() as usize).min(below.nrows());
        let mut idx: Vec<usize> = (0..below.nrows()).collect();
        idx.shuffle(&mut design_rng);
        idx.truncate(reuse);
        idx.sort_unstable();
        let fresh = latin_hypercube(cfg.n[t] - reuse, d, &mut design_rng);
        let x = DMatrix::from_fn(cfg.n[t], d, |i, k| if i < reuse { below[(idx[i], k)] } else { fresh[(i - reuse, k)] });
        inputs.push(x);
    }

    // union of all inputs; every level's field is simulated on it
    let mut union: Vec<Vec<f64>> = Vec::new();
    let mut index: Vec<Vec<usize>> = Vec::with_capacity(s);
    for x in &inputs {
        let mut pos = Vec::with_capacity(x.nrows());
        for row in x.row_iter() {
            let v: Vec<f64> = row.iter().copied().collect();
            let p = match union.iter().position(|u| same_input(u.iter().copied(), v.iter().copied())) {
                Some(p) => p,
                None => {
                    union.push(v);
                    union.len() - 1
                }
            };
            pos.push(p);
        }
        index.push(pos);
    }
    let u = DMatrix::from_fn(union.len(), d, |i, k| union[i][k]);

    let mut param_rng = stream_rng(cfg.seed, Domain::Synthetic, 1, 0);
    let draw = |ranges: &[Range], rng: &mut rand_chacha::ChaCha8Rng| -> Vec<Vec<f64>> {
        ranges
            .iter()
            .map(|r| (0..cfg.n_outputs).map(|_| r.sample(rng)).collect())
            .collect()
    };
    let beta = draw(&cfg.beta, &mut param_rng);
    let gamma = draw(&cfg.gamma, &mut param_rng);
    let sigma2 = draw(&cfg.sigma2, &mut param_rng);

    let mut roots = Vec::with_capacity(s);
    let mut jitter = Vec::with_capacity(s);
    for t in 0..s {
        let phi = CorrelationParams::new(cfg.phis[t].clone(), cfg.nu)?;
        let fac = chol_factor(&corr_matrix_sym(&u, &phi)?, DEFAULT_JITTER).map_err(|e| e.with_level(t + 1))?;
        if fac.jitter_used() > DEFAULT_JITTER {
            log::warn!("level {}: simulation needed jitter {:e}", t + 1, fac.jitter_used());
        }
        jitter.push(fac.jitter_used());
        roots.push(fac.l().clone());
    }

    let nu_rows = u.nrows();
    let mut fields: Vec<DMatrix<f64>> = vec![DMatrix::zeros(nu_rows, cfg.n_outputs); s];
    for j in 0..cfg.n_outputs {
        let mut rng = stream_rng(cfg.seed, Domain::Synthetic, 2, j as u64);
        let mut prev: Option<DVector<f64>> = None;
        for t in 0..s {
            let z: DVector<f64> = standard_normals(&mut rng, nu_rows);
            let delta = &roots[t] * z * sigma2[t][j].sqrt();
            let mut y = delta.add_scalar(beta[t][j]);
            if let Some(p) = &prev {
                y += p * gamma[t - 1][j];
            }
            fields[t].set_column(j, &y);
            prev = Some(y);
        }
    }

    let levels = (0..s)
        .map(|t| {
            let y = DMatrix::from_fn(cfg.n[t], cfg.n_outputs, |i, j| fields[t][(index[t][i], j)]);
            FidelityData::new(t + 1, inputs[t].clone(), y)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((
        levels,
        SynthTruth {
            phis: cfg.phis.clone(),
            nu: cfg.nu,
            beta,
            gamma,
            sigma2,
            jitter,
            seed: cfg.seed,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toy_values() {
        assert!((toy_low(0.5) - -4.5453512865871595).abs() < 1e-13);
        assert!((toy_low(0.0) - -8.486395009384143).abs() < 1e-13);
        assert!((toy_high(0.0) - 2.483188870342344).abs() < 1e-13);
        assert!((toy_high(0.5) - -0.07833219883388853).abs() < 1e-13);
    }

    #[test]
    fn toy_layout() {
        let lo = toy_low_inputs();
        assert_eq!(lo.len(), 20);
        let hi = toy_high_inputs();
        let missing: Vec<f64> = hi.iter().copied().filter(|h| !lo.iter().any(|l| (l - h).abs() < 1e-12)).collect();
        assert_eq!(missing, vec![-0.55, -0.2]);
        let test = toy_test_inputs(200);
        assert_eq!(test.len(), 200);
        assert_eq!((test[0], test[199]), (-1.0, 1.0));
    }

    fn cfg(seed: u64) -> SynthConfig {
        SynthConfig {
            d: 2,
            n_outputs: 3,
            n: vec![12, 6],
            phis: vec![vec![0.3, 0.5], vec![0.4, 0.4]],
            nu: Smoothness::FiveHalves,
            beta: vec![Range::fixed(1.0), Range { lo: -1.0, hi: 1.0 }],
            gamma: vec![Range { lo: 0.5, hi: 1.5 }],
            sigma2: vec![Range::fixed(1.0), Range::fixed(0.1)],
            nested_fraction: 0.5,
            seed,
        }
    }

    #[test]
    fn deterministic_and_shaped() {
        let (a, ta) = gen_from_model(&cfg(4)).unwrap();
        let (b, tb) = gen_from_model(&cfg(4)).unwrap();
        assert_eq!(ta, tb);
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.x(), y.x());
            assert_eq!(x.y(), y.y());
        }
        assert_eq!(a[1].n(), 6);
        assert_eq!(a[0].n_outputs(), 3);
        let shared = (0..6)
            .filter(|&i| (0..12).any(|k| a[0].x().row(k) == a[1].x().row(i)))
            .count();
        assert_eq!(shared, 3);
    }

    #[test]
    fn zero_variance_gives_trend() {
        let mut c = cfg(1);
        c.sigma2 = vec![Range::fixed(0.0), Range::fixed(0.0)];
        c.gamma = vec![Range::fixed(2.0)];
        c.beta = vec![Range::fixed(1.5), Range::fixed(-0.5)];
        let (levels, _) = gen_from_model(&c).unwrap();
        assert!(levels[0].y().iter().all(|v| *v == 1.5));
        assert!(levels[1].y().iter().all(|v| *v == 2.5));
    }

    #[test]
    fn identity_coupling() {
        let mut c = cfg(2);
        c.sigma2[1] = Range::fixed(0.0);
        c.gamma = vec![Range::fixed(1.0)];
        c.beta[1] = Range::fixed(0.0);
        let (levels, _) = gen_from_model(&c).unwrap();
        for i in 0..levels[1].n() {
            if let Some(k) = (0..levels[0].n()).find(|&k| levels[0].x().row(k) == levels[1].x().row(i)) {
                assert_eq!(levels[0].y().row(k), levels[1].y().row(i));
            }
        }
    }

    #[test]
    fn latin_hypercube_strata() {
        let mut rng = stream_rng(1, Domain::Synthetic, 9, 9);
        let x = latin_hypercube(10, 3, &mut rng);
        for k in 0..3 {
            let mut strata: Vec<usize> = x.column(k).iter().map(|v| (v * 10.0) as usize).collect();
            strata.sort_unstable();
            assert_eq!(strata, (0..10).collect::<Vec<_>>());
        }
    }
}
