//! Monte Carlo EM training of the per-level range parameters.

mod data;
pub mod optimize;
mod qhat;
mod sample;

use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use data::{ImputedOutputs, MissingDraws, TrainingSet};
pub use optimize::{m_step, nelder_mead, Maximum, OptimizerConfig};
pub use qhat::{q_hat, LevelObjective};
pub use sample::sample_missing;

use crate::conditional::ConditioningSet;
use crate::design::{AugmentedDesign, FidelityData};
use crate::error::{Error, Result};
use crate::gls::DEFAULT_JITTER;
use crate::kernels::{CorrelationParams, Smoothness};
use crate::priors::{JrPriorConfig, TrendBasis};
use crate::scalar::{lit, Real};

/// Training settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McemConfig {
    pub nu: Smoothness,
    pub basis: TrendBasis,
    /// Draws at the first iteration.
    pub m_initial: usize,
    /// Extra draws per iteration.
    pub m_increment: usize,
    pub m_max: usize,
    pub max_iterations: usize,
    /// Convergence threshold on the largest change in any log-range.
    pub tolerance: f64,
    /// Consecutive iterations below `tolerance` required to stop.
    pub patience: usize,
    /// Initial range in normalized units, every level and dimension.
    pub initial_phi: f64,
    pub jitter: f64,
    pub optimizer: OptimizerConfig,
    /// Shape `a` of the jointly robust prior; the remaining constants follow
    /// from the level size and input dimension.
    pub prior_a: f64,
    pub seed: u64,
}

impl McemConfig {
    pub fn with_seed(seed: u64) -> Self {
        Self {
            nu: Smoothness::FiveHalves,
            basis: TrendBasis::Constant,
            m_initial: 30,
            m_increment: 10,
            m_max: 100,
            max_iterations: 200,
            tolerance: 1e-3,
            patience: 3,
            initial_phi: 0.5,
            jitter: DEFAULT_JITTER,
            optimizer: OptimizerConfig::default(),
            prior_a: 0.2,
            seed,
        }
    }

    /// `M_ℓ` for iteration `ℓ ≥ 1`.
    pub fn draws_at(&self, iteration: usize) -> usize {
        (self.m_initial + self.m_increment * iteration.saturating_sub(1)).min(self.m_max)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Validation(m.to_string()));
        if self.m_initial == 0 || self.m_max == 0 {
            return bad("the number of Monte Carlo draws must be positive");
        }
        if self.max_iterations == 0 || self.patience == 0 {
            return bad("iteration limits must be positive");
        }
        if !(self.tolerance > 0.0) || !(self.initial_phi > 0.0) || !self.initial_phi.is_finite() {
            return bad("tolerance and initial range must be positive");
        }
        if !(self.prior_a > 0.0) {
            return bad("prior shape must be positive");
        }
        if !(self.jitter >= 0.0) {
            return bad("jitter must be nonnegative");
        }
        Ok(())
    }

    pub(crate) fn prior<T: Real>(&self, n_aug: usize, d: usize) -> Result<JrPriorConfig<T>> {
        let base = JrPriorConfig::<T>::default_for(n_aug, d);
        let c0 = base.c[0];
        let a: T = lit(self.prior_a);
        JrPriorConfig::new(a, c0 * (a + lit(d as f64)), base.c)
    }
}

/// One MCEM iteration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub iteration: usize,
    pub draws: usize,
    /// Ranges after the M-step, per level.
    pub phis: Vec<Vec<f64>>,
    /// `Q̂_t` at the previous ranges, per level.
    pub q_before: Vec<f64>,
    /// `Q̂_t` at the new ranges, same draws.
    pub q_after: Vec<f64>,
    pub max_change: f64,
    /// Seconds since training started; not part of any archive.
    #[serde(skip)]
    pub wall_time: f64,
}

/// GLS point estimates at one level, with missing outputs set to the mean of
/// the retained draws.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LevelEstimates<T: Real> {
    /// `q_t×N`: trend coefficients, then the scale discrepancy above level 1.
    pub b: DMatrix<T>,
    /// `S²/(ñ_t − q_t)` per coordinate.
    pub sigma2: DVector<T>,
}

/// A trained emulator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FittedEmulator<T: Real> {
    pub config: McemConfig,
    pub train: TrainingSet<T>,
    pub phis: Vec<CorrelationParams<T>>,
    pub estimates: Vec<LevelEstimates<T>>,
    /// Imputations retained for prediction.
    pub draws: MissingDraws<T>,
    pub converged: bool,
    pub iterations: usize,
    /// Largest jitter needed by any final correlation factor.
    pub jitter_used: f64,
    #[serde(skip)]
    pub trace: Vec<TraceRow>,
}

impl<T: Real> FittedEmulator<T> {
    pub fn design(&self) -> &AugmentedDesign<T> {
        self.train.design()
    }
    pub fn s(&self) -> usize {
        self.train.s()
    }
    pub fn d(&self) -> usize {
        self.design().d()
    }
    pub fn n_outputs(&self) -> usize {
        self.train.n_outputs()
    }
}

fn max_log_change<T: Real>(a: &[CorrelationParams<T>], b: &[CorrelationParams<T>]) -> f64 {
    a.iter()
        .zip(b)
        .flat_map(|(x, y)| {
            x.log_phis()
                .into_iter()
                .zip(y.log_phis())
                .map(|(u, v)| (u - v).to_f64_lossy().abs())
                .collect::<Vec<_>>()
        })
        .fold(0.0, f64::max)
}

/// One M-step on level `t`: maximize `Q̂_t` from `phi`.
pub(crate) fn level_m_step<T: Real>(
    objective: &LevelObjective<T>,
    phi: &CorrelationParams<T>,
    cfg: &OptimizerConfig,
    t: usize,
) -> Result<(CorrelationParams<T>, f64, f64)> {
    let init: Vec<f64> = phi.log_phis().iter().map(|v| v.to_f64_lossy()).collect();
    let f = |x: &[f64]| objective.eval_log(x);
    let before = objective.eval(phi).map_err(|e| e.with_level(t))?.to_f64_lossy();
    let best = m_step(&f, &init, cfg).map_err(|e| match e {
        Error::Optimization(m) => Error::Optimization(format!("level {t}: {m}")),
        other => other,
    })?;
    let lp: Vec<T> = best.x.iter().map(|v| lit(*v)).collect();
    Ok((CorrelationParams::from_log(&lp, phi.nu())?, before, best.value))
}

/// Run Monte Carlo EM from the configured starting ranges.
pub fn run_mcem<T: Real>(levels: &[FidelityData<T>], config: &McemConfig) -> Result<FittedEmulator<T>> {
    let train = TrainingSet::new(levels, config.basis)?;
    run_mcem_on(train, config)
}

pub fn run_mcem_on<T: Real>(train: TrainingSet<T>, config: &McemConfig) -> Result<FittedEmulator<T>> {
    config.validate()?;
    let s = train.s();
    let d = train.design().d();
    for t in 1..=s {
        let (n, q) = (train.design().n_obs(t), train.q(t));
        if n <= q {
            return Err(Error::DegreesOfFreedom(format!(
                "level {t}: {n} runs cannot support {q} regression coefficients"
            )));
        }
    }
    let priors: Vec<JrPriorConfig<T>> = (1..=s)
        .map(|t| config.prior(train.design().n_aug(t), d))
        .collect::<Result<_>>()?;
    let mut phis: Vec<CorrelationParams<T>> = (0..s)
        .map(|_| CorrelationParams::new(vec![lit(config.initial_phi); d], config.nu))
        .collect::<Result<_>>()?;
    let nested = train.is_nested();
    let start = Instant::now();
    let mut trace = Vec::new();
    let mut calm = 0;
    let mut converged = false;
    let mut iteration = 0;
    while iteration < config.max_iterations {
        iteration += 1;
        let m = if nested { 1 } else { config.draws_at(iteration) };
        let draws = sample_missing(&train, &phis, m, config.seed, config.jitter)?;
        let steps = (1..=s)
            .into_par_iter()
            .map(|t| {
                let obj = LevelObjective::new(&train, t, &draws, priors[t - 1].clone(), config.nu, config.jitter)?;
                level_m_step(&obj, &phis[t - 1], &config.optimizer, t)
            })
            .collect::<Result<Vec<_>>>()?;
        let new_phis: Vec<CorrelationParams<T>> = steps.iter().map(|s| s.0.clone()).collect();
        let change = max_log_change(&phis, &new_phis);
        trace.push(TraceRow {
            iteration,
            draws: m,
            phis: new_phis
                .iter()
                .map(|p| p.phis().iter().map(|v| v.to_f64_lossy()).collect())
                .collect(),
            q_before: steps.iter().map(|s| s.1).collect(),
            q_after: steps.iter().map(|s| s.2).collect(),
            max_change: change,
            wall_time: start.elapsed().as_secs_f64(),
        });
        log::info!("iteration {iteration}: M = {m}, max |Δ log φ| = {change:.3e}");
        phis = new_phis;
        // with nothing to impute the objective is fixed, so one M-step is final
        if nested {
            converged = true;
            break;
        }
        calm = if change < config.tolerance { calm + 1 } else { 0 };
        if calm >= config.patience {
            converged = true;
            break;
        }
    }
    if !converged {
        log::warn!("MCEM stopped at the iteration cap ({}) without converging", config.max_iterations);
    }
    let m_final = if nested { 1 } else { config.draws_at(iteration) };
    let draws = sample_missing(&train, &phis, m_final, config.seed, config.jitter)?;
    let (estimates, jitter_used) = point_estimates(&train, &phis, &draws, config.jitter)?;
    Ok(FittedEmulator {
        config: config.clone(),
        train,
        phis,
        estimates,
        draws,
        converged,
        iterations: iteration,
        jitter_used,
        trace,
    })
}

/// GLS coefficients and variances with imputed outputs at their draw mean.
pub fn point_estimates<T: Real>(
    train: &TrainingSet<T>,
    phis: &[CorrelationParams<T>],
    draws: &MissingDraws<T>,
    jitter: f64,
) -> Result<(Vec<LevelEstimates<T>>, f64)> {
    let mean = draws.mean();
    let mut out = Vec::with_capacity(train.s());
    let mut jitter_used = 0.0f64;
    for t in 1..=train.s() {
        let x = train.design().augmented_inputs(t);
        let h = train.basis().eval(&x);
        let set = ConditioningSet::new(&x, &h, &phis[t - 1], jitter).map_err(|e| e.with_level(t))?;
        jitter_used = jitter_used.max(set.fac.jitter_used());
        let a = set.fac.solve_lower(&train.augmented_outputs(t, &mean));
        let gw = if t > 1 {
            Some(set.fac.solve_lower(&train.regressor(t, &mean)?))
        } else {
            None
        };
        let q = train.q(t);
        let dof: T = lit((x.nrows() - q) as f64);
        let n_out = train.n_outputs();
        let mut b = DMatrix::zeros(q, n_out);
        let mut sigma2 = DVector::zeros(n_out);
        for j in 0..n_out {
            let fit = set
                .fit(a.column(j).into_owned(), gw.as_ref().map(|g| g.column(j).into_owned()))
                .map_err(|e| match e {
                    Error::Domain(m) => Error::Numerical(format!("level {t}, coordinate {j}: {m}")),
                    other => other,
                })?;
            b.set_column(j, &fit.b);
            sigma2[j] = fit.s2 / dof;
        }
        out.push(LevelEstimates { b, sigma2 });
    }
    Ok((out, jitter_used))
}
