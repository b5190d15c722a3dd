//! E-step sampler for the missing outputs.
//!
//! Draws proceed bottom-up within each Monte Carlo index: the level-t
//! imputation conditions on the observed level-t outputs, with the lower-level
//! regressor read from the level-(t−1) outputs just imputed for the same index.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use super::data::{ImputedOutputs, MissingDraws, TrainingSet};
use crate::conditional::{ColumnFit, ConditioningSet, Target};
use crate::error::{Error, Result};
use crate::kernels::CorrelationParams;
use crate::rng::{standard_normals, stream_rng, t_mixing, Domain};
use crate::scalar::{lit, Real};

/// A square root `B` with `BBᵀ ≈ S` for a symmetric positive
/// semidefinite `S`; tiny negative eigenvalues from rounding are clamped.
pub(crate) fn psd_sqrt<T: Real>(s: &DMatrix<T>) -> DMatrix<T> {
    if let Some(ch) = s.clone().cholesky() {
        return ch.unpack();
    }
    let eig = s.clone().symmetric_eigen();
    let mut v = eig.eigenvectors;
    for (k, lambda) in eig.eigenvalues.iter().enumerate() {
        let root = if *lambda > T::zero() { lambda.sqrt() } else { T::zero() };
        let mut col = v.column_mut(k);
        col *= root;
    }
    v
}

struct LevelSampler<T: Real> {
    t: usize,
    cond: ConditioningSet<T>,
    target: Target<T>,
    df: f64,
    /// Parent rows of the observed and missing rows (levels above the first).
    parents: Option<(Vec<usize>, Vec<usize>)>,
    /// At level 1 the conditional does not depend on the Monte Carlo index.
    shared: Option<Vec<(DVector<T>, DMatrix<T>)>>,
}

impl<T: Real> LevelSampler<T> {
    fn new(train: &TrainingSet<T>, t: usize, phi: &CorrelationParams<T>, jitter: f64) -> Result<Self> {
        let design = train.design();
        let basis = train.basis();
        let obs = design.observed_inputs(t);
        let miss = design.missing_inputs(t);
        let n = design.n_obs(t);
        let q = train.q(t);
        if n <= q {
            return Err(Error::DegreesOfFreedom(format!(
                "level {t}: {n} observed runs leave no degrees of freedom for {q} coefficients"
            )));
        }
        let df = (n - q) as f64;
        if df <= 2.0 {
            log::warn!("level {t}: missing-data conditional has {df} degrees of freedom (infinite variance)");
        }
        let cond = ConditioningSet::new(&obs, &basis.eval(&obs), phi, jitter).map_err(|e| e.with_level(t))?;
        let target = cond.target(&obs, &miss, basis.eval(&miss), phi)?;
        let mut sampler = Self {
            t,
            cond,
            target,
            df,
            parents: None,
            shared: None,
        };
        if t == 1 {
            let a = sampler.cond.fac.solve_lower(train.observed(1));
            let shared = (0..a.ncols())
                .into_par_iter()
                .map(|j| {
                    let fit = sampler.cond.fit(a.column(j).into_owned(), None)?;
                    Ok(sampler.location_and_root(&fit, None))
                })
                .collect::<Result<Vec<_>>>()
                .map_err(|e| coordinate_context(e, t))?;
            sampler.shared = Some(shared);
        } else {
            let all = design.parents(t)?;
            let (o, m) = all.split_at(n);
            sampler.parents = Some((o.to_vec(), m.to_vec()));
        }
        Ok(sampler)
    }

    /// Location and square root of the scale matrix.
    fn location_and_root(&self, fit: &ColumnFit<T>, w_target: Option<&DVector<T>>) -> (DVector<T>, DMatrix<T>) {
        let (loc, spread) = fit.conditional(&self.cond, &self.target, w_target);
        let scale = spread * (fit.s2 / lit::<T>(self.df));
        (loc, psd_sqrt(&scale))
    }

    fn draw(&self, train: &TrainingSet<T>, imp: &ImputedOutputs<T>, seed: u64, k: usize) -> Result<DMatrix<T>> {
        let n_out = train.n_outputs();
        let m = self.target.h.nrows();
        let mut rng = stream_rng(seed, Domain::MissingData, k as u64, self.t as u64);
        let pieces: Vec<(DVector<T>, DMatrix<T>)> = match (&self.shared, &self.parents) {
            (Some(shared), _) => shared.clone(),
            (None, Some((po, pm))) => {
                let below = train.augmented_outputs(self.t - 1, imp);
                let w_obs = DMatrix::from_fn(po.len(), n_out, |i, j| below[(po[i], j)]);
                let w_miss = DMatrix::from_fn(pm.len(), n_out, |i, j| below[(pm[i], j)]);
                let a = self.cond.fac.solve_lower(train.observed(self.t));
                let gw = self.cond.fac.solve_lower(&w_obs);
                (0..n_out)
                    .map(|j| {
                        let fit = self
                            .cond
                            .fit(a.column(j).into_owned(), Some(gw.column(j).into_owned()))?;
                        Ok(self.location_and_root(&fit, Some(&w_miss.column(j).into_owned())))
                    })
                    .collect::<Result<Vec<_>>>()
                    .map_err(|e| coordinate_context(e, self.t))?
            }
            (None, None) => unreachable!("level sampler without parents"),
        };
        let mut out = DMatrix::zeros(m, n_out);
        for (j, (loc, root)) in pieces.iter().enumerate() {
            let z: DVector<T> = standard_normals(&mut rng, m);
            let mix: T = t_mixing(&mut rng, self.df)?;
            let y = loc + root * z * mix;
            if y.iter().any(|v| !crate::scalar::is_finite(*v)) {
                return Err(Error::Numerical(format!(
                    "non-finite missing-data draw at level {}, coordinate {j}",
                    self.t
                )));
            }
            out.set_column(j, &y);
        }
        Ok(out)
    }
}

fn coordinate_context(e: Error, t: usize) -> Error {
    match e {
        Error::Domain(msg) => Error::Numerical(format!("level {t}: {msg}")),
        other => other.with_level(t),
    }
}

/// Draw `m` realizations of all missing outputs under range parameters
/// `phis`. Realization `k` at level `t` uses its own random stream keyed by
/// `(seed, k, t)`.
pub fn sample_missing<T: Real>(
    train: &TrainingSet<T>,
    phis: &[CorrelationParams<T>],
    m: usize,
    seed: u64,
    jitter: f64,
) -> Result<MissingDraws<T>> {
    let s = train.s();
    if phis.len() != s {
        return Err(Error::Domain(format!("{} range vectors for {s} levels", phis.len())));
    }
    let samplers: Vec<LevelSampler<T>> = (1..s)
        .filter(|&t| train.design().n_missing(t) > 0)
        .map(|t| LevelSampler::new(train, t, &phis[t - 1], jitter))
        .collect::<Result<_>>()?;
    let draws = (0..m)
        .into_par_iter()
        .map(|k| {
            let mut imp = ImputedOutputs::empty(train);
            for sampler in &samplers {
                let y = sampler.draw(train, &imp, seed, k)?;
                *imp.level_mut(sampler.t) = y;
            }
            Ok(imp)
        })
        .collect::<Result<Vec<_>>>()?;
    MissingDraws::new(draws)
}
