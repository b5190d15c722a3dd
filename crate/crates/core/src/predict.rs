//! Predictive distributions at new inputs.
//!
//! The sequential sampler walks up the fidelity levels drawing each level's
//! value at `x0` from its Student-t conditional given the augmented data at
//! that level and the value just drawn one level below. Missing outputs are
//! integrated out by composition over the retained imputations.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::conditional::{ColumnFit, ConditioningSet};
use crate::design::{validate_nested, AugmentedDesign};
use crate::error::{Error, Result};
use crate::gls::chol_factor;
use crate::kernels::{corr_matrix, corr_vector, CorrelationParams};
use crate::mcem::{FittedEmulator, LevelEstimates};
use crate::priors::TrendBasis;
use crate::rng::{standard_normals, stream_rng, t_mixing, Domain};
use crate::scalar::{is_finite, lit, Real};

/// Default number of predictive draws.
pub const DEFAULT_M_PRED: usize = 30;

/// Per-coordinate summary of predictive draws.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictiveSummary<T: Real> {
    pub mean: DVector<T>,
    pub sd: DVector<T>,
    /// 2.5% quantile.
    pub lower: DVector<T>,
    /// 97.5% quantile.
    pub upper: DVector<T>,
    pub n_draws: usize,
}

/// One sequential draw at a query input.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictiveDraw<T: Real> {
    /// `s×N`: the sampled value at every level and coordinate.
    pub values: DMatrix<T>,
    /// Index of the imputation used.
    pub imputation: usize,
    /// `(query index, draw index)` keying the random stream.
    pub stream: (u64, u64),
}

/// Type-7 quantile of sorted data.
fn quantile_sorted<T: Real>(sorted: &[T], p: f64) -> T {
    let n = sorted.len();
    let h = (n - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    let frac: T = lit(h - lo as f64);
    sorted[lo] + frac * (sorted[hi] - sorted[lo])
}

/// Mean, standard deviation (denominator `M−1`) and equal-tail 95%
/// quantiles of each column of an `M×N` draw matrix.
pub fn summarize<T: Real>(draws: &DMatrix<T>) -> Result<PredictiveSummary<T>> {
    let m = draws.nrows();
    if m < 2 {
        return Err(Error::Domain(format!("at least two draws are needed, got {m}")));
    }
    let n = draws.ncols();
    let mut out = PredictiveSummary {
        mean: DVector::zeros(n),
        sd: DVector::zeros(n),
        lower: DVector::zeros(n),
        upper: DVector::zeros(n),
        n_draws: m,
    };
    let mf: T = lit(m as f64);
    for j in 0..n {
        let col = draws.column(j);
        let mean = col.iter().fold(T::zero(), |a, v| a + *v) / mf;
        let ss = col.iter().fold(T::zero(), |a, v| a + (*v - mean) * (*v - mean));
        let mut sorted: Vec<T> = col.iter().copied().collect();
        sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite draws"));
        out.mean[j] = mean;
        out.sd[j] = (ss / lit((m - 1) as f64)).sqrt();
        out.lower[j] = quantile_sorted(&sorted, 0.025);
        out.upper[j] = quantile_sorted(&sorted, 0.975);
    }
    Ok(out)
}

struct DrawCache<T: Real> {
    /// Augmented outputs `ñ_t×N` under this imputation.
    y: DMatrix<T>,
    fits: Vec<ColumnFit<T>>,
}

struct LevelCache<T: Real> {
    inputs: DMatrix<T>,
    phi: CorrelationParams<T>,
    set: ConditioningSet<T>,
    df: f64,
    /// One entry per imputation in use.
    draws: Vec<DrawCache<T>>,
}

/// Query-side quantities at one level.
struct QueryLevel<T: Real> {
    located: Option<usize>,
    h0: Vec<T>,
    z: DVector<T>,
    c0: T,
}

/// Cached factorizations and per-imputation fits for repeated prediction.
pub struct Predictor<'a, T: Real> {
    em: &'a FittedEmulator<T>,
    m_pred: usize,
    levels: Vec<LevelCache<T>>,
}

impl<'a, T: Real> Predictor<'a, T> {
    pub fn new(em: &'a FittedEmulator<T>, m_pred: usize) -> Result<Self> {
        if m_pred < 2 {
            return Err(Error::Domain(format!("at least two predictive draws are needed, got {m_pred}")));
        }
        let train = &em.train;
        let design = train.design();
        let basis = train.basis();
        let k_used = em.draws.len().min(m_pred);
        let mut levels = Vec::with_capacity(train.s());
        for t in 1..=train.s() {
            let inputs = design.augmented_inputs(t);
            let h = basis.eval(&inputs);
            let phi = em.phis[t - 1].clone();
            let set = ConditioningSet::new(&inputs, &h, &phi, em.config.jitter).map_err(|e| e.with_level(t))?;
            let q = train.q(t);
            let n = design.n_obs(t);
            if n <= q {
                return Err(Error::DegreesOfFreedom(format!(
                    "level {t}: {n} runs leave no degrees of freedom for {q} coefficients"
                )));
            }
            let draws = (0..k_used)
                .into_par_iter()
                .map(|k| {
                    let imp = em.draws.get(k);
                    let y = train.augmented_outputs(t, imp);
                    let a = set.fac.solve_lower(&y);
                    let gw = if t > 1 {
                        Some(set.fac.solve_lower(&train.regressor(t, imp)?))
                    } else {
                        None
                    };
                    let fits = (0..y.ncols())
                        .map(|j| {
                            set.fit(a.column(j).into_owned(), gw.as_ref().map(|g| g.column(j).into_owned()))
                                .map_err(|e| match e {
                                    Error::Domain(m) => {
                                        Error::Numerical(format!("level {t}, coordinate {j}: {m}"))
                                    }
                                    other => other,
                                })
                        })
                        .collect::<Result<Vec<_>>>()?;
                    Ok(DrawCache { y, fits })
                })
                .collect::<Result<Vec<_>>>()?;
            levels.push(LevelCache {
                inputs,
                phi,
                set,
                df: (n - q) as f64,
                draws,
            });
        }
        Ok(Self { em, m_pred, levels })
    }

    pub fn m_pred(&self) -> usize {
        self.m_pred
    }

    fn query(&self, x0: &[T]) -> Result<Vec<QueryLevel<T>>> {
        let design = self.em.design();
        if x0.len() != design.d() || x0.iter().any(|v| !is_finite(*v)) {
            return Err(Error::Domain(format!("query input must be a finite {}-vector", design.d())));
        }
        let z0 = design.scaling().normalize_point(x0);
        let basis = self.em.train.basis();
        let h0 = basis.eval_point(&z0);
        self.levels
            .iter()
            .enumerate()
            .map(|(i, lvl)| {
                let located = design.locate(i + 1, &z0);
                let r = corr_vector(&lvl.inputs, &z0, &lvl.phi)?;
                let z = lvl.set.fac.solve_lower_vec(&r);
                let c0 = T::one() - z.norm_squared();
                Ok(QueryLevel {
                    located,
                    h0: h0.clone(),
                    z,
                    c0,
                })
            })
            .collect()
    }

    fn draw_with(&self, q: &[QueryLevel<T>], query_index: u64, m: usize, seed: u64) -> Result<PredictiveDraw<T>> {
        let k = m % self.em.draws.len();
        let n_out = self.em.n_outputs();
        let s = self.levels.len();
        let mut rng = stream_rng(seed, Domain::Prediction, query_index, m as u64);
        let mut values = DMatrix::zeros(s, n_out);
        for (i, (lvl, ql)) in self.levels.iter().zip(q).enumerate() {
            let cache = &lvl.draws[k];
            if let Some(row) = ql.located {
                values.set_row(i, &cache.y.row(row));
                continue;
            }
            for j in 0..n_out {
                let w0 = (i > 0).then(|| values[(i - 1, j)]);
                let fit = &cache.fits[j];
                let (loc, spread) = fit.conditional_point(&lvl.set, &ql.h0, w0, &ql.z, ql.c0);
                let spread = if spread > T::zero() { spread } else { T::zero() };
                let scale = (fit.s2 / lit::<T>(lvl.df) * spread).sqrt();
                let e: DVector<T> = standard_normals(&mut rng, 1);
                let mix: T = t_mixing(&mut rng, lvl.df)?;
                let y = loc + scale * e[0] * mix;
                if !is_finite(y) {
                    return Err(Error::Numerical(format!(
                        "non-finite predictive draw at level {}, coordinate {j}",
                        i + 1
                    )));
                }
                values[(i, j)] = y;
            }
        }
        Ok(PredictiveDraw {
            values,
            imputation: k,
            stream: (query_index, m as u64),
        })
    }

    /// Draw `m` at raw input `x0`; the random stream is keyed by
    /// `(seed, query_index, m)`.
    pub fn sequential_draw(&self, x0: &[T], query_index: u64, m: usize, seed: u64) -> Result<PredictiveDraw<T>> {
        if m >= self.m_pred {
            return Err(Error::Domain(format!("draw index {m} exceeds the {} prepared draws", self.m_pred)));
        }
        let q = self.query(x0)?;
        self.draw_with(&q, query_index, m, seed)
    }

    /// `M_pred×N` top-level draws at `x0`.
    pub fn draws(&self, x0: &[T], query_index: u64, seed: u64) -> Result<DMatrix<T>> {
        let q = self.query(x0)?;
        let s = self.levels.len();
        let rows = (0..self.m_pred)
            .into_par_iter()
            .map(|m| self.draw_with(&q, query_index, m, seed).map(|d| d.values.row(s - 1).into_owned()))
            .collect::<Result<Vec<_>>>()?;
        Ok(DMatrix::from_rows(&rows))
    }

    pub fn predict(&self, x0: &[T], query_index: u64, seed: u64) -> Result<PredictiveSummary<T>> {
        summarize(&self.draws(x0, query_index, seed)?)
    }

    /// Predict at every row of `xs` (raw units); row `i` uses query index `i`.
    pub fn predict_batch(&self, xs: &DMatrix<T>, seed: u64) -> Result<Vec<PredictiveSummary<T>>> {
        (0..xs.nrows())
            .into_par_iter()
            .map(|i| {
                let x: Vec<T> = xs.row(i).iter().copied().collect();
                self.predict(&x, i as u64, seed)
            })
            .collect()
    }

    /// Raw draws for every row of `xs`.
    pub fn draws_batch(&self, xs: &DMatrix<T>, seed: u64) -> Result<Vec<DMatrix<T>>> {
        (0..xs.nrows())
            .into_par_iter()
            .map(|i| {
                let x: Vec<T> = xs.row(i).iter().copied().collect();
                self.draws(&x, i as u64, seed)
            })
            .collect()
    }
}

/// Summary at a single input with `m_pred` draws.
pub fn predict<T: Real>(em: &FittedEmulator<T>, x0: &[T], m_pred: usize, seed: u64) -> Result<PredictiveSummary<T>> {
    Predictor::new(em, m_pred)?.predict(x0, 0, seed)
}

/// Fixed parameters for one-step prediction.
#[derive(Debug, Clone, PartialEq)]
pub struct OneStepParams<T: Real> {
    pub phis: Vec<CorrelationParams<T>>,
    /// `p×N` trend coefficients per level.
    pub beta: Vec<DMatrix<T>>,
    /// Scale discrepancies `γ_t` for `t = 1..s−1`, each of length `N`.
    pub gamma: Vec<DVector<T>>,
    /// Variances per level, each of length `N`.
    pub sigma2: Vec<DVector<T>>,
}

impl<T: Real> OneStepParams<T> {
    /// Split GLS point estimates into trend, scale and variance parts.
    pub fn from_estimates(phis: &[CorrelationParams<T>], estimates: &[LevelEstimates<T>], p: usize) -> Self {
        let beta = estimates.iter().map(|e| e.b.rows(0, p).into_owned()).collect();
        let gamma = estimates[1..].iter().map(|e| e.b.row(p).transpose()).collect();
        let sigma2 = estimates.iter().map(|e| e.sigma2.clone()).collect();
        Self {
            phis: phis.to_vec(),
            beta,
            gamma,
            sigma2,
        }
    }
}

/// Closed-form Gaussian prediction of the top level at raw input `x0` given
/// the augmented outputs at every level and fixed parameters. Returns the
/// per-coordinate mean and variance.
pub fn one_step_predict<T: Real>(
    design: &AugmentedDesign<T>,
    basis: TrendBasis,
    outputs: &[DMatrix<T>],
    params: &OneStepParams<T>,
    x0: &[T],
) -> Result<(DVector<T>, DVector<T>)> {
    let s = design.s();
    if !validate_nested(design).nested {
        return Err(Error::Validation("one-step prediction needs a nested augmented design".into()));
    }
    if outputs.len() != s || params.phis.len() != s || params.beta.len() != s || params.sigma2.len() != s {
        return Err(Error::Domain(format!("parameters and outputs must cover all {s} levels")));
    }
    if params.gamma.len() + 1 != s {
        return Err(Error::Domain(format!("{} scale discrepancies for {s} levels", params.gamma.len())));
    }
    if x0.len() != design.d() || x0.iter().any(|v| !is_finite(*v)) {
        return Err(Error::Domain(format!("query input must be a finite {}-vector", design.d())));
    }
    let n_out = outputs[0].ncols();
    let z0 = DMatrix::from_row_slice(1, design.d(), &design.scaling().normalize_point(x0));
    let sets: Vec<DMatrix<T>> = (1..=s).map(|t| design.augmented_inputs(t)).collect();
    for (t, y) in outputs.iter().enumerate() {
        if y.nrows() != sets[t].nrows() || y.ncols() != n_out {
            return Err(Error::Domain(format!("outputs at level {} have the wrong shape", t + 1)));
        }
    }
    let sizes: Vec<usize> = sets.iter().map(|x| x.nrows()).collect();
    let offsets: Vec<usize> = sizes
        .iter()
        .scan(0, |acc, n| {
            let o = *acc;
            *acc += n;
            Some(o)
        })
        .collect();
    let total: usize = sizes.iter().sum();

    // r_k(X_i, X_i') for k ≤ min(i, i'), and r_k(X_i, x0)
    let mut corr = vec![vec![vec![DMatrix::<T>::zeros(0, 0); s]; s]; s];
    let mut corr0 = vec![vec![DMatrix::<T>::zeros(0, 0); s]; s];
    for k in 0..s {
        for i in k..s {
            corr0[k][i] = corr_matrix(&sets[i], &z0, &params.phis[k])?;
            for ip in i..s {
                corr[k][i][ip] = corr_matrix(&sets[i], &sets[ip], &params.phis[k])?;
            }
        }
    }
    let trends: Vec<DMatrix<T>> = sets.iter().map(|x| basis.eval(x)).collect();
    let h0 = basis.eval(&z0);

    let results = (0..n_out)
        .into_par_iter()
        .map(|j| {
            let gamma = |t: usize| params.gamma[t][j];
            let sig = |t: usize| params.sigma2[t][j];
            // ∏_{l=a}^{b-1} γ_l (0-based levels)
            let gprod = |a: usize, b: usize| (a..b).fold(T::one(), |acc, l| acc * gamma(l));
            // weight of r_k inside K_i: (∏_{l=k}^{i-1} γ_l²) σ²_k
            let kw = |k: usize, i: usize| {
                let g = gprod(k, i);
                g * g * sig(k)
            };
            let mut cov = DMatrix::<T>::zeros(total, total);
            for i in 0..s {
                for ip in i..s {
                    let mut block = DMatrix::<T>::zeros(sizes[i], sizes[ip]);
                    for k in 0..=i {
                        block += &corr[k][i][ip] * kw(k, i);
                    }
                    block *= gprod(i, ip);
                    cov.view_mut((offsets[i], offsets[ip]), (sizes[i], sizes[ip])).copy_from(&block);
                    if ip != i {
                        cov.view_mut((offsets[ip], offsets[i]), (sizes[ip], sizes[i]))
                            .copy_from(&block.transpose());
                    }
                }
            }
            let mut c = DVector::<T>::zeros(total);
            let mut resid = DVector::<T>::zeros(total);
            let mut mu0 = T::zero();
            for i in 0..s {
                let mut ci = DVector::<T>::zeros(sizes[i]);
                for k in 0..=i {
                    ci += corr0[k][i].column(0) * kw(k, i);
                }
                ci *= gprod(i, s - 1);
                c.rows_mut(offsets[i], sizes[i]).copy_from(&ci);
            }
            // means by the autoregressive recursion at each level's inputs
            for i in 0..s {
                let mut mu = &trends[i] * params.beta[i].column(j);
                for k in (0..i).rev() {
                    // contribution of lower level k carried up to level i
                    let carried = &trends[i] * params.beta[k].column(j) * gprod(k, i);
                    mu += carried;
                }
                let y = outputs[i].column(j);
                resid.rows_mut(offsets[i], sizes[i]).copy_from(&(y - mu));
            }
            for k in 0..s {
                mu0 += (&h0 * params.beta[k].column(j))[0] * gprod(k, s - 1);
            }
            let prior_var = (0..s).fold(T::zero(), |acc, k| acc + kw(k, s - 1));
            let fac = chol_factor(&cov, 0.0)?;
            let a = fac.solve_lower(&DMatrix::from_columns(&[c.clone(), resid]));
            let mean = mu0 + a.column(0).dot(&a.column(1));
            let var = prior_var - a.column(0).norm_squared();
            Ok((mean, var))
        })
        .collect::<Result<Vec<(T, T)>>>()?;
    Ok((
        DVector::from_iterator(n_out, results.iter().map(|r| r.0)),
        DVector::from_iterator(n_out, results.iter().map(|r| r.1)),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn summarize_constant_draws() {
        let d = DMatrix::from_element(5, 2, 3.5);
        let s = summarize(&d).unwrap();
        assert_eq!(s.mean[0], 3.5);
        assert_eq!(s.sd[1], 0.0);
        assert_eq!((s.lower[0], s.upper[0]), (3.5, 3.5));
    }

    #[test]
    fn summarize_arithmetic() {
        let d = DMatrix::from_fn(100, 1, |i, _| i as f64);
        let s = summarize(&d).unwrap();
        assert_eq!(s.mean[0], 49.5);
        assert!((s.lower[0] - 2.475).abs() < 1e-12);
        assert!((s.upper[0] - 96.525).abs() < 1e-12);
        let two = DMatrix::from_column_slice(2, 1, &[0.0, 2.0]);
        let s = summarize(&two).unwrap();
        assert_eq!(s.mean[0], 1.0);
        assert!((s.sd[0] - 2f64.sqrt()).abs() < 1e-15);
        assert!(summarize(&DMatrix::<f64>::zeros(1, 1)).is_err());
    }

    #[test]
    fn summarize_permutes_with_columns() {
        let d = DMatrix::from_fn(7, 3, |i, j| ((i * 3 + j * 5) % 7) as f64 + j as f64);
        let p = DMatrix::from_columns(&[d.column(2), d.column(0), d.column(1)]);
        let (a, b) = (summarize(&d).unwrap(), summarize(&p).unwrap());
        assert_eq!(a.mean[2], b.mean[0]);
        assert_eq!(a.upper[0], b.upper[1]);
    }
}
