//! Range-parameter prior and the per-level integrated log posterior.
//!
//! Trend coefficients, the scale discrepancy and the variance carry
//! `1/σ²` reference priors that are integrated out analytically, leaving a
//! function of the range parameters only.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gls::{chol_factor, fast_profile_terms};
use crate::kernels::{corr_matrix_sym, CorrelationParams};
use crate::scalar::{is_finite, lit, Real};

/// Hyperparameters of the jointly robust prior.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JrPriorConfig<T> {
    pub a: T,
    pub b: T,
    pub c: Vec<T>,
}

impl<T: Real> JrPriorConfig<T> {
    pub fn new(a: T, b: T, c: Vec<T>) -> Result<Self> {
        if !(a > T::zero()) || !(b > T::zero()) || c.iter().any(|v| !(*v > T::zero()) || !is_finite(*v)) {
            return Err(Error::Domain("jointly robust prior needs a > 0, b > 0, C > 0".into()));
        }
        Ok(Self { a, b, c })
    }

    /// Defaults on unit-range inputs: `a = 0.2`, `C_l = ñ^{-1/d}`,
    /// `b = ñ^{-1/d}(a + d)`.
    pub fn default_for(n_aug: usize, d: usize) -> Self {
        let a: T = lit(0.2);
        let scale: T = lit::<T>(n_aug as f64).powf(lit(-1.0 / d as f64));
        Self {
            a,
            b: scale * (a + lit(d as f64)),
            c: vec![scale; d],
        }
    }
}

/// Log kernel `a·ln(u) − b·u` with `u = Σ C_l/φ_l`.
pub fn jr_log_prior<T: Real>(phis: &CorrelationParams<T>, cfg: &JrPriorConfig<T>) -> Result<T> {
    if phis.dim() != cfg.c.len() {
        return Err(Error::Domain(format!(
            "prior has {} scale constants but {} range parameters were given",
            cfg.c.len(),
            phis.dim()
        )));
    }
    let u = phis
        .phis()
        .iter()
        .zip(&cfg.c)
        .fold(T::zero(), |acc, (p, c)| acc + *c / *p);
    Ok(cfg.a * u.ln() - cfg.b * u)
}

/// Regression functions `h_t(x)` evaluated on normalized inputs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TrendBasis {
    #[default]
    Constant,
    /// Intercept plus per-dimension powers `x_i^1..x_i^degree`.
    Polynomial { degree: usize },
}

impl TrendBasis {
    pub fn len(&self, d: usize) -> usize {
        match self {
            TrendBasis::Constant => 1,
            TrendBasis::Polynomial { degree } => 1 + d * degree,
        }
    }

    pub fn is_empty(&self, _d: usize) -> bool {
        false
    }

    pub fn eval_point<T: Real>(&self, x: &[T]) -> Vec<T> {
        match self {
            TrendBasis::Constant => vec![T::one()],
            TrendBasis::Polynomial { degree } => {
                let mut out = Vec::with_capacity(1 + x.len() * degree);
                out.push(T::one());
                for v in x {
                    let mut p = T::one();
                    for _ in 0..*degree {
                        p *= *v;
                        out.push(p);
                    }
                }
                out
            }
        }
    }

    /// `n×p` basis matrix for the rows of `x`.
    pub fn eval<T: Real>(&self, x: &DMatrix<T>) -> DMatrix<T> {
        let p = self.len(x.ncols());
        let mut h = DMatrix::zeros(x.nrows(), p);
        for i in 0..x.nrows() {
            let row: Vec<T> = x.row(i).iter().copied().collect();
            for (k, v) in self.eval_point(&row).into_iter().enumerate() {
                h[(i, k)] = v;
            }
        }
        h
    }
}

/// Everything needed to evaluate one level's integrated log posterior.
#[derive(Debug, Clone)]
pub struct LevelData<'a, T: Real> {
    /// Normalized augmented inputs, `ñ×d`.
    pub inputs: &'a DMatrix<T>,
    /// Trend basis evaluated at `inputs`, `ñ×p`.
    pub h: &'a DMatrix<T>,
    /// Augmented outputs (observed and imputed), `ñ×N`.
    pub y: &'a DMatrix<T>,
    /// Lower-level augmented outputs at the same inputs (absent at level 1).
    pub w: Option<&'a DMatrix<T>>,
}

/// `ln π(φ) − Σ_j ln|T̃ᵀR̃⁻¹T̃|/2 − N ln|R̃|/2 − (ñ−q) Σ_j ln S²_j / 2`.
pub fn level_log_integrated_posterior<T: Real>(
    phi: &CorrelationParams<T>,
    data: &LevelData<'_, T>,
    prior: &JrPriorConfig<T>,
    jitter: f64,
) -> Result<T> {
    let n = data.inputs.nrows();
    let q = data.h.ncols() + usize::from(data.w.is_some());
    if n <= q {
        return Err(Error::DegreesOfFreedom(format!(
            "{n} augmented runs cannot support {q} regression coefficients"
        )));
    }
    if data.y.iter().chain(data.w.into_iter().flat_map(|w| w.iter())).any(|v| !is_finite(*v)) {
        return Err(Error::Numerical("augmented outputs contain non-finite values".into()));
    }
    let r = corr_matrix_sym(data.inputs, phi)?;
    let fac = chol_factor(&r, jitter)?;
    let terms = fast_profile_terms(&fac, data.h, data.w, data.y)?;
    combine_terms(
        jr_log_prior(phi, prior)?,
        fac.logdet(),
        n - q,
        &terms.logdet_ttrt,
        &terms.s2,
    )
}

pub(crate) fn combine_terms<T: Real>(
    log_prior: T,
    logdet_r: T,
    dof: usize,
    logdet_ttrt: &[T],
    s2: &[T],
) -> Result<T> {
    let half: T = lit(0.5);
    let n_out: T = lit(s2.len() as f64);
    let mut sum_ld = T::zero();
    let mut sum_ls = T::zero();
    for (j, (ld, s)) in logdet_ttrt.iter().zip(s2).enumerate() {
        if !(*s > T::zero()) || !is_finite(*s) {
            return Err(Error::Numerical(format!(
                "residual quadratic form is {s:?} at coordinate {j}"
            )));
        }
        sum_ld += *ld;
        sum_ls += s.ln();
    }
    let g = log_prior - half * sum_ld - half * n_out * logdet_r - half * lit::<T>(dof as f64) * sum_ls;
    if !is_finite(g) {
        return Err(Error::Numerical("integrated log posterior is not finite".into()));
    }
    Ok(g)
}
