//! Cholesky-based generalized least squares.
//!
//! Every solve against a correlation matrix goes through its lower factor;
//! the only explicit inverses are the tiny `q×q` normal-equation systems.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::scalar::{lit, Real};

/// Largest jitter tried before a correlation matrix is declared singular.
pub const MAX_JITTER: f64 = 1e-4;

/// Default diagonal jitter added to normalized-input correlation matrices.
pub const DEFAULT_JITTER: f64 = 1e-8;

/// Lower Cholesky factor of `R + jitter·I`.
#[derive(Debug, Clone)]
pub struct CholFactor<T: Real> {
    l: DMatrix<T>,
    logdet: T,
    jitter_used: f64,
}

impl<T: Real> CholFactor<T> {
    pub fn l(&self) -> &DMatrix<T> {
        &self.l
    }

    pub fn logdet(&self) -> T {
        self.logdet
    }

    pub fn jitter_used(&self) -> f64 {
        self.jitter_used
    }

    pub fn dim(&self) -> usize {
        self.l.nrows()
    }

    /// `L⁻¹ b`.
    pub fn solve_lower(&self, b: &DMatrix<T>) -> DMatrix<T> {
        self.l
            .solve_lower_triangular(b)
            .expect("factor has a strictly positive diagonal")
    }

    pub fn solve_lower_vec(&self, b: &DVector<T>) -> DVector<T> {
        self.l
            .solve_lower_triangular(b)
            .expect("factor has a strictly positive diagonal")
    }

    /// `R⁻¹ b` (two triangular solves).
    pub fn solve(&self, b: &DMatrix<T>) -> DMatrix<T> {
        let z = self.solve_lower(b);
        self.l
            .tr_solve_lower_triangular(&z)
            .expect("factor has a strictly positive diagonal")
    }
}

/// Factor `r + jitter·I`, escalating the jitter tenfold on failure up to
/// [`MAX_JITTER`].
pub fn chol_factor<T: Real>(r: &DMatrix<T>, base_jitter: f64) -> Result<CholFactor<T>> {
    let n = r.nrows();
    if r.ncols() != n {
        return Err(Error::Domain(format!("correlation matrix is {}x{}", n, r.ncols())));
    }
    if base_jitter < 0.0 || !base_jitter.is_finite() {
        return Err(Error::Domain(format!("jitter must be nonnegative (got {base_jitter})")));
    }
    let mut jitter = base_jitter;
    loop {
        let mut m = r.clone();
        if jitter > 0.0 {
            let j: T = lit(jitter);
            for i in 0..n {
                m[(i, i)] += j;
            }
        }
        if let Some(ch) = Cholesky::new(m) {
            let l = ch.unpack();
            if l.diagonal().iter().all(|d| *d > T::zero()) {
                let logdet = l.diagonal().iter().fold(T::zero(), |acc, d| acc + d.ln()) * lit(2.0);
                return Ok(CholFactor {
                    l,
                    logdet,
                    jitter_used: jitter,
                });
            }
        }
        jitter = (jitter * 10.0).max(1e-12);
        if jitter > MAX_JITTER * (1.0 + 1e-9) {
            return Err(Error::Singular {
                level: None,
                size: n,
                jitter: MAX_JITTER,
            });
        }
    }
}

/// Outcome of a GLS fit for one response vector.
#[derive(Debug, Clone)]
pub struct GlsFit<T: Real> {
    pub b_hat: DVector<T>,
    /// `yᵀ Q y`, the residual quadratic form.
    pub s2: T,
    /// `ln |Tᵀ R⁻¹ T|`.
    pub logdet_ttrt: T,
}

/// Threshold on `1 − R²` of a regressor column against the preceding ones,
/// below which the design is treated as rank deficient.
fn rank_tol<T: Real>() -> T {
    T::eps() * lit(1e4)
}

/// Cholesky of a small Gram matrix with a scale-free rank check.
fn gram_cholesky<T: Real>(m: DMatrix<T>) -> Option<Cholesky<T, Dyn>> {
    let diag: Vec<T> = m.diagonal().iter().copied().collect();
    let ch = Cholesky::new(m)?;
    let tol = rank_tol::<T>();
    for (i, d) in ch.l_dirty().diagonal().iter().enumerate() {
        if !(diag[i] > T::zero()) || *d * *d < tol * diag[i] {
            return None;
        }
    }
    Some(ch)
}

fn chol_logdet<T: Real>(ch: &Cholesky<T, Dyn>) -> T {
    ch.l_dirty()
        .diagonal()
        .iter()
        .fold(T::zero(), |acc, d| acc + d.ln())
        * lit(2.0)
}

/// Generalized least squares of `y` on the columns of `t` under correlation
/// `R = L Lᵀ`.
pub fn gls_fit<T: Real>(fac: &CholFactor<T>, t: &DMatrix<T>, y: &DVector<T>) -> Result<GlsFit<T>> {
    let n = fac.dim();
    let q = t.ncols();
    if t.nrows() != n || y.len() != n {
        return Err(Error::Domain(format!(
            "GLS shapes disagree: factor {n}, regressors {}x{q}, response {}",
            t.nrows(),
            y.len()
        )));
    }
    if n <= q {
        return Err(Error::DegreesOfFreedom(format!(
            "{n} observations cannot support {q} regression coefficients"
        )));
    }
    let g = fac.solve_lower(t);
    let a = fac.solve_lower_vec(y);
    let ch = gram_cholesky(g.tr_mul(&g))
        .ok_or_else(|| Error::Domain("regressor matrix is rank deficient".into()))?;
    let b_hat = ch.solve(&g.tr_mul(&a));
    let resid = a - &g * &b_hat;
    Ok(GlsFit {
        b_hat,
        s2: resid.norm_squared(),
        logdet_ttrt: chol_logdet(&ch),
    })
}

/// Shared pieces of the trend projection `Q^H` for one correlation factor.
#[derive(Debug, Clone)]
pub(crate) struct TrendProjector<T: Real> {
    /// `L⁻¹ H`
    pub g: DMatrix<T>,
    pub a_chol: Cholesky<T, Dyn>,
    /// `ln |Hᵀ R⁻¹ H|`
    pub logdet_a: T,
}

impl<T: Real> TrendProjector<T> {
    pub fn new(fac: &CholFactor<T>, h: &DMatrix<T>) -> Result<Self> {
        let g = fac.solve_lower(h);
        let a_chol = gram_cholesky(g.tr_mul(&g))
            .ok_or_else(|| Error::Domain("trend basis matrix is rank deficient".into()))?;
        let logdet_a = chol_logdet(&a_chol);
        Ok(Self { g, a_chol, logdet_a })
    }

    /// `uᵀ A⁻¹ v` for p-vectors.
    #[inline]
    pub fn inner(&self, u: &DVector<T>, v: &DVector<T>) -> T {
        u.dot(&self.a_chol.solve(v))
    }
}

/// Sufficient statistics of one coordinate after whitening by `L⁻¹`.
///
/// `a = L⁻¹y`, `w = L⁻¹W_j` (absent at the first level).
pub(crate) struct WhitenedColumn<T: Real> {
    pub yy: T,
    pub hy: DVector<T>,
    pub w: Option<WhitenedRegressor<T>>,
}

pub(crate) struct WhitenedRegressor<T: Real> {
    pub ww: T,
    pub hw: DVector<T>,
    pub yw: T,
}

impl<T: Real> TrendProjector<T> {
    /// Log-determinant of `TᵀR⁻¹T` and `S²` from whitened statistics,
    /// using the block-determinant identity and the rank-one update of the
    /// trend-only projection.
    pub fn profile(&self, col: &WhitenedColumn<T>, coord: usize) -> Result<(T, T)> {
        let yqy = col.yy - self.inner(&col.hy, &col.hy);
        match &col.w {
            None => Ok((self.logdet_a, yqy)),
            Some(w) => {
                let wqw = w.ww - self.inner(&w.hw, &w.hw);
                if !(wqw > rank_tol::<T>() * w.ww) {
                    return Err(Error::Domain(format!(
                        "regressor matrix is rank deficient at coordinate {coord}"
                    )));
                }
                let wqy = w.yw - self.inner(&w.hw, &col.hy);
                Ok((self.logdet_a + wqw.ln(), yqy - wqy * wqy / wqw))
            }
        }
    }
}

/// Per-coordinate profile terms computed from shared precomputations.
#[derive(Debug, Clone)]
pub struct ProfileTerms<T> {
    pub logdet_ttrt: Vec<T>,
    pub s2: Vec<T>,
}

/// Log-determinants `ln|T_jᵀR⁻¹T_j|` and residual forms `S²_j` for all
/// coordinates, where `T_j = [H, W_j]` (or `T_j = H` when `w` is `None`).
///
/// After the shared `O(n³)` work each coordinate costs two triangular solves.
pub fn fast_profile_terms<T: Real>(
    fac: &CholFactor<T>,
    h: &DMatrix<T>,
    w: Option<&DMatrix<T>>,
    y: &DMatrix<T>,
) -> Result<ProfileTerms<T>> {
    let n = fac.dim();
    let q = h.ncols() + usize::from(w.is_some());
    if h.nrows() != n || y.nrows() != n || w.is_some_and(|w| w.nrows() != n || w.ncols() != y.ncols()) {
        return Err(Error::Domain("profile-term shapes disagree".into()));
    }
    if n <= q {
        return Err(Error::DegreesOfFreedom(format!(
            "{n} observations cannot support {q} regression coefficients"
        )));
    }
    let proj = TrendProjector::new(fac, h)?;
    let a = fac.solve_lower(y);
    let ww = w.map(|w| fac.solve_lower(w));
    let terms: Vec<(T, T)> = (0..y.ncols())
        .into_par_iter()
        .map(|j| {
            let aj = a.column(j);
            let col = WhitenedColumn {
                yy: aj.norm_squared(),
                hy: proj.g.tr_mul(&aj),
                w: ww.as_ref().map(|ww| {
                    let wj = ww.column(j);
                    WhitenedRegressor {
                        ww: wj.norm_squared(),
                        hw: proj.g.tr_mul(&wj),
                        yw: wj.dot(&aj),
                    }
                }),
            };
            proj.profile(&col, j)
        })
        .collect::<Result<_>>()?;
    let (logdet_ttrt, s2) = terms.into_iter().unzip();
    Ok(ProfileTerms { logdet_ttrt, s2 })
}
