//! Student-t conditionals of one fidelity level given its conditioning data.
//!
//! Both the imputation of missing outputs and the sequential predictive
//! sampler condition a level's output at some target inputs on that level's
//! data, with trend and scale coefficients and the variance integrated out.
//! With `L` the Cholesky factor of the conditioning correlation matrix,
//! `G = L⁻¹T` and `e = L⁻¹(y − T b̂)`, the location is `T₀ b̂ + Zᵀe` and the
//! unscaled spread is `C₀ + Dᵀ(GᵀG)⁻¹D`, where `Z = L⁻¹ r(cond, target)`,
//! `C₀ = r(target, target) − ZᵀZ` and `D = T₀ᵀ − GᵀZ`.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::error::{Error, Result};
use crate::gls::CholFactor;
use crate::kernels::{corr_matrix, corr_matrix_sym, CorrelationParams};
use crate::scalar::{lit, Real};

/// Factorized conditioning set with the whitened trend basis.
#[derive(Debug, Clone)]
pub(crate) struct ConditioningSet<T: Real> {
    pub fac: CholFactor<T>,
    /// `L⁻¹H`
    pub gh: DMatrix<T>,
}

impl<T: Real> ConditioningSet<T> {
    pub fn new(inputs: &DMatrix<T>, h: &DMatrix<T>, phi: &CorrelationParams<T>, jitter: f64) -> Result<Self> {
        let r = corr_matrix_sym(inputs, phi)?;
        let fac = crate::gls::chol_factor(&r, jitter)?;
        let gh = fac.solve_lower(h);
        Ok(Self { fac, gh })
    }

    pub fn n(&self) -> usize {
        self.fac.dim()
    }

    /// Precompute the target-side pieces for a set of target inputs.
    pub fn target(
        &self,
        cond_inputs: &DMatrix<T>,
        target_inputs: &DMatrix<T>,
        target_h: DMatrix<T>,
        phi: &CorrelationParams<T>,
    ) -> Result<Target<T>> {
        let cross = corr_matrix(cond_inputs, target_inputs, phi)?;
        let z = self.fac.solve_lower(&cross);
        let c0 = corr_matrix_sym(target_inputs, phi)? - z.tr_mul(&z);
        Ok(Target { h: target_h, z, c0 })
    }

    /// GLS fit of one coordinate from its whitened response `a = L⁻¹y` and,
    /// above the first level, whitened regressor `w = L⁻¹W`.
    pub fn fit(&self, a: DVector<T>, w: Option<DVector<T>>) -> Result<ColumnFit<T>> {
        let n = self.n();
        let p = self.gh.ncols();
        let q = p + usize::from(w.is_some());
        if n <= q {
            return Err(Error::DegreesOfFreedom(format!(
                "{n} conditioning runs cannot support {q} regression coefficients"
            )));
        }
        let g = match &w {
            None => self.gh.clone(),
            Some(w) => {
                let mut g = self.gh.clone().insert_column(p, T::zero());
                g.set_column(p, w);
                g
            }
        };
        let gram = g.tr_mul(&g);
        let diag: Vec<T> = gram.diagonal().iter().copied().collect();
        let chol = Cholesky::new(gram)
            .filter(|ch| {
                ch.l_dirty()
                    .diagonal()
                    .iter()
                    .zip(&diag)
                    .all(|(l, m)| *l * *l >= T::eps() * lit(1e4) * *m && *m > T::zero())
            })
            .ok_or_else(|| Error::Domain("regressor matrix is rank deficient".into()))?;
        let b = chol.solve(&g.tr_mul(&a));
        let resid = a - &g * &b;
        let s2 = resid.norm_squared();
        Ok(ColumnFit { b, s2, resid, w, chol })
    }
}

/// Target-side quantities, independent of the coordinate.
#[derive(Debug, Clone)]
pub(crate) struct Target<T: Real> {
    /// `h(target)`, `m×p`
    pub h: DMatrix<T>,
    /// `L⁻¹ r(cond, target)`, `n×m`
    pub z: DMatrix<T>,
    /// `r(target, target) − ZᵀZ`
    pub c0: DMatrix<T>,
}

#[derive(Debug, Clone)]
pub(crate) struct ColumnFit<T: Real> {
    pub b: DVector<T>,
    pub s2: T,
    /// `L⁻¹(y − T b̂)`
    pub resid: DVector<T>,
    /// `L⁻¹W` above the first level.
    pub w: Option<DVector<T>>,
    /// Cholesky factor of `GᵀG`.
    pub chol: Cholesky<T, Dyn>,
}

impl<T: Real> ColumnFit<T> {
    /// Location and unscaled spread at the target, given the target's
    /// lower-level regressor values (absent at level 1).
    fn gt_z(&self, set: &ConditioningSet<T>, z: &DMatrix<T>) -> DMatrix<T> {
        let gz = set.gh.tr_mul(z);
        match &self.w {
            None => gz,
            Some(w) => {
                let p = gz.nrows();
                let mut out = gz.insert_row(p, T::zero());
                out.set_row(p, &w.tr_mul(z));
                out
            }
        }
    }

    pub fn conditional(
        &self,
        set: &ConditioningSet<T>,
        target: &Target<T>,
        w_target: Option<&DVector<T>>,
    ) -> (DVector<T>, DMatrix<T>) {
        let m = target.h.nrows();
        let p = target.h.ncols();
        let t0 = match w_target {
            None => target.h.clone(),
            Some(w) => {
                let mut t0 = target.h.clone().insert_column(p, T::zero());
                t0.set_column(p, w);
                t0
            }
        };
        debug_assert_eq!(t0.ncols(), self.b.len());
        let loc = &t0 * &self.b + target.z.tr_mul(&self.resid);
        let d = t0.transpose() - self.gt_z(set, &target.z);
        let spread = &target.c0 + d.tr_mul(&self.chol.solve(&d));
        debug_assert_eq!(spread.nrows(), m);
        (loc, spread)
    }

    /// Scalar version for a single target point.
    pub fn conditional_point(
        &self,
        set: &ConditioningSet<T>,
        h0: &[T],
        w0: Option<T>,
        zcol: &DVector<T>,
        c0: T,
    ) -> (T, T) {
        let q = self.b.len();
        let mut t0 = DVector::<T>::zeros(q);
        for (k, v) in h0.iter().enumerate() {
            t0[k] = *v;
        }
        if let Some(w) = w0 {
            t0[q - 1] = w;
        }
        let loc = t0.dot(&self.b) + zcol.dot(&self.resid);
        let mut d = t0;
        let gz = set.gh.tr_mul(zcol);
        for k in 0..gz.len() {
            d[k] -= gz[k];
        }
        if let Some(w) = &self.w {
            d[q - 1] -= w.dot(zcol);
        }
        let spread = c0 + d.dot(&self.chol.solve(&d));
        (loc, spread)
    }
}
