//! Matérn correlation functions with a product (per-dimension) structure.
//!
//! Only the closed-form half-integer smoothness values are supported, so no
//! Bessel-function evaluation is ever needed. Distances are taken one input
//! dimension at a time and the per-dimension correlations multiplied.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::{is_finite, lit, Real};

/// Matérn smoothness restricted to the closed-form cases.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum Smoothness {
    #[serde(rename = "0.5")]
    Half,
    #[serde(rename = "1.5")]
    ThreeHalves,
    #[serde(rename = "2.5")]
    #[default]
    FiveHalves,
}

impl Smoothness {
    pub fn from_value(nu: f64) -> Result<Self> {
        match nu {
            0.5 => Ok(Smoothness::Half),
            1.5 => Ok(Smoothness::ThreeHalves),
            2.5 => Ok(Smoothness::FiveHalves),
            _ => Err(Error::Domain(format!(
                "Matérn smoothness must be one of 0.5, 1.5, 2.5 (got {nu})"
            ))),
        }
    }

    pub fn value(self) -> f64 {
        match self {
            Smoothness::Half => 0.5,
            Smoothness::ThreeHalves => 1.5,
            Smoothness::FiveHalves => 2.5,
        }
    }
}

/// Range parameters (one per input dimension) and the shared smoothness.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationParams<T> {
    phis: Vec<T>,
    nu: Smoothness,
}

impl<T: Real> CorrelationParams<T> {
    pub fn new(phis: Vec<T>, nu: Smoothness) -> Result<Self> {
        if phis.is_empty() {
            return Err(Error::Domain("at least one range parameter is required".into()));
        }
        if let Some(bad) = phis.iter().find(|p| !is_finite(**p) || **p <= T::zero()) {
            return Err(Error::Domain(format!(
                "range parameters must be positive and finite (got {bad:?})"
            )));
        }
        Ok(Self { phis, nu })
    }

    /// Build from log-ranges, as used by the optimizer.
    pub fn from_log(log_phis: &[T], nu: Smoothness) -> Result<Self> {
        Self::new(log_phis.iter().map(|l| l.exp()).collect(), nu)
    }

    pub fn phis(&self) -> &[T] {
        &self.phis
    }

    pub fn log_phis(&self) -> Vec<T> {
        self.phis.iter().map(|p| p.ln()).collect()
    }

    pub fn nu(&self) -> Smoothness {
        self.nu
    }

    pub fn dim(&self) -> usize {
        self.phis.len()
    }
}

/// Matérn correlation at distance `u` with range `phi`.
pub fn matern<T: Real>(u: T, phi: T, nu: Smoothness) -> Result<T> {
    if !is_finite(u) || u < T::zero() {
        return Err(Error::Domain(format!("distance must be finite and nonnegative (got {u:?})")));
    }
    if !is_finite(phi) || phi <= T::zero() {
        return Err(Error::Domain(format!("range must be positive and finite (got {phi:?})")));
    }
    Ok(matern_unchecked(u, phi, nu))
}

#[inline]
pub(crate) fn matern_unchecked<T: Real>(u: T, phi: T, nu: Smoothness) -> T {
    let h = u / phi;
    match nu {
        Smoothness::Half => (-h).exp(),
        Smoothness::ThreeHalves => {
            let a = lit::<T>(3.0).sqrt() * h;
            (T::one() + a) * (-a).exp()
        }
        Smoothness::FiveHalves => {
            let a = lit::<T>(5.0).sqrt() * h;
            (T::one() + a + a * a / lit(3.0)) * (-a).exp()
        }
    }
}

/// Product correlation between two input vectors.
pub fn product_corr<T: Real>(x: &[T], x_prime: &[T], params: &CorrelationParams<T>) -> Result<T> {
    if x.len() != params.dim() || x_prime.len() != params.dim() {
        return Err(Error::Domain(format!(
            "input dimension mismatch: {} and {} vs {} range parameters",
            x.len(),
            x_prime.len(),
            params.dim()
        )));
    }
    Ok(product_corr_iter(
        x.iter().copied(),
        x_prime.iter().copied(),
        params,
    ))
}

#[inline]
fn product_corr_iter<T: Real>(
    x: impl Iterator<Item = T>,
    y: impl Iterator<Item = T>,
    params: &CorrelationParams<T>,
) -> T {
    x.zip(y)
        .zip(params.phis.iter())
        .fold(T::one(), |acc, ((a, b), &phi)| {
            acc * matern_unchecked((a - b).abs(), phi, params.nu)
        })
}

/// Cross-correlation matrix between the rows of `a` (m×d) and `b` (n×d).
pub fn corr_matrix<T: Real>(
    a: &DMatrix<T>,
    b: &DMatrix<T>,
    params: &CorrelationParams<T>,
) -> Result<DMatrix<T>> {
    check_cols(a, params)?;
    check_cols(b, params)?;
    Ok(DMatrix::from_fn(a.nrows(), b.nrows(), |i, j| {
        product_corr_iter(a.row(i).iter().copied(), b.row(j).iter().copied(), params)
    }))
}

/// Symmetric correlation matrix of the rows of `a`, unit diagonal.
pub fn corr_matrix_sym<T: Real>(a: &DMatrix<T>, params: &CorrelationParams<T>) -> Result<DMatrix<T>> {
    check_cols(a, params)?;
    let n = a.nrows();
    let mut r = DMatrix::<T>::identity(n, n);
    for i in 0..n {
        for j in 0..i {
            let v = product_corr_iter(a.row(i).iter().copied(), a.row(j).iter().copied(), params);
            r[(i, j)] = v;
            r[(j, i)] = v;
        }
    }
    Ok(r)
}

/// Correlations between the rows of `a` and a single point.
pub fn corr_vector<T: Real>(
    a: &DMatrix<T>,
    x0: &[T],
    params: &CorrelationParams<T>,
) -> Result<nalgebra::DVector<T>> {
    check_cols(a, params)?;
    if x0.len() != params.dim() {
        return Err(Error::Domain(format!(
            "query point has dimension {} but the model has {}",
            x0.len(),
            params.dim()
        )));
    }
    Ok(nalgebra::DVector::from_fn(a.nrows(), |i, _| {
        product_corr_iter(a.row(i).iter().copied(), x0.iter().copied(), params)
    }))
}

fn check_cols<T: Real>(a: &DMatrix<T>, params: &CorrelationParams<T>) -> Result<()> {
    if a.ncols() != params.dim() {
        return Err(Error::Domain(format!(
            "inputs have {} columns but {} range parameters were given",
            a.ncols(),
            params.dim()
        )));
    }
    Ok(())
}
