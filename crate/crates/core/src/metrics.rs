//! Forecast verification on held-out data.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::predict::PredictiveSummary;

/// Predictions at held-out inputs with the matching truth.
///
/// Matrices are `inputs×coordinates`.
#[derive(Debug, Clone, PartialEq)]
pub struct ValidationSet {
    pub mean: DMatrix<f64>,
    pub lower: DMatrix<f64>,
    pub upper: DMatrix<f64>,
    pub truth: DMatrix<f64>,
    /// Optional raw draws per input, each `M×N`.
    pub draws: Option<Vec<DMatrix<f64>>>,
}

impl ValidationSet {
    pub fn new(summaries: &[PredictiveSummary<f64>], truth: DMatrix<f64>) -> Result<Self> {
        if summaries.len() != truth.nrows() {
            return Err(Error::Validation(format!(
                "{} predictions for {} held-out inputs",
                summaries.len(),
                truth.nrows()
            )));
        }
        let n = truth.ncols();
        if summaries.iter().any(|s| s.mean.len() != n) {
            return Err(Error::Validation(format!("predictions do not have {n} coordinates")));
        }
        if truth.iter().any(|v| !v.is_finite()) {
            return Err(Error::Validation("held-out truth contains non-finite values".into()));
        }
        let pick = |f: fn(&PredictiveSummary<f64>) -> &nalgebra::DVector<f64>| {
            DMatrix::from_fn(truth.nrows(), n, |i, j| f(&summaries[i])[j])
        };
        Ok(Self {
            mean: pick(|s| &s.mean),
            lower: pick(|s| &s.lower),
            upper: pick(|s| &s.upper),
            truth,
            draws: None,
        })
    }

    pub fn with_draws(mut self, draws: Vec<DMatrix<f64>>) -> Result<Self> {
        if draws.len() != self.truth.nrows() || draws.iter().any(|d| d.ncols() != self.truth.ncols() || d.nrows() == 0) {
            return Err(Error::Validation("raw draws do not match the held-out set".into()));
        }
        self.draws = Some(draws);
        Ok(self)
    }

    fn cells(&self) -> Result<f64> {
        if self.truth.is_empty() {
            return Err(Error::Domain("validation set is empty".into()));
        }
        Ok(self.truth.len() as f64)
    }
}

pub fn rmspe(v: &ValidationSet) -> Result<f64> {
    let n = v.cells()?;
    let ss: f64 = v.mean.iter().zip(v.truth.iter()).map(|(m, y)| (m - y) * (m - y)).sum();
    Ok((ss / n).sqrt())
}

/// Fraction of cells whose 95% interval contains the truth.
pub fn coverage95(v: &ValidationSet) -> Result<f64> {
    let n = v.cells()?;
    let hits = v
        .lower
        .iter()
        .zip(v.upper.iter())
        .zip(v.truth.iter())
        .filter(|((lo, hi), y)| *lo <= *y && *y <= *hi)
        .count();
    Ok(hits as f64 / n)
}

/// Average length of the 95% intervals.
pub fn alci95(v: &ValidationSet) -> Result<f64> {
    let n = v.cells()?;
    Ok(v.upper.iter().zip(v.lower.iter()).map(|(hi, lo)| hi - lo).sum::<f64>() / n)
}

/// CRPS of the empirical distribution of `draws` at `truth`.
pub fn crps_empirical(draws: &[f64], truth: f64) -> Result<f64> {
    if draws.is_empty() {
        return Err(Error::Domain("CRPS needs at least one draw".into()));
    }
    let m = draws.len() as f64;
    let abs_err: f64 = draws.iter().map(|x| (x - truth).abs()).sum::<f64>() / m;
    // Σ_{k,l} |x_k − x_l| from sorted data in O(M log M)
    let mut sorted = draws.to_vec();
    sorted.sort_by(f64::total_cmp);
    let pair: f64 = sorted
        .iter()
        .enumerate()
        .map(|(i, x)| x * (2.0 * i as f64 + 1.0 - m))
        .sum::<f64>()
        * 2.0;
    Ok(abs_err - pair / (2.0 * m * m))
}

/// Mean CRPS over all cells; requires raw draws.
pub fn mean_crps(v: &ValidationSet) -> Result<f64> {
    let n = v.cells()?;
    let draws = v
        .draws
        .as_ref()
        .ok_or_else(|| Error::Domain("CRPS needs raw predictive draws".into()))?;
    let mut total = 0.0;
    for (i, d) in draws.iter().enumerate() {
        for j in 0..d.ncols() {
            let col: Vec<f64> = d.column(j).iter().copied().collect();
            total += crps_empirical(&col, v.truth[(i, j)])?;
        }
    }
    Ok(total / n)
}

/// Which sum of squares divides the NSME error term.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NsmeDenominator {
    /// `Σ (m − ȳ)²`, predictions about the training mean.
    #[default]
    Printed,
    /// `Σ (y − ȳ)²`, truth about the training mean.
    Conventional,
}

/// `1 − Σ(m − y)² / D` where `ȳ_j` are per-coordinate training means.
pub fn nsme(v: &ValidationSet, train_means: &[f64], denom: NsmeDenominator) -> Result<f64> {
    v.cells()?;
    if train_means.len() != v.truth.ncols() {
        return Err(Error::Domain(format!(
            "{} training means for {} coordinates",
            train_means.len(),
            v.truth.ncols()
        )));
    }
    let mut num = 0.0;
    let mut den = 0.0;
    for i in 0..v.truth.nrows() {
        for (j, ybar) in train_means.iter().enumerate() {
            let (m, y) = (v.mean[(i, j)], v.truth[(i, j)]);
            num += (m - y) * (m - y);
            let dev = match denom {
                NsmeDenominator::Printed => m - ybar,
                NsmeDenominator::Conventional => y - ybar,
            };
            den += dev * dev;
        }
    }
    if den == 0.0 {
        return Err(Error::Domain("NSME denominator is zero".into()));
    }
    Ok(1.0 - num / den)
}

/// All metrics for one validation run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub rmspe: f64,
    pub coverage95: f64,
    pub alci95: f64,
    pub crps: Option<f64>,
    pub nsme: f64,
    pub nsme_denominator: NsmeDenominator,
    pub cells: usize,
}

pub fn report(v: &ValidationSet, train_means: &[f64], denom: NsmeDenominator) -> Result<MetricsReport> {
    Ok(MetricsReport {
        rmspe: rmspe(v)?,
        coverage95: coverage95(v)?,
        alci95: alci95(v)?,
        crps: v.draws.as_ref().map(|_| mean_crps(v)).transpose()?,
        nsme: nsme(v, train_means, denom)?,
        nsme_denominator: denom,
        cells: v.truth.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn set(mean: &[f64], truth: &[f64], half: &[f64]) -> ValidationSet {
        let n = mean.len();
        let m = DMatrix::from_column_slice(n, 1, mean);
        let h = DMatrix::from_column_slice(n, 1, half);
        ValidationSet {
            lower: &m - &h,
            upper: &m + &h,
            mean: m,
            truth: DMatrix::from_column_slice(n, 1, truth),
            draws: None,
        }
    }

    #[test]
    fn rmspe_values() {
        assert_eq!(rmspe(&set(&[1.0, 2.0], &[1.0, 2.0], &[0.0, 0.0])).unwrap(), 0.0);
        let v = set(&[1.0, -1.0, 1.0, -1.0], &[0.0; 4], &[0.0; 4]);
        assert_eq!(rmspe(&v).unwrap(), 1.0);
        assert_eq!(rmspe(&set(&[3.0], &[0.0], &[0.0])).unwrap(), 3.0);
        assert!(rmspe(&set(&[], &[], &[])).is_err());
    }

    #[test]
    fn coverage_and_length() {
        let v = set(&[0.0, 0.0], &[0.05, -0.1], &[0.1, 0.2]);
        assert_eq!(coverage95(&v).unwrap(), 1.0);
        assert!((alci95(&v).unwrap() - 0.3).abs() < 1e-15);
        let degenerate = set(&[2.0], &[2.0], &[0.0]);
        assert_eq!(coverage95(&degenerate).unwrap(), 1.0);
        assert_eq!(alci95(&degenerate).unwrap(), 0.0);
    }

    #[test]
    fn crps_values() {
        assert_eq!(crps_empirical(&[1.0, 1.0, 1.0], 1.0).unwrap(), 0.0);
        assert_eq!(crps_empirical(&[0.0, 2.0], 1.0).unwrap(), 0.5);
        assert_eq!(crps_empirical(&[4.0], 1.5).unwrap(), 2.5);
    }

    #[test]
    fn nsme_values() {
        let v = set(&[0.0, 2.0], &[1.0, 1.0], &[0.0, 0.0]);
        assert_eq!(nsme(&v, &[0.0], NsmeDenominator::Printed).unwrap(), 0.5);
        let perfect = set(&[0.0, 2.0], &[0.0, 2.0], &[0.0, 0.0]);
        assert_eq!(nsme(&perfect, &[0.0], NsmeDenominator::Conventional).unwrap(), 1.0);
        let flat = set(&[1.0, 1.0], &[1.0, 1.0], &[0.0, 0.0]);
        assert!(nsme(&flat, &[1.0], NsmeDenominator::Printed).is_err());
    }

    proptest! {
        #[test]
        fn crps_bounded_by_mean_absolute_error(draws in prop::collection::vec(-10.0f64..10.0, 1..40), y in -10.0f64..10.0) {
            let c = crps_empirical(&draws, y).unwrap();
            let naive_pairs: f64 = draws.iter().flat_map(|a| draws.iter().map(move |b| (a - b).abs())).sum();
            let m = draws.len() as f64;
            let mae = draws.iter().map(|x| (x - y).abs()).sum::<f64>() / m;
            prop_assert!((c - (mae - naive_pairs / (2.0 * m * m))).abs() < 1e-9);
            prop_assert!(c <= mae + 1e-12);
        }

        #[test]
        fn rmspe_permutation_invariant(vals in prop::collection::vec((-5.0f64..5.0, -5.0f64..5.0), 1..20), rot in 0usize..20) {
            let (m, y): (Vec<f64>, Vec<f64>) = vals.iter().copied().unzip();
            let k = rot % m.len();
            let (mut m2, mut y2) = (m.clone(), y.clone());
            m2.rotate_left(k);
            y2.rotate_left(k);
            let z = vec![0.0; m.len()];
            let a = rmspe(&set(&m, &y, &z)).unwrap();
            let b = rmspe(&set(&m2, &y2, &z)).unwrap();
            prop_assert!((a - b).abs() <= 1e-12 * a.max(1.0));
        }
    }
}
