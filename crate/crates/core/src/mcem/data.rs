//! Training data on the augmented design and imputed outputs.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::design::{build_augmentation, AugmentedDesign, FidelityData};
use crate::error::{Error, Result};
use crate::priors::TrendBasis;
use crate::scalar::{is_finite, Real};

/// Observed outputs aligned with the observed rows of an augmented design.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingSet<T: Real> {
    design: AugmentedDesign<T>,
    /// `n_t×N` per level.
    outputs: Vec<DMatrix<T>>,
    basis: TrendBasis,
}

impl<T: Real> TrainingSet<T> {
    pub fn new(levels: &[FidelityData<T>], basis: TrendBasis) -> Result<Self> {
        let design = build_augmentation(levels)?;
        let outputs = levels.iter().map(|l| l.y().clone()).collect();
        Self::from_parts(design, outputs, basis)
    }

    pub fn from_parts(design: AugmentedDesign<T>, outputs: Vec<DMatrix<T>>, basis: TrendBasis) -> Result<Self> {
        if outputs.len() != design.s() {
            return Err(Error::Validation(format!(
                "{} output blocks for {} levels",
                outputs.len(),
                design.s()
            )));
        }
        let n_out = outputs[0].ncols();
        for (i, y) in outputs.iter().enumerate() {
            let t = i + 1;
            if y.nrows() != design.n_obs(t) || y.ncols() != n_out {
                return Err(Error::Validation(format!(
                    "level {t}: outputs are {}×{}, expected {}×{n_out}",
                    y.nrows(),
                    y.ncols(),
                    design.n_obs(t)
                )));
            }
            if y.iter().any(|v| !is_finite(*v)) {
                return Err(Error::Validation(format!("level {t}: non-finite output")));
            }
        }
        for t in 2..=design.s() {
            design.parents(t)?;
        }
        Ok(Self { design, outputs, basis })
    }

    pub fn design(&self) -> &AugmentedDesign<T> {
        &self.design
    }
    pub fn basis(&self) -> TrendBasis {
        self.basis
    }
    pub fn s(&self) -> usize {
        self.design.s()
    }
    pub fn n_outputs(&self) -> usize {
        self.outputs[0].ncols()
    }
    /// Observed outputs at level `t` (1-based).
    pub fn observed(&self, t: usize) -> &DMatrix<T> {
        &self.outputs[t - 1]
    }
    /// Number of regression coefficients at level `t`.
    pub fn q(&self, t: usize) -> usize {
        self.basis.len(self.design.d()) + usize::from(t > 1)
    }
    /// True when no level has missing inputs.
    pub fn is_nested(&self) -> bool {
        (1..=self.s()).all(|t| self.design.n_missing(t) == 0)
    }

    /// Observed outputs stacked over one imputation, `ñ_t×N`.
    pub fn augmented_outputs(&self, t: usize, draw: &ImputedOutputs<T>) -> DMatrix<T> {
        let obs = self.observed(t);
        let miss = draw.level(t);
        let n_obs = obs.nrows();
        DMatrix::from_fn(n_obs + miss.nrows(), obs.ncols(), |i, j| {
            if i < n_obs {
                obs[(i, j)]
            } else {
                miss[(i - n_obs, j)]
            }
        })
    }

    /// Lower-level augmented outputs at level `t`'s augmented inputs.
    pub fn regressor(&self, t: usize, draw: &ImputedOutputs<T>) -> Result<DMatrix<T>> {
        let below = self.augmented_outputs(t - 1, draw);
        let parents = self.design.parents(t)?;
        Ok(DMatrix::from_fn(parents.len(), below.ncols(), |i, j| below[(parents[i], j)]))
    }
}

/// One realization of the missing outputs at every level; level `s` is
/// always empty.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImputedOutputs<T: Real> {
    levels: Vec<DMatrix<T>>,
}

impl<T: Real> ImputedOutputs<T> {
    pub fn new(levels: Vec<DMatrix<T>>) -> Self {
        Self { levels }
    }

    pub fn empty(train: &TrainingSet<T>) -> Self {
        let n = train.n_outputs();
        Self {
            levels: (1..=train.s()).map(|_| DMatrix::zeros(0, n)).collect(),
        }
    }

    /// `|missing set at t|×N`
    pub fn level(&self, t: usize) -> &DMatrix<T> {
        &self.levels[t - 1]
    }

    pub(crate) fn level_mut(&mut self, t: usize) -> &mut DMatrix<T> {
        &mut self.levels[t - 1]
    }
}

/// Monte Carlo realizations of the missing outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MissingDraws<T: Real> {
    draws: Vec<ImputedOutputs<T>>,
}

impl<T: Real> MissingDraws<T> {
    pub fn new(draws: Vec<ImputedOutputs<T>>) -> Result<Self> {
        if draws.is_empty() {
            return Err(Error::Domain("at least one missing-data draw is required".into()));
        }
        Ok(Self { draws })
    }

    pub fn len(&self) -> usize {
        self.draws.len()
    }

    pub fn is_empty(&self) -> bool {
        self.draws.is_empty()
    }

    pub fn get(&self, k: usize) -> &ImputedOutputs<T> {
        &self.draws[k]
    }

    pub fn iter(&self) -> impl Iterator<Item = &ImputedOutputs<T>> {
        self.draws.iter()
    }

    /// Draw `k` with `k` taken modulo the number of draws.
    pub fn cycled(&self, k: usize) -> &ImputedOutputs<T> {
        &self.draws[k % self.draws.len()]
    }

    /// Elementwise mean over draws.
    pub fn mean(&self) -> ImputedOutputs<T> {
        let m: T = T::from_usize(self.draws.len()).unwrap();
        let levels = (0..self.draws[0].levels.len())
            .map(|i| {
                let mut acc = self.draws[0].levels[i].clone();
                for d in &self.draws[1..] {
                    acc += &d.levels[i];
                }
                acc / m
            })
            .collect();
        ImputedOutputs { levels }
    }
}
