//! Experimental-design bookkeeping across fidelity levels.
//!
//! Inputs that were run at a higher level but not at level `t` are added to
//! level `t` as *missing* inputs so the augmented designs are nested:
//! every augmented input at level `t+1` is also an augmented input at
//! level `t`. Augmented sets list the observed inputs first, in their
//! original order, followed by the missing ones.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::{is_finite, lit, Real};

/// Two normalized inputs are the same run when no coordinate differs by
/// more than this.
pub const MATCH_TOL: f64 = 1e-9;

/// Observed runs at one fidelity level (raw input units).
#[derive(Debug, Clone, PartialEq)]
pub struct FidelityData<T: Real> {
    level: usize,
    x: DMatrix<T>,
    y: DMatrix<T>,
}

impl<T: Real> FidelityData<T> {
    /// `level` is 1-based; `x` is `n×d`, `y` is `n×N` with aligned rows.
    pub fn new(level: usize, x: DMatrix<T>, y: DMatrix<T>) -> Result<Self> {
        if level == 0 {
            return Err(Error::Validation("fidelity levels are numbered from 1".into()));
        }
        if x.nrows() == 0 {
            return Err(Error::Validation(format!("level {level} has no runs")));
        }
        if x.ncols() == 0 || y.ncols() == 0 {
            return Err(Error::Validation(format!(
                "level {level} needs at least one input and one output column"
            )));
        }
        if x.nrows() != y.nrows() {
            return Err(Error::Validation(format!(
                "level {level}: {} design rows but {} output rows",
                x.nrows(),
                y.nrows()
            )));
        }
        if let Some(i) = (0..x.nrows()).find(|&i| x.row(i).iter().any(|v| !is_finite(*v))) {
            return Err(Error::Validation(format!("level {level}: non-finite input in row {}", i + 1)));
        }
        if let Some(i) = (0..y.nrows()).find(|&i| y.row(i).iter().any(|v| !is_finite(*v))) {
            return Err(Error::Validation(format!("level {level}: non-finite output in row {}", i + 1)));
        }
        Ok(Self { level, x, y })
    }

    pub fn level(&self) -> usize {
        self.level
    }
    pub fn x(&self) -> &DMatrix<T> {
        &self.x
    }
    pub fn y(&self) -> &DMatrix<T> {
        &self.y
    }
    pub fn n(&self) -> usize {
        self.x.nrows()
    }
    pub fn d(&self) -> usize {
        self.x.ncols()
    }
    pub fn n_outputs(&self) -> usize {
        self.y.ncols()
    }
}

/// Per-dimension affine map of raw inputs onto `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputScaling<T> {
    pub lower: Vec<T>,
    pub width: Vec<T>,
}

impl<T: Real> InputScaling<T> {
    /// Ranges of the union of all training inputs; a constant dimension
    /// gets unit width.
    pub fn fit(levels: &[FidelityData<T>]) -> Result<Self> {
        let d = levels
            .first()
            .ok_or_else(|| Error::Validation("no fidelity levels supplied".into()))?
            .d();
        let mut lower = vec![T::max_value().unwrap(); d];
        let mut upper = vec![T::min_value().unwrap(); d];
        for lvl in levels {
            for row in lvl.x.row_iter() {
                for (k, v) in row.iter().enumerate() {
                    lower[k] = lower[k].min(*v);
                    upper[k] = upper[k].max(*v);
                }
            }
        }
        let width = lower
            .iter()
            .zip(&upper)
            .map(|(lo, hi)| if *hi > *lo { *hi - *lo } else { T::one() })
            .collect();
        Ok(Self { lower, width })
    }

    pub fn identity(d: usize) -> Self {
        Self {
            lower: vec![T::zero(); d],
            width: vec![T::one(); d],
        }
    }

    pub fn d(&self) -> usize {
        self.lower.len()
    }

    pub fn normalize_point(&self, x: &[T]) -> Vec<T> {
        x.iter()
            .zip(self.lower.iter().zip(&self.width))
            .map(|(v, (lo, w))| (*v - *lo) / *w)
            .collect()
    }

    pub fn normalize(&self, x: &DMatrix<T>) -> DMatrix<T> {
        DMatrix::from_fn(x.nrows(), x.ncols(), |i, k| (x[(i, k)] - self.lower[k]) / self.width[k])
    }
}

/// Whether two normalized rows denote the same input.
#[inline]
pub fn same_input<T: Real>(a: impl IntoIterator<Item = T>, b: impl IntoIterator<Item = T>) -> bool {
    let tol: T = lit(MATCH_TOL);
    a.into_iter().zip(b).all(|(u, v)| (u - v).abs() <= tol)
}

fn find_row<T: Real>(set: &DMatrix<T>, x: &[T]) -> Option<usize> {
    (0..set.nrows()).find(|&i| same_input(set.row(i).iter().copied(), x.iter().copied()))
}

/// One level of an augmented design.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentedLevel<T> {
    /// Normalized augmented inputs: observed rows, then missing rows.
    inputs: Vec<Vec<T>>,
    n_obs: usize,
    /// Position of each augmented row within the previous level's augmented
    /// set (empty at level 1; `None` marks a nesting violation).
    parent: Vec<Option<usize>>,
}

/// Augmented (nested) design over all fidelity levels, in normalized units.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentedDesign<T> {
    scaling: InputScaling<T>,
    levels: Vec<AugmentedLevel<T>>,
}

/// Outcome of a nesting check.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NestingReport {
    pub nested: bool,
    /// `(level, row)` pairs (1-based level, 0-based augmented row) with no
    /// match in the level below.
    pub violations: Vec<(usize, usize)>,
}

/// Normalize inputs with ranges fitted on all levels and build the
/// augmented design.
pub fn build_augmentation<T: Real>(levels: &[FidelityData<T>]) -> Result<AugmentedDesign<T>> {
    validate_levels(levels)?;
    let scaling = InputScaling::fit(levels)?;
    AugmentedDesign::build(levels, scaling)
}

impl<T: Real> AugmentedDesign<T> {
    pub fn build(levels: &[FidelityData<T>], scaling: InputScaling<T>) -> Result<Self> {
        validate_levels(levels)?;
        if scaling.d() != levels[0].d() {
            return Err(Error::Validation(format!(
                "scaling has {} dimensions but inputs have {}",
                scaling.d(),
                levels[0].d()
            )));
        }
        let observed: Vec<DMatrix<T>> = levels.iter().map(|l| scaling.normalize(l.x())).collect();
        for (t, x) in observed.iter().enumerate() {
            for i in 0..x.nrows() {
                for k in 0..i {
                    if same_input(x.row(i).iter().copied(), x.row(k).iter().copied()) {
                        return Err(Error::Validation(format!(
                            "level {}: rows {} and {} are the same input",
                            t + 1,
                            k + 1,
                            i + 1
                        )));
                    }
                }
            }
        }
        let s = levels.len();
        let mut aug = Vec::with_capacity(s);
        for t in 0..s {
            let mut inputs: Vec<Vec<T>> = observed[t].row_iter().map(|r| r.iter().copied().collect()).collect();
            let n_obs = inputs.len();
            for upper in &observed[t + 1..] {
                for row in upper.row_iter() {
                    let v: Vec<T> = row.iter().copied().collect();
                    if !inputs.iter().any(|u| same_input(u.iter().copied(), v.iter().copied())) {
                        inputs.push(v);
                    }
                }
            }
            aug.push(AugmentedLevel {
                inputs,
                n_obs,
                parent: Vec::new(),
            });
        }
        link_parents(&mut aug);
        Ok(Self { scaling, levels: aug })
    }

    /// Assemble a design from explicit normalized augmented sets
    /// `(inputs, n_obs)`; nesting is recorded, not enforced.
    pub fn from_parts(scaling: InputScaling<T>, parts: Vec<(Vec<Vec<T>>, usize)>) -> Result<Self> {
        if parts.is_empty() {
            return Err(Error::Validation("no fidelity levels supplied".into()));
        }
        let mut levels = Vec::with_capacity(parts.len());
        for (t, (inputs, n_obs)) in parts.into_iter().enumerate() {
            if n_obs > inputs.len() || inputs.iter().any(|r| r.len() != scaling.d()) {
                return Err(Error::Validation(format!("level {} is malformed", t + 1)));
            }
            levels.push(AugmentedLevel {
                inputs,
                n_obs,
                parent: Vec::new(),
            });
        }
        link_parents(&mut levels);
        Ok(Self { scaling, levels })
    }

    pub fn s(&self) -> usize {
        self.levels.len()
    }
    pub fn d(&self) -> usize {
        self.scaling.d()
    }
    pub fn scaling(&self) -> &InputScaling<T> {
        &self.scaling
    }

    fn lvl(&self, t: usize) -> &AugmentedLevel<T> {
        assert!(t >= 1 && t <= self.s(), "level {t} out of range 1..={}", self.s());
        &self.levels[t - 1]
    }

    /// `n_t`
    pub fn n_obs(&self, t: usize) -> usize {
        self.lvl(t).n_obs
    }
    /// `|missing set at t|`
    pub fn n_missing(&self, t: usize) -> usize {
        self.n_aug(t) - self.n_obs(t)
    }
    /// `ñ_t`
    pub fn n_aug(&self, t: usize) -> usize {
        self.lvl(t).inputs.len()
    }

    pub fn augmented_row(&self, t: usize, i: usize) -> &[T] {
        &self.lvl(t).inputs[i]
    }

    /// Augmented inputs at level `t` as an `ñ_t×d` matrix.
    pub fn augmented_inputs(&self, t: usize) -> DMatrix<T> {
        rows_to_matrix(&self.lvl(t).inputs, self.d())
    }

    pub fn observed_inputs(&self, t: usize) -> DMatrix<T> {
        let l = self.lvl(t);
        rows_to_matrix(&l.inputs[..l.n_obs], self.d())
    }

    pub fn missing_inputs(&self, t: usize) -> DMatrix<T> {
        let l = self.lvl(t);
        rows_to_matrix(&l.inputs[l.n_obs..], self.d())
    }

    /// Positions within level `t−1`'s augmented set of each augmented row at
    /// level `t ≥ 2`.
    pub fn parents(&self, t: usize) -> Result<Vec<usize>> {
        assert!(t >= 2, "level 1 has no parent level");
        self.lvl(t)
            .parent
            .iter()
            .enumerate()
            .map(|(i, p)| {
                p.ok_or_else(|| {
                    Error::Validation(format!(
                        "augmented row {i} at level {t} has no counterpart at level {}",
                        t - 1
                    ))
                })
            })
            .collect()
    }

    /// Position of a normalized point in level `t`'s augmented set.
    pub fn locate(&self, t: usize, x: &[T]) -> Option<usize> {
        self.lvl(t)
            .inputs
            .iter()
            .position(|u| same_input(u.iter().copied(), x.iter().copied()))
    }

    /// Add a new (raw-units) input to every level where it is not yet part of
    /// the augmented set.
    pub fn add_prediction_point(&self, x0: &[T]) -> Result<Self> {
        if x0.len() != self.d() || x0.iter().any(|v| !is_finite(*v)) {
            return Err(Error::Domain(format!(
                "prediction input must be a finite {}-vector",
                self.d()
            )));
        }
        let z = self.scaling.normalize_point(x0);
        Ok(self.add_normalized_point(&z))
    }

    pub(crate) fn add_normalized_point(&self, z: &[T]) -> Self {
        let mut levels = self.levels.clone();
        for l in &mut levels {
            if !l.inputs.iter().any(|u| same_input(u.iter().copied(), z.iter().copied())) {
                l.inputs.push(z.to_vec());
            }
        }
        link_parents(&mut levels);
        Self {
            scaling: self.scaling.clone(),
            levels,
        }
    }
}

fn rows_to_matrix<T: Real>(rows: &[Vec<T>], d: usize) -> DMatrix<T> {
    DMatrix::from_fn(rows.len(), d, |i, k| rows[i][k])
}

fn link_parents<T: Real>(levels: &mut [AugmentedLevel<T>]) {
    for t in 1..levels.len() {
        let (below, above) = levels.split_at_mut(t);
        let prev = &below[t - 1];
        let cur = &mut above[0];
        cur.parent = cur
            .inputs
            .iter()
            .map(|x| {
                prev.inputs
                    .iter()
                    .position(|u| same_input(u.iter().copied(), x.iter().copied()))
            })
            .collect();
    }
}

fn validate_levels<T: Real>(levels: &[FidelityData<T>]) -> Result<()> {
    let first = levels
        .first()
        .ok_or_else(|| Error::Validation("no fidelity levels supplied".into()))?;
    for (i, l) in levels.iter().enumerate() {
        if l.level() != i + 1 {
            return Err(Error::Validation(format!(
                "levels must be supplied lowest fidelity first; position {} holds level {}",
                i + 1,
                l.level()
            )));
        }
        if l.d() != first.d() {
            return Err(Error::Validation(format!(
                "level {} has {} inputs but level 1 has {}",
                l.level(),
                l.d(),
                first.d()
            )));
        }
        if l.n_outputs() != first.n_outputs() {
            return Err(Error::Validation(format!(
                "level {} has {} outputs but level 1 has {}",
                l.level(),
                l.n_outputs(),
                first.n_outputs()
            )));
        }
    }
    Ok(())
}

/// Check that every augmented input at level `t+1` appears at level `t`.
pub fn validate_nested<T: Real>(aug: &AugmentedDesign<T>) -> NestingReport {
    let mut violations = Vec::new();
    for t in 2..=aug.s() {
        let below = aug.augmented_inputs(t - 1);
        for i in 0..aug.n_aug(t) {
            if find_row(&below, aug.augmented_row(t, i)).is_none() {
                violations.push((t, i));
            }
        }
    }
    NestingReport {
        nested: violations.is_empty(),
        violations,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn level(t: usize, xs: &[f64]) -> FidelityData<f64> {
        let x = DMatrix::from_column_slice(xs.len(), 1, xs);
        let y = DMatrix::from_fn(xs.len(), 2, |i, j| xs[i] * (j + 1) as f64);
        FidelityData::new(t, x, y).unwrap()
    }

    // 0.1 grid on [-1, 1] without -0.2
    fn toy_low() -> Vec<f64> {
        (-10..=10).filter(|i| *i != -2).map(|i| i as f64 / 10.0).collect()
    }

    const TOY_HIGH: [f64; 10] = [-1.0, -0.8, -0.55, -0.4, -0.2, 0.0, 0.2, 0.4, 0.6, 1.0];

    #[test]
    fn nested_design_needs_no_augmentation() {
        let aug = build_augmentation(&[level(1, &[0.0, 0.25, 0.5, 0.75, 1.0]), level(2, &[0.25, 0.75])]).unwrap();
        assert_eq!(aug.n_missing(1), 0);
        assert_eq!(aug.n_missing(2), 0);
        assert_eq!(aug.n_aug(1), 5);
        assert_eq!(aug.augmented_inputs(2), aug.observed_inputs(2));
        assert_eq!(aug.parents(2).unwrap(), vec![1, 3]);
        assert!(validate_nested(&aug).nested);
    }

    #[test]
    fn toy_design_gains_two_missing_inputs() {
        let aug = build_augmentation(&[level(1, &toy_low()), level(2, &TOY_HIGH)]).unwrap();
        assert_eq!(aug.n_missing(1), 2);
        assert_eq!(aug.n_aug(1), 22);
        assert_eq!(aug.n_missing(2), 0);
        let miss = aug.missing_inputs(1);
        // normalized -0.55 and -0.2 on [-1, 1]
        assert!((miss[(0, 0)] - 0.225).abs() < 1e-12);
        assert!((miss[(1, 0)] - 0.4).abs() < 1e-12);
        assert!(validate_nested(&aug).nested);
    }

    #[test]
    fn storm_shaped_design() {
        // 200 level-1 inputs, 60 level-2 inputs of which 50 are nested
        let lo: Vec<f64> = (0..200).map(|i| i as f64).collect();
        let hi: Vec<f64> = (0..50).map(|i| (i * 4) as f64).chain((0..10).map(|i| 1000.0 + i as f64)).collect();
        let aug = build_augmentation(&[level(1, &lo), level(2, &hi)]).unwrap();
        assert_eq!(aug.n_missing(1), 10);
        assert_eq!(aug.n_aug(1), 210);
        assert_eq!(aug.n_missing(2), 0);
    }

    #[test]
    fn validation_errors() {
        let dup = level(1, &[0.0, 0.5, 0.5]);
        assert!(matches!(build_augmentation(&[dup]), Err(Error::Validation(_))));
        let a = level(1, &[0.0, 1.0, 2.0]);
        let b = FidelityData::new(2, DMatrix::from_element(1, 2, 0.0), DMatrix::from_element(1, 2, 0.0)).unwrap();
        assert!(build_augmentation(&[a.clone(), b]).is_err());
        let c = FidelityData::new(2, DMatrix::from_element(1, 1, 0.0), DMatrix::from_element(1, 3, 0.0)).unwrap();
        assert!(build_augmentation(&[a.clone(), c]).is_err());
        assert!(build_augmentation(&[level(2, &[0.0])]).is_err());
        assert!(FidelityData::new(1, DMatrix::from_element(3, 1, 0.0), DMatrix::<f64>::from_element(2, 1, 0.0)).is_err());
        assert!(FidelityData::new(1, DMatrix::from_element(1, 1, f64::NAN), DMatrix::<f64>::from_element(1, 1, 0.0)).is_err());
    }

    #[test]
    fn nesting_checks() {
        let single = build_augmentation(&[level(1, &[0.0, 1.0])]).unwrap();
        assert!(validate_nested(&single).nested);
        let orphan = AugmentedDesign::from_parts(
            InputScaling::identity(1),
            vec![(vec![vec![0.0], vec![0.5]], 2), (vec![vec![0.5], vec![0.9]], 2)],
        )
        .unwrap();
        let report = validate_nested(&orphan);
        assert!(!report.nested);
        assert_eq!(report.violations, vec![(2, 1)]);
        assert!(orphan.parents(2).is_err());
    }

    #[test]
    fn prediction_point_bookkeeping() {
        let aug = build_augmentation(&[level(1, &toy_low()), level(2, &TOY_HIGH)]).unwrap();
        // already observed at both levels
        assert_eq!(aug.add_prediction_point(&[0.2]).unwrap(), aug);
        let with = aug.add_prediction_point(&[0.5]).unwrap();
        // 0.5 is observed at level 1 (grid point) but new at level 2
        assert_eq!(with.n_aug(1), aug.n_aug(1));
        assert_eq!(with.n_aug(2), aug.n_aug(2) + 1);
        let z = aug.scaling().normalize_point(&[0.5]);
        assert_eq!(with.locate(1, &z), Some(14));
        assert_eq!(with.locate(2, &z), Some(10));
        assert!(validate_nested(&with).nested);
        let with = aug.add_prediction_point(&[0.53]).unwrap();
        assert_eq!(with.n_aug(1), aug.n_aug(1) + 1);
        assert_eq!(with.n_aug(2), aug.n_aug(2) + 1);
        let z = aug.scaling().normalize_point(&[0.53]);
        assert_eq!(with.locate(1, &z), Some(22));
        assert!(aug.add_prediction_point(&[f64::NAN]).is_err());
    }

    proptest! {
        #[test]
        fn augmentation_is_nested_and_maps_round_trip(
            lo in proptest::collection::btree_set(0u32..60, 3..15),
            hi in proptest::collection::btree_set(0u32..60, 2..8),
            top in proptest::collection::btree_set(0u32..60, 1..4),
            x0 in -2.0f64..2.0,
        ) {
            let to = |s: &std::collections::BTreeSet<u32>| s.iter().map(|v| *v as f64 / 59.0).collect::<Vec<_>>();
            let levels = vec![level(1, &to(&lo)), level(2, &to(&hi)), level(3, &to(&top))];
            let aug = build_augmentation(&levels).unwrap();
            prop_assert!(validate_nested(&aug).nested);
            prop_assert_eq!(aug.n_missing(3), 0);
            for t in 2..=3 {
                let parents = aug.parents(t).unwrap();
                for (i, p) in parents.iter().enumerate() {
                    prop_assert!(same_input(aug.augmented_row(t, i).iter().copied(), aug.augmented_row(t - 1, *p).iter().copied()));
                }
            }
            let with = aug.add_prediction_point(&[x0]).unwrap();
            prop_assert!(validate_nested(&with).nested);
        }

        #[test]
        fn nested_designs_are_left_unchanged(
            lo in proptest::collection::btree_set(0u32..40, 4..12),
        ) {
            let xs: Vec<f64> = lo.iter().map(|v| *v as f64).collect();
            let hi: Vec<f64> = xs.iter().step_by(2).copied().collect();
            let aug = build_augmentation(&[level(1, &xs), level(2, &hi)]).unwrap();
            let expect = aug.scaling().normalize(&DMatrix::from_column_slice(xs.len(), 1, &xs));
            prop_assert_eq!(aug.augmented_inputs(1), expect);
            prop_assert_eq!(aug.n_missing(1), 0);
        }
    }
}
