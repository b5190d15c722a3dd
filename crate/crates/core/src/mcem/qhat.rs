//! Monte Carlo Q-function of one level.
//!
//! Rows of the augmented design are reordered so that rows whose response
//! and regressor are fixed by the data come first. With the correlation
//! factor split as `[L11 0; L21 L22]`, whitening the fixed rows is shared by
//! every draw and each draw only pays for a triangular solve on the imputed
//! rows.

use nalgebra::DMatrix;
use rayon::prelude::*;

use super::data::{MissingDraws, TrainingSet};
use crate::error::{Error, Result};
use crate::gls::{chol_factor, TrendProjector, WhitenedColumn, WhitenedRegressor};
use crate::kernels::{corr_matrix_sym, CorrelationParams, Smoothness};
use crate::priors::{combine_terms, jr_log_prior, JrPriorConfig};
use crate::scalar::{lit, Real};

/// `Q̂_t(φ) = (1/M) Σ_k g_t(φ, ẙ^{[k]})` for one level and a fixed draw set.
#[derive(Debug, Clone)]
pub struct LevelObjective<T: Real> {
    level: usize,
    inputs: DMatrix<T>,
    h: DMatrix<T>,
    n_static: usize,
    y_static: DMatrix<T>,
    w_static: Option<DMatrix<T>>,
    /// Imputation-dependent rows per distinct draw.
    y_dyn: Vec<DMatrix<T>>,
    w_dyn: Option<Vec<DMatrix<T>>>,
    prior: JrPriorConfig<T>,
    nu: Smoothness,
    jitter: f64,
}

impl<T: Real> LevelObjective<T> {
    pub fn new(
        train: &TrainingSet<T>,
        t: usize,
        draws: &MissingDraws<T>,
        prior: JrPriorConfig<T>,
        nu: Smoothness,
        jitter: f64,
    ) -> Result<Self> {
        let design = train.design();
        let n_aug = design.n_aug(t);
        let q = train.q(t);
        if n_aug <= q {
            return Err(Error::DegreesOfFreedom(format!(
                "level {t}: {n_aug} augmented runs cannot support {q} regression coefficients"
            )));
        }
        let n_obs = design.n_obs(t);
        let parents = if t > 1 { Some(design.parents(t)?) } else { None };
        let n_below = if t > 1 { design.n_obs(t - 1) } else { 0 };
        let is_static =
            |i: usize| i < n_obs && parents.as_ref().is_none_or(|p| p[i] < n_below);
        let order: Vec<usize> = (0..n_aug)
            .filter(|&i| is_static(i))
            .chain((0..n_aug).filter(|&i| !is_static(i)))
            .collect();
        let n_static = (0..n_aug).filter(|&i| is_static(i)).count();
        let aug = design.augmented_inputs(t);
        let inputs = aug.select_rows(order.iter());
        let h = train.basis().eval(&inputs);

        // with nothing imputed every draw gives the same objective
        let n_draws = if n_static == n_aug { 1 } else { draws.len() };
        let permuted: Vec<(DMatrix<T>, Option<DMatrix<T>>)> = (0..n_draws)
            .map(|k| {
                let imp = draws.get(k);
                let y = train.augmented_outputs(t, imp).select_rows(order.iter());
                let w = if t > 1 {
                    Some(train.regressor(t, imp)?.select_rows(order.iter()))
                } else {
                    None
                };
                Ok((y, w))
            })
            .collect::<Result<_>>()?;
        let y_static = permuted[0].0.rows(0, n_static).into_owned();
        let w_static = permuted[0].1.as_ref().map(|w| w.rows(0, n_static).into_owned());
        let m_dyn = n_aug - n_static;
        let y_dyn = permuted.iter().map(|(y, _)| y.rows(n_static, m_dyn).into_owned()).collect();
        let w_dyn = (t > 1).then(|| {
            permuted
                .iter()
                .map(|(_, w)| w.as_ref().unwrap().rows(n_static, m_dyn).into_owned())
                .collect()
        });
        Ok(Self {
            level: t,
            inputs,
            h,
            n_static,
            y_static,
            w_static,
            y_dyn,
            w_dyn,
            prior,
            nu,
            jitter,
        })
    }

    /// Number of draws averaged (one when nothing at this level is imputed).
    pub fn n_draws(&self) -> usize {
        self.y_dyn.len()
    }

    /// `ñ_t − q_t`
    fn dof(&self) -> usize {
        self.inputs.nrows() - self.h.ncols() - usize::from(self.w_static.is_some())
    }

    /// Evaluate at log-ranges; `None` marks points where the objective is
    /// undefined (the optimizer treats them as infeasible).
    pub fn eval_log(&self, log_phi: &[f64]) -> Option<f64> {
        let lp: Vec<T> = log_phi.iter().map(|v| lit(*v)).collect();
        let phi = CorrelationParams::from_log(&lp, self.nu).ok()?;
        self.eval(&phi).ok().map(|v| v.to_f64_lossy())
    }

    pub fn eval(&self, phi: &CorrelationParams<T>) -> Result<T> {
        let t = self.level;
        let ns = self.n_static;
        let n = self.inputs.nrows();
        let md = n - ns;
        let r = corr_matrix_sym(&self.inputs, phi)?;
        let fac = chol_factor(&r, self.jitter).map_err(|e| e.with_level(t))?;
        let proj = TrendProjector::new(&fac, &self.h)?;
        let l = fac.l();
        let l11 = l.view((0, 0), (ns, ns));
        let l21 = l.view((ns, 0), (md, ns));
        let l22 = l.view((ns, ns), (md, md));
        let g1 = proj.g.rows(0, ns);
        let g2 = proj.g.rows(ns, md);
        let solve11 = |b: &DMatrix<T>| l11.solve_lower_triangular(b).expect("positive diagonal");
        let solve22 = |b: &DMatrix<T>| l22.solve_lower_triangular(b).expect("positive diagonal");

        let a1 = solve11(&self.y_static);
        let ay = l21 * &a1;
        let hy1 = g1.tr_mul(&a1);
        let yy1: Vec<T> = a1.column_iter().map(|c| c.norm_squared()).collect();
        let wstat = self.w_static.as_ref().map(|w| {
            let b1 = solve11(w);
            let aw = l21 * &b1;
            let hw1 = g1.tr_mul(&b1);
            let ww1: Vec<T> = b1.column_iter().map(|c| c.norm_squared()).collect();
            let yw1: Vec<T> = b1.column_iter().zip(a1.column_iter()).map(|(b, a)| b.dot(&a)).collect();
            (aw, hw1, ww1, yw1)
        });

        let log_prior = jr_log_prior(phi, &self.prior)?;
        let dof = self.dof();
        let n_out = self.y_static.ncols();
        let per_draw: Vec<T> = (0..self.n_draws())
            .into_par_iter()
            .map(|k| {
                let a2 = solve22(&(&self.y_dyn[k] - &ay));
                let b2 = match (&self.w_dyn, &wstat) {
                    (Some(wd), Some((aw, ..))) => Some(solve22(&(&wd[k] - aw))),
                    _ => None,
                };
                let mut logdets = Vec::with_capacity(n_out);
                let mut s2 = Vec::with_capacity(n_out);
                for j in 0..n_out {
                    let a2j = a2.column(j);
                    let col = WhitenedColumn {
                        yy: yy1[j] + a2j.norm_squared(),
                        hy: hy1.column(j) + g2.tr_mul(&a2j),
                        w: match (&b2, &wstat) {
                            (Some(b2), Some((_, hw1, ww1, yw1))) => {
                                let b2j = b2.column(j);
                                Some(WhitenedRegressor {
                                    ww: ww1[j] + b2j.norm_squared(),
                                    hw: hw1.column(j) + g2.tr_mul(&b2j),
                                    yw: yw1[j] + b2j.dot(&a2j),
                                })
                            }
                            _ => None,
                        },
                    };
                    let (ld, s) = proj.profile(&col, j)?;
                    logdets.push(ld);
                    s2.push(s);
                }
                combine_terms(log_prior, fac.logdet(), dof, &logdets, &s2)
            })
            .collect::<Result<_>>()?;
        let total = per_draw.iter().fold(T::zero(), |acc, g| acc + *g);
        Ok(total / lit(per_draw.len() as f64))
    }
}

/// Convenience wrapper: `Q̂_t(φ)` for one level and draw set.
pub fn q_hat<T: Real>(
    train: &TrainingSet<T>,
    t: usize,
    phi: &CorrelationParams<T>,
    draws: &MissingDraws<T>,
    prior: &JrPriorConfig<T>,
    jitter: f64,
) -> Result<T> {
    LevelObjective::new(train, t, draws, prior.clone(), phi.nu(), jitter)?.eval(phi)
}
