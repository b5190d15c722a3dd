//! Derivative-free maximization for the M-step.
//!
//! A Nelder–Mead simplex runs in log-range coordinates from a few
//! multiplicative restarts; the best vertex over all restarts wins.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    /// Objective evaluations allowed per restart.
    pub max_evals: usize,
    /// Restart points as componentwise multiples of the initial ranges.
    pub restart_factors: Vec<f64>,
    /// Edge length of the initial simplex, in log coordinates.
    pub initial_step: f64,
    /// Stop once the simplex diameter falls below this.
    pub xtol: f64,
    /// Relative spread of vertex values accepted as flat.
    pub ftol: f64,
    /// Box on log-ranges; points outside are infeasible.
    pub log_bounds: (f64, f64),
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            max_evals: 500,
            restart_factors: vec![1.0, 0.2, 5.0],
            initial_step: 0.5,
            xtol: 1e-9,
            ftol: 1e-14,
            log_bounds: (-(1e4f64.ln()), 1e4f64.ln()),
        }
    }
}

/// Result of a maximization.
#[derive(Debug, Clone, PartialEq)]
pub struct Maximum {
    pub x: Vec<f64>,
    pub value: f64,
    pub evaluations: usize,
}

struct Counted<'a, F> {
    f: &'a F,
    bounds: (f64, f64),
    evals: usize,
}

impl<F: Fn(&[f64]) -> Option<f64>> Counted<'_, F> {
    fn eval(&mut self, x: &[f64]) -> f64 {
        self.evals += 1;
        if x.iter().any(|v| !v.is_finite() || *v < self.bounds.0 || *v > self.bounds.1) {
            return f64::NEG_INFINITY;
        }
        match (self.f)(x) {
            Some(v) if v.is_finite() => v,
            _ => f64::NEG_INFINITY,
        }
    }
}

/// Maximize `f` with a Nelder–Mead simplex started at `x0`. `f` returns
/// `None` where it cannot be evaluated; such points are treated as worst.
pub fn nelder_mead<F>(f: &F, x0: &[f64], cfg: &OptimizerConfig) -> Maximum
where
    F: Fn(&[f64]) -> Option<f64>,
{
    let n = x0.len();
    let mut obj = Counted {
        f,
        bounds: cfg.log_bounds,
        evals: 0,
    };
    let mut simplex: Vec<(Vec<f64>, f64)> = Vec::with_capacity(n + 1);
    let v0 = obj.eval(x0);
    simplex.push((x0.to_vec(), v0));
    for i in 0..n {
        let mut x = x0.to_vec();
        x[i] += cfg.initial_step;
        let v = obj.eval(&x);
        simplex.push((x, v));
    }
    let (alpha, gamma, rho, sigma) = (1.0, 2.0, 0.5, 0.5);
    loop {
        // best first; ties keep insertion order
        simplex.sort_by(|a, b| b.1.total_cmp(&a.1));
        let best = simplex[0].1;
        let worst = simplex[n].1;
        let diameter = simplex[1..]
            .iter()
            .map(|(x, _)| x.iter().zip(&simplex[0].0).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max))
            .fold(0.0, f64::max);
        let flat = best.is_finite() && worst.is_finite() && (best - worst).abs() <= cfg.ftol * (1.0 + best.abs());
        if obj.evals >= cfg.max_evals || diameter <= cfg.xtol || (flat && diameter <= cfg.xtol.sqrt()) {
            break;
        }
        let centroid: Vec<f64> = (0..n)
            .map(|k| simplex[..n].iter().map(|(x, _)| x[k]).sum::<f64>() / n as f64)
            .collect();
        let along = |t: f64| -> Vec<f64> {
            centroid
                .iter()
                .zip(&simplex[n].0)
                .map(|(c, w)| c + t * (c - w))
                .collect()
        };
        let xr = along(alpha);
        let vr = obj.eval(&xr);
        if vr > simplex[0].1 {
            let xe = along(gamma);
            let ve = obj.eval(&xe);
            simplex[n] = if ve > vr { (xe, ve) } else { (xr, vr) };
            continue;
        }
        if vr > simplex[n - 1].1 {
            simplex[n] = (xr, vr);
            continue;
        }
        let (xc, vc) = if vr > simplex[n].1 {
            let xc = along(alpha * rho);
            let vc = obj.eval(&xc);
            (xc, vc)
        } else {
            let xc = along(-rho);
            let vc = obj.eval(&xc);
            (xc, vc)
        };
        if vc > vr.max(simplex[n].1) {
            simplex[n] = (xc, vc);
            continue;
        }
        let x_best = simplex[0].0.clone();
        for vertex in simplex.iter_mut().skip(1) {
            let x: Vec<f64> = x_best
                .iter()
                .zip(&vertex.0)
                .map(|(b, v)| b + sigma * (v - b))
                .collect();
            let v = obj.eval(&x);
            *vertex = (x, v);
        }
    }
    simplex.sort_by(|a, b| b.1.total_cmp(&a.1));
    let (x, value) = simplex.swap_remove(0);
    Maximum {
        x,
        value,
        evaluations: obj.evals,
    }
}

/// Maximize over log-ranges from every configured restart and return the
/// best point; never worse than `init`.
pub fn m_step<F>(f: &F, init: &[f64], cfg: &OptimizerConfig) -> Result<Maximum>
where
    F: Fn(&[f64]) -> Option<f64> + Sync,
{
    let init_value = f(init).filter(|v| v.is_finite());
    let mut best = Maximum {
        x: init.to_vec(),
        value: init_value.unwrap_or(f64::NEG_INFINITY),
        evaluations: 1,
    };
    let mut total = 1;
    for factor in &cfg.restart_factors {
        let start: Vec<f64> = init.iter().map(|l| l + factor.ln()).collect();
        let run = nelder_mead(f, &start, cfg);
        total += run.evaluations;
        if run.value > best.value {
            best = run;
        }
    }
    best.evaluations = total;
    if !best.value.is_finite() {
        return Err(Error::Optimization(format!(
            "no restart produced a finite objective ({} evaluations, start {:?})",
            total, init
        )));
    }
    Ok(best)
}
