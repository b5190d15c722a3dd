//! Parallel partial autoregressive cokriging.
//!
//! Multifidelity Gaussian-process emulation for simulators with many output
//! coordinates: per-level range parameters are shared by every coordinate,
//! non-nested designs are handled by imputing the missing lower-level runs,
//! and training uses Monte Carlo EM.
//!
//! Numeric code is generic over [`scalar::Real`]; the aliases below fix the
//! scalar to `f64`, which is what the file formats use.

// NaN must fail positivity checks, so `!(x > 0)` is deliberate
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

mod conditional;
pub mod design;
pub mod error;
pub mod gls;
pub mod io;
pub mod kernels;
pub mod mcem;
pub mod metrics;
pub mod predict;
pub mod priors;
mod rng;
pub mod scalar;
pub mod synth;

pub use error::{Error, Result};

pub type FidelityData = design::FidelityData<f64>;
pub type AugmentedDesign = design::AugmentedDesign<f64>;
pub type CorrelationParams = kernels::CorrelationParams<f64>;
pub type FittedEmulator = mcem::FittedEmulator<f64>;
pub type TrainingSet = mcem::TrainingSet<f64>;
pub type MissingDraws = mcem::MissingDraws<f64>;
pub type PredictiveSummary = predict::PredictiveSummary<f64>;
