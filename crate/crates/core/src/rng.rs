//! Pre-split random streams.
//!
//! Every stochastic step draws from its own ChaCha stream keyed by the user
//! seed, a domain tag and two indices, so results do not depend on how work
//! is scheduled across threads.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{ChiSquared, Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::scalar::Real;

#[derive(Debug, Clone, Copy)]
#[repr(u64)]
pub enum Domain {
    MissingData = 1,
    Prediction = 2,
    Synthetic = 3,
}

pub fn stream_rng(seed: u64, domain: Domain, a: u64, b: u64) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&(domain as u64).to_le_bytes());
    key[16..24].copy_from_slice(&a.to_le_bytes());
    key[24..].copy_from_slice(&b.to_le_bytes());
    ChaCha8Rng::from_seed(key)
}

pub fn standard_normals<T: Real>(rng: &mut ChaCha8Rng, n: usize) -> nalgebra::DVector<T> {
    nalgebra::DVector::from_fn(n, |_, _| {
        let z: f64 = StandardNormal.sample(rng);
        T::from_f64_lossy(z)
    })
}

/// `sqrt(df / χ²_df)`, the mixing factor turning a Gaussian draw into a
/// Student-t draw.
pub fn t_mixing<T: Real>(rng: &mut ChaCha8Rng, df: f64) -> Result<T> {
    let chi = ChiSquared::new(df).map_err(|e| Error::DegreesOfFreedom(format!("{e} (df = {df})")))?;
    let c: f64 = chi.sample(rng);
    Ok(T::from_f64_lossy((df / c).sqrt()))
}
