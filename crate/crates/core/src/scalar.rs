//! Floating-point abstraction shared by every numeric module.

use nalgebra::RealField;
use num_traits::{FromPrimitive, ToPrimitive};

/// Real scalar the emulator can be instantiated over (`f32` or `f64`).
///
/// Everything the linear algebra needs comes from [`RealField`]; the
/// primitive conversions are used at the boundaries (random draws are
/// generated in `f64` and narrowed, reports are widened back to `f64`).
pub trait Real:
    RealField + Copy + FromPrimitive + ToPrimitive + Send + Sync + std::fmt::Debug + 'static
{
    /// Machine epsilon of the concrete type.
    fn eps() -> Self;

    fn from_f64_lossy(x: f64) -> Self;

    fn to_f64_lossy(self) -> f64;
}

impl Real for f64 {
    #[inline]
    fn eps() -> Self {
        f64::EPSILON
    }
    #[inline]
    fn from_f64_lossy(x: f64) -> Self {
        x
    }
    #[inline]
    fn to_f64_lossy(self) -> f64 {
        self
    }
}

impl Real for f32 {
    #[inline]
    fn eps() -> Self {
        f32::EPSILON
    }
    #[inline]
    fn from_f64_lossy(x: f64) -> Self {
        x as f32
    }
    #[inline]
    fn to_f64_lossy(self) -> f64 {
        self as f64
    }
}

/// Shorthand for a literal in the generic scalar type.
#[inline]
pub fn lit<T: Real>(x: f64) -> T {
    T::from_f64_lossy(x)
}

#[inline]
pub fn is_finite<T: Real>(x: T) -> bool {
    x.to_f64_lossy().is_finite()
}
