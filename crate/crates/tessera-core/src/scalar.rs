//! Scalar abstraction: the numeric core is generic over the element type so
//! the same code path runs in f32 for training and f64 for oracles and
//! gradient checks.

use std::fmt::{Debug, Display};

/// Element type for all tensor math. Implemented for `f32` and `f64` only;
/// reduced formats (fp16/bf16 ranges) are *emulated* on top of these, never
/// stored natively.
pub trait Scalar:
    num_traits::Float + num_traits::NumAssignOps + Debug + Display + Default + Send + Sync + 'static
{
    const BITS: u32;

    /// Plain `as`-style narrowing; keeps infinities and NaN intact.
    fn from_f64(v: f64) -> Self;

    fn to_f64_lossy(self) -> f64;
}

impl Scalar for f32 {
    const BITS: u32 = 32;

    fn from_f64(v: f64) -> Self {
        v as f32
    }

    fn to_f64_lossy(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    const BITS: u32 = 64;

    fn from_f64(v: f64) -> Self {
        v
    }

    fn to_f64_lossy(self) -> f64 {
        self
    }
}
