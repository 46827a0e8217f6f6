//! Scalar abstraction: the numeric kernels are generic over `f32`/`f64`.
//!
//! On-disk containers always store 32-bit reals; in-memory computation may run
//! at either precision (gradient checks run the whole network in `f64`).

use std::fmt::{Debug, Display};
use std::iter::Sum;

/// Floating-point scalar usable throughout the pipeline.
pub trait Scalar:
    num_traits::Float
    + num_traits::FromPrimitive
    + num_traits::ToPrimitive
    + Debug
    + Display
    + Default
    + Sum
    + Send
    + Sync
    + 'static
{
    /// Lossless-enough conversion from `f64` (rounds to nearest for `f32`).
    fn from_f64_c(v: f64) -> Self {
        Self::from_f64(v).expect("finite f64 converts to any Scalar")
    }

    /// Widen to `f64` for accumulation.
    fn to_f64_c(self) -> f64 {
        self.to_f64().expect("Scalar converts to f64")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

/// Shorthand for pulling an `f64` constant into generic code.
#[inline]
pub fn sc<S: Scalar>(v: f64) -> S {
    S::from_f64_c(v)
}
