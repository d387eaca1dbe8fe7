use std::fmt::{Debug, Display};
use std::iter::Sum;

use ndarray::{LinalgScalar, ScalarOperand};
use num_traits::{Float, FromPrimitive, NumAssign, ToPrimitive};

/// Floating-point element type for networks, distributions and optimizers.
///
/// Implemented for `f32` and `f64`. Everything that trains in this crate runs
/// in `f64`; `f32` is used for the on-disk dataset representation and is
/// supported by the numeric layer for completeness.
pub trait Scalar:
    Float
    + NumAssign
    + FromPrimitive
    + ToPrimitive
    + LinalgScalar
    + ScalarOperand
    + Sum
    + Debug
    + Display
    + Default
    + Send
    + Sync
    + 'static
{
    /// Lossy conversion from an `f64` literal.
    #[inline]
    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("f64 literal representable")
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self.to_f64().expect("scalar representable as f64")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

/// `½·ln(2π)`
pub fn half_ln_two_pi<T: Scalar>() -> T {
    T::lit(0.5 * (2.0 * std::f64::consts::PI).ln())
}
