//! Floating-point scalar abstraction for the numeric core.

use ndarray::LinalgScalar;
use num_traits::{Float, FromPrimitive, NumAssignOps, NumCast};
use serde::de::DeserializeOwned;
use serde::Serialize;
use std::fmt::{Debug, Display};
use std::iter::Sum;

/// Scalar type used by the model, trainer, and evaluator.
///
/// Implemented for `f32` and `f64`. All random initialization is sampled in
/// `f64` and then narrowed, so the two precisions see the same value stream.
pub trait Scalar:
    Float
    + FromPrimitive
    + NumCast
    + NumAssignOps
    + LinalgScalar
    + Sum
    + Debug
    + Display
    + Default
    + Serialize
    + DeserializeOwned
    + Send
    + Sync
    + 'static
{
    /// Short name stored in checkpoints so a file cannot be reloaded at the
    /// wrong precision.
    const NAME: &'static str;

    /// Converts from `f64`, panicking only on values (NaN never appears in
    /// configuration constants) that cannot be represented at all.
    fn of(x: f64) -> Self {
        <Self as NumCast>::from(x).expect("f64 constant representable as scalar")
    }

    /// Widens to `f64` for reporting and cross-precision comparisons.
    fn as_f64(self) -> f64 {
        <f64 as NumCast>::from(self).expect("scalar representable as f64")
    }
}

impl Scalar for f32 {
    const NAME: &'static str = "f32";
}

impl Scalar for f64 {
    const NAME: &'static str = "f64";
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn conversions_round_trip() {
        assert_eq!(f32::of(0.5).as_f64(), 0.5);
        assert_eq!(f64::of(-3.25), -3.25);
        assert_eq!(f32::NAME, "f32");
        assert_eq!(f64::NAME, "f64");
    }

    #[test]
    fn narrowing_matches_f32_rounding() {
        let x = 0.1_f64;
        assert_eq!(f32::of(x), 0.1_f32);
    }
}
