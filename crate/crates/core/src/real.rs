//! Scalar abstraction for the real-valued (non-bit-exact) arithmetic paths.
//!
//! Quantizers, dequantizers, reference GEMMs, and error metrics are generic
//! over [`Scalar`] so they can run in `f32` or `f64`. The crate-root alias
//! [`crate::Real`] pins the default to `f64`: every scale factor the
//! simulator produces (down to `2^-254` element values) is exact in `f64`,
//! while `f32` saturates near the extremes of the shared-exponent range.

use num_traits::{Float, FromPrimitive, ToPrimitive};
use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::AddAssign;

/// Floating-point scalar usable in the real-valued simulator paths.
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + AddAssign + Sum + Debug + Display + Default + 'static
{
    /// Exact widening conversion to `f64`.
    fn to_wide(self) -> f64 {
        self.to_f64().expect("finite scalar")
    }

    /// Conversion from `f64`, rounding to the scalar's precision.
    fn from_wide(x: f64) -> Self {
        Self::from_f64(x).expect("finite scalar")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

#[cfg(test)]
mod tests {
    use super::*;

    fn sum_of_squares<F: Scalar>(xs: &[F]) -> F {
        xs.iter().map(|x| *x * *x).sum()
    }

    #[test]
    fn generic_math_matches_in_both_widths() {
        let a32 = sum_of_squares::<f32>(&[1.0, 2.0, 3.0]);
        let a64 = sum_of_squares::<f64>(&[1.0, 2.0, 3.0]);
        assert_eq!(a32, 14.0);
        assert_eq!(a64, 14.0);
    }

    #[test]
    fn wide_round_trip_is_exact_for_f32() {
        let x = 1.5f32;
        assert_eq!(f32::from_wide(x.to_wide()), x);
    }
}
