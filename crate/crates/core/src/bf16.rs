//! Software emulation of BF16 (1 sign, 8 exponent, 7 mantissa bits).
//!
//! All arithmetic rounds to nearest, ties to even. The datapath model never
//! produces NaN or infinity: results past the largest finite magnitude
//! saturate to `±MAX` and report a saturation flag. Subnormals are kept.
//!
//! Binary operations evaluate in `f64` and round once to BF16. For an
//! 8-bit-significand target, any intermediate precision of 18 or more bits
//! makes the second rounding innocuous, so the `f64` (53-bit) route returns
//! exactly the correctly rounded BF16 result for `+`, `-`, `*`, `/`, and
//! square root.

use serde::{Deserialize, Serialize};
use std::fmt;

/// BF16 value stored as its raw bit pattern.
#[derive(Copy, Clone, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub struct Bf16(u16);

impl Bf16 {
    pub const ZERO: Bf16 = Bf16(0x0000);
    pub const ONE: Bf16 = Bf16(0x3F80);
    /// Largest finite value, `2^127 * (2 - 2^-7)`.
    pub const MAX: Bf16 = Bf16(0x7F7F);
    /// Most negative finite value; doubles as the softmax mask.
    pub const NEG_MAX: Bf16 = Bf16(0xFF7F);
    /// Smallest positive normal value, `2^-126`.
    pub const MIN_POSITIVE: Bf16 = Bf16(0x0080);

    #[inline]
    pub const fn from_bits(bits: u16) -> Self {
        Bf16(bits)
    }

    #[inline]
    pub const fn to_bits(self) -> u16 {
        self.0
    }

    /// Exact widening to `f64` (BF16 is a prefix of the f32 encoding).
    #[inline]
    pub fn to_f64(self) -> f64 {
        f32::from_bits((self.0 as u32) << 16) as f64
    }

    /// Rounds to nearest-even, saturating past the finite range.
    ///
    /// Returns the rounded value and whether saturation occurred.
    pub fn from_f64_saturating(x: f64) -> (Self, bool) {
        debug_assert!(!x.is_nan(), "NaN entered the BF16 datapath");
        if x.is_nan() {
            return (Bf16::ZERO, false);
        }
        let as_f32 = x as f32;
        let bits = as_f32.to_bits();
        let round_bit = (bits >> 16) & 1;
        let rounded = bits.wrapping_add(0x7FFF + round_bit);
        let b16 = (rounded >> 16) as u16;
        if b16 & 0x7F80 == 0x7F80 {
            let sat = if b16 & 0x8000 != 0 { Bf16::NEG_MAX } else { Bf16::MAX };
            (sat, true)
        } else {
            (Bf16(b16), false)
        }
    }

    /// Rounds to nearest-even, saturating silently.
    #[inline]
    pub fn from_f64(x: f64) -> Self {
        Self::from_f64_saturating(x).0
    }

    #[inline]
    pub fn is_zero(self) -> bool {
        self.0 & 0x7FFF == 0
    }

    #[inline]
    pub fn is_sign_negative(self) -> bool {
        self.0 & 0x8000 != 0
    }

    #[inline]
    pub fn neg(self) -> Self {
        if self.is_zero() {
            Bf16::ZERO
        } else {
            Bf16(self.0 ^ 0x8000)
        }
    }

    #[inline]
    pub fn abs(self) -> Self {
        Bf16(self.0 & 0x7FFF)
    }

    pub fn max(self, other: Self) -> Self {
        if self.to_f64() >= other.to_f64() {
            self
        } else {
            other
        }
    }

    /// Distance in representable steps, treating the bit patterns as a
    /// sign-magnitude number line (`+0` and `-0` coincide).
    pub fn ulp_distance(self, other: Self) -> u32 {
        fn ordered(bits: u16) -> i32 {
            let mag = (bits & 0x7FFF) as i32;
            if bits & 0x8000 != 0 {
                -mag
            } else {
                mag
            }
        }
        (ordered(self.0) - ordered(other.0)).unsigned_abs()
    }
}

/// BF16 addition (round to nearest-even, saturating).
#[inline]
pub fn add(a: Bf16, b: Bf16) -> Bf16 {
    Bf16::from_f64(a.to_f64() + b.to_f64())
}

/// BF16 subtraction.
#[inline]
pub fn sub(a: Bf16, b: Bf16) -> Bf16 {
    Bf16::from_f64(a.to_f64() - b.to_f64())
}

/// BF16 multiplication.
#[inline]
pub fn mul(a: Bf16, b: Bf16) -> Bf16 {
    Bf16::from_f64(a.to_f64() * b.to_f64())
}

/// BF16 division.
#[inline]
pub fn div(a: Bf16, b: Bf16) -> Bf16 {
    Bf16::from_f64(a.to_f64() / b.to_f64())
}

/// BF16 square root.
#[inline]
pub fn sqrt(a: Bf16) -> Bf16 {
    Bf16::from_f64(a.to_f64().sqrt())
}

/// BF16 exponential, evaluated in `f64` and rounded once.
///
/// Deeply negative inputs (such as the softmax mask) flush to `+0`.
#[inline]
pub fn exp(a: Bf16) -> Bf16 {
    Bf16::from_f64(a.to_f64().exp())
}

impl fmt::Debug for Bf16 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Bf16({}, 0x{:04X})", self.to_f64(), self.0)
    }
}

impl fmt::Display for Bf16 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.to_f64())
    }
}

impl PartialOrd for Bf16 {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        self.to_f64().partial_cmp(&other.to_f64())
    }
}
