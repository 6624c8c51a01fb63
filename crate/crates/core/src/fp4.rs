//! The 4-bit private element format (1 sign, 2 exponent, 1 mantissa) and the
//! 8-bit shared power-of-two scale.
//!
//! Element codes decode to `{±0, ±0.5, ±1, ±1.5, ±2, ±3, ±4, ±6}`. Encoding
//! rounds to the nearest representable magnitude with ties to the even
//! mantissa bit, saturates past `±6`, and canonicalizes `-0` to `+0`.

use crate::real::Scalar;
use serde::{Deserialize, Serialize};
use std::fmt;

/// Decoded magnitudes indexed by the low three code bits.
const MAGNITUDES: [f64; 8] = [0.0, 0.5, 1.0, 1.5, 2.0, 3.0, 4.0, 6.0];

/// A 4-bit element code: sign in bit 3, exponent in bits 2..1, mantissa in
/// bit 0.
#[derive(Copy, Clone, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub struct Fp4Code(u8);

impl Fp4Code {
    pub const ZERO: Fp4Code = Fp4Code(0x0);
    pub const MAX: Fp4Code = Fp4Code(0x7);
    pub const NEG_MAX: Fp4Code = Fp4Code(0xF);

    /// Wraps a raw 4-bit code (upper bits are masked off).
    #[inline]
    pub const fn from_bits(bits: u8) -> Self {
        Fp4Code(bits & 0xF)
    }

    #[inline]
    pub const fn to_bits(self) -> u8 {
        self.0
    }

    #[inline]
    pub const fn sign_bit(self) -> bool {
        self.0 & 0x8 != 0
    }

    /// The three magnitude bits (exponent and mantissa).
    #[inline]
    pub const fn magnitude_bits(self) -> u8 {
        self.0 & 0x7
    }

    #[inline]
    pub const fn is_zero(self) -> bool {
        self.0 & 0x7 == 0
    }

    /// The negative-zero pattern, which never leaves the encoder.
    #[inline]
    pub const fn is_negative_zero(self) -> bool {
        self.0 == 0x8
    }

    /// Decoded real value.
    #[inline]
    pub fn decode(self) -> f64 {
        let mag = MAGNITUDES[self.magnitude_bits() as usize];
        if self.sign_bit() {
            -mag
        } else {
            mag
        }
    }

    /// Decoded value scaled by two; always an integer in `[-12, 12]`.
    #[inline]
    pub fn doubled(self) -> i32 {
        let mag = [0, 1, 2, 3, 4, 6, 8, 12][self.magnitude_bits() as usize];
        if self.sign_bit() {
            -mag
        } else {
            mag
        }
    }

    /// Encodes a real value: nearest magnitude, ties to the even mantissa
    /// bit, saturation at `±6`, and `-0` canonicalized to `+0`.
    pub fn encode<F: Scalar>(x: F) -> Self {
        Self::encode_saturating(x).0
    }

    /// Like [`Fp4Code::encode`], also reporting whether the magnitude was
    /// clamped from beyond `±6`.
    pub fn encode_saturating<F: Scalar>(x: F) -> (Self, bool) {
        let v = x.to_wide();
        debug_assert!(!v.is_nan(), "NaN entered the element encoder");
        let mag = v.abs();
        if mag > 6.0 {
            let code = if v < 0.0 { Fp4Code::NEG_MAX } else { Fp4Code::MAX };
            return (code, true);
        }
        let mut best = 0u8;
        let mut best_err = f64::INFINITY;
        for (bits, m) in MAGNITUDES.iter().enumerate() {
            let err = (mag - m).abs();
            if err < best_err {
                best_err = err;
                best = bits as u8;
            } else if err == best_err && bits as u8 & 1 == 0 {
                best = bits as u8;
            }
        }
        if best == 0 {
            return (Fp4Code::ZERO, false);
        }
        let sign = if v < 0.0 { 0x8 } else { 0x0 };
        (Fp4Code(sign | best), false)
    }

    /// All sixteen code points.
    pub fn all() -> impl Iterator<Item = Fp4Code> {
        (0u8..16).map(Fp4Code)
    }
}

impl fmt::Debug for Fp4Code {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Fp4Code(0b{:04b}, {})", self.0, self.decode())
    }
}

/// The shared block scale: an 8-bit exponent-only code with value
/// `2^(code - 127)`. Codes are plain exponents with no reserved patterns.
#[derive(Copy, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct E8m0Scale(u8);

impl E8m0Scale {
    /// The identity scale `2^0`.
    pub const UNIT: E8m0Scale = E8m0Scale(127);

    #[inline]
    pub const fn from_bits(bits: u8) -> Self {
        E8m0Scale(bits)
    }

    #[inline]
    pub const fn to_bits(self) -> u8 {
        self.0
    }

    /// Unbiased exponent in `[-127, 128]`.
    #[inline]
    pub const fn exponent(self) -> i32 {
        self.0 as i32 - 127
    }

    /// Builds the scale closest to `2^e`, clamping to the representable
    /// exponent range.
    #[inline]
    pub fn from_exponent(e: i32) -> Self {
        E8m0Scale((e.clamp(-127, 128) + 127) as u8)
    }

    /// Scale value as a real number (exact in `f64` across the full range).
    #[inline]
    pub fn to_f64(self) -> f64 {
        pow2(self.exponent())
    }
}

impl fmt::Debug for E8m0Scale {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "E8m0Scale(2^{})", self.exponent())
    }
}

/// `2^e` for any exponent representable by the scale format.
#[inline]
pub fn pow2(e: i32) -> f64 {
    debug_assert!((-1022..=1023).contains(&e));
    f64::from_bits(((e + 1023) as u64) << 52)
}

/// `2^e` tolerating exponents outside the f64 normal range (flushing to 0
/// or infinity, which the simulator never reaches in practice).
#[inline]
pub fn pow2_wide(e: i32) -> f64 {
    if (-1022..=1023).contains(&e) {
        pow2(e)
    } else if e < -1022 {
        0.0
    } else {
        f64::INFINITY
    }
}

/// `floor(log2(|x|))` for finite nonzero `x`, computed from the bit pattern.
pub fn floor_log2(x: f64) -> i32 {
    debug_assert!(x.is_finite() && x != 0.0);
    let bits = x.to_bits();
    let exp_field = ((bits >> 52) & 0x7FF) as i32;
    if exp_field != 0 {
        exp_field - 1023
    } else {
        // Subnormal: the leading mantissa bit sets the binade.
        let mant = bits & 0xF_FFFF_FFFF_FFFF;
        -1023 - (mant.leading_zeros() as i32 - 11)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn decode_table_is_exhaustive() {
        let expected: [(u8, f64); 16] = [
            (0b0000, 0.0),
            (0b0001, 0.5),
            (0b0010, 1.0),
            (0b0011, 1.5),
            (0b0100, 2.0),
            (0b0101, 3.0),
            (0b0110, 4.0),
            (0b0111, 6.0),
            (0b1000, -0.0),
            (0b1001, -0.5),
            (0b1010, -1.0),
            (0b1011, -1.5),
            (0b1100, -2.0),
            (0b1101, -3.0),
            (0b1110, -4.0),
            (0b1111, -6.0),
        ];
        for (bits, value) in expected {
            assert_eq!(Fp4Code::from_bits(bits).decode(), value, "bits {bits:04b}");
        }
    }

    #[test]
    fn encode_round_trips_every_code() {
        for code in Fp4Code::all() {
            let back = Fp4Code::encode(code.decode());
            if code.is_negative_zero() {
                assert_eq!(back, Fp4Code::ZERO);
            } else {
                assert_eq!(back, code, "{code:?}");
            }
        }
    }

    #[test]
    fn ties_go_to_even_mantissa() {
        assert_eq!(Fp4Code::encode(1.25).decode(), 1.0);
        assert_eq!(Fp4Code::encode(0.25).decode(), 0.0);
        assert_eq!(Fp4Code::encode(0.75).decode(), 1.0);
        assert_eq!(Fp4Code::encode(1.75).decode(), 2.0);
        assert_eq!(Fp4Code::encode(2.5).decode(), 2.0);
        assert_eq!(Fp4Code::encode(3.5).decode(), 4.0);
        assert_eq!(Fp4Code::encode(5.0).decode(), 4.0);
        assert_eq!(Fp4Code::encode(-1.25).decode(), -1.0);
        assert_eq!(Fp4Code::encode(-5.0).decode(), -4.0);
    }

    #[test]
    fn saturation_clamps_past_six() {
        let (code, sat) = Fp4Code::encode_saturating(6.5);
        assert_eq!(code, Fp4Code::MAX);
        assert!(sat);
        let (code, sat) = Fp4Code::encode_saturating(-100.0);
        assert_eq!(code, Fp4Code::NEG_MAX);
        assert!(sat);
        let (_, sat) = Fp4Code::encode_saturating(6.0);
        assert!(!sat);
    }

    #[test]
    fn negative_zero_is_canonicalized() {
        assert_eq!(Fp4Code::encode(-0.0), Fp4Code::ZERO);
        assert_eq!(Fp4Code::encode(-0.1), Fp4Code::ZERO);
    }

    #[test]
    fn doubled_codes_are_exact_integers() {
        for code in Fp4Code::all() {
            assert_eq!(code.doubled() as f64, 2.0 * code.decode());
        }
    }

    #[test]
    fn scale_covers_full_exponent_range() {
        assert_eq!(E8m0Scale::from_bits(0).exponent(), -127);
        assert_eq!(E8m0Scale::from_bits(255).exponent(), 128);
        assert_eq!(E8m0Scale::UNIT.to_f64(), 1.0);
        assert_eq!(E8m0Scale::from_bits(131).to_f64(), 16.0);
        assert_eq!(E8m0Scale::from_exponent(4).to_bits(), 131);
        assert_eq!(E8m0Scale::from_exponent(-500).exponent(), -127);
        assert_eq!(E8m0Scale::from_exponent(500).exponent(), 128);
    }

    #[test]
    fn scale_values_are_exact_in_f64() {
        assert_eq!(E8m0Scale::from_bits(255).to_f64(), 2.0f64.powi(128));
        assert_eq!(E8m0Scale::from_bits(0).to_f64(), 2.0f64.powi(-127));
    }

    #[test]
    fn floor_log2_matches_binades() {
        assert_eq!(floor_log2(1.0), 0);
        assert_eq!(floor_log2(96.0), 6);
        assert_eq!(floor_log2(0.5), -1);
        assert_eq!(floor_log2(0.75), -1);
        assert_eq!(floor_log2(1.75), 0);
        assert_eq!(floor_log2(2.0f64.powi(-130)), -130);
        assert_eq!(floor_log2(-8.0), 3);
        assert_eq!(floor_log2(6.0 * 2.0f64.powi(128)), 130);
    }
}
