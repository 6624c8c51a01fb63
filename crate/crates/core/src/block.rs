//! A quantized block: 32 private 4-bit elements sharing one 8-bit
//! power-of-two scale.
//!
//! The scale rule places the block maximum in `[4, 8)` scale units:
//! `scale_exponent = floor(log2 max|v|) - 2`. All-zero blocks take the unit
//! scale. Two element conversion paths exist and call sites name which they
//! use:
//!
//! * [`MxBlock::quantize`]: round to nearest, ties to even mantissa. Used
//!   for real-valued sources (weights, file ingestion, ADC outputs).
//! * [`MxBlock::from_bf16_truncate`]: the hardware quantizer, which keeps
//!   the sign and exponent fields and truncates the BF16 mantissa to the
//!   single private mantissa bit. Used wherever BF16 units feed a quantizer.

use crate::bf16::Bf16;
use crate::fp4::{floor_log2, pow2, E8m0Scale, Fp4Code};
use crate::real::Scalar;
use serde::{Deserialize, Serialize};

/// Number of elements sharing one scale.
pub const BLOCK_SIZE: usize = 32;

/// A 32-element block of 4-bit codes with a shared power-of-two scale.
#[derive(Copy, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MxBlock {
    pub elements: [Fp4Code; BLOCK_SIZE],
    pub scale: E8m0Scale,
}

impl Default for MxBlock {
    fn default() -> Self {
        MxBlock { elements: [Fp4Code::ZERO; BLOCK_SIZE], scale: E8m0Scale::UNIT }
    }
}

impl std::fmt::Debug for MxBlock {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "MxBlock(2^{} x {:?})", self.scale.exponent(), self.dequantize::<f64>())
    }
}

impl MxBlock {
    /// Shared scale exponent for a slice of values: `floor(log2 max) - 2`,
    /// clamped to the representable scale range. All-zero input yields 0.
    pub fn scale_exponent_for<F: Scalar>(values: &[F]) -> i32 {
        let mut max = 0.0f64;
        for v in values {
            let m = v.to_wide().abs();
            if m > max {
                max = m;
            }
        }
        if max == 0.0 {
            0
        } else {
            (floor_log2(max) - 2).clamp(-127, 128)
        }
    }

    /// Quantizes up to 32 values (shorter slices are zero-padded), rounding
    /// elements to nearest with ties to even mantissa.
    pub fn quantize<F: Scalar>(values: &[F]) -> Self {
        Self::quantize_saturating(values).0
    }

    /// Like [`MxBlock::quantize`], also counting elements clamped at `±6`.
    pub fn quantize_saturating<F: Scalar>(values: &[F]) -> (Self, u32) {
        assert!(values.len() <= BLOCK_SIZE, "block holds at most {BLOCK_SIZE} values");
        let e = Self::scale_exponent_for(values);
        let inv = pow2(-e);
        let mut elements = [Fp4Code::ZERO; BLOCK_SIZE];
        let mut saturated = 0;
        for (slot, v) in elements.iter_mut().zip(values.iter()) {
            let (code, sat) = Fp4Code::encode_saturating(v.to_wide() * inv);
            *slot = code;
            saturated += sat as u32;
        }
        (MxBlock { elements, scale: E8m0Scale::from_exponent(e) }, saturated)
    }

    /// Decoded real values of all 32 element slots.
    pub fn dequantize<F: Scalar>(&self) -> [F; BLOCK_SIZE] {
        let s = self.scale.to_f64();
        let mut out = [F::zero(); BLOCK_SIZE];
        for (o, code) in out.iter_mut().zip(self.elements.iter()) {
            *o = F::from_wide(code.decode() * s);
        }
        out
    }

    /// Decoded value of one element slot.
    #[inline]
    pub fn dequantize_element(&self, idx: usize) -> f64 {
        self.elements[idx].decode() * self.scale.to_f64()
    }

    /// Converts every element to BF16 by field transfer: the BF16 exponent
    /// is the sum of the element and scale exponents, and the private
    /// mantissa bit becomes the top BF16 mantissa bit. Values past the BF16
    /// range saturate; the flag reports whether any did.
    pub fn to_bf16(&self) -> ([Bf16; BLOCK_SIZE], bool) {
        let mut out = [Bf16::ZERO; BLOCK_SIZE];
        let mut saturated = false;
        for (o, code) in out.iter_mut().zip(self.elements.iter()) {
            let (v, sat) = element_to_bf16(*code, self.scale);
            *o = v;
            saturated |= sat;
        }
        (out, saturated)
    }

    /// Builds a block from BF16 values via the truncating hardware path:
    /// the block scale follows the usual maximum rule, then each element
    /// keeps its exponent and truncates the mantissa (round toward zero on
    /// the element grid). Magnitudes below half the smallest step flush to
    /// `+0`.
    pub fn from_bf16_truncate(values: &[Bf16]) -> Self {
        assert!(values.len() <= BLOCK_SIZE, "block holds at most {BLOCK_SIZE} values");
        let reals: Vec<f64> = values.iter().map(|v| v.to_f64()).collect();
        let e = Self::scale_exponent_for(&reals);
        let inv = pow2(-e);
        let mut elements = [Fp4Code::ZERO; BLOCK_SIZE];
        for (slot, v) in elements.iter_mut().zip(reals.iter()) {
            *slot = truncate_to_grid(v * inv);
        }
        MxBlock { elements, scale: E8m0Scale::from_exponent(e) }
    }

    /// True when the block is in encoder-canonical form: no negative zero,
    /// and either all elements are zero with a unit scale or the largest
    /// magnitude is at least 4 scale units.
    pub fn is_canonical(&self) -> bool {
        if self.elements.iter().any(|c| c.is_negative_zero()) {
            return false;
        }
        let max_mag = self
            .elements
            .iter()
            .map(|c| c.decode().abs())
            .fold(0.0f64, f64::max);
        if max_mag == 0.0 {
            self.scale == E8m0Scale::UNIT
        } else {
            max_mag >= 4.0
        }
    }

    /// Packs the 32 element codes into 16 bytes, element `2i` in the low
    /// nibble and `2i+1` in the high nibble of byte `i`.
    pub fn packed_elements(&self) -> [u8; 16] {
        let mut bytes = [0u8; 16];
        for (i, byte) in bytes.iter_mut().enumerate() {
            let lo = self.elements[2 * i].to_bits();
            let hi = self.elements[2 * i + 1].to_bits();
            *byte = lo | (hi << 4);
        }
        bytes
    }

    /// Inverse of [`MxBlock::packed_elements`].
    pub fn from_packed(bytes: &[u8; 16], scale: E8m0Scale) -> Self {
        let mut elements = [Fp4Code::ZERO; BLOCK_SIZE];
        for (i, byte) in bytes.iter().enumerate() {
            elements[2 * i] = Fp4Code::from_bits(byte & 0xF);
            elements[2 * i + 1] = Fp4Code::from_bits(byte >> 4);
        }
        MxBlock { elements, scale }
    }
}

/// One element through the field-transfer conversion to BF16.
///
/// For a normal element (exponent field >= 1) the BF16 exponent field is
/// `scale_code + element_exponent - 1` and the mantissa bit lands in the top
/// BF16 mantissa position. The subnormal element (`0.5`) and results below
/// the BF16 normal range fall through to exact value construction, which
/// realizes the same bit pattern.
pub fn element_to_bf16(code: Fp4Code, scale: E8m0Scale) -> (Bf16, bool) {
    if code.is_zero() {
        return (Bf16::ZERO, false);
    }
    let sign = (code.sign_bit() as u16) << 15;
    let e_p = (code.magnitude_bits() >> 1) as i32;
    let m_p = (code.magnitude_bits() & 1) as u16;
    if e_p >= 1 {
        let e_bf = scale.to_bits() as i32 + e_p - 1;
        if (1..=254).contains(&e_bf) {
            return (Bf16::from_bits(sign | ((e_bf as u16) << 7) | (m_p << 6)), false);
        }
        if e_bf > 254 {
            let sat = if code.sign_bit() { Bf16::NEG_MAX } else { Bf16::MAX };
            return (sat, true);
        }
    }
    // Subnormal element or subnormal BF16 result: build the exact value.
    // The product of a half-integer magnitude and a power of two is exact
    // in f64 across the entire scale range.
    Bf16::from_f64_saturating(code.decode() * scale.to_f64())
}

/// Truncates a magnitude in scale units onto the element grid (round toward
/// zero), saturating at `±6` for out-of-binade inputs.
fn truncate_to_grid(u: f64) -> Fp4Code {
    let mag = u.abs();
    let truncated = if mag >= 8.0 {
        6.0 // unreachable under the block scale rule; kept for safety
    } else if mag >= 6.0 {
        6.0
    } else if mag >= 4.0 {
        4.0
    } else if mag >= 3.0 {
        3.0
    } else if mag >= 2.0 {
        2.0
    } else if mag >= 1.5 {
        1.5
    } else if mag >= 1.0 {
        1.0
    } else if mag >= 0.5 {
        0.5
    } else {
        return Fp4Code::ZERO;
    };
    let signed = if u < 0.0 { -truncated } else { truncated };
    Fp4Code::encode(signed)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scale_rule_places_max_in_top_binade() {
        let mut v = [0.0f64; 32];
        v[0] = 96.0;
        let block = MxBlock::quantize(&v);
        assert_eq!(block.scale.exponent(), 4);
        assert_eq!(block.elements[0].decode(), 6.0);
        assert_eq!(block.dequantize_element(0), 96.0);
    }

    #[test]
    fn all_ones_block_uses_quarter_scale() {
        let v = [1.0f64; 32];
        let block = MxBlock::quantize(&v);
        assert_eq!(block.scale.exponent(), -2);
        for e in block.elements {
            assert_eq!(e.decode(), 4.0);
        }
        for d in block.dequantize::<f64>() {
            assert_eq!(d, 1.0);
        }
    }

    #[test]
    fn all_zero_block_takes_unit_scale() {
        let block = MxBlock::quantize(&[0.0f64; 32]);
        assert_eq!(block.scale, E8m0Scale::UNIT);
        assert!(block.elements.iter().all(|e| *e == Fp4Code::ZERO));
        assert!(block.is_canonical());
    }

    #[test]
    fn short_slices_are_zero_padded() {
        let block = MxBlock::quantize(&[2.0f64, -2.0]);
        assert_eq!(block.dequantize_element(0), 2.0);
        assert_eq!(block.dequantize_element(1), -2.0);
        for i in 2..BLOCK_SIZE {
            assert_eq!(block.dequantize_element(i), 0.0);
        }
    }

    #[test]
    fn requantizing_dequantized_blocks_is_identity_without_saturation() {
        // Every canonical block survives a dequantize/quantize round trip.
        let mut v = [0.0f64; 32];
        v[0] = 6.0 * 2.0f64.powi(20);
        v[1] = 0.5 * 2.0f64.powi(20);
        v[2] = -4.0 * 2.0f64.powi(20);
        let block = MxBlock::quantize(&v);
        let (again, sats) = MxBlock::quantize_saturating(&block.dequantize::<f64>());
        assert_eq!(again, block);
        assert_eq!(sats, 0);
    }

    #[test]
    fn max_scale_blocks_decode_exactly_in_f64() {
        let mut v = [0.0f64; 32];
        v[0] = 6.0 * 2.0f64.powi(128);
        let block = MxBlock::quantize(&v);
        assert_eq!(block.scale.exponent(), 128);
        assert_eq!(block.dequantize_element(0), v[0]);
    }

    #[test]
    fn field_transfer_matches_exact_values_for_all_codes_and_scales() {
        for scale_bits in 0..=255u8 {
            let scale = E8m0Scale::from_bits(scale_bits);
            for code in Fp4Code::all() {
                let (got, sat) = element_to_bf16(code, scale);
                let exact = code.decode() * scale.to_f64();
                let (want, want_sat) = Bf16::from_f64_saturating(exact);
                if code.is_negative_zero() {
                    assert!(got.is_zero());
                    continue;
                }
                assert_eq!(got, want, "code {code:?} scale {scale:?}");
                assert_eq!(sat, want_sat, "code {code:?} scale {scale:?}");
            }
        }
    }

    #[test]
    fn field_transfer_hand_trace() {
        // 1.5 at scale 2^0: exponent field 127, mantissa bit set.
        let (v, sat) = element_to_bf16(Fp4Code::from_bits(0b0011), E8m0Scale::UNIT);
        assert!(!sat);
        assert_eq!(v.to_bits(), 0x3FC0);
        // 6 at scale 2^4 = 96: exponent field 127 + 6, mantissa 0x40.
        let (v, _) = element_to_bf16(Fp4Code::from_bits(0b0111), E8m0Scale::from_exponent(4));
        assert_eq!(v.to_f64(), 96.0);
        assert_eq!(v.to_bits(), 0x42C0);
    }

    #[test]
    fn bf16_conversion_saturates_at_extreme_scales() {
        // 6 * 2^128 overflows BF16.
        let (v, sat) = element_to_bf16(Fp4Code::MAX, E8m0Scale::from_exponent(128));
        assert!(sat);
        assert_eq!(v, Bf16::MAX);
        // 0.5 * 2^-127 = 2^-128 is a BF16 subnormal, kept exactly.
        let (v, sat) = element_to_bf16(Fp4Code::from_bits(0b0001), E8m0Scale::from_exponent(-127));
        assert!(!sat);
        assert_eq!(v.to_f64(), 2.0f64.powi(-128));
    }

    #[test]
    fn truncation_keeps_exponent_and_drops_mantissa() {
        // Block maximum 1.75: scale 2^-2, element 7 in scale units, and the
        // mantissa truncation lands on 6 (value 1.5). Nearest encoding agrees
        // here because 7 sits above the top grid point and saturates to 6 too.
        let values = [Bf16::from_f64(1.75)];
        let block = MxBlock::from_bf16_truncate(&values);
        assert_eq!(block.scale.exponent(), -2);
        assert_eq!(block.elements[0].decode(), 6.0);
        assert_eq!(block.dequantize_element(0), 1.5);
        let nearest = MxBlock::quantize(&[1.75f64]);
        assert_eq!(nearest.dequantize_element(0), 1.5);
        // Inside the grid the two differ: 5.5 in scale units truncates down
        // to 4 but rounds to the nearer point 6.
        let values = [Bf16::from_f64(6.0), Bf16::from_f64(5.5)];
        let block = MxBlock::from_bf16_truncate(&values);
        assert_eq!(block.scale.exponent(), 0);
        assert_eq!(block.dequantize_element(1), 4.0);
        let nearest = MxBlock::quantize(&[6.0f64, 5.5]);
        assert_eq!(nearest.dequantize_element(1), 6.0);
    }

    #[test]
    fn truncation_round_trips_canonical_blocks() {
        let mut v = [0.0f64; 32];
        for (i, slot) in v.iter_mut().enumerate() {
            let grid = [6.0, -4.0, 3.0, 1.5, 0.5, 0.0, -6.0, 2.0];
            *slot = grid[i % grid.len()] * 2.0f64.powi(-3);
        }
        let block = MxBlock::quantize(&v);
        assert!(block.is_canonical());
        let (bf, sat) = block.to_bf16();
        assert!(!sat);
        let back = MxBlock::from_bf16_truncate(&bf);
        assert_eq!(back, block);
    }

    #[test]
    fn truncation_flushes_small_magnitudes_to_zero() {
        let values = [Bf16::from_f64(4.0), Bf16::from_f64(0.9), Bf16::from_f64(-0.9)];
        let block = MxBlock::from_bf16_truncate(&values);
        assert_eq!(block.scale.exponent(), 0);
        assert_eq!(block.dequantize_element(0), 4.0);
        // 0.9 scale units sits below the 1.0 step and truncates to 0.5.
        assert_eq!(block.dequantize_element(1), 0.5);
        assert_eq!(block.dequantize_element(2), -0.5);
        let tiny = [Bf16::from_f64(4.0), Bf16::from_f64(0.3)];
        let block = MxBlock::from_bf16_truncate(&tiny);
        assert_eq!(block.dequantize_element(1), 0.0);
        assert!(!block.elements[1].is_negative_zero());
    }

    #[test]
    fn packing_layout_is_little_nibble_first() {
        let mut block = MxBlock::default();
        block.elements[0] = Fp4Code::from_bits(0x5);
        block.elements[1] = Fp4Code::from_bits(0xA);
        block.elements[30] = Fp4Code::from_bits(0x3);
        block.elements[31] = Fp4Code::from_bits(0xC);
        let bytes = block.packed_elements();
        assert_eq!(bytes[0], 0xA5);
        assert_eq!(bytes[15], 0xC3);
        let back = MxBlock::from_packed(&bytes, block.scale);
        assert_eq!(back, block);
    }
}
