//! Affine INT5 encodings used inside the analog macro.
//!
//! Private element values live on a half-integer grid, so doubling them
//! yields exact integers. Weights additionally carry an offset of +12 that
//! makes every stored level non-negative (a requirement of the charge-trap
//! cells); the offset is removed digitally after the bit-plane reduction.

use crate::block::{MxBlock, BLOCK_SIZE};
use crate::fp4::Fp4Code;

/// The weight zero-point: `weight_code = 2 * value + 12`.
pub const WEIGHT_BIAS: i32 = 12;

/// Encodes an element as an unsigned weight level in `[0, 24]`.
#[inline]
pub fn weight_code(code: Fp4Code) -> u8 {
    (code.doubled() + WEIGHT_BIAS) as u8
}

/// Inverse of [`weight_code`].
#[inline]
pub fn weight_value(level: u8) -> f64 {
    (level as i32 - WEIGHT_BIAS) as f64 / 2.0
}

/// Encodes an element as a signed activation level in `[-12, 12]`.
#[inline]
pub fn activation_code(code: Fp4Code) -> i8 {
    code.doubled() as i8
}

/// Inverse of [`activation_code`].
#[inline]
pub fn activation_value(level: i8) -> f64 {
    level as f64 / 2.0
}

/// Weight levels for a whole block.
pub fn weight_codes(block: &MxBlock) -> [u8; BLOCK_SIZE] {
    let mut out = [0u8; BLOCK_SIZE];
    for (o, c) in out.iter_mut().zip(block.elements.iter()) {
        *o = weight_code(*c);
    }
    out
}

/// Activation levels for a whole block.
pub fn activation_codes(block: &MxBlock) -> [i8; BLOCK_SIZE] {
    let mut out = [0i8; BLOCK_SIZE];
    for (o, c) in out.iter_mut().zip(block.elements.iter()) {
        *o = activation_code(*c);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn weight_levels_span_zero_to_twenty_four() {
        assert_eq!(weight_code(Fp4Code::NEG_MAX), 0);
        assert_eq!(weight_code(Fp4Code::ZERO), 12);
        assert_eq!(weight_code(Fp4Code::MAX), 24);
        for code in Fp4Code::all() {
            let level = weight_code(code);
            assert!(level <= 24);
            assert_eq!(weight_value(level), code.decode());
        }
    }

    #[test]
    fn activation_levels_are_signed_doubles() {
        assert_eq!(activation_code(Fp4Code::encode(1.5f64)), 3);
        assert_eq!(activation_code(Fp4Code::encode(-6.0f64)), -12);
        for code in Fp4Code::all() {
            let level = activation_code(code);
            assert!((-12..=12).contains(&(level as i32)));
            assert_eq!(activation_value(level), code.decode());
        }
    }

    #[test]
    fn both_encodings_invert_exactly_on_blocks() {
        let block = MxBlock::quantize(&[3.0f64, -1.5, 0.5, 6.0, -6.0, 0.0]);
        let w = weight_codes(&block);
        let a = activation_codes(&block);
        for i in 0..BLOCK_SIZE {
            assert_eq!(weight_value(w[i]), block.elements[i].decode());
            assert_eq!(activation_value(a[i]), block.elements[i].decode());
        }
    }
}
