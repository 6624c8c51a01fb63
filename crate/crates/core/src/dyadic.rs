//! Exact dyadic rationals `mantissa * 2^exponent` over `i128`.
//!
//! Pre-ADC column sums are sums of integer block partials shifted right by
//! at most the alignment window, so they are dyadic with a small span. All
//! operations here are exact; quantization happens only when a sum is
//! delivered to the ADC model.

/// An exact value `mant * 2^exp`.
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub struct Dyadic {
    mant: i128,
    exp: i32,
}

impl Dyadic {
    pub const ZERO: Dyadic = Dyadic { mant: 0, exp: 0 };

    pub fn new(mant: i128, exp: i32) -> Self {
        Dyadic { mant, exp }.normalized()
    }

    pub fn from_int(v: i128) -> Self {
        Dyadic::new(v, 0)
    }

    /// Strips trailing zero bits so equal values compare equal.
    fn normalized(mut self) -> Self {
        if self.mant == 0 {
            return Dyadic::ZERO;
        }
        let tz = self.mant.trailing_zeros().min(i32::MAX as u32) as i32;
        if tz > 0 {
            self.mant >>= tz;
            self.exp += tz;
        }
        self
    }

    pub fn is_zero(&self) -> bool {
        self.mant == 0
    }

    pub fn add(self, other: Dyadic) -> Dyadic {
        if self.mant == 0 {
            return other;
        }
        if other.mant == 0 {
            return self;
        }
        let exp = self.exp.min(other.exp);
        // checked_shl only rejects shifts of 128+; recover the input to
        // catch bits silently pushed past the top as well.
        let shift_exact = |m: i128, s: u32| {
            m.checked_shl(s).filter(|v| v >> s == m).expect("dyadic mantissa overflow")
        };
        let a = shift_exact(self.mant, (self.exp - exp) as u32);
        let b = shift_exact(other.mant, (other.exp - exp) as u32);
        Dyadic::new(a.checked_add(b).expect("dyadic sum overflow"), exp)
    }

    pub fn mul_pow2(self, k: i32) -> Dyadic {
        if self.mant == 0 {
            Dyadic::ZERO
        } else {
            Dyadic { mant: self.mant, exp: self.exp + k }
        }
    }

    pub fn abs(self) -> Dyadic {
        Dyadic { mant: self.mant.abs(), exp: self.exp }
    }

    pub fn neg(self) -> Dyadic {
        Dyadic { mant: -self.mant, exp: self.exp }
    }

    pub fn signum(&self) -> i32 {
        self.mant.signum() as i32
    }

    /// Compares `|self|` with `2^k`.
    pub fn abs_cmp_pow2(&self, k: i32) -> std::cmp::Ordering {
        if self.mant == 0 {
            return std::cmp::Ordering::Less;
        }
        let mag = self.mant.unsigned_abs();
        let bits = 128 - mag.leading_zeros() as i32; // mag < 2^bits <= 2*mag
        let high = self.exp + bits - 1; // 2^high <= |self| < 2^(high+1)
        if high < k {
            return std::cmp::Ordering::Less;
        }
        if high > k {
            return std::cmp::Ordering::Greater;
        }
        // Same binade: equal only if the mantissa is exactly a power of two.
        if mag.is_power_of_two() {
            std::cmp::Ordering::Equal
        } else {
            std::cmp::Ordering::Greater
        }
    }

    /// Rounds `self / 2^lsb_exp` to an integer, half to even.
    pub fn round_div_pow2(&self, lsb_exp: i32) -> i128 {
        if self.mant == 0 {
            return 0;
        }
        let shift = self.exp - lsb_exp;
        if shift >= 0 {
            return self
                .mant
                .checked_shl(shift as u32)
                .filter(|v| v >> shift == self.mant)
                .expect("ADC ratio overflow");
        }
        let s = (-shift) as u32;
        if s >= 127 {
            return 0; // far below half an LSB after normalization
        }
        let neg = self.mant < 0;
        let mag = self.mant.unsigned_abs();
        let q = mag >> s;
        let rem = mag & ((1u128 << s) - 1);
        let half = 1u128 << (s - 1);
        let rounded = if rem > half {
            q + 1
        } else if rem < half {
            q
        } else if q & 1 == 1 {
            q + 1
        } else {
            q
        };
        let signed = rounded as i128;
        if neg {
            -signed
        } else {
            signed
        }
    }

    /// Exact conversion when the mantissa fits `f64`; rounds otherwise.
    pub fn to_f64(&self) -> f64 {
        self.mant as f64 * crate::fp4::pow2_wide(self.exp)
    }

    /// Smallest `k` with `|self| <= 2^k`, or `None` for zero.
    ///
    /// Computed from the integer mantissa, so values a hair above a power of
    /// two never get absorbed into it the way an `f64` round trip could.
    pub fn ceil_log2_abs(&self) -> Option<i32> {
        if self.mant == 0 {
            return None;
        }
        let mag = self.mant.unsigned_abs();
        let bits = 128 - mag.leading_zeros() as i32;
        // Normalization keeps the mantissa odd, so it is a power of two only
        // when it equals one.
        let ceil_mant = if mag == 1 { 0 } else { bits };
        Some(self.exp + ceil_mant)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::cmp::Ordering;

    #[test]
    fn normalization_makes_equal_values_equal() {
        assert_eq!(Dyadic::new(4, 0), Dyadic::new(1, 2));
        assert_eq!(Dyadic::new(6, -1), Dyadic::new(3, 0));
        assert_eq!(Dyadic::new(0, 5), Dyadic::ZERO);
    }

    #[test]
    fn addition_is_exact_across_exponents() {
        // 64*2^-1 + 8*2^-3 = 33
        let a = Dyadic::new(64, -1);
        let b = Dyadic::new(8, -3);
        assert_eq!(a.add(b), Dyadic::from_int(33));
        // 1*2^-4 + 1*2^-6 = 5/64
        let c = Dyadic::new(1, -4).add(Dyadic::new(1, -6));
        assert_eq!(c, Dyadic::new(5, -6));
        assert_eq!(c.to_f64(), 5.0 / 64.0);
    }

    #[test]
    fn negation_and_scaling() {
        let a = Dyadic::from_int(12).mul_pow2(-2);
        assert_eq!(a.to_f64(), 3.0);
        assert_eq!(a.neg().to_f64(), -3.0);
        assert_eq!(a.add(a.neg()), Dyadic::ZERO);
        assert_eq!(Dyadic::ZERO.signum(), 0);
        assert_eq!(a.signum(), 1);
    }

    #[test]
    fn pow2_comparison_brackets_magnitudes() {
        let v = Dyadic::new(3, 2); // 12
        assert_eq!(v.abs_cmp_pow2(4), Ordering::Less); // 12 < 16
        assert_eq!(v.abs_cmp_pow2(3), Ordering::Greater); // 12 > 8
        let w = Dyadic::new(-1, 5); // -32
        assert_eq!(w.abs_cmp_pow2(5), Ordering::Equal);
        assert_eq!(Dyadic::ZERO.abs_cmp_pow2(-100), Ordering::Less);
    }

    #[test]
    fn round_half_to_even_on_lsb_grid() {
        let sum = Dyadic::new(17, -2); // 4.25
        assert_eq!(sum.to_f64(), 4.25);
        assert_eq!(sum.round_div_pow2(1), 2); // 4.25 / 2 = 2.125 -> 2
        assert_eq!(Dyadic::new(5, -1).round_div_pow2(0), 2); // 2.5 -> 2
        assert_eq!(Dyadic::new(7, -1).round_div_pow2(0), 4); // 3.5 -> 4
        assert_eq!(Dyadic::new(-5, -1).round_div_pow2(0), -2);
        assert_eq!(Dyadic::new(9, -2).round_div_pow2(0), 2); // 2.25 -> 2
        assert_eq!(Dyadic::new(11, -2).round_div_pow2(0), 3); // 2.75 -> 3
        assert_eq!(Dyadic::from_int(96).round_div_pow2(5), 3);
    }

    #[test]
    fn f64_conversion_is_exact_for_small_mantissas() {
        let v = Dyadic::new(4601, -20);
        assert_eq!(v.to_f64(), 4601.0 / 1048576.0);
        let w = Dyadic::new(-3, 40);
        assert_eq!(w.to_f64(), -3.0 * 2.0f64.powi(40));
    }

    #[test]
    fn ceil_log2_tracks_power_of_two_boundaries() {
        assert_eq!(Dyadic::from_int(8).ceil_log2_abs(), Some(3));
        assert_eq!(Dyadic::from_int(9).ceil_log2_abs(), Some(4));
        assert_eq!(Dyadic::from_int(-7).ceil_log2_abs(), Some(3));
        assert_eq!(Dyadic::new(1, -4).ceil_log2_abs(), Some(-4));
        assert_eq!(Dyadic::new(3, -4).ceil_log2_abs(), Some(-2)); // 0.1875 <= 0.25
        assert_eq!(Dyadic::ZERO.ceil_log2_abs(), None);
    }
}
