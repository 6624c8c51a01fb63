//! Row-wise vector operations on BF16 activations: layer normalization,
//! the exact-form GELU, and residual addition.
//!
//! Reductions (mean, variance) accumulate in wide arithmetic and round to
//! BF16 once at the output, so exact identities survive: a constant row
//! normalizes to the shift parameter bit for bit, and shifting a row by a
//! representable constant leaves its normalization unchanged. Elementwise
//! arithmetic between stored activations stays BF16 in, BF16 out.

use crate::bf16::{self, Bf16};
use crate::error::Error;
use crate::tensor::Mat;
use crate::Result;

/// Smallest positive normal BF16 value, the variance floor. Keeps the
/// normalizer finite on zero-variance rows.
const VARIANCE_FLOOR: f64 = 1.17549435082228751e-38;

/// Per-row layer normalization with learned per-column scale and shift.
///
/// Mean and population variance are accumulated per row in wide precision;
/// each output element rounds once: `gamma * (x - mean) / sqrt(var) + beta`.
/// Zero-variance rows divide by the floored variance, so a constant row
/// yields exactly `beta`.
pub fn layernorm_bf16(x: &Mat<Bf16>, gamma: &[Bf16], beta: &[Bf16]) -> Result<Mat<Bf16>> {
    if gamma.len() != x.cols() || beta.len() != x.cols() {
        return Err(Error::dimension(format!(
            "scale/shift lengths {}/{} do not match row width {}",
            gamma.len(),
            beta.len(),
            x.cols()
        )));
    }
    if x.cols() == 0 {
        return Err(Error::dimension("cannot normalize zero-width rows"));
    }
    let n = x.cols() as f64;
    let mut out = Mat::zeros(x.rows(), x.cols());
    for i in 0..x.rows() {
        let mut sum = 0.0;
        for j in 0..x.cols() {
            sum += x.get(i, j).to_f64();
        }
        let mean = sum / n;
        let mut sq = 0.0;
        for j in 0..x.cols() {
            let d = x.get(i, j).to_f64() - mean;
            sq += d * d;
        }
        let var = (sq / n).max(VARIANCE_FLOOR);
        let inv = 1.0 / var.sqrt();
        for j in 0..x.cols() {
            let norm = (x.get(i, j).to_f64() - mean) * inv;
            let y = gamma[j].to_f64() * norm + beta[j].to_f64();
            out.set(i, j, Bf16::from_f64(y));
        }
    }
    Ok(out)
}

/// Exact-form GELU, `x * Phi(x)` with the Gaussian CDF, evaluated in real
/// arithmetic and rounded to BF16 once. The complementary error function
/// keeps the negative tail accurate where `1 + erf` would cancel.
pub fn gelu_bf16(x: &Mat<Bf16>) -> Mat<Bf16> {
    x.map(|v| {
        let xf = v.to_f64();
        let phi = 0.5 * libm::erfc(-xf * std::f64::consts::FRAC_1_SQRT_2);
        Bf16::from_f64(xf * phi)
    })
}

/// Elementwise BF16 sum of two activation matrices of identical shape.
pub fn residual_add_bf16(a: &Mat<Bf16>, b: &Mat<Bf16>) -> Result<Mat<Bf16>> {
    if a.rows() != b.rows() || a.cols() != b.cols() {
        return Err(Error::dimension(format!(
            "residual shapes differ: {}x{} vs {}x{}",
            a.rows(),
            a.cols(),
            b.rows(),
            b.cols()
        )));
    }
    Ok(Mat::from_fn(a.rows(), a.cols(), |i, j| bf16::add(a.get(i, j), b.get(i, j))))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit_params(n: usize) -> (Vec<Bf16>, Vec<Bf16>) {
        (vec![Bf16::ONE; n], vec![Bf16::ZERO; n])
    }

    #[test]
    fn variance_floor_is_the_smallest_positive_normal() {
        assert_eq!(VARIANCE_FLOOR, 2.0f64.powi(-126));
        assert_eq!(Bf16::MIN_POSITIVE.to_f64(), VARIANCE_FLOOR);
    }

    #[test]
    fn constant_rows_normalize_to_the_shift_parameter() {
        let beta: Vec<Bf16> = (0..8).map(|j| Bf16::from_f64(0.25 * j as f64 - 1.0)).collect();
        let gamma = vec![Bf16::from_f64(3.5); 8];
        for c in [0.0, 1.0, -7.25, 1e20] {
            let x = Mat::from_fn(2, 8, |_, _| Bf16::from_f64(c));
            let y = layernorm_bf16(&x, &gamma, &beta).unwrap();
            for i in 0..2 {
                for j in 0..8 {
                    assert_eq!(y.get(i, j), beta[j], "c = {c}");
                }
            }
        }
    }

    #[test]
    fn four_point_row_matches_hand_normalization() {
        // Row [1, 2, 3, 4]: mean 2.5, population variance 1.25, so the
        // normalized values are +/-1.3416408 and +/-0.4472136, which round
        // to the BF16 values below.
        let x = Mat::from_fn(1, 4, |_, j| Bf16::from_f64((j + 1) as f64));
        let (gamma, beta) = unit_params(4);
        let y = layernorm_bf16(&x, &gamma, &beta).unwrap();
        let want = [-1.34375, -0.447265625, 0.447265625, 1.34375];
        for j in 0..4 {
            assert_eq!(y.get(0, j).to_f64(), want[j]);
        }
    }

    #[test]
    fn scale_and_shift_apply_after_normalization() {
        let x = Mat::from_fn(1, 4, |_, j| Bf16::from_f64((j + 1) as f64));
        let gamma = vec![Bf16::from_f64(2.0); 4];
        let beta = vec![Bf16::ONE; 4];
        let y = layernorm_bf16(&x, &gamma, &beta).unwrap();
        // 2 * 1.3416408 + 1 rounds once, not through intermediate BF16.
        assert_eq!(y.get(0, 3).to_f64(), Bf16::from_f64(2.0 * 1.3416407864998738 + 1.0).to_f64());
        assert_eq!(y.get(0, 0).to_f64(), Bf16::from_f64(2.0 * -1.3416407864998738 + 1.0).to_f64());
    }

    #[test]
    fn representable_shifts_leave_normalization_unchanged() {
        let x = Mat::from_fn(2, 16, |i, j| Bf16::from_f64(((i * 7 + j * 3) % 11) as f64 - 5.0));
        let (gamma, beta) = unit_params(16);
        let base = layernorm_bf16(&x, &gamma, &beta).unwrap();
        for c in [1.0, -64.0, 100.0] {
            // Integer inputs and shifts with sums inside +/-256 keep the
            // shifted row exact in BF16 (eight significand bits).
            let shifted = x.map(|v| bf16::add(v, Bf16::from_f64(c)));
            let y = layernorm_bf16(&shifted, &gamma, &beta).unwrap();
            assert_eq!(y, base, "shift {c}");
        }
    }

    #[test]
    fn gelu_fixed_points_and_tails() {
        let x = Mat::from_fn(1, 5, |_, j| Bf16::from_f64([0.0, 1.0, -1.0, 8.0, -8.0][j]));
        let y = gelu_bf16(&x);
        assert_eq!(y.get(0, 0), Bf16::ZERO);
        // x * Phi(x) at +/-1: 0.8413447 and -0.1586553 in the reals.
        assert_eq!(y.get(0, 1).to_f64(), 0.83984375);
        assert_eq!(y.get(0, 2).to_f64(), -0.158203125);
        assert!((y.get(0, 3).to_f64() - 8.0).abs() < 2.0f64.powi(-6));
        // The deep negative tail underflows toward zero but stays a tiny
        // negative value; BF16 represents magnitudes down to 2^-133.
        let tail = y.get(0, 4).to_f64();
        assert!(tail < 0.0 && tail > -2.0f64.powi(-40));
    }

    #[test]
    fn gelu_dips_at_its_known_minimum_then_rises() {
        // x * Phi(x) is not monotone: it has one minimum near -0.7518 of
        // about -0.17, falls toward it from the left tail, and rises
        // through zero to the right of it.
        let value_at = |xv: f64| {
            let x = Mat::from_fn(1, 1, |_, _| Bf16::from_f64(xv));
            gelu_bf16(&x).get(0, 0).to_f64()
        };
        let mut min_x = 0.0;
        let mut min_y = f64::INFINITY;
        for k in -40..=40 {
            let xv = k as f64 * 0.25;
            let y = value_at(xv);
            assert!(y > -0.171, "below the known dip depth at {xv}");
            if y < min_y {
                min_y = y;
                min_x = xv;
            }
        }
        assert_eq!(min_x, -0.75);
        assert_eq!(min_y, -0.169921875);
        let mut prev = f64::NEG_INFINITY;
        for k in -2..=40 {
            let y = value_at(k as f64 * 0.25);
            assert!(y >= prev, "not rising right of the dip at {}", k as f64 * 0.25);
            prev = y;
        }
    }

    #[test]
    fn residual_identity_and_symmetry() {
        let a = Mat::from_fn(3, 5, |i, j| Bf16::from_f64(i as f64 * 1.5 - j as f64 * 0.25));
        let zero = Mat::<Bf16>::zeros(3, 5);
        assert_eq!(residual_add_bf16(&a, &zero).unwrap(), a);
        let b = Mat::from_fn(3, 5, |i, j| Bf16::from_f64((i + j) as f64 * 0.125));
        assert_eq!(residual_add_bf16(&a, &b).unwrap(), residual_add_bf16(&b, &a).unwrap());
    }

    #[test]
    fn shape_mismatches_are_rejected() {
        let a = Mat::<Bf16>::zeros(2, 4);
        let b = Mat::<Bf16>::zeros(2, 5);
        assert!(residual_add_bf16(&a, &b).is_err());
        let (gamma, beta) = unit_params(3);
        assert!(layernorm_bf16(&a, &gamma, &beta).is_err());
    }
}
