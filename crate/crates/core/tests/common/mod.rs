//! Helpers shared by the integration test targets.

use mxsim_core::attention::systolic_gemm_mx;
use mxsim_core::bf16::{self, Bf16};
use mxsim_core::block::BLOCK_SIZE;
use mxsim_core::{Mat, MxTensor, Orientation};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

/// A seeded block-quantized tensor with entries in `+/- span`.
pub fn seeded_tensor(
    seed: u64,
    rows: usize,
    cols: usize,
    span: f64,
    orientation: Orientation,
) -> MxTensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let m = Mat::from_fn(rows, cols, |_, _| rng.random_range(-span..span));
    MxTensor::quantize_nearest(&m, orientation)
}

/// Direct one-shot attention evaluation: full score strip per row, one
/// global maximum, one exponential sweep, one fold over the whole key axis.
/// No streaming state, no tiles, no corrections. Returns the block-quantized
/// output and the pre-quantization stream for elementwise comparisons.
pub fn one_shot_attention(
    q: &MxTensor,
    k: &MxTensor,
    v: &Mat<f64>,
    heads: usize,
    d_k: usize,
) -> (MxTensor, Mat<f64>) {
    let d_model = heads * d_k;
    let n = q.rows();
    let scale = Bf16::from_f64(1.0 / (d_k as f64).sqrt());
    let blocks_per_head = d_k / BLOCK_SIZE;
    let mut o = Mat::<Bf16>::zeros(n, d_model);
    for h in 0..heads {
        let q_h = q.slice_block_cols(h * blocks_per_head, blocks_per_head).unwrap();
        let kt_h = k.slice_block_cols(h * blocks_per_head, blocks_per_head).unwrap().transposed();
        let v_h =
            MxTensor::quantize_nearest(&v.col_slice(h * d_k, d_k), Orientation::ColMajor);
        let s = systolic_gemm_mx(&q_h, &kt_h).unwrap();

        let mut p = Mat::<Bf16>::zeros(n, n);
        let mut l = vec![Bf16::ZERO; n];
        for i in 0..n {
            let mut m = Bf16::NEG_MAX;
            for j in 0..n {
                m = m.max(bf16::mul(s.get(i, j), scale));
            }
            let mut sum = Bf16::ZERO;
            for j in 0..n {
                let t = bf16::mul(s.get(i, j), scale);
                let e = bf16::exp(bf16::sub(t, m));
                p.set(i, j, e);
                sum = bf16::add(sum, e);
            }
            l[i] = sum;
        }

        let p_q = MxTensor::quantize_nearest(&p.map(|v| v.to_f64()), Orientation::RowMajor);
        let sv = systolic_gemm_mx(&p_q, &v_h).unwrap();
        for i in 0..n {
            for c in 0..d_k {
                o.set(i, h * d_k + c, bf16::div(sv.get(i, c), l[i]));
            }
        }
    }
    let wide = o.map(|v| v.to_f64());
    (MxTensor::quantize_nearest(&wide, Orientation::RowMajor), wide)
}

/// Largest elementwise BF16 ulp distance between two real matrices.
pub fn max_ulp_distance(a: &Mat<f64>, b: &Mat<f64>) -> u32 {
    assert_eq!((a.rows(), a.cols()), (b.rows(), b.cols()));
    let mut worst = 0;
    for i in 0..a.rows() {
        for j in 0..a.cols() {
            let x = Bf16::from_f64(a.get(i, j));
            let y = Bf16::from_f64(b.get(i, j));
            worst = worst.max(x.ulp_distance(y));
        }
    }
    worst
}
