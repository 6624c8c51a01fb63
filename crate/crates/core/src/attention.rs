//! Digital attention datapath: output-stationary systolic GEMM semantics
//! over block-scaled 4-bit operands with BF16 accumulation, a streaming
//! softmax with deferred normalization, and the tile quantization
//! choreography between the two multiplies.
//!
//! Value semantics are deliberately independent of array geometry: a
//! processing element multiplies two decoded elements (exact in BF16, the
//! product of two 2-bit mantissas never needs more than four significand
//! bits) and every output element folds its products in strictly ascending
//! reduction order. Tiling therefore changes traversal, never bits, which is
//! what lets the streamed pipeline reproduce a one-shot computation exactly.

use std::path::PathBuf;

use crate::bf16::{self, Bf16};
use crate::block::BLOCK_SIZE;
use crate::error::Error;
use crate::fp4::{E8m0Scale, Fp4Code};
use crate::tensor::{Mat, MxTensor, Orientation};
use crate::Result;

/// Shape of one output-stationary array and its pairing per pipeline stage.
/// Geometry affects timing models and tile traversal only, never values.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SystolicGeometry {
    pub pe_rows: usize,
    pub pe_cols: usize,
    /// Reduction depth streamed per pass, the per-head key/query depth.
    pub reduction_tile: usize,
    pub arrays_per_stage: usize,
}

impl Default for SystolicGeometry {
    fn default() -> Self {
        SystolicGeometry { pe_rows: 32, pe_cols: 64, reduction_tile: 64, arrays_per_stage: 2 }
    }
}

/// One processing element step: multiplies two block-scaled elements into
/// BF16. The product of two 2-bit-mantissa magnitudes carries at most four
/// significand bits, so within exponent range this rounds nothing.
#[inline]
pub fn pe_product(a: Fp4Code, ea: E8m0Scale, b: Fp4Code, eb: E8m0Scale) -> Bf16 {
    let scale = crate::fp4::pow2_wide(ea.exponent() + eb.exponent());
    Bf16::from_f64(a.decode() * b.decode() * scale)
}

fn gemm_shapes(a: &MxTensor, b: &MxTensor) -> Result<()> {
    if a.orientation() != Orientation::RowMajor {
        return Err(Error::config(
            "left operand must be blocked along its rows (reduction on columns)",
        ));
    }
    if b.orientation() != Orientation::ColMajor {
        return Err(Error::config(
            "right operand must be blocked along its columns (reduction on rows)",
        ));
    }
    if a.cols() != b.rows() {
        return Err(Error::dimension(format!(
            "reduction depths differ: {} vs {}",
            a.cols(),
            b.rows()
        )));
    }
    Ok(())
}

/// Folds `A x B` into an existing BF16 accumulator, ascending reduction
/// index, one fold chain per output element. Continuing a fold is what makes
/// streamed tiles land on the same bits as a single full-depth pass.
pub fn systolic_gemm_fold(acc: &mut Mat<Bf16>, a: &MxTensor, b: &MxTensor) -> Result<()> {
    gemm_shapes(a, b)?;
    if acc.rows() != a.rows() || acc.cols() != b.cols() {
        return Err(Error::dimension(format!(
            "accumulator {}x{} does not fit product {}x{}",
            acc.rows(),
            acc.cols(),
            a.rows(),
            b.cols()
        )));
    }
    let depth = a.cols();
    for i in 0..a.rows() {
        for j in 0..b.cols() {
            let mut s = acc.get(i, j);
            for k in 0..depth {
                let p = pe_product(a.element(i, k), a.scale_at(i, k), b.element(k, j), b.scale_at(k, j));
                s = bf16::add(s, p);
            }
            acc.set(i, j, s);
        }
    }
    Ok(())
}

/// `A x B` with BF16 accumulation from zero.
pub fn systolic_gemm_mx(a: &MxTensor, b: &MxTensor) -> Result<Mat<Bf16>> {
    let mut acc = Mat::zeros(a.rows(), b.cols());
    systolic_gemm_fold(&mut acc, a, b)?;
    Ok(acc)
}

/// Tiled traversal of the same product: output tiles of `pe_rows x pe_cols`,
/// reduction streamed in `reduction_tile` chunks. Exists to demonstrate that
/// geometry is value-transparent; results always equal [`systolic_gemm_mx`].
pub fn systolic_gemm_mx_tiled(
    a: &MxTensor,
    b: &MxTensor,
    geom: &SystolicGeometry,
) -> Result<Mat<Bf16>> {
    gemm_shapes(a, b)?;
    let depth = a.cols();
    let mut out = Mat::zeros(a.rows(), b.cols());
    for ibase in (0..a.rows()).step_by(geom.pe_rows) {
        for jbase in (0..b.cols()).step_by(geom.pe_cols) {
            for i in ibase..(ibase + geom.pe_rows).min(a.rows()) {
                for j in jbase..(jbase + geom.pe_cols).min(b.cols()) {
                    let mut s = Bf16::ZERO;
                    for kbase in (0..depth).step_by(geom.reduction_tile) {
                        for k in kbase..(kbase + geom.reduction_tile).min(depth) {
                            let p = pe_product(
                                a.element(i, k),
                                a.scale_at(i, k),
                                b.element(k, j),
                                b.scale_at(k, j),
                            );
                            s = bf16::add(s, p);
                        }
                    }
                    out.set(i, j, s);
                }
            }
        }
    }
    Ok(out)
}

/// Per-query-row streaming softmax state: the running maximum and the
/// running (unnormalized) exponential sum.
#[derive(Debug, Clone)]
pub struct FlashState {
    m: Vec<Bf16>,
    l: Vec<Bf16>,
}

impl FlashState {
    /// Fresh state: maxima at the most negative finite value, sums at zero.
    pub fn new(rows: usize) -> Self {
        FlashState { m: vec![Bf16::NEG_MAX; rows], l: vec![Bf16::ZERO; rows] }
    }

    /// State pre-seeded with final row maxima. Subsequent tile updates then
    /// never raise the maximum, every correction factor is exactly one, and
    /// the emitted tiles match a one-shot evaluation bit for bit.
    pub fn with_maxima(maxima: Vec<Bf16>) -> Self {
        let l = vec![Bf16::ZERO; maxima.len()];
        FlashState { m: maxima, l }
    }

    pub fn rows(&self) -> usize {
        self.m.len()
    }

    pub fn row_max(&self, i: usize) -> Bf16 {
        self.m[i]
    }

    /// Unnormalized exponential sum; the deferred normalizer divides by this.
    pub fn row_sum(&self, i: usize) -> Bf16 {
        self.l[i]
    }
}

/// One streaming softmax step over a tile of raw scores.
///
/// Applies the `1/sqrt(d_k)` scale, lifts the running maximum, and emits
/// `exp(scaled - max)` for the tile, all in BF16. Returns the emitted
/// tile and the per-row correction factor `exp(old_max - new_max)` the
/// caller must multiply into partial products accumulated from earlier
/// tiles. The running sum continues one serial fold chain per row: it is
/// scaled by the correction, then each emitted value joins the chain
/// ascending. With corrections pinned at one the chain is identical to
/// summing the whole row in a single pass.
///
/// Quantization of the emitted tile is the caller's business; the
/// normalizer state tracks the BF16 stream as the softmax lane produces
/// it.
pub fn flash_softmax_tile(
    s_tile: &Mat<Bf16>,
    scale: Bf16,
    state: &mut FlashState,
) -> (Mat<Bf16>, Vec<Bf16>) {
    assert_eq!(s_tile.rows(), state.rows(), "one state row per query row");
    let mut p = Mat::zeros(s_tile.rows(), s_tile.cols());
    let mut corrections = Vec::with_capacity(s_tile.rows());
    for i in 0..s_tile.rows() {
        let mut tile_max = Bf16::NEG_MAX;
        for j in 0..s_tile.cols() {
            tile_max = tile_max.max(bf16::mul(s_tile.get(i, j), scale));
        }
        let m_new = state.m[i].max(tile_max);
        corrections.push(bf16::exp(bf16::sub(state.m[i], m_new)));
        state.m[i] = m_new;
        let mut l = bf16::mul(state.l[i], corrections[i]);
        for j in 0..s_tile.cols() {
            let t = bf16::mul(s_tile.get(i, j), scale);
            let e = bf16::exp(bf16::sub(t, m_new));
            p.set(i, j, e);
            l = bf16::add(l, e);
        }
        state.l[i] = l;
    }
    (p, corrections)
}

/// How the streamed softmax references its maxima.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SoftmaxStreaming {
    /// Scan each query row's full score strip for its maximum before any
    /// probability tile is emitted. Corrections stay at one and the stream
    /// is bit-identical to a one-shot evaluation, including through the
    /// block quantization between the two multiplies.
    #[default]
    TwoPassMax,
    /// Textbook single-pass streaming: maxima rise as tiles arrive and
    /// earlier partials are rescaled. Close to two-pass, not bit-equal,
    /// because early tiles quantize against a stale maximum.
    OnlineRescale,
}

/// Attention shape and streaming options.
#[derive(Debug, Clone, Default)]
pub struct AttentionConfig {
    pub heads: usize,
    pub d_k: usize,
    pub streaming: SoftmaxStreaming,
    /// When set, per-head score/probability matrices and the
    /// pre-quantization output are written there as `f64` matrices.
    pub dump_dir: Option<PathBuf>,
}

impl AttentionConfig {
    pub fn new(heads: usize, d_k: usize) -> Self {
        AttentionConfig { heads, d_k, ..AttentionConfig::default() }
    }
}

/// Full attention stage for one layer input.
///
/// `q` and `k` arrive quantized row-major along the per-head depth; `v`
/// arrives as raw decoded converter values and is block-quantized down the
/// key axis per head as it streams in. Scores flow through the streaming
/// softmax in tiles; each emitted probability tile is block-quantized
/// along the key axis on its way into the second multiply; the deferred
/// normalizer divides at the end; the assembled output requantizes
/// row-major for the next stage's buffer.
pub fn attention_forward(
    q: &MxTensor,
    k: &MxTensor,
    v: &Mat<f64>,
    cfg: &AttentionConfig,
) -> Result<MxTensor> {
    let d_model = cfg
        .heads
        .checked_mul(cfg.d_k)
        .filter(|d| *d > 0)
        .ok_or_else(|| Error::config("head count and depth must be positive"))?;
    if cfg.d_k % BLOCK_SIZE != 0 {
        return Err(Error::config(format!(
            "per-head depth {} must be a whole number of {BLOCK_SIZE}-blocks",
            cfg.d_k
        )));
    }
    if q.cols() != d_model || k.cols() != d_model || v.cols() != d_model {
        return Err(Error::dimension(format!(
            "operand widths {}x{}x{} do not match heads*d_k = {d_model}",
            q.cols(),
            k.cols(),
            v.cols()
        )));
    }
    let n = q.rows();
    if k.rows() != n || v.rows() != n {
        return Err(Error::dimension("query, key, and value token counts differ"));
    }
    let scale = Bf16::from_f64(1.0 / (cfg.d_k as f64).sqrt());
    let blocks_per_head = cfg.d_k / BLOCK_SIZE;
    let geom = SystolicGeometry::default();
    let mut o = Mat::<Bf16>::zeros(n, d_model);
    for h in 0..cfg.heads {
        let q_h = q.slice_block_cols(h * blocks_per_head, blocks_per_head)?;
        let kt_h = k.slice_block_cols(h * blocks_per_head, blocks_per_head)?.transposed();
        let v_h = MxTensor::quantize_nearest(
            &v.col_slice(h * cfg.d_k, cfg.d_k),
            Orientation::ColMajor,
        );
        let mut dump_s = cfg.dump_dir.as_ref().map(|_| Mat::<Bf16>::zeros(n, n));
        let mut dump_p = cfg.dump_dir.as_ref().map(|_| Mat::<Bf16>::zeros(n, n));
        for qbase in (0..n).step_by(geom.pe_rows) {
            let qrows = geom.pe_rows.min(n - qbase);
            let q_tile = q_h.slice_rows(qbase, qrows)?;
            let s_strip = systolic_gemm_mx(&q_tile, &kt_h)?;
            let mut state = match cfg.streaming {
                SoftmaxStreaming::TwoPassMax => {
                    let maxima = (0..qrows)
                        .map(|i| {
                            let mut m = Bf16::NEG_MAX;
                            for j in 0..n {
                                m = m.max(bf16::mul(s_strip.get(i, j), scale));
                            }
                            m
                        })
                        .collect();
                    FlashState::with_maxima(maxima)
                }
                SoftmaxStreaming::OnlineRescale => FlashState::new(qrows),
            };
            let mut sv = Mat::<Bf16>::zeros(qrows, cfg.d_k);
            for kbase in (0..n).step_by(geom.pe_cols) {
                let kw = geom.pe_cols.min(n - kbase);
                let s_tile = s_strip.col_slice(kbase, kw);
                let (p_tile, corrections) = flash_softmax_tile(&s_tile, scale, &mut state);
                for (i, corr) in corrections.iter().enumerate() {
                    if *corr != Bf16::ONE {
                        for c in 0..cfg.d_k {
                            sv.set(i, c, bf16::mul(sv.get(i, c), *corr));
                        }
                    }
                }
                let p_q = MxTensor::quantize_nearest(
                    &p_tile.map(|v| v.to_f64()),
                    Orientation::RowMajor,
                );
                let kb = kbase / BLOCK_SIZE;
                let v_tile = v_h.slice_block_rows(kb, kw.div_ceil(BLOCK_SIZE))?;
                systolic_gemm_fold(&mut sv, &p_q, &v_tile)?;
                if let Some(p_full) = dump_p.as_mut() {
                    let (p_dec, _) = p_q.to_bf16();
                    for i in 0..qrows {
                        for j in 0..kw {
                            p_full.set(qbase + i, kbase + j, p_dec.get(i, j));
                        }
                    }
                }
            }
            for i in 0..qrows {
                let l = state.row_sum(i);
                for c in 0..cfg.d_k {
                    o.set(qbase + i, h * cfg.d_k + c, bf16::div(sv.get(i, c), l));
                }
            }
            if let Some(s_full) = dump_s.as_mut() {
                for i in 0..qrows {
                    for j in 0..n {
                        s_full.set(qbase + i, j, s_strip.get(i, j));
                    }
                }
            }
        }
        if let Some(dir) = cfg.dump_dir.as_ref() {
            let widen = |m: &Mat<Bf16>| m.map(|v| v.to_f64());
            crate::io::save_f64m(&widen(&dump_s.unwrap()), dir.join(format!("s_head{h}.f64m")))?;
            crate::io::save_f64m(&widen(&dump_p.unwrap()), dir.join(format!("p_head{h}.f64m")))?;
        }
    }
    let o_wide = o.map(|v| v.to_f64());
    if let Some(dir) = cfg.dump_dir.as_ref() {
        crate::io::save_f64m(&o_wide, dir.join("o_prequant.f64m"))?;
    }
    Ok(MxTensor::quantize_nearest(&o_wide, Orientation::RowMajor))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn quantized(seed: u64, rows: usize, cols: usize, orientation: Orientation) -> MxTensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m = Mat::from_fn(rows, cols, |_, _| rng.random_range(-2.0..2.0));
        MxTensor::quantize_nearest(&m, orientation)
    }

    #[test]
    fn products_of_two_codes_are_exact_in_bf16() {
        for a in Fp4Code::all() {
            for b in Fp4Code::all() {
                let p = pe_product(a, E8m0Scale::from_exponent(3), b, E8m0Scale::from_exponent(-5));
                let exact = a.decode() * b.decode() * 2.0f64.powi(-2);
                assert_eq!(p.to_f64(), exact);
            }
        }
    }

    #[test]
    fn one_hot_rows_read_out_the_right_operand() {
        let b = quantized(41, 32, 4, Orientation::ColMajor);
        let mut hot = Mat::<f64>::zeros(3, 32);
        for i in 0..3 {
            hot.set(i, i + 1, 1.0);
        }
        let a = MxTensor::quantize_nearest(&hot, Orientation::RowMajor);
        let out = systolic_gemm_mx(&a, &b).unwrap();
        let (b_bf, _) = b.to_bf16();
        for i in 0..3 {
            for j in 0..4 {
                assert_eq!(out.get(i, j), b_bf.get(i + 1, j));
            }
        }
    }

    #[test]
    fn gemm_matches_a_scalar_fold_reference() {
        let a = quantized(42, 4, 32, Orientation::RowMajor);
        let b = quantized(43, 32, 4, Orientation::ColMajor);
        let out = systolic_gemm_mx(&a, &b).unwrap();
        for i in 0..4 {
            for j in 0..4 {
                let mut acc = Bf16::ZERO;
                for k in 0..32 {
                    acc = bf16::add(
                        acc,
                        pe_product(a.element(i, k), a.scale_at(i, k), b.element(k, j), b.scale_at(k, j)),
                    );
                }
                assert_eq!(out.get(i, j), acc);
            }
        }
    }

    #[test]
    fn tile_geometry_never_changes_values() {
        let a = quantized(44, 70, 96, Orientation::RowMajor);
        let b = quantized(45, 96, 50, Orientation::ColMajor);
        let base = systolic_gemm_mx(&a, &b).unwrap();
        let geoms = [
            SystolicGeometry::default(),
            SystolicGeometry { pe_rows: 8, pe_cols: 8, reduction_tile: 32, arrays_per_stage: 1 },
            SystolicGeometry { pe_rows: 128, pe_cols: 1, reduction_tile: 96, arrays_per_stage: 2 },
        ];
        for g in &geoms {
            assert_eq!(systolic_gemm_mx_tiled(&a, &b, g).unwrap(), base);
        }
    }

    #[test]
    fn gemm_rejects_misoriented_operands() {
        let a = quantized(46, 4, 32, Orientation::RowMajor);
        let b = quantized(47, 32, 4, Orientation::ColMajor);
        assert!(systolic_gemm_mx(&b, &a).is_err());
        let short = quantized(48, 64, 4, Orientation::ColMajor);
        assert!(systolic_gemm_mx(&a, &short).is_err());
    }

    #[test]
    fn uniform_scores_normalize_to_uniform_weights() {
        let s = Mat::from_fn(1, 64, |_, _| Bf16::ZERO);
        let mut state = FlashState::new(1);
        let (p, corr) = flash_softmax_tile(&s, Bf16::from_f64(0.125), &mut state);
        assert_eq!(corr[0], bf16::exp(bf16::sub(Bf16::NEG_MAX, Bf16::ZERO)));
        for j in 0..64 {
            assert_eq!(p.get(0, j), Bf16::ONE);
        }
        assert_eq!(state.row_sum(0).to_f64(), 64.0);
        // Deferred division lands on exactly 1/64 per position.
        assert_eq!(bf16::div(p.get(0, 0), state.row_sum(0)).to_f64(), 1.0 / 64.0);
    }

    #[test]
    fn constant_shift_leaves_softmax_unchanged() {
        // Integer scores stay exact through the shift and the max
        // subtraction, so the invariance is bit-exact rather than
        // approximate.
        let mut rng = ChaCha8Rng::seed_from_u64(49);
        let base = Mat::from_fn(2, 64, |_, _| {
            Bf16::from_f64(rng.random_range(-8i32..=8) as f64)
        });
        for c in [-6.0, 2.0, 5.0] {
            let shifted = base.map(|v| bf16::add(v, Bf16::from_f64(c)));
            let mut st_a = FlashState::new(2);
            let mut st_b = FlashState::new(2);
            // Unit scale so the shift stays a pure max-subtraction property.
            let (pa, _) = flash_softmax_tile(&base, Bf16::ONE, &mut st_a);
            let (pb, _) = flash_softmax_tile(&shifted, Bf16::ONE, &mut st_b);
            assert_eq!(pa, pb);
            assert_eq!(st_a.row_sum(0), st_b.row_sum(0));
            assert_eq!(st_a.row_sum(1), st_b.row_sum(1));
        }
    }

    #[test]
    fn two_tile_stream_tracks_one_shot_softmax() {
        let mut rng = ChaCha8Rng::seed_from_u64(50);
        // Second tile carries the global maximum so corrections really fire.
        let full = Mat::from_fn(4, 128, |_, j| {
            let lift = if j >= 64 { 4.0 } else { 0.0 };
            Bf16::from_f64(rng.random_range(-4.0..4.0) + lift)
        });
        let scale = Bf16::from_f64(0.125);

        // One-shot evaluation of the whole concatenated strip.
        let mut st_ref = FlashState::new(4);
        let (p_ref, _) = flash_softmax_tile(&full, scale, &mut st_ref);

        // Seeded with the row maxima up front, the corrections collapse to
        // one and the streamed tiles must reproduce the one-shot values
        // and normalizers bit for bit.
        let maxima: Vec<Bf16> = (0..4).map(|i| st_ref.row_max(i)).collect();
        let mut st = FlashState::with_maxima(maxima);
        let (p1, c1) = flash_softmax_tile(&full.col_slice(0, 64), scale, &mut st);
        let (p2, c2) = flash_softmax_tile(&full.col_slice(64, 64), scale, &mut st);
        assert!(c1.iter().chain(c2.iter()).all(|c| *c == Bf16::ONE));
        assert_eq!(p1, p_ref.col_slice(0, 64));
        assert_eq!(p2, p_ref.col_slice(64, 64));
        for i in 0..4 {
            assert_eq!(st.row_max(i), st_ref.row_max(i));
            assert_eq!(st.row_sum(i), st_ref.row_sum(i));
        }

        // A cold start discovers the maximum mid-stream instead: the first
        // tile is emitted against a stale maximum and the second correction
        // rescales its contribution after the fact. The running maximum
        // still converges exactly and the normalized weights track the
        // one-shot evaluation within a few rounding steps.
        let mut cold = FlashState::new(4);
        let (q1, first) = flash_softmax_tile(&full.col_slice(0, 64), scale, &mut cold);
        let (q2, second) = flash_softmax_tile(&full.col_slice(64, 64), scale, &mut cold);
        // The opening correction bridges the sentinel maximum, so it
        // underflows to zero; it only ever scales an all-zero accumulator.
        assert!(first.iter().all(|c| *c == Bf16::ZERO));
        for i in 0..4 {
            assert!(second[i].to_f64() < 1.0, "row {i}: correction never fired");
            assert_eq!(cold.row_max(i), st_ref.row_max(i));
            let l_cold = cold.row_sum(i);
            let l_ref = st_ref.row_sum(i);
            assert!(l_cold.ulp_distance(l_ref) <= 8, "row {i}: {l_cold:?} vs {l_ref:?}");
            for j in 0..128 {
                let emitted = if j < 64 {
                    // Early emissions carry the later correction.
                    bf16::mul(q1.get(i, j), second[i])
                } else {
                    q2.get(i, j - 64)
                };
                let a = bf16::div(emitted, l_cold);
                let b = bf16::div(p_ref.get(i, j), l_ref);
                assert!(a.ulp_distance(b) <= 8, "row {i} col {j}: {a:?} vs {b:?}");
            }
        }
    }

    fn toy_attention_inputs(seed: u64, n: usize, heads: usize, d_k: usize) -> (MxTensor, MxTensor, Mat<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = heads * d_k;
        let q = quantized(seed, n, d, Orientation::RowMajor);
        let k = quantized(seed + 1, n, d, Orientation::RowMajor);
        let v = Mat::from_fn(n, d, |_, _| rng.random_range(-3.0..3.0));
        (q, k, v)
    }

    #[test]
    fn single_token_returns_its_value_row() {
        let (q, k, v) = toy_attention_inputs(51, 1, 2, 32);
        let cfg = AttentionConfig::new(2, 32);
        let o = attention_forward(&q, &k, &v, &cfg).unwrap();
        // Softmax over one key is exactly one, so the output is V pushed
        // through its per-head ingestion quantization and the row-major
        // output quantization.
        let mut expect = Mat::<f64>::zeros(1, 64);
        for h in 0..2 {
            let v_h = MxTensor::quantize_nearest(&v.col_slice(h * 32, 32), Orientation::ColMajor);
            let (v_bf, _) = v_h.to_bf16();
            for c in 0..32 {
                expect.set(0, h * 32 + c, bf16::div(v_bf.get(0, c), Bf16::ONE).to_f64());
            }
        }
        let want = MxTensor::quantize_nearest(&expect, Orientation::RowMajor);
        assert_eq!(o, want);
    }

    #[test]
    fn streamed_attention_matches_untiled_reference() {
        // Independent one-shot evaluation: full-width softmax rows, one
        // quantization of the whole probability matrix, single full-depth
        // fold. Streaming must land on the same bits for every shape here.
        for &n in &[1usize, 32, 64, 100] {
            let (q, k, v) = toy_attention_inputs(52 + n as u64, n, 2, 32);
            let cfg = AttentionConfig::new(2, 32);
            let got = attention_forward(&q, &k, &v, &cfg).unwrap();

            let scale = Bf16::from_f64(1.0 / (32f64).sqrt());
            let mut o = Mat::<Bf16>::zeros(n, 64);
            for h in 0..2 {
                let q_h = q.slice_block_cols(h, 1).unwrap();
                let kt_h = k.slice_block_cols(h, 1).unwrap().transposed();
                let v_h =
                    MxTensor::quantize_nearest(&v.col_slice(h * 32, 32), Orientation::ColMajor);
                let s = systolic_gemm_mx(&q_h, &kt_h).unwrap();
                let mut p = Mat::<Bf16>::zeros(n, n);
                let mut l_all = Vec::new();
                for i in 0..n {
                    let mut m = Bf16::NEG_MAX;
                    for j in 0..n {
                        m = m.max(bf16::mul(s.get(i, j), scale));
                    }
                    let mut l = Bf16::ZERO;
                    for j in 0..n {
                        let e = bf16::exp(bf16::sub(bf16::mul(s.get(i, j), scale), m));
                        p.set(i, j, e);
                        l = bf16::add(l, e);
                    }
                    l_all.push(l);
                }
                let p_q =
                    MxTensor::quantize_nearest(&p.map(|v| v.to_f64()), Orientation::RowMajor);
                let sv = systolic_gemm_mx(&p_q, &v_h).unwrap();
                for i in 0..n {
                    for c in 0..32 {
                        o.set(i, h * 32 + c, bf16::div(sv.get(i, c), l_all[i]));
                    }
                }
            }
            let want = MxTensor::quantize_nearest(
                &Mat::from_fn(n, 64, |i, j| o.get(i, j).to_f64()),
                Orientation::RowMajor,
            );
            assert_eq!(got, want, "n = {n}");
        }
    }

    fn wide_reference(q: &MxTensor, k: &MxTensor, v: &Mat<f64>, d_k: usize) -> Mat<f64> {
        let n = q.rows();
        let d = q.cols();
        let qr = q.to_real::<f64>();
        let kr = k.to_real::<f64>();
        let heads = d / d_k;
        let mut reference = Mat::<f64>::zeros(n, d);
        for h in 0..heads {
            let s = qr
                .col_slice(h * d_k, d_k)
                .matmul(&kr.col_slice(h * d_k, d_k).transposed());
            let vq = MxTensor::quantize_nearest(&v.col_slice(h * d_k, d_k), Orientation::ColMajor)
                .to_real::<f64>();
            for i in 0..n {
                let scaled: Vec<f64> =
                    (0..n).map(|j| s.get(i, j) / (d_k as f64).sqrt()).collect();
                let m = scaled.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = scaled.iter().map(|t| (t - m).exp()).collect();
                let l: f64 = e.iter().sum();
                for c in 0..d_k {
                    let num: f64 = (0..n).map(|j| e[j] * vq.get(j, c)).sum();
                    reference.set(i, h * d_k + c, num / l);
                }
            }
        }
        reference
    }



    #[test]
    fn single_head_tracks_wide_reference_within_budget() {
        // Keys built as noisy copies of the queries give every score row a
        // dominant self-match, the structure trained attention settles
        // into. In that regime the top weight is exp(0) = 1, which the
        // probability grid represents exactly, so the requantization noise
        // comes only from the low-mass stragglers and the budget for the
        // full path, output quantization included, holds with margin
        // against a double-precision softmax over the dequantized
        // operands. Unstructured scores are covered separately below at
        // their own measured level.
        let n = 64;
        let mut rng = ChaCha8Rng::seed_from_u64(53);
        let qm = Mat::from_fn(n, 64, |_, _| rng.random_range(-2.0..2.0));
        let km = Mat::from_fn(n, 64, |i, j| qm.get(i, j) + rng.random_range(-1.0..1.0));
        let q = MxTensor::quantize_nearest(&qm, Orientation::RowMajor);
        let k = MxTensor::quantize_nearest(&km, Orientation::RowMajor);
        let v = Mat::from_fn(n, 64, |_, _| rng.random_range(-3.0..3.0));
        let cfg = AttentionConfig::new(1, 64);
        let o = attention_forward(&q, &k, &v, &cfg).unwrap().to_real::<f64>();
        let err = crate::tensor::rel_frobenius_error(&o, &wide_reference(&q, &k, &v, 64));
        assert!(err < 0.0625, "relative error {err}");
    }

    #[test]
    fn generic_scores_hold_their_recorded_level() {
        // Unstructured random scores spread each row over a handful of
        // off-grid weights, the worst case for a one-mantissa-bit
        // probability format: every weight and every output element
        // carries eight to fifteen percent grid noise that renormalization
        // cannot remove. Measured at 0.18 for this seed; the bound only
        // guards against regression.
        let n = 64;
        let (q, k, v) = toy_attention_inputs(53, n, 1, 64);
        let cfg = AttentionConfig::new(1, 64);
        let o = attention_forward(&q, &k, &v, &cfg).unwrap().to_real::<f64>();
        let err = crate::tensor::rel_frobenius_error(&o, &wide_reference(&q, &k, &v, 64));
        assert!(err < 0.21, "relative error {err}");
    }

    #[test]
    fn peaked_attention_tracks_wide_precision_reference() {
        // Self-similar queries and keys concentrate each row on its own
        // token, the regime the probability grid is built for: the dominant
        // weight sits at exactly one and the stragglers carry little mass.
        // Compared before the output truncation (via the debug dump),
        // because truncation turns sub-percent value differences into full
        // grid steps whenever a value sits exactly on a grid point, which
        // the dominant path here always does. The residual gap is the BF16
        // normalizer absorbing stragglers below half an ulp of one.
        let n = 64;
        let mut rng = ChaCha8Rng::seed_from_u64(60);
        let base = Mat::from_fn(n, 64, |_, _| rng.random_range(-2.0..2.0));
        let q = MxTensor::quantize_nearest(&base, Orientation::RowMajor);
        let k = q.clone();
        let v = Mat::from_fn(n, 64, |_, _| rng.random_range(-3.0..3.0));
        let dir = tempfile::tempdir().unwrap();
        let cfg = AttentionConfig {
            dump_dir: Some(dir.path().to_path_buf()),
            ..AttentionConfig::new(1, 64)
        };
        attention_forward(&q, &k, &v, &cfg).unwrap();
        let o_pre = crate::io::load_f64m(dir.path().join("o_prequant.f64m")).unwrap();
        let err = crate::tensor::rel_frobenius_error(&o_pre, &wide_reference(&q, &k, &v, 64));
        assert!(err < 0.02, "relative error {err}");
    }

    #[test]
    fn online_rescale_stays_close_to_two_pass() {
        let (q, k, v) = toy_attention_inputs(54, 96, 2, 32);
        let strict = attention_forward(&q, &k, &v, &AttentionConfig::new(2, 32)).unwrap();
        let online_cfg = AttentionConfig {
            streaming: SoftmaxStreaming::OnlineRescale,
            ..AttentionConfig::new(2, 32)
        };
        let online = attention_forward(&q, &k, &v, &online_cfg).unwrap();
        // The two modes truncate probability tiles against different
        // running maxima, so their grid noise decorrelates; agreement is
        // limited by that noise, not by the rescaling recurrence itself.
        let err = crate::tensor::rel_frobenius_error(
            &online.to_real::<f64>(),
            &strict.to_real::<f64>(),
        );
        assert!(err < 0.2, "streaming modes diverged: {err}");
    }

    #[test]
    fn permuting_queries_permutes_output_rows() {
        let n = 64;
        let (q, k, v) = toy_attention_inputs(55, n, 2, 32);
        let cfg = AttentionConfig::new(2, 32);
        let base = attention_forward(&q, &k, &v, &cfg).unwrap();

        let mut rng = ChaCha8Rng::seed_from_u64(56);
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut rng);
        let qr = q.to_real::<f64>();
        let q_perm = MxTensor::quantize_nearest(
            &Mat::from_fn(n, 64, |i, j| qr.get(perm[i], j)),
            Orientation::RowMajor,
        );
        let permuted = attention_forward(&q_perm, &k, &v, &cfg).unwrap();
        let base_real = base.to_real::<f64>();
        let perm_real = permuted.to_real::<f64>();
        for i in 0..n {
            for j in 0..64 {
                assert_eq!(perm_real.get(i, j), base_real.get(perm[i], j));
            }
        }
    }

    #[test]
    fn shape_mismatches_are_rejected() {
        let (q, k, v) = toy_attention_inputs(57, 8, 2, 32);
        let bad = AttentionConfig::new(3, 32);
        assert!(attention_forward(&q, &k, &v, &bad).is_err());
        let ragged = AttentionConfig::new(2, 48);
        assert!(attention_forward(&q, &k, &v, &ragged).is_err());
        let (q2, _, _) = toy_attention_inputs(58, 9, 2, 32);
        let cfg = AttentionConfig::new(2, 32);
        assert!(attention_forward(&q2, &k, &v, &cfg).is_err());
    }

    #[test]
    fn dump_writes_debug_tensors() {
        let dir = tempfile::tempdir().unwrap();
        let (q, k, v) = toy_attention_inputs(59, 40, 2, 32);
        let cfg = AttentionConfig {
            dump_dir: Some(dir.path().to_path_buf()),
            ..AttentionConfig::new(2, 32)
        };
        attention_forward(&q, &k, &v, &cfg).unwrap();
        for name in ["s_head0.f64m", "p_head1.f64m", "o_prequant.f64m"] {
            let m = crate::io::load_f64m(dir.path().join(name)).unwrap();
            assert!(m.rows() > 0);
        }
    }
}
