//! End-to-end encoder layers and model forwards in three execution modes:
//! wide real arithmetic, the exact digital block-quantized pipeline, and
//! the analog array model with its alignment window and converter.
//!
//! The digital mode accumulates projections exactly (integer block dots
//! summed as dyadics, widened once), so an analog run with an unlimited
//! alignment window and an ideal converter reproduces it bit for bit; the
//! two modes only diverge when finite analog resources are configured.

use std::path::{Path, PathBuf};

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::analog::{
    analog_linear_forward_raw, AdcResolution, AnalogConfig, AnalogLayerModel, CmBudget,
    ExponentStrategy, ForwardDiag,
};
use crate::attention::{attention_forward, AttentionConfig};
use crate::bf16::Bf16;
use crate::block::BLOCK_SIZE;
use crate::calib::{calibrate_layer, ModelCalibration};
use crate::dyadic::Dyadic;
use crate::error::Error;
use crate::tensor::{rel_frobenius_error, Mat, MxTensor, Orientation};
use crate::vector_ops::{gelu_bf16, layernorm_bf16, residual_add_bf16};
use crate::{int5, Result};

/// Number of classes on the toy readout head used for agreement metrics.
pub const HEAD_CLASSES: usize = 16;

/// Where a forward pass gets its token matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TokenSource {
    /// Seeded Gaussian tokens, `seq_len x d_model`, scaled elementwise.
    Synthetic { seq_len: usize, seed: u64, scale: f64 },
    /// Raw token matrix from a real-valued matrix file.
    TokenFile { path: PathBuf },
    /// Square-patch flattening of an image stored as a real-valued matrix
    /// with `height` rows and `width * channels` interleaved columns.
    Patchify { path: PathBuf, patch: usize, channels: usize },
}

impl TokenSource {
    /// Materializes the token matrix; its width must equal the model width.
    pub fn tokens(&self, d_model: usize) -> Result<Mat<f64>> {
        let toks = match self {
            TokenSource::Synthetic { seq_len, seed, scale } => {
                let mut rng = ChaCha8Rng::seed_from_u64(*seed);
                Mat::from_fn(*seq_len, d_model, |_, _| {
                    let g: f64 = rng.sample(StandardNormal);
                    g * scale
                })
            }
            TokenSource::TokenFile { path } => crate::io::load_f64m(path)?,
            TokenSource::Patchify { path, patch, channels } => {
                let image = crate::io::load_f64m(path)?;
                patchify(&image, *patch, *channels)?
            }
        };
        if toks.cols() != d_model {
            return Err(Error::dimension(format!(
                "token width {} does not match model width {d_model}",
                toks.cols()
            )));
        }
        Ok(toks)
    }
}

/// Cuts an interleaved-channel image into flattened non-overlapping square
/// patches, one token per patch, patches ordered row-major.
pub fn patchify(image: &Mat<f64>, patch: usize, channels: usize) -> Result<Mat<f64>> {
    if patch == 0 || channels == 0 {
        return Err(Error::config("patch size and channel count must be positive"));
    }
    if image.cols() % channels != 0 {
        return Err(Error::dimension(format!(
            "image width {} is not a whole number of {channels}-channel pixels",
            image.cols()
        )));
    }
    let height = image.rows();
    let width = image.cols() / channels;
    if height % patch != 0 || width % patch != 0 {
        return Err(Error::dimension(format!(
            "image {height}x{width} does not tile with {patch}x{patch} patches"
        )));
    }
    let (ph, pw) = (height / patch, width / patch);
    let dim = patch * patch * channels;
    let mut out = Mat::zeros(ph * pw, dim);
    for pi in 0..ph {
        for pj in 0..pw {
            let token = pi * pw + pj;
            for r in 0..patch {
                for c in 0..patch {
                    for ch in 0..channels {
                        let v = image.get(pi * patch + r, (pj * patch + c) * channels + ch);
                        out.set(token, (r * patch + c) * channels + ch, v);
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Static shape of an encoder stack plus its token source.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub layers: usize,
    pub d_model: usize,
    pub ffn_dim: usize,
    pub heads: usize,
    pub d_k: usize,
    pub max_seq: usize,
    pub token_source: TokenSource,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.heads * self.d_k != self.d_model {
            return Err(Error::config(format!(
                "{} heads of depth {} do not make width {}",
                self.heads, self.d_k, self.d_model
            )));
        }
        for (name, dim) in [("d_model", self.d_model), ("ffn_dim", self.ffn_dim), ("d_k", self.d_k)]
        {
            if dim == 0 || dim % BLOCK_SIZE != 0 {
                return Err(Error::config(format!(
                    "{name} = {dim} must be a positive multiple of {BLOCK_SIZE}"
                )));
            }
        }
        if self.max_seq == 0 {
            return Err(Error::config("max_seq must be positive"));
        }
        Ok(())
    }
}

/// How the linear projections execute.
#[derive(Debug, Clone, PartialEq)]
pub enum ExecutionMode {
    /// Everything in f64: the accuracy ceiling.
    ReferenceF64,
    /// Block-quantized activations with exact integer projections.
    DigitalMXFP4,
    /// The analog array model; finite settings need a calibration.
    Analog(AnalogConfig),
}

/// One encoder layer's parameters. Projection weights are stored
/// column-blocked, the layout the arrays are programmed from.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderLayerWeights {
    pub wq: MxTensor,
    pub wk: MxTensor,
    pub wv: MxTensor,
    pub wo: MxTensor,
    pub ffn1: MxTensor,
    pub ffn2: MxTensor,
    pub ln1_gamma: Vec<Bf16>,
    pub ln1_beta: Vec<Bf16>,
    pub ln2_gamma: Vec<Bf16>,
    pub ln2_beta: Vec<Bf16>,
}

/// Names of the six projections in execution order, used in calibration ids
/// and weight file names.
pub const PROJECTION_NAMES: [&str; 6] = ["wq", "wk", "wv", "wo", "ffn1", "ffn2"];

impl EncoderLayerWeights {
    pub fn projection(&self, name: &str) -> Option<&MxTensor> {
        match name {
            "wq" => Some(&self.wq),
            "wk" => Some(&self.wk),
            "wv" => Some(&self.wv),
            "wo" => Some(&self.wo),
            "ffn1" => Some(&self.ffn1),
            "ffn2" => Some(&self.ffn2),
            _ => None,
        }
    }
}

/// Weights for the whole stack plus the toy readout head.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelWeights {
    pub layers: Vec<EncoderLayerWeights>,
    pub head: Mat<f64>,
}

/// Knobs for seeded weight generation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GenSpec {
    pub seed: u64,
    /// Per-column scale spread in binades: each output column's weights are
    /// scaled by `2^u` with `u` uniform in `+/- spread/2`. Exercises
    /// multi-binade block exponents while keeping the spread narrow enough
    /// that exact projection sums stay exactly widenable.
    pub scale_spread: f64,
}

impl Default for GenSpec {
    fn default() -> Self {
        GenSpec { seed: 7, scale_spread: 4.0 }
    }
}

fn random_projection(
    rng: &mut ChaCha8Rng,
    d_in: usize,
    d_out: usize,
    spread: f64,
) -> MxTensor {
    let sigma = 1.0 / (d_in as f64).sqrt();
    let col_scale: Vec<f64> = (0..d_out)
        .map(|_| 2f64.powf(rng.random_range(-spread / 2.0..=spread / 2.0)))
        .collect();
    let m = Mat::from_fn(d_in, d_out, |_, j| {
        let g: f64 = rng.sample(StandardNormal);
        g * sigma * col_scale[j]
    });
    MxTensor::quantize_nearest(&m, Orientation::ColMajor)
}

fn random_ln_params(rng: &mut ChaCha8Rng, n: usize) -> (Vec<Bf16>, Vec<Bf16>) {
    let gamma = (0..n)
        .map(|_| {
            let g: f64 = rng.sample(StandardNormal);
            Bf16::from_f64(1.0 + 0.1 * g)
        })
        .collect();
    let beta = (0..n)
        .map(|_| {
            let g: f64 = rng.sample(StandardNormal);
            Bf16::from_f64(0.1 * g)
        })
        .collect();
    (gamma, beta)
}

impl ModelWeights {
    /// Seeded random weights: unit-scale Gaussians per input dimension with
    /// a bounded per-column binade spread.
    pub fn generate(cfg: &ModelConfig, spec: &GenSpec) -> Result<ModelWeights> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let mut layers = Vec::with_capacity(cfg.layers);
        for _ in 0..cfg.layers {
            let wq = random_projection(&mut rng, cfg.d_model, cfg.d_model, spec.scale_spread);
            let wk = random_projection(&mut rng, cfg.d_model, cfg.d_model, spec.scale_spread);
            let wv = random_projection(&mut rng, cfg.d_model, cfg.d_model, spec.scale_spread);
            let wo = random_projection(&mut rng, cfg.d_model, cfg.d_model, spec.scale_spread);
            let ffn1 = random_projection(&mut rng, cfg.d_model, cfg.ffn_dim, spec.scale_spread);
            let ffn2 = random_projection(&mut rng, cfg.ffn_dim, cfg.d_model, spec.scale_spread);
            let (ln1_gamma, ln1_beta) = random_ln_params(&mut rng, cfg.d_model);
            let (ln2_gamma, ln2_beta) = random_ln_params(&mut rng, cfg.d_model);
            layers.push(EncoderLayerWeights {
                wq,
                wk,
                wv,
                wo,
                ffn1,
                ffn2,
                ln1_gamma,
                ln1_beta,
                ln2_gamma,
                ln2_beta,
            });
        }
        let head = Mat::from_fn(cfg.d_model, HEAD_CLASSES, |_, _| {
            let g: f64 = rng.sample(StandardNormal);
            g / (cfg.d_model as f64).sqrt()
        });
        Ok(ModelWeights { layers, head })
    }

    /// Content hash over every stored tensor and parameter vector, used to
    /// bind calibration files to the weights they were measured on.
    pub fn fingerprint(&self) -> String {
        let mut hasher = Sha256::new();
        for layer in &self.layers {
            for name in PROJECTION_NAMES {
                let mut buf = Vec::new();
                crate::io::write_mxt1(layer.projection(name).unwrap(), &mut buf)
                    .expect("in-memory serialization cannot fail");
                hasher.update(&buf);
            }
            for params in [&layer.ln1_gamma, &layer.ln1_beta, &layer.ln2_gamma, &layer.ln2_beta]
            {
                for v in params.iter() {
                    hasher.update(v.to_bits().to_le_bytes());
                }
            }
        }
        for i in 0..self.head.rows() {
            for j in 0..self.head.cols() {
                hasher.update(self.head.get(i, j).to_le_bytes());
            }
        }
        hex_string(&hasher.finalize())
    }
}

fn hex_string(bytes: &[u8]) -> String {
    use std::fmt::Write;
    bytes.iter().fold(String::with_capacity(bytes.len() * 2), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

/// Calibration id of one projection, `layer{index}.{name}`.
pub fn projection_id(layer: usize, name: &str) -> String {
    format!("layer{layer}.{name}")
}

/// Exact product of a row-blocked activation tensor and a column-blocked
/// weight tensor: integer block dots accumulated as dyadics, widened once
/// per output element. This is the digital pipeline's projection semantics
/// and the value-level oracle for the ideal analog path.
pub fn exact_linear(x: &MxTensor, w: &MxTensor) -> Result<Mat<f64>> {
    if x.orientation() != Orientation::RowMajor || w.orientation() != Orientation::ColMajor {
        return Err(Error::config(
            "projection needs row-blocked activations and column-blocked weights",
        ));
    }
    if x.cols() != w.rows() {
        return Err(Error::dimension(format!(
            "activation width {} does not match weight height {}",
            x.cols(),
            w.rows()
        )));
    }
    let block_rows = x.cols() / BLOCK_SIZE;
    let grid_rows = x.rows().div_ceil(BLOCK_SIZE.min(x.rows().max(1)));
    let _ = grid_rows;
    // Precompute per-block activation codes for the whole input once.
    let mut acts: Vec<([i8; BLOCK_SIZE], i32)> = Vec::with_capacity(x.rows() * block_rows);
    for i in 0..x.rows() {
        for b in 0..block_rows {
            let blk = x.grid_block(i, b);
            acts.push((int5::activation_codes(blk), blk.scale.exponent()));
        }
    }
    let mut wts: Vec<([u8; BLOCK_SIZE], i32)> = Vec::with_capacity(w.cols() * block_rows);
    for j in 0..w.cols() {
        for b in 0..block_rows {
            let blk = w.grid_block(b, j);
            wts.push((int5::weight_codes(blk), blk.scale.exponent()));
        }
    }
    let mut out = Mat::zeros(x.rows(), w.cols());
    for i in 0..x.rows() {
        for j in 0..w.cols() {
            let mut sum = Dyadic::ZERO;
            for b in 0..block_rows {
                let (ref xa, e_x) = acts[i * block_rows + b];
                let (ref wa, e_w) = wts[j * block_rows + b];
                let (raw, bias) = crate::analog::block_dot_int5(xa, wa);
                let t = raw - bias;
                if t != 0 {
                    sum = sum.add(Dyadic::new(t as i128, e_x + e_w - 2));
                }
            }
            out.set(i, j, sum.to_f64());
        }
    }
    Ok(out)
}

/// Executes one projection and reports analog diagnostics when applicable.
trait ProjectionEngine {
    fn forward(&mut self, id: &str, x: &MxTensor, w: &MxTensor)
        -> Result<(Mat<f64>, ForwardDiag)>;
}

struct DigitalEngine;

impl ProjectionEngine for DigitalEngine {
    fn forward(
        &mut self,
        _id: &str,
        x: &MxTensor,
        w: &MxTensor,
    ) -> Result<(Mat<f64>, ForwardDiag)> {
        Ok((exact_linear(x, w)?, ForwardDiag::default()))
    }
}

/// Whether a configuration can run without stored calibration: an online
/// target strategy removes the static-target requirement, and an ideal
/// converter removes the full-scale requirement.
fn requires_calibration(cfg: &AnalogConfig) -> bool {
    let needs_target = matches!(cfg.cm, CmBudget::Limited(_))
        && matches!(
            cfg.strategy,
            ExponentStrategy::RowHist | ExponentStrategy::RowHistOffset(_)
        );
    matches!(cfg.adc, AdcResolution::Bits(_)) || needs_target
}

struct AnalogEngine<'a> {
    cfg: AnalogConfig,
    calibration: Option<&'a ModelCalibration>,
}

impl ProjectionEngine for AnalogEngine<'_> {
    fn forward(&mut self, id: &str, x: &MxTensor, w: &MxTensor)
        -> Result<(Mat<f64>, ForwardDiag)> {
        let mut layer = AnalogLayerModel::program(w, self.cfg.k_window)?;
        match self.calibration.and_then(|c| c.layer(id)) {
            Some(entry) => entry.apply(&mut layer),
            None => {
                if requires_calibration(&self.cfg) {
                    return Err(Error::MissingCalibration(format!(
                        "projection {id} has no calibration entry"
                    )));
                }
            }
        }
        analog_linear_forward_raw(x, &layer, &self.cfg)
    }
}

/// Runs the digital flow while calibrating every projection it passes.
struct CalibratingEngine {
    cfg: AnalogConfig,
    collected: Vec<crate::calib::LayerCalibration>,
}

impl ProjectionEngine for CalibratingEngine {
    fn forward(&mut self, id: &str, x: &MxTensor, w: &MxTensor)
        -> Result<(Mat<f64>, ForwardDiag)> {
        let mut layer = AnalogLayerModel::program(w, self.cfg.k_window)?;
        self.collected.push(calibrate_layer(x, &mut layer, &self.cfg, id)?);
        Ok((exact_linear(x, w)?, ForwardDiag::default()))
    }
}

/// One encoder layer over the block-quantized datapath.
///
/// Stage 1 normalizes the residual stream and projects queries, keys, and
/// values; stage 2 runs attention; stage 3 projects the attention output
/// back, adds the residual, and normalizes again; stage 4 expands and
/// applies the activation; stage 5 contracts and adds the second residual.
/// Activations requantize to block format at every buffer boundary; the
/// value path stays in converter units until attention ingests it.
fn encoder_layer_quantized(
    stream: &Mat<Bf16>,
    w: &EncoderLayerWeights,
    cfg: &ModelConfig,
    engine: &mut dyn ProjectionEngine,
    layer_index: usize,
) -> Result<(Mat<Bf16>, ForwardDiag)> {
    let mut diag = ForwardDiag::default();
    let id = |name: &str| projection_id(layer_index, name);

    // Stage 1: first normalization and the three attention projections.
    let y1 = layernorm_bf16(stream, &w.ln1_gamma, &w.ln1_beta)?;
    let x1 = MxTensor::quantize_nearest(&widen(&y1), Orientation::RowMajor);
    let (q_real, d) = engine.forward(&id("wq"), &x1, &w.wq)?;
    diag.merge(&d);
    let (k_real, d) = engine.forward(&id("wk"), &x1, &w.wk)?;
    diag.merge(&d);
    let (v_real, d) = engine.forward(&id("wv"), &x1, &w.wv)?;
    diag.merge(&d);
    let q = MxTensor::quantize_nearest(&q_real, Orientation::RowMajor);
    let k = MxTensor::quantize_nearest(&k_real, Orientation::RowMajor);

    // Stage 2: attention core.
    let attn_cfg = AttentionConfig::new(cfg.heads, cfg.d_k);
    let attn = attention_forward(&q, &k, &v_real, &attn_cfg)?;

    // Stage 3: output projection, residual, second normalization.
    let (o_real, d) = engine.forward(&id("wo"), &attn, &w.wo)?;
    diag.merge(&d);
    let o_bf = o_real.map(Bf16::from_f64);
    let mid = residual_add_bf16(stream, &o_bf)?;
    let y2 = layernorm_bf16(&mid, &w.ln2_gamma, &w.ln2_beta)?;
    let x2 = MxTensor::quantize_nearest(&widen(&y2), Orientation::RowMajor);

    // Stage 4: expansion and activation.
    let (f1_real, d) = engine.forward(&id("ffn1"), &x2, &w.ffn1)?;
    diag.merge(&d);
    let g = gelu_bf16(&f1_real.map(Bf16::from_f64));
    let x3 = MxTensor::quantize_nearest(&widen(&g), Orientation::RowMajor);

    // Stage 5: contraction and second residual.
    let (f2_real, d) = engine.forward(&id("ffn2"), &x3, &w.ffn2)?;
    diag.merge(&d);
    let f2_bf = f2_real.map(Bf16::from_f64);
    let out = residual_add_bf16(&mid, &f2_bf)?;
    Ok((out, diag))
}

fn layernorm_f64(x: &Mat<f64>, gamma: &[Bf16], beta: &[Bf16]) -> Mat<f64> {
    let n = x.cols() as f64;
    let mut out = Mat::zeros(x.rows(), x.cols());
    for i in 0..x.rows() {
        let mut sum = 0.0;
        for j in 0..x.cols() {
            sum += x.get(i, j);
        }
        let mean = sum / n;
        let mut sq = 0.0;
        for j in 0..x.cols() {
            let d = x.get(i, j) - mean;
            sq += d * d;
        }
        let inv = 1.0 / (sq / n).max(2.0f64.powi(-126)).sqrt();
        for j in 0..x.cols() {
            out.set(i, j, gamma[j].to_f64() * ((x.get(i, j) - mean) * inv) + beta[j].to_f64());
        }
    }
    out
}

fn gelu_f64(x: f64) -> f64 {
    x * 0.5 * libm::erfc(-x * std::f64::consts::FRAC_1_SQRT_2)
}

/// One encoder layer entirely in f64 with the same decoded weights.
fn encoder_layer_reference(
    stream: &Mat<f64>,
    w: &EncoderLayerWeights,
    cfg: &ModelConfig,
) -> Mat<f64> {
    let n = stream.rows();
    let y1 = layernorm_f64(stream, &w.ln1_gamma, &w.ln1_beta);
    let q = y1.matmul(&w.wq.to_real::<f64>());
    let k = y1.matmul(&w.wk.to_real::<f64>());
    let v = y1.matmul(&w.wv.to_real::<f64>());
    let mut attn = Mat::zeros(n, cfg.d_model);
    let scale = 1.0 / (cfg.d_k as f64).sqrt();
    for h in 0..cfg.heads {
        let qh = q.col_slice(h * cfg.d_k, cfg.d_k);
        let kh = k.col_slice(h * cfg.d_k, cfg.d_k);
        let vh = v.col_slice(h * cfg.d_k, cfg.d_k);
        let s = qh.matmul(&kh.transposed());
        for i in 0..n {
            let row: Vec<f64> = (0..n).map(|j| s.get(i, j) * scale).collect();
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = row.iter().map(|t| (t - m).exp()).collect();
            let l: f64 = e.iter().sum();
            for c in 0..cfg.d_k {
                let num: f64 = (0..n).map(|j| e[j] * vh.get(j, c)).sum();
                attn.set(i, h * cfg.d_k + c, num / l);
            }
        }
    }
    let o = attn.matmul(&w.wo.to_real::<f64>());
    let mid = Mat::from_fn(n, cfg.d_model, |i, j| stream.get(i, j) + o.get(i, j));
    let y2 = layernorm_f64(&mid, &w.ln2_gamma, &w.ln2_beta);
    let f1 = y2.matmul(&w.ffn1.to_real::<f64>());
    let g = f1.map(gelu_f64);
    let f2 = g.matmul(&w.ffn2.to_real::<f64>());
    Mat::from_fn(n, cfg.d_model, |i, j| mid.get(i, j) + f2.get(i, j))
}

/// Per-layer analog diagnostics for one forward pass.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ModelDiagnostics {
    pub per_layer: Vec<ForwardDiag>,
}

impl ModelDiagnostics {
    pub fn total(&self) -> ForwardDiag {
        let mut t = ForwardDiag::default();
        for d in &self.per_layer {
            t.merge(d);
        }
        t
    }
}

/// A forward pass's residual stream trace, widened to f64 regardless of the
/// mode's native precision so modes can be compared directly.
#[derive(Debug, Clone)]
pub struct ForwardOutput {
    /// Residual stream after every layer, in order.
    pub per_layer: Vec<Mat<f64>>,
    /// Final residual stream (equals the last trace entry, or the embedded
    /// tokens for an empty stack).
    pub stream: Mat<f64>,
    pub diagnostics: ModelDiagnostics,
}

fn widen(m: &Mat<Bf16>) -> Mat<f64> {
    m.map(|v| v.to_f64())
}

fn check_tokens(cfg: &ModelConfig, weights: &ModelWeights, tokens: &Mat<f64>) -> Result<()> {
    cfg.validate()?;
    if weights.layers.len() != cfg.layers {
        return Err(Error::config(format!(
            "weight bundle has {} layers, config says {}",
            weights.layers.len(),
            cfg.layers
        )));
    }
    if tokens.cols() != cfg.d_model {
        return Err(Error::dimension(format!(
            "token width {} does not match model width {}",
            tokens.cols(),
            cfg.d_model
        )));
    }
    if tokens.rows() == 0 {
        return Err(Error::dimension("empty token matrix"));
    }
    if tokens.rows() > cfg.max_seq {
        return Err(Error::dimension(format!(
            "sequence of {} tokens exceeds the configured maximum {}",
            tokens.rows(),
            cfg.max_seq
        )));
    }
    Ok(())
}

/// Runs the full stack in the requested mode.
///
/// Tokens embed by elementwise rounding to BF16 in the quantized modes and
/// pass through unchanged in the reference mode; an empty stack is the
/// identity on the embedded stream.
pub fn model_forward(
    cfg: &ModelConfig,
    weights: &ModelWeights,
    tokens: &Mat<f64>,
    mode: &ExecutionMode,
    calibration: Option<&ModelCalibration>,
) -> Result<ForwardOutput> {
    check_tokens(cfg, weights, tokens)?;
    if let Some(calib) = calibration {
        if !calib.model_hash.is_empty() && calib.model_hash != weights.fingerprint() {
            return Err(Error::config(
                "calibration was measured on different weights (hash mismatch)",
            ));
        }
    }
    let mut diagnostics = ModelDiagnostics::default();
    let mut per_layer = Vec::with_capacity(cfg.layers);
    let stream = match mode {
        ExecutionMode::ReferenceF64 => {
            let mut s = tokens.clone();
            for w in &weights.layers {
                s = encoder_layer_reference(&s, w, cfg);
                per_layer.push(s.clone());
                diagnostics.per_layer.push(ForwardDiag::default());
            }
            s
        }
        ExecutionMode::DigitalMXFP4 | ExecutionMode::Analog(_) => {
            let mut engine: Box<dyn ProjectionEngine> = match mode {
                ExecutionMode::DigitalMXFP4 => Box::new(DigitalEngine),
                ExecutionMode::Analog(acfg) => {
                    acfg.validate()?;
                    Box::new(AnalogEngine { cfg: *acfg, calibration })
                }
                ExecutionMode::ReferenceF64 => unreachable!(),
            };
            let mut s = tokens.map(Bf16::from_f64);
            for (l, w) in weights.layers.iter().enumerate() {
                let (next, diag) = encoder_layer_quantized(&s, w, cfg, engine.as_mut(), l)?;
                s = next;
                per_layer.push(widen(&s));
                diagnostics.per_layer.push(diag);
            }
            widen(&s)
        }
    };
    Ok(ForwardOutput { per_layer, stream, diagnostics })
}

/// Calibrates every projection of the stack by running the digital flow on
/// the given tokens and measuring each projection's input as it streams by.
pub fn calibrate_model(
    cfg: &ModelConfig,
    weights: &ModelWeights,
    tokens: &Mat<f64>,
    analog_cfg: &AnalogConfig,
) -> Result<ModelCalibration> {
    check_tokens(cfg, weights, tokens)?;
    analog_cfg.validate()?;
    let mut engine = CalibratingEngine { cfg: *analog_cfg, collected: Vec::new() };
    let mut s = tokens.map(Bf16::from_f64);
    for (l, w) in weights.layers.iter().enumerate() {
        let (next, _) = encoder_layer_quantized(&s, w, cfg, &mut engine, l)?;
        s = next;
    }
    Ok(ModelCalibration {
        model_hash: weights.fingerprint(),
        strategy: analog_cfg.strategy,
        per_layer: engine.collected,
    })
}

/// Argmax class per token under the toy linear readout, ties to the lowest
/// class index.
pub fn top1_per_token(stream: &Mat<f64>, head: &Mat<f64>) -> Vec<usize> {
    let logits = stream.matmul(head);
    (0..logits.rows())
        .map(|i| {
            let mut best = 0;
            for c in 1..logits.cols() {
                if logits.get(i, c) > logits.get(i, best) {
                    best = c;
                }
            }
            best
        })
        .collect()
}

fn agreement(a: &[usize], b: &[usize]) -> f64 {
    let matches = a.iter().zip(b).filter(|(x, y)| x == y).count();
    matches as f64 / a.len().max(1) as f64
}

fn max_abs_diff(a: &Mat<f64>, b: &Mat<f64>) -> f64 {
    let mut m = 0.0f64;
    for i in 0..a.rows() {
        for j in 0..a.cols() {
            m = m.max((a.get(i, j) - b.get(i, j)).abs());
        }
    }
    m
}

/// Error report between the three execution modes on one token matrix.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModeComparison {
    /// Relative Frobenius error of the residual stream after each layer.
    pub per_layer_digital_vs_reference: Vec<f64>,
    pub per_layer_analog_vs_digital: Vec<f64>,
    pub end_to_end_digital_vs_reference: f64,
    pub end_to_end_analog_vs_digital: f64,
    pub max_abs_analog_vs_digital: f64,
    /// Aggregated analog event counts over the whole pass.
    pub analog_events: ForwardDiag,
    pub top1_agreement_digital_vs_reference: f64,
    pub top1_agreement_analog_vs_digital: f64,
}

/// Runs all three modes on the same tokens and reports their divergences.
pub fn compare_modes(
    cfg: &ModelConfig,
    weights: &ModelWeights,
    tokens: &Mat<f64>,
    analog_cfg: &AnalogConfig,
    calibration: Option<&ModelCalibration>,
) -> Result<ModeComparison> {
    let reference = model_forward(cfg, weights, tokens, &ExecutionMode::ReferenceF64, None)?;
    let digital = model_forward(cfg, weights, tokens, &ExecutionMode::DigitalMXFP4, None)?;
    let analog =
        model_forward(cfg, weights, tokens, &ExecutionMode::Analog(*analog_cfg), calibration)?;
    let per_layer_digital_vs_reference = digital
        .per_layer
        .iter()
        .zip(&reference.per_layer)
        .map(|(d, r)| rel_frobenius_error(d, r))
        .collect();
    let per_layer_analog_vs_digital = analog
        .per_layer
        .iter()
        .zip(&digital.per_layer)
        .map(|(a, d)| rel_frobenius_error(a, d))
        .collect();
    let t_ref = top1_per_token(&reference.stream, &weights.head);
    let t_dig = top1_per_token(&digital.stream, &weights.head);
    let t_ana = top1_per_token(&analog.stream, &weights.head);
    Ok(ModeComparison {
        per_layer_digital_vs_reference,
        per_layer_analog_vs_digital,
        end_to_end_digital_vs_reference: rel_frobenius_error(&digital.stream, &reference.stream),
        end_to_end_analog_vs_digital: rel_frobenius_error(&analog.stream, &digital.stream),
        max_abs_analog_vs_digital: max_abs_diff(&analog.stream, &digital.stream),
        analog_events: analog.diagnostics.total(),
        top1_agreement_digital_vs_reference: agreement(&t_dig, &t_ref),
        top1_agreement_analog_vs_digital: agreement(&t_ana, &t_dig),
    })
}

/// Writes a model bundle: `config.json`, per-layer block-format weight
/// files, per-layer normalization parameters, and the readout head.
pub fn save_model(dir: &Path, cfg: &ModelConfig, weights: &ModelWeights) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let file = std::fs::File::create(dir.join("config.json"))?;
    serde_json::to_writer_pretty(std::io::BufWriter::new(file), cfg)?;
    for (l, layer) in weights.layers.iter().enumerate() {
        for name in PROJECTION_NAMES {
            let path = dir.join(format!("layer{l}.{name}.mxt1"));
            crate::io::save_mxt1(layer.projection(name).unwrap(), path)?;
        }
        let ln = Mat::from_fn(4, cfg.d_model, |r, j| {
            let params = [&layer.ln1_gamma, &layer.ln1_beta, &layer.ln2_gamma, &layer.ln2_beta];
            params[r][j].to_f64()
        });
        crate::io::save_f64m(&ln, dir.join(format!("layer{l}.ln.f64m")))?;
    }
    crate::io::save_f64m(&weights.head, dir.join("head.f64m"))?;
    Ok(())
}

/// Loads a bundle written by [`save_model`].
pub fn load_model(dir: &Path) -> Result<(ModelConfig, ModelWeights)> {
    let file = std::fs::File::open(dir.join("config.json"))?;
    let cfg: ModelConfig = serde_json::from_reader(std::io::BufReader::new(file))?;
    cfg.validate()?;
    let mut layers = Vec::with_capacity(cfg.layers);
    for l in 0..cfg.layers {
        let mut named = Vec::with_capacity(6);
        for name in PROJECTION_NAMES {
            named.push(crate::io::load_mxt1(dir.join(format!("layer{l}.{name}.mxt1")))?);
        }
        let ln = crate::io::load_f64m(dir.join(format!("layer{l}.ln.f64m")))?;
        if ln.rows() != 4 || ln.cols() != cfg.d_model {
            return Err(Error::format(
                "F64M",
                format!(
                    "normalization parameter file for layer {l} has shape {}x{}",
                    ln.rows(),
                    ln.cols()
                ),
            ));
        }
        let row = |r: usize| (0..cfg.d_model).map(|j| Bf16::from_f64(ln.get(r, j))).collect();
        let mut it = named.into_iter();
        layers.push(EncoderLayerWeights {
            wq: it.next().unwrap(),
            wk: it.next().unwrap(),
            wv: it.next().unwrap(),
            wo: it.next().unwrap(),
            ffn1: it.next().unwrap(),
            ffn2: it.next().unwrap(),
            ln1_gamma: row(0),
            ln1_beta: row(1),
            ln2_gamma: row(2),
            ln2_beta: row(3),
        });
    }
    let head = crate::io::load_f64m(dir.join("head.f64m"))?;
    Ok((cfg, ModelWeights { layers, head }))
}
