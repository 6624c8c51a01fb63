//! Behavioral model of the analog in-memory dot-product datapath.
//!
//! Weights live in the array as 5-bit non-negative conductance codes, grouped
//! in 32-tall blocks down the reduction axis with one stored exponent per
//! block. Activations arrive as signed 5-bit codes and are applied over bit
//! planes. Each block's integer sum is shifted to a layer-wide target
//! exponent by a current mirror with a limited attenuation budget, the offset
//! introduced by the non-negative weight encoding is removed through a
//! matching bias column, and the merged column value is digitized by a
//! successive-approximation converter.
//!
//! Everything ahead of the converter is exact dyadic arithmetic, so the only
//! lossy steps are the three modeled non-idealities: blocks falling outside
//! the shift window (underflow to zero, or saturating overflow), the
//! converter's finite code grid, and the static per-block exponent field
//! clipping applied at programming time.

use std::cmp::Ordering;
use std::fmt;
use std::str::FromStr;

use serde::de::{self, Deserializer, Visitor};
use serde::ser::Serializer;
use serde::{Deserialize, Serialize};

use crate::block::BLOCK_SIZE;
use crate::dyadic::Dyadic;
use crate::error::Error;
use crate::fp4::pow2_wide;
use crate::int5;
use crate::tensor::{Mat, MxTensor, Orientation};
use crate::Result;

/// Number of activation bit planes (signed 5-bit codes).
pub const BIT_PLANES: usize = 5;

/// Largest attainable magnitude of a bias-removed block sum in code units:
/// 32 lanes, each at most 4 * 6 * 6.
pub const BLOCK_SUM_MAX: i64 = 4608;

/// Attenuation budget of the runtime alignment shifter, in binades.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CmBudget {
    /// Blocks more than this many binades below the target underflow.
    Limited(u32),
    /// No lower limit; every block at or below the target aligns exactly.
    Unbounded,
}

impl Serialize for CmBudget {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            CmBudget::Limited(b) => s.serialize_u32(*b),
            CmBudget::Unbounded => s.serialize_str("unbounded"),
        }
    }
}

impl<'de> Deserialize<'de> for CmBudget {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        struct V;
        impl Visitor<'_> for V {
            type Value = CmBudget;
            fn expecting(&self, f: &mut fmt::Formatter) -> fmt::Result {
                f.write_str("a shift budget in binades or \"unbounded\"")
            }
            fn visit_u64<E: de::Error>(self, v: u64) -> std::result::Result<CmBudget, E> {
                u32::try_from(v)
                    .map(CmBudget::Limited)
                    .map_err(|_| E::custom("shift budget out of range"))
            }
            fn visit_i64<E: de::Error>(self, v: i64) -> std::result::Result<CmBudget, E> {
                u32::try_from(v)
                    .map(CmBudget::Limited)
                    .map_err(|_| E::custom("shift budget must be non-negative"))
            }
            fn visit_str<E: de::Error>(self, v: &str) -> std::result::Result<CmBudget, E> {
                match v {
                    "unbounded" => Ok(CmBudget::Unbounded),
                    _ => Err(E::custom("expected a number or \"unbounded\"")),
                }
            }
        }
        d.deserialize_any(V)
    }
}

/// Converter precision: a concrete signed code width, or an exact pass-through.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AdcResolution {
    Bits(u8),
    Ideal,
}

impl Serialize for AdcResolution {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            AdcResolution::Bits(b) => s.serialize_u8(*b),
            AdcResolution::Ideal => s.serialize_str("ideal"),
        }
    }
}

impl<'de> Deserialize<'de> for AdcResolution {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        struct V;
        impl Visitor<'_> for V {
            type Value = AdcResolution;
            fn expecting(&self, f: &mut fmt::Formatter) -> fmt::Result {
                f.write_str("a converter bit width or \"ideal\"")
            }
            fn visit_u64<E: de::Error>(self, v: u64) -> std::result::Result<AdcResolution, E> {
                u8::try_from(v)
                    .map(AdcResolution::Bits)
                    .map_err(|_| E::custom("converter width out of range"))
            }
            fn visit_i64<E: de::Error>(self, v: i64) -> std::result::Result<AdcResolution, E> {
                u8::try_from(v)
                    .map(AdcResolution::Bits)
                    .map_err(|_| E::custom("converter width out of range"))
            }
            fn visit_str<E: de::Error>(self, v: &str) -> std::result::Result<AdcResolution, E> {
                match v {
                    "ideal" => Ok(AdcResolution::Ideal),
                    _ => Err(E::custom("expected a number or \"ideal\"")),
                }
            }
        }
        d.deserialize_any(V)
    }
}

/// How calibration picks each layer's target exponent.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ExponentStrategy {
    /// Largest block scale observed on calibration data: no overflow there.
    #[default]
    RowHist,
    /// Fixed target at exponent zero, ignoring the data.
    Row0,
    /// Median observed block scale, trading overflow against underflow.
    RowOptimal,
    /// Largest observed scale plus a signed offset in binades.
    RowHistOffset(i32),
}

impl fmt::Display for ExponentStrategy {
    fn fmt(&self, f: &mut fmt::Formatter) -> fmt::Result {
        match self {
            ExponentStrategy::RowHist => f.write_str("row-hist"),
            ExponentStrategy::Row0 => f.write_str("row0"),
            ExponentStrategy::RowOptimal => f.write_str("row-optimal"),
            ExponentStrategy::RowHistOffset(c) => write!(f, "row-hist-offset({c})"),
        }
    }
}

impl FromStr for ExponentStrategy {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "row-hist" => Ok(ExponentStrategy::RowHist),
            "row0" => Ok(ExponentStrategy::Row0),
            "row-optimal" => Ok(ExponentStrategy::RowOptimal),
            other => {
                let inner = other
                    .strip_prefix("row-hist-offset(")
                    .and_then(|r| r.strip_suffix(')'))
                    .and_then(|r| r.parse::<i32>().ok());
                inner.map(ExponentStrategy::RowHistOffset).ok_or_else(|| {
                    Error::config(format!(
                        "unknown exponent strategy {other:?}; expected row-hist, row0, \
                         row-optimal, or row-hist-offset(<binades>)"
                    ))
                })
            }
        }
    }
}

impl Serialize for ExponentStrategy {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for ExponentStrategy {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let raw = String::deserialize(d)?;
        raw.parse().map_err(de::Error::custom)
    }
}

/// Knob settings for one analog forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AnalogConfig {
    #[serde(rename = "cm_bits")]
    pub cm: CmBudget,
    #[serde(rename = "adc_bits")]
    pub adc: AdcResolution,
    /// Width of the per-block exponent field window applied when a layer is
    /// programmed; `None` disables clipping. Forward passes use the window
    /// baked into the layer model, not this knob.
    #[serde(rename = "k", default = "default_k_window")]
    pub k_window: Option<u32>,
    /// Re-run tagged blocks once at a target lowered by the shift budget.
    #[serde(default)]
    pub two_pass: bool,
    #[serde(default)]
    pub strategy: ExponentStrategy,
}

fn default_k_window() -> Option<u32> {
    Some(7)
}

impl Default for AnalogConfig {
    fn default() -> Self {
        AnalogConfig {
            cm: CmBudget::Limited(3),
            adc: AdcResolution::Bits(10),
            k_window: Some(7),
            two_pass: false,
            strategy: ExponentStrategy::RowHist,
        }
    }
}

impl AnalogConfig {
    /// Lossless reference setting: unlimited shift budget, exact conversion,
    /// no exponent field clipping. With a no-overflow target this reproduces
    /// the digital reference bit for bit.
    pub fn ideal() -> Self {
        AnalogConfig {
            cm: CmBudget::Unbounded,
            adc: AdcResolution::Ideal,
            k_window: None,
            two_pass: false,
            strategy: ExponentStrategy::RowHist,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if let CmBudget::Limited(b) = self.cm {
            if b > 10 {
                return Err(Error::config(format!(
                    "shift budget {b} binades exceeds the plausible mirror range (10)"
                )));
            }
        }
        if let AdcResolution::Bits(b) = self.adc {
            if !(4..=24).contains(&b) {
                return Err(Error::config(format!(
                    "converter width {b} outside the supported 4..=24 bits"
                )));
            }
        }
        if self.two_pass && self.cm == CmBudget::Unbounded {
            return Err(Error::config(
                "a second pass needs a finite shift budget to lower the target by",
            ));
        }
        Ok(())
    }
}

/// One block's contribution before alignment: the bias-removed integer sum
/// and the exponents it carries.
#[derive(Debug, Clone, Copy)]
pub struct BlockPartial {
    /// Bias-removed integer sum; four times the block dot in scale units.
    pub t: i64,
    /// Activation block exponent.
    pub e_x: i32,
    /// Weight block exponent as realized by the programmed field.
    pub e_w: i32,
}

/// Alignment outcome for one block.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BlockTag {
    InWindow,
    Underflow,
    Overflow,
}

/// Exact aligned column sum plus the per-block window verdicts.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AlignOutcome {
    /// Column sum in integer code units at the target exponent, exact.
    pub sum: Dyadic,
    pub tags: Vec<BlockTag>,
    /// Blocks that missed the first window but were recovered by a second
    /// pass; zero for single-pass alignment.
    pub recovered: u32,
}

impl AlignOutcome {
    fn count(&self, tag: BlockTag) -> u64 {
        self.tags.iter().filter(|t| **t == tag).count() as u64
    }
}

/// Integer dot of an activation block against a stored weight block.
///
/// Returns the raw accumulation and the bias column's matching term; their
/// difference is the true signed dot in code units. Zero-valued lanes drop
/// out of both, so an all-zero activation block yields `(0, 0)`.
pub fn block_dot_int5(x: &[i8; BLOCK_SIZE], w: &[u8; BLOCK_SIZE]) -> (i64, i64) {
    let mut raw = 0i64;
    let mut x_total = 0i64;
    for i in 0..BLOCK_SIZE {
        debug_assert!((-12..=12).contains(&x[i]) && w[i] <= 24);
        raw += x[i] as i64 * w[i] as i64;
        x_total += x[i] as i64;
    }
    (raw, int5::WEIGHT_BIAS as i64 * x_total)
}

/// Splits activation codes into five bit planes of their two's-complement
/// representation, most significant plane last.
pub fn bitplane_expand(x: &[i8; BLOCK_SIZE]) -> [[u8; BLOCK_SIZE]; BIT_PLANES] {
    let mut planes = [[0u8; BLOCK_SIZE]; BIT_PLANES];
    for i in 0..BLOCK_SIZE {
        debug_assert!((-12..=12).contains(&x[i]));
        let tc = (x[i] as u8) & 0x1F;
        for (j, plane) in planes.iter_mut().enumerate() {
            plane[i] = (tc >> j) & 1;
        }
    }
    planes
}

/// Accumulates per-plane partial dots back into the raw block sum.
///
/// The top plane carries the two's-complement sign and enters negated;
/// the result equals the raw term of [`block_dot_int5`] exactly.
pub fn bitplane_recombine(planes: &[[u8; BLOCK_SIZE]; BIT_PLANES], w: &[u8; BLOCK_SIZE]) -> i64 {
    let mut total = 0i64;
    for (j, plane) in planes.iter().enumerate() {
        let t_j: i64 = plane
            .iter()
            .zip(w.iter())
            .map(|(&bit, &wi)| bit as i64 * wi as i64)
            .sum();
        let signed = if j == BIT_PLANES - 1 { -t_j } else { t_j };
        total += signed << j;
    }
    total
}

/// Aligns block sums to the target exponent under the shift budget.
///
/// Each block's scale gap is `(e_x + e_w) - e_n`. Gaps in `[-budget, 0]`
/// contribute `t * 2^gap` exactly; gaps below the window underflow to zero;
/// gaps above it saturate to the signed block maximum. Blocks whose sum is
/// already zero carry no information and are never tagged. The sum stays in
/// a 128-bit dyadic accumulator, which panics rather than rounding if fed
/// scale spans beyond roughly a hundred binades.
pub fn align_blocks(partials: &[BlockPartial], e_n: i32, cm: CmBudget) -> AlignOutcome {
    let mut sum = Dyadic::ZERO;
    let mut tags = Vec::with_capacity(partials.len());
    for p in partials {
        if p.t == 0 {
            tags.push(BlockTag::InWindow);
            continue;
        }
        let gap = p.e_x + p.e_w - e_n;
        let in_lower = match cm {
            CmBudget::Limited(b) => gap >= -(b as i32),
            CmBudget::Unbounded => true,
        };
        if gap > 0 {
            let clamp = p.t.signum() * BLOCK_SUM_MAX;
            sum = sum.add(Dyadic::from_int(clamp as i128));
            tags.push(BlockTag::Overflow);
        } else if in_lower {
            sum = sum.add(Dyadic::new(p.t as i128, gap));
            tags.push(BlockTag::InWindow);
        } else {
            tags.push(BlockTag::Underflow);
        }
    }
    AlignOutcome { sum, tags, recovered: 0 }
}

/// Two-pass alignment: blocks tagged underflow are re-aligned at a target
/// lowered by the budget and folded back in, scaled to the original target.
///
/// Gaps in `[-2*budget, -budget)` are recovered exactly; deeper blocks stay
/// zero and keep their tag. With no overflowing blocks the merged sum equals
/// single-pass alignment with twice the budget.
pub fn two_pass_column(partials: &[BlockPartial], e_n: i32, cm_bits: u32) -> AlignOutcome {
    let first = align_blocks(partials, e_n, CmBudget::Limited(cm_bits));
    let missed: Vec<BlockPartial> = partials
        .iter()
        .zip(first.tags.iter())
        .filter(|(_, tag)| **tag == BlockTag::Underflow)
        .map(|(p, _)| *p)
        .collect();
    if missed.is_empty() {
        return first;
    }
    let cm = cm_bits as i32;
    let second = align_blocks(&missed, e_n - cm, CmBudget::Limited(cm_bits));
    let sum = first.sum.add(second.sum.mul_pow2(-cm));
    let mut tags = first.tags.clone();
    let mut recovered = 0u32;
    let mut second_tags = second.tags.iter();
    for tag in tags.iter_mut() {
        if *tag == BlockTag::Underflow {
            let verdict = second_tags.next().expect("one verdict per missed block");
            debug_assert_ne!(*verdict, BlockTag::Overflow, "gap below -budget cannot overflow");
            if *verdict == BlockTag::InWindow {
                *tag = BlockTag::InWindow;
                recovered += 1;
            }
        }
    }
    AlignOutcome { sum, tags, recovered }
}

/// A digitized column value.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AdcReading {
    pub code: i64,
    /// Whether the column magnitude strictly exceeded full scale. A value
    /// exactly at positive full scale clamps to the top code (the signed
    /// grid stops one step short) without being counted: with a calibrated
    /// power-of-two full scale that is a legitimate top-code hit.
    pub saturated: bool,
}

/// Digitizes an exact column sum against a power-of-two full scale.
///
/// The step is `2^(fullscale_exp - bits + 1)`; the ratio rounds half to even
/// and clamps to the signed code range.
pub fn adc_quantize(sum: &Dyadic, adc_bits: u8, fullscale_exp: i32) -> AdcReading {
    debug_assert!((4..=24).contains(&adc_bits));
    let half = 1i128 << (adc_bits - 1);
    let lsb_exp = fullscale_exp - (adc_bits as i32 - 1);
    let code = sum.round_div_pow2(lsb_exp).clamp(-half, half - 1) as i64;
    let saturated = sum.abs_cmp_pow2(fullscale_exp) == Ordering::Greater;
    AdcReading { code, saturated }
}

/// Floating-point variant of [`adc_quantize`] for arbitrary full scales.
///
/// Rounding happens in `f64`, so near-tie ratios can differ from the exact
/// dyadic path; the simulator core always uses the exact form.
pub fn adc_quantize_real(sum: f64, adc_bits: u8, fullscale: f64) -> AdcReading {
    debug_assert!((4..=24).contains(&adc_bits) && fullscale > 0.0);
    let half = 1i64 << (adc_bits - 1);
    let lsb = fullscale / half as f64;
    let code = (sum / lsb).round_ties_even().clamp(-(half as f64), (half - 1) as f64) as i64;
    AdcReading { code, saturated: sum.abs() > fullscale }
}

/// A weight matrix programmed into the array: conductance codes, realized
/// block exponents, the layer's target exponent, and the converter full
/// scale once calibrated.
///
/// The exponent field window is applied here, at programming time: block
/// weight exponents more than the window width below the layer's largest are
/// raised to the window edge, mis-scaling those blocks and bumping the clip
/// counter. That trade is independent of the target exponent, so the target
/// can be set or changed later without reprogramming.
#[derive(Debug, Clone)]
pub struct AnalogLayerModel {
    d_in: usize,
    d_out: usize,
    /// Per (column, block-row): the 32 stored codes.
    codes: Vec<[u8; BLOCK_SIZE]>,
    /// Realized weight block exponents, same indexing.
    e_w: Vec<i32>,
    e_n: i32,
    max_e_w: i32,
    k_window: Option<u32>,
    et_clips: u64,
    fullscale_exp: Option<i32>,
}

impl AnalogLayerModel {
    /// Programs quantized weights into an array image. The tensor must be
    /// blocked down the reduction axis (column-major) with a whole number of
    /// blocks per column. The target exponent starts at zero; calibration
    /// sets the real one.
    pub fn program(weights: &MxTensor, k_window: Option<u32>) -> Result<Self> {
        if weights.orientation() != Orientation::ColMajor {
            return Err(Error::config(
                "array weights must be blocked down the reduction axis (column-major)",
            ));
        }
        if weights.rows() % BLOCK_SIZE != 0 || weights.rows() == 0 {
            return Err(Error::dimension(format!(
                "reduction depth {} is not a whole number of {BLOCK_SIZE}-blocks",
                weights.rows()
            )));
        }
        let d_in = weights.rows();
        let d_out = weights.cols();
        let block_rows = d_in / BLOCK_SIZE;
        let mut codes = Vec::with_capacity(block_rows * d_out);
        let mut e_w = Vec::with_capacity(block_rows * d_out);
        let mut max_e_w = i32::MIN;
        for j in 0..d_out {
            for b in 0..block_rows {
                let block = weights.grid_block(b, j);
                codes.push(int5::weight_codes(block));
                let e = block.scale.exponent();
                e_w.push(e);
                max_e_w = max_e_w.max(e);
            }
        }
        let mut et_clips = 0u64;
        if let Some(k) = k_window {
            let floor = max_e_w - k as i32;
            for e in e_w.iter_mut() {
                if *e < floor {
                    *e = floor;
                    et_clips += 1;
                }
            }
        }
        Ok(AnalogLayerModel {
            d_in,
            d_out,
            codes,
            e_w,
            e_n: 0,
            max_e_w,
            k_window,
            et_clips,
            fullscale_exp: None,
        })
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.d_in, self.d_out)
    }

    /// Blocks along the reduction axis per output column.
    pub fn block_rows(&self) -> usize {
        self.d_in / BLOCK_SIZE
    }

    pub fn target_exponent(&self) -> i32 {
        self.e_n
    }

    pub fn set_target_exponent(&mut self, e_n: i32) {
        self.e_n = e_n;
    }

    /// Smallest target-to-weight exponent distance across blocks; the
    /// per-block field stores distances in `[this, this + window]`.
    pub fn min_target_offset(&self) -> i32 {
        self.e_n - self.max_e_w
    }

    pub fn exponent_field_window(&self) -> Option<u32> {
        self.k_window
    }

    /// Blocks whose stored exponent was raised to the window edge.
    pub fn et_clips(&self) -> u64 {
        self.et_clips
    }

    pub fn fullscale_exp(&self) -> Option<i32> {
        self.fullscale_exp
    }

    pub fn set_fullscale_exp(&mut self, e: i32) {
        self.fullscale_exp = Some(e);
    }

    pub fn block_codes(&self, block_row: usize, col: usize) -> &[u8; BLOCK_SIZE] {
        &self.codes[col * self.block_rows() + block_row]
    }

    /// Realized (possibly clipped) weight exponent of one block.
    pub fn block_weight_exponent(&self, block_row: usize, col: usize) -> i32 {
        self.e_w[col * self.block_rows() + block_row]
    }
}

/// Aggregate non-ideality counters from a forward pass.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ForwardDiag {
    /// Blocks that missed the first alignment window.
    pub underflow_blocks: u64,
    /// Blocks still zeroed after any recovery pass.
    pub residual_underflow_blocks: u64,
    pub overflow_blocks: u64,
    pub adc_saturations: u64,
    /// Static exponent-field clips from programming (copied from the layer).
    pub et_clips: u64,
}

impl ForwardDiag {
    pub fn merge(&mut self, other: &ForwardDiag) {
        self.underflow_blocks += other.underflow_blocks;
        self.residual_underflow_blocks += other.residual_underflow_blocks;
        self.overflow_blocks += other.overflow_blocks;
        self.adc_saturations += other.adc_saturations;
        self.et_clips += other.et_clips;
    }

    pub fn is_clean(&self) -> bool {
        *self == ForwardDiag::default()
    }
}

struct ColumnDrive<'a> {
    layer: &'a AnalogLayerModel,
    cfg: &'a AnalogConfig,
    row_codes: Vec<[i8; BLOCK_SIZE]>,
    row_exps: Vec<i32>,
}

/// One column evaluation: the exact converter-input sum in code units, the
/// target exponent that column aligned to, and the per-block verdicts.
struct ColumnEval {
    sum: Dyadic,
    target: i32,
    outcome: AlignOutcome,
}

impl<'a> ColumnDrive<'a> {
    fn load_row(x: &MxTensor, r: usize, layer: &'a AnalogLayerModel, cfg: &'a AnalogConfig) -> Self {
        let blocks = layer.block_rows();
        let row_codes = (0..blocks)
            .map(|b| int5::activation_codes(x.grid_block(r, b)))
            .collect();
        let row_exps = (0..blocks)
            .map(|b| x.grid_block(r, b).scale.exponent())
            .collect();
        ColumnDrive { layer, cfg, row_codes, row_exps }
    }

    /// Target exponent for one column evaluation. The offline strategies use
    /// the calibrated layer target; the online ones derive it from the
    /// scales present in this evaluation.
    fn column_target(&self, col: usize) -> i32 {
        match self.cfg.strategy {
            ExponentStrategy::RowHist | ExponentStrategy::RowHistOffset(_) => self.layer.e_n,
            ExponentStrategy::Row0 => {
                self.row_exps[0] + self.layer.block_weight_exponent(0, col)
            }
            ExponentStrategy::RowOptimal => {
                let mut scales: Vec<i32> = (0..self.layer.block_rows())
                    .map(|b| self.row_exps[b] + self.layer.block_weight_exponent(b, col))
                    .collect();
                scales.sort_unstable();
                // Upper median for even counts: leaning high trades some
                // underflow for fewer saturating overflows.
                scales[scales.len() / 2]
            }
        }
    }

    /// Runs one column: block dots, alignment under the budget, and the
    /// division by the two affine doublings, all exact.
    fn column_sum(&self, col: usize) -> ColumnEval {
        let target = self.column_target(col);
        let partials: Vec<BlockPartial> = (0..self.layer.block_rows())
            .map(|b| {
                let (raw, bias) = block_dot_int5(&self.row_codes[b], self.layer.block_codes(b, col));
                BlockPartial {
                    t: raw - bias,
                    e_x: self.row_exps[b],
                    e_w: self.layer.block_weight_exponent(b, col),
                }
            })
            .collect();
        let outcome = match (self.cfg.two_pass, self.cfg.cm) {
            (true, CmBudget::Limited(cm)) => two_pass_column(&partials, target, cm),
            _ => align_blocks(&partials, target, self.cfg.cm),
        };
        ColumnEval { sum: outcome.sum.mul_pow2(-2), target, outcome }
    }
}

fn check_forward_shapes(x: &MxTensor, layer: &AnalogLayerModel, cfg: &AnalogConfig) -> Result<()> {
    cfg.validate()?;
    if x.orientation() != Orientation::RowMajor {
        return Err(Error::config(
            "activations must be blocked along rows (row-major) to stream into the array",
        ));
    }
    if x.cols() != layer.d_in {
        return Err(Error::dimension(format!(
            "input width {} does not match the programmed reduction depth {}",
            x.cols(),
            layer.d_in
        )));
    }
    Ok(())
}

/// Runs the analog path and returns decoded real column values.
///
/// This is the raw tap used for outputs that stay in converter units (the
/// value path of attention); projections that feed further quantized stages
/// go through [`analog_linear_forward`] instead.
pub fn analog_linear_forward_raw(
    x: &MxTensor,
    layer: &AnalogLayerModel,
    cfg: &AnalogConfig,
) -> Result<(Mat<f64>, ForwardDiag)> {
    check_forward_shapes(x, layer, cfg)?;
    let adc_setup = match cfg.adc {
        AdcResolution::Ideal => None,
        AdcResolution::Bits(bits) => {
            let fs = layer.fullscale_exp.ok_or_else(|| {
                Error::MissingCalibration(
                    "converter full scale is unset; run calibration first".into(),
                )
            })?;
            Some((bits, fs))
        }
    };
    let mut out = Mat::zeros(x.rows(), layer.d_out);
    let mut diag = ForwardDiag { et_clips: layer.et_clips, ..ForwardDiag::default() };
    for r in 0..x.rows() {
        let drive = ColumnDrive::load_row(x, r, layer, cfg);
        for j in 0..layer.d_out {
            let eval = drive.column_sum(j);
            let residual = eval.outcome.count(BlockTag::Underflow);
            diag.underflow_blocks += residual + eval.outcome.recovered as u64;
            diag.residual_underflow_blocks += residual;
            diag.overflow_blocks += eval.outcome.count(BlockTag::Overflow);
            let y = match adc_setup {
                None => eval.sum.mul_pow2(eval.target).to_f64(),
                Some((bits, fs)) => {
                    let reading = adc_quantize(&eval.sum, bits, fs);
                    if reading.saturated {
                        diag.adc_saturations += 1;
                    }
                    reading.code as f64 * pow2_wide(fs - (bits as i32 - 1) + eval.target)
                }
            };
            out.set(r, j, y);
        }
    }
    Ok((out, diag))
}

/// Runs the analog path and requantizes each output row to block format,
/// the form every projection except the value path stores to its buffer.
pub fn analog_linear_forward(
    x: &MxTensor,
    layer: &AnalogLayerModel,
    cfg: &AnalogConfig,
) -> Result<(MxTensor, ForwardDiag)> {
    let (real, diag) = analog_linear_forward_raw(x, layer, cfg)?;
    Ok((MxTensor::quantize_nearest(&real, Orientation::RowMajor), diag))
}

/// Largest pre-converter column magnitude over a whole input, in target-scale
/// units: the quantity the converter full scale is calibrated against.
pub fn max_pre_adc_magnitude(
    x: &MxTensor,
    layer: &AnalogLayerModel,
    cfg: &AnalogConfig,
) -> Result<Dyadic> {
    check_forward_shapes(x, layer, cfg)?;
    let mut best = Dyadic::ZERO;
    for r in 0..x.rows() {
        let drive = ColumnDrive::load_row(x, r, layer, cfg);
        for j in 0..layer.d_out {
            let mag = drive.column_sum(j).sum.abs();
            // Exact comparison: a candidate one step over a power-of-two
            // boundary must not be absorbed by f64 rounding.
            if mag.add(best.neg()).signum() > 0 {
                best = mag;
            }
        }
    }
    Ok(best)
}
