//! Closed-form timing, throughput, power, and I/O model of the pipelined
//! accelerator.
//!
//! The machine is a chain of identical encoder blocks, one per layer, each
//! internally pipelined into analog stages (projections and FFN halves, one
//! multiplexed array activation per token) and a digital attention stage
//! (two output-stationary systolic arrays back to back). Every stage is
//! double-buffered, so at steady state the sequence period is simply the
//! slowest stage:
//!
//! ```text
//! T(N) = max(analog N-token time, attention tile time, inter-chip hop)
//! ```
//!
//! Analog time is linear in sequence length N; attention time is quadratic
//! (with tiling steps), so sustained throughput peaks where the two stage
//! times cross. Everything in this module is an exact closed form over a
//! [`SystemConfig`] and a [`Workload`]; there is no simulation loop.

use crate::error::Error;
use crate::Result;
use serde::{Deserialize, Serialize};

/// Shared-exponent activation streams cost 4 bits per element plus one
/// 8-bit scale per 32-element block: 4.25 bits on the wire.
pub const STREAM_BITS_PER_ELEMENT: f64 = 4.25;

/// Per-component figures for one die, in watts or mm^2 depending on use.
///
/// The shipped constants are post-layout / extrapolated numbers for the two
/// reference dies; power entries are duty-weighted loads at each die's peak
/// operating point, which is why [`ComponentSet::total`] of the power set
/// equals the reported peak power exactly.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ComponentSet {
    pub systolic_arrays: f64,
    pub softmax: f64,
    pub transposers: f64,
    pub ctt_macros: f64,
    pub layer_norm: f64,
    pub gelu: f64,
    pub adders: f64,
    pub quantizers: f64,
    pub buffers: f64,
    pub srams: f64,
}

impl ComponentSet {
    pub fn total(&self) -> f64 {
        self.digital_tracked() + self.analog_tracked() + self.constant()
    }

    /// Components whose activity follows the attention stage.
    pub fn digital_tracked(&self) -> f64 {
        self.systolic_arrays + self.softmax + self.transposers
    }

    /// Components whose activity follows the analog (per-token) stages.
    /// Vector units sit in those stages and are provisioned to never
    /// throttle them, so they inherit the same duty.
    pub fn analog_tracked(&self) -> f64 {
        self.ctt_macros + self.layer_norm + self.gelu + self.adders + self.quantizers
            + self.buffers
    }

    /// Always-on components (retention, clocking).
    pub fn constant(&self) -> f64 {
        self.srams
    }
}

/// Fixed hardware configuration of one accelerator system.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SystemConfig {
    pub name: String,
    /// Analog arrays are square, `array_dim x array_dim` cells.
    pub array_dim: usize,
    /// Encoder blocks chained on one die; each holds one layer.
    pub transformer_blocks: usize,
    /// Analog arrays per block: 4 projections + 8 ganged into the two FFN
    /// stages.
    pub macros_per_block: usize,
    /// Bit lines sharing one ADC; only one is active per cycle.
    pub mux_degree: u32,
    /// Input bit planes streamed per activation.
    pub bitplanes: u32,
    /// Array activations per token (2 when underflow recovery is on).
    pub passes: u32,
    pub f_analog_hz: f64,
    pub f_digital_hz: f64,
    /// Output-stationary attention array geometry (rows x cols); two such
    /// arrays per block run the two attention GEMMs in series, pipelined.
    pub systolic_rows: usize,
    pub systolic_cols: usize,
    /// Extra drain/fill cycles charged per output tile on top of the
    /// reduction depth; calibrated against the reference design points.
    pub c_fill: u32,
    /// Longest sequence the inter-stage buffers can hold.
    pub max_seq: usize,
    /// Identical dies available for layer sharding.
    pub chips: usize,
    /// Activation link between sharded dies, bytes per second.
    pub interchip_bytes_per_s: f64,
    pub power_w: ComponentSet,
    pub area_mm2: ComponentSet,
}

impl SystemConfig {
    /// The 768-wide single-die configuration.
    pub fn base() -> Self {
        SystemConfig {
            name: "base".to_string(),
            array_dim: 768,
            transformer_blocks: 12,
            macros_per_block: 12,
            mux_degree: 10,
            bitplanes: 5,
            passes: 2,
            f_analog_hz: 169.0e6,
            f_digital_hz: 1.0e9,
            systolic_rows: 32,
            systolic_cols: 64,
            c_fill: 8,
            max_seq: 512,
            chips: 1,
            interchip_bytes_per_s: 16.0e9,
            power_w: ComponentSet {
                systolic_arrays: 87.51,
                softmax: 9.16,
                transposers: 1.10,
                ctt_macros: 48.93,
                layer_norm: 5.40,
                gelu: 1.37,
                adders: 0.88,
                quantizers: 6.99,
                buffers: 1.70,
                srams: 0.12,
            },
            area_mm2: ComponentSet {
                systolic_arrays: 58.25,
                softmax: 6.22,
                transposers: 1.15,
                ctt_macros: 256.30,
                layer_norm: 5.35,
                gelu: 1.86,
                adders: 1.10,
                quantizers: 7.89,
                buffers: 2.05,
                srams: 34.98,
            },
        }
    }

    /// The 1024-wide configuration, shipped as a two-die set so deep models
    /// can be layer-sharded across an activation link.
    pub fn large() -> Self {
        SystemConfig {
            name: "large".to_string(),
            array_dim: 1024,
            chips: 2,
            power_w: ComponentSet {
                systolic_arrays: 85.23,
                softmax: 8.92,
                transposers: 1.07,
                ctt_macros: 67.80,
                layer_norm: 7.21,
                gelu: 1.83,
                adders: 1.18,
                quantizers: 6.91,
                buffers: 2.26,
                srams: 0.20,
            },
            area_mm2: ComponentSet {
                systolic_arrays: 58.25,
                softmax: 6.22,
                transposers: 1.15,
                ctt_macros: 427.70,
                layer_norm: 7.21,
                gelu: 2.51,
                adders: 1.42,
                quantizers: 7.89,
                buffers: 2.73,
                srams: 46.43,
            },
            ..SystemConfig::base()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.passes == 1 || self.passes == 2) {
            return Err(Error::config(format!("passes = {} not in {{1, 2}}", self.passes)));
        }
        for (name, v) in [
            ("array_dim", self.array_dim),
            ("transformer_blocks", self.transformer_blocks),
            ("systolic_rows", self.systolic_rows),
            ("systolic_cols", self.systolic_cols),
            ("max_seq", self.max_seq),
            ("chips", self.chips),
        ] {
            if v == 0 {
                return Err(Error::config(format!("{name} must be positive")));
            }
        }
        if self.mux_degree == 0 || self.f_analog_hz <= 0.0 || self.f_digital_hz <= 0.0 {
            return Err(Error::config("clocking parameters must be positive"));
        }
        Ok(())
    }

    /// Throughput of one analog array in this system at its configured
    /// multiplexing and pass count.
    pub fn array_tops(&self) -> f64 {
        macro_tops(self.array_dim, self.array_dim, self.mux_degree, self.f_analog_hz, self.passes)
    }

    /// A synthetic workload that exactly fills the arrays: the shape used
    /// for sequence-length characterization sweeps.
    pub fn full_width_workload(&self) -> Workload {
        let d = self.array_dim;
        let layers = self.transformer_blocks;
        let params = layers as f64 * (4 * d * d + 2 * d * 4 * d) as f64;
        Workload {
            name: format!("full-width-{d}"),
            layers,
            d_model: d,
            ffn_dim: 4 * d,
            heads: d / 64,
            d_k: 64,
            seq_len: self.max_seq,
            params_m: params / 1.0e6,
        }
    }

    /// Operating point where sustained TOPS peaks for a full-width
    /// workload, with the stage duty factors there. These duties anchor the
    /// power model: the shipped per-component powers are loads at this
    /// point.
    pub fn peak_point(&self) -> Result<PeakPoint> {
        let wl = self.full_width_workload();
        let mut best: Option<PeakPoint> = None;
        for n in 1..=self.max_seq {
            let st = stage_times(&wl, self, n)?;
            let tops = flop_split(&wl, n).total() / st.period_s() / 1.0e12;
            if best.as_ref().is_none_or(|b| tops > b.tops) {
                best = Some(PeakPoint {
                    n,
                    tops,
                    duty_analog: st.analog_s / st.period_s(),
                    duty_digital: st.digital_s / st.period_s(),
                });
            }
        }
        Ok(best.expect("max_seq >= 1"))
    }
}

/// Peak-throughput operating point of a system on a full-width workload.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PeakPoint {
    pub n: usize,
    pub tops: f64,
    pub duty_analog: f64,
    pub duty_digital: f64,
}

/// Geometry of a transformer encoder workload as the performance model sees
/// it, plus its parameter count for I/O accounting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Workload {
    pub name: String,
    pub layers: usize,
    pub d_model: usize,
    pub ffn_dim: usize,
    pub heads: usize,
    pub d_k: usize,
    /// Canonical maximum sequence length: patch grid + class token for
    /// vision models, the encoder limit for text models.
    pub seq_len: usize,
    /// Parameters in millions, backbone plus embeddings.
    pub params_m: f64,
}

impl Workload {
    fn vit(name: &str, layers: usize, d_model: usize, image: usize, patch: usize, params_m: f64) -> Self {
        Workload {
            name: name.to_string(),
            layers,
            d_model,
            ffn_dim: 4 * d_model,
            heads: d_model / 64,
            d_k: 64,
            seq_len: (image / patch) * (image / patch) + 1,
            params_m,
        }
    }

    /// 12-layer, 384-wide vision encoder on 224 px inputs, 16 px patches.
    pub fn vit_s16() -> Self {
        Workload::vit("vit-s16", 12, 384, 224, 16, 22.0)
    }

    /// 12-layer, 768-wide vision encoder on 224 px inputs, 16 px patches.
    pub fn vit_b16() -> Self {
        Workload::vit("vit-b16", 12, 768, 224, 16, 86.6)
    }

    /// Vision tower of the contrastive 768-wide model, 32 px patches.
    pub fn vit_b32() -> Self {
        Workload::vit("vit-b32", 12, 768, 224, 32, 86.0)
    }

    /// 768-wide self-supervised vision encoder with 14 px patches.
    pub fn vit_b14() -> Self {
        Workload::vit("vit-b14", 12, 768, 224, 14, 86.6)
    }

    /// Vision tower of the contrastive 1024-wide model, 14 px patches.
    pub fn vit_l14() -> Self {
        Workload::vit("vit-l14", 24, 1024, 224, 14, 304.0)
    }

    /// 24-layer, 1024-wide vision encoder on 384 px inputs, 32 px patches.
    pub fn vit_l32_384() -> Self {
        Workload::vit("vit-l32-384", 24, 1024, 384, 32, 307.0)
    }

    /// 12-layer, 768-wide text encoder at its 512-token limit.
    pub fn bert_base() -> Self {
        Workload {
            name: "bert-base".to_string(),
            layers: 12,
            d_model: 768,
            ffn_dim: 3072,
            heads: 12,
            d_k: 64,
            seq_len: 512,
            params_m: 110.0,
        }
    }

    /// 24-layer, 1024-wide text encoder at its 512-token limit.
    pub fn bert_large() -> Self {
        Workload {
            name: "bert-large".to_string(),
            layers: 24,
            d_model: 1024,
            ffn_dim: 4096,
            heads: 16,
            d_k: 64,
            seq_len: 512,
            params_m: 335.0,
        }
    }

    /// Every shipped workload, in catalog order.
    pub fn catalog() -> Vec<Workload> {
        vec![
            Workload::vit_b32(),
            Workload::vit_b16(),
            Workload::vit_b14(),
            Workload::bert_base(),
            Workload::vit_s16(),
            Workload::vit_l32_384(),
            Workload::vit_l14(),
            Workload::bert_large(),
        ]
    }

    pub fn validate(&self) -> Result<()> {
        if self.heads * self.d_k != self.d_model {
            return Err(Error::config(format!(
                "{} heads of depth {} do not make width {}",
                self.heads, self.d_k, self.d_model
            )));
        }
        if self.layers == 0 || self.seq_len == 0 || self.ffn_dim == 0 {
            return Err(Error::config("workload dimensions must be positive"));
        }
        Ok(())
    }
}

/// Throughput of one analog array: two ops (multiply + accumulate) per cell
/// per activation, divided down by bit-line multiplexing and by the pass
/// count, since a second recovery pass reuses the same array.
pub fn macro_tops(rows: usize, cols: usize, mux: u32, f_hz: f64, passes: u32) -> f64 {
    assert!(rows > 0 && cols > 0 && mux > 0 && passes > 0 && f_hz > 0.0);
    2.0 * (rows * cols) as f64 * f_hz / (mux as f64 * passes as f64) / 1.0e12
}

/// Operation counts split by where they execute: static weights on the
/// analog arrays, activation-by-activation attention on the digital arrays.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FlopSplit {
    pub static_ops: f64,
    pub dynamic_ops: f64,
}

impl FlopSplit {
    pub fn total(&self) -> f64 {
        self.static_ops + self.dynamic_ops
    }

    pub fn static_fraction(&self) -> f64 {
        self.static_ops / self.total()
    }
}

/// Counts multiply-accumulates times two, per sequence of `n` tokens.
///
/// Static: four width-preserving projections plus the two FFN halves, per
/// layer, linear in `n`. Dynamic: the two attention GEMMs over all heads,
/// quadratic in `n`. LayerNorm / softmax / GELU flops are negligible and
/// excluded, matching how array throughput is quoted.
pub fn flop_split(workload: &Workload, n: usize) -> FlopSplit {
    let l = workload.layers as f64;
    let d = workload.d_model as f64;
    let f = workload.ffn_dim as f64;
    let n = n as f64;
    FlopSplit {
        static_ops: l * (4.0 * 2.0 * d * d + 2.0 * 2.0 * d * f) * n,
        dynamic_ops: l * 4.0 * n * n * d,
    }
}

/// Steady-state stage times for one sequence of `n` tokens.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StageTimes {
    /// Any one analog stage: all are equally deep, so one number.
    pub analog_s: f64,
    /// The attention stage of one block; the two GEMMs run on separate
    /// arrays at identical tile counts, pipelined, so the stage is paced by
    /// one of them.
    pub digital_s: f64,
    /// The activation hop between sharded dies, zero on a single die.
    pub interchip_s: f64,
    /// Digital stage length in digital clock cycles.
    pub digital_cycles: u64,
    /// Dies the workload occupies.
    pub chips_used: usize,
}

impl StageTimes {
    /// Pipeline period: the slowest stage.
    pub fn period_s(&self) -> f64 {
        self.analog_s.max(self.digital_s).max(self.interchip_s)
    }
}

/// Computes per-stage times for `workload` on `system` at sequence length
/// `n`.
///
/// Analog stages process one token per `passes * mux_degree` analog cycles
/// regardless of array utilization (a narrow model leaves columns idle but
/// saves no time). The attention stage tiles the score and value GEMMs over
/// the systolic grid: `heads * ceil(n/rows) * ceil(n/cols)` output tiles,
/// each costing the reduction depth `d_k` plus the configured fill/drain
/// overhead.
pub fn stage_times(workload: &Workload, system: &SystemConfig, n: usize) -> Result<StageTimes> {
    workload.validate()?;
    system.validate()?;
    if n == 0 {
        return Err(Error::config("sequence length must be positive"));
    }
    if n > system.max_seq {
        return Err(Error::config(format!(
            "sequence length {n} exceeds the {} buffer limit {}",
            system.name, system.max_seq
        )));
    }
    if workload.d_model > system.array_dim {
        return Err(Error::config(format!(
            "{} is {} wide but {} arrays are {}; the workload cannot map",
            workload.name, workload.d_model, system.name, system.array_dim
        )));
    }
    let chips_used = workload.layers.div_ceil(system.transformer_blocks);
    if chips_used > system.chips {
        return Err(Error::config(format!(
            "{} needs {} layers / {} blocks per die = {} dies sharded over the link, \
             but {} provides {}",
            workload.name,
            workload.layers,
            system.transformer_blocks,
            chips_used,
            system.name,
            system.chips
        )));
    }

    let analog_s =
        n as f64 * system.passes as f64 * system.mux_degree as f64 / system.f_analog_hz;
    let tiles = n.div_ceil(system.systolic_rows) as u64 * n.div_ceil(system.systolic_cols) as u64;
    let digital_cycles =
        workload.heads as u64 * tiles * (workload.d_k as u64 + system.c_fill as u64);
    let digital_s = digital_cycles as f64 / system.f_digital_hz;
    let interchip_s = if chips_used > 1 {
        let bytes = (n * workload.d_model) as f64 * STREAM_BITS_PER_ELEMENT / 8.0;
        bytes / system.interchip_bytes_per_s
    } else {
        0.0
    };
    Ok(StageTimes { analog_s, digital_s, interchip_s, digital_cycles, chips_used })
}

/// Scales each component's shipped load by how its stage's duty factor at
/// `n` compares to the duty at the system's peak point. Attention-side
/// components can therefore exceed their shipped figure when the digital
/// stage paces the pipeline, and analog-side components fall off as the
/// arrays go idle between sequences.
pub fn power_estimate(workload: &Workload, system: &SystemConfig, n: usize) -> Result<f64> {
    let st = stage_times(workload, system, n)?;
    let period = st.period_s();
    let peak = system.peak_point()?;
    let p = &system.power_w;
    let per_chip = p.analog_tracked() * (st.analog_s / period) / peak.duty_analog
        + p.digital_tracked() * (st.digital_s / period) / peak.duty_digital
        + p.constant();
    Ok(per_chip * st.chips_used as f64)
}

/// One row of a sequence-length sweep; field order matches the CSV schema.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub n: usize,
    pub t_analog_us: f64,
    pub t_digital_us: f64,
    pub period_us: f64,
    pub fps: f64,
    pub tops: f64,
    pub power_w: f64,
    pub bw_gibs: f64,
}

impl SweepRow {
    pub const CSV_HEADER: &'static str =
        "N,t_analog_us,t_digital_us,period_us,fps,tops,power_w,bw_gibs";

    pub fn csv_line(&self) -> String {
        format!(
            "{},{:.4},{:.4},{:.4},{:.1},{:.2},{:.2},{:.3}",
            self.n,
            self.t_analog_us,
            self.t_digital_us,
            self.period_us,
            self.fps,
            self.tops,
            self.power_w,
            self.bw_gibs
        )
    }
}

/// Sweeps sustained throughput over the given sequence lengths.
pub fn tops_curve(
    workload: &Workload,
    system: &SystemConfig,
    n_values: &[usize],
) -> Result<Vec<SweepRow>> {
    if n_values.is_empty() {
        return Err(Error::config("empty sequence-length range"));
    }
    let peak = system.peak_point()?;
    let mut rows = Vec::with_capacity(n_values.len());
    for &n in n_values {
        let st = stage_times(workload, system, n)?;
        let period = st.period_s();
        let fps = 1.0 / period;
        let flops = flop_split(workload, n);
        let p = &system.power_w;
        let per_chip = p.analog_tracked() * (st.analog_s / period) / peak.duty_analog
            + p.digital_tracked() * (st.digital_s / period) / peak.duty_digital
            + p.constant();
        rows.push(SweepRow {
            n,
            t_analog_us: st.analog_s * 1.0e6,
            t_digital_us: st.digital_s * 1.0e6,
            period_us: period * 1.0e6,
            fps,
            tops: flops.total() * fps / 1.0e12,
            power_w: per_chip * st.chips_used as f64,
            bw_gibs: io_gibs(workload, st.chips_used, fps, n),
        });
    }
    Ok(rows)
}

/// The sweep row with the highest sustained TOPS (the balance point where
/// analog and digital stage times cross, up to tiling steps).
pub fn balance_point(rows: &[SweepRow]) -> Option<&SweepRow> {
    rows.iter().reduce(|best, row| if row.tops > best.tops { row } else { best })
}

fn io_gibs(workload: &Workload, chips_used: usize, fps: f64, n: usize) -> f64 {
    // Input and output token streams, plus one activation hop per die
    // boundary, all carried block-quantized.
    let hops = 2 + (chips_used - 1);
    let elements = (hops * n * workload.d_model) as f64;
    fps * elements * STREAM_BITS_PER_ELEMENT / 8.0 / (1u64 << 30) as f64
}

/// Everything the model can say about one workload pinned at its canonical
/// sequence length on one system.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerfReport {
    pub workload: String,
    pub system: String,
    pub n: usize,
    pub chips_used: usize,
    pub t_analog_s: f64,
    pub t_digital_s: f64,
    pub t_interchip_s: f64,
    pub period_s: f64,
    pub fps: f64,
    pub total_ops: f64,
    pub tops: f64,
    pub tops_per_w: f64,
    pub tops_per_mm2: f64,
    pub io_gibs: f64,
    pub power_w: f64,
}

/// Evaluates `workload` at its canonical sequence length.
pub fn model_throughput(workload: &Workload, system: &SystemConfig) -> Result<PerfReport> {
    let n = workload.seq_len;
    let st = stage_times(workload, system, n)?;
    let period = st.period_s();
    let fps = 1.0 / period;
    let flops = flop_split(workload, n);
    let tops = flops.total() * fps / 1.0e12;
    let power_w = power_estimate(workload, system, n)?;
    let area = system.area_mm2.total() * st.chips_used as f64;
    Ok(PerfReport {
        workload: workload.name.clone(),
        system: system.name.clone(),
        n,
        chips_used: st.chips_used,
        t_analog_s: st.analog_s,
        t_digital_s: st.digital_s,
        t_interchip_s: st.interchip_s,
        period_s: period,
        fps,
        total_ops: flops.total(),
        tops,
        tops_per_w: tops / power_w,
        tops_per_mm2: tops / area,
        io_gibs: io_gibs(workload, st.chips_used, fps, n),
        power_w,
    })
}

/// Per-item I/O traffic of a conventional weight-streaming deployment,
/// relative to a fully weight-stationary one, at batch size `batch`.
///
/// The conventional side re-reads all weights once per batch (16-bit) and
/// moves the same 16-bit activation in/out streams; weight traffic
/// amortizes over the batch, so the penalty is `1 + W / (B * A_io)`.
pub fn io_penalty(workload: &Workload, batch: u64) -> f64 {
    assert!(batch >= 1, "batch must be at least 1");
    let a_io = (2 * workload.seq_len * workload.d_model * 2) as f64;
    let weight_bytes = workload.params_m * 1.0e6 * 2.0;
    1.0 + weight_bytes / (batch as f64 * a_io)
}

/// Largest batch whose block-quantized activation working set fits in the
/// 30 MiB of cache a GPU can pin for persistent data.
pub fn max_batch(workload: &Workload) -> u64 {
    const CACHE_BYTES: u64 = 30 * (1 << 20);
    // Activations live in cache at 4.25 bits = 17/32 bytes per element.
    let bits_num = 17u64;
    let bits_den = 32u64;
    CACHE_BYTES * bits_den / ((workload.seq_len * workload.d_model) as u64 * bits_num)
}
