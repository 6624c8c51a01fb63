//! Subcommand implementations.

use crate::manifest::{sha256_hex, RunManifest};
use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Subcommand, ValueEnum};
use mxsim_core::analog::{AdcResolution, AnalogConfig, CmBudget, ExponentStrategy};
use mxsim_core::calib::ModelCalibration;
use mxsim_core::model::{
    calibrate_model, compare_modes, load_model, model_forward, save_model, top1_per_token,
    ExecutionMode, GenSpec, ModelConfig, ModelWeights, TokenSource,
};
use mxsim_core::perf::{tops_curve, SweepRow, SystemConfig, Workload};
use mxsim_core::tables;
use mxsim_core::{io, Mat, MxTensor, Orientation};
use rayon::prelude::*;
use serde_json::{json, Value};
use std::fs;
use std::path::{Path, PathBuf};

// ---------------------------------------------------------------------------
// Shared plumbing
// ---------------------------------------------------------------------------

/// Writes text to a file, or to stdout when no path is given.
fn emit_text(path: Option<&Path>, text: &str) -> Result<()> {
    match path {
        Some(p) => {
            if let Some(dir) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
                fs::create_dir_all(dir)
                    .with_context(|| format!("creating {}", dir.display()))?;
            }
            fs::write(p, text).with_context(|| format!("writing {}", p.display()))?;
        }
        None => print!("{text}"),
    }
    Ok(())
}

fn emit_json(path: Option<&Path>, value: &Value) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    emit_text(path, &text)
}

/// Analog knobs shared by every command that runs the array model.
#[derive(Args, Debug, Clone)]
pub struct AnalogOpts {
    /// Alignment shift budget in binades, or "unbounded". Budgets beyond
    /// the realizable mirror range (10) also select the lossless path.
    #[arg(long)]
    pub cm: Option<String>,

    /// Converter resolution in bits (4..=24), or "ideal" for exact readout.
    #[arg(long)]
    pub adc: Option<String>,

    /// Exponent target strategy: row-hist, row0, or row-optimal.
    #[arg(long)]
    pub strategy: Option<String>,

    /// Recover first-pass underflow blocks with a second pass at a target
    /// lowered by the shift budget.
    #[arg(long)]
    pub two_pass: bool,
}

impl AnalogOpts {
    pub fn to_config(&self) -> Result<AnalogConfig> {
        let mut cfg = AnalogConfig::default();
        if let Some(cm) = &self.cm {
            cfg.cm = parse_cm(cm)?;
        }
        if let Some(adc) = &self.adc {
            cfg.adc = parse_adc(adc)?;
        }
        if let Some(s) = &self.strategy {
            cfg.strategy = s.parse::<ExponentStrategy>()?;
        }
        cfg.two_pass = self.two_pass;
        if cfg.cm == CmBudget::Unbounded && cfg.adc == AdcResolution::Ideal && !cfg.two_pass {
            // A fully lossless request: drop the programming-window clip
            // too, so the run mirrors the digital path bit for bit.
            cfg.k_window = None;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn parse_cm(s: &str) -> Result<CmBudget> {
    if s.eq_ignore_ascii_case("unbounded") {
        return Ok(CmBudget::Unbounded);
    }
    let n: u32 = s
        .parse()
        .map_err(|_| anyhow!("--cm takes a binade count or \"unbounded\", got '{s}'"))?;
    Ok(if n > 10 { CmBudget::Unbounded } else { CmBudget::Limited(n) })
}

fn parse_adc(s: &str) -> Result<AdcResolution> {
    if s.eq_ignore_ascii_case("ideal") {
        return Ok(AdcResolution::Ideal);
    }
    let n: u8 = s
        .parse()
        .map_err(|_| anyhow!("--adc takes a bit width or \"ideal\", got '{s}'"))?;
    Ok(AdcResolution::Bits(n))
}

/// Resolves the token matrix for a model: an explicit file wins, then a seed
/// override of the bundled synthetic source, then the bundle's own source.
fn resolve_tokens(
    cfg: &ModelConfig,
    input: Option<&Path>,
    seed: Option<u64>,
) -> Result<(Mat<f64>, Value)> {
    let source = match (input, seed, &cfg.token_source) {
        (Some(p), _, _) => TokenSource::TokenFile { path: p.to_path_buf() },
        (None, Some(seed), TokenSource::Synthetic { seq_len, scale, .. }) => {
            TokenSource::Synthetic { seq_len: *seq_len, seed, scale: *scale }
        }
        (None, _, src) => src.clone(),
    };
    let tokens = source.tokens(cfg.d_model)?;
    Ok((tokens, serde_json::to_value(&source)?))
}

/// Rewords a missing-calibration failure into the command that fixes it.
fn actionable(err: mxsim_core::Error, model: &Path) -> anyhow::Error {
    match &err {
        mxsim_core::Error::MissingCalibration(_) => anyhow!(
            "{err}; run `mxsim calibrate --model {}` with the same --cm/--adc/--strategy \
             flags, then retry",
            model.display()
        ),
        _ => anyhow!(err),
    }
}


// ---------------------------------------------------------------------------
// quantize
// ---------------------------------------------------------------------------

#[derive(ValueEnum, Clone, Copy, Debug)]
pub enum OrientationArg {
    /// Blocks run along rows (activation layout).
    Row,
    /// Blocks run along columns (weight layout).
    Col,
}

#[derive(Args, Debug)]
pub struct QuantizeArgs {
    /// Real-valued input matrix (F64M).
    #[arg(long)]
    pub input: PathBuf,

    /// Lane direction the 32-element blocks are cut along.
    #[arg(long, value_enum, default_value_t = OrientationArg::Row)]
    pub orientation: OrientationArg,

    /// Block-tensor output (MXT1).
    #[arg(long)]
    pub out: PathBuf,

    /// Stats JSON; defaults to <out>.stats.json.
    #[arg(long)]
    pub stats: Option<PathBuf>,
}

pub fn cmd_quantize(args: &QuantizeArgs) -> Result<()> {
    let mat = io::load_f64m(&args.input)
        .with_context(|| format!("reading {}", args.input.display()))?;
    let orientation = match args.orientation {
        OrientationArg::Row => Orientation::RowMajor,
        OrientationArg::Col => Orientation::ColMajor,
    };
    let (tensor, saturated) = MxTensor::quantize_nearest_saturating(&mat, orientation);
    io::save_mxt1(&tensor, &args.out)
        .with_context(|| format!("writing {}", args.out.display()))?;

    let stats_path = args
        .stats
        .clone()
        .unwrap_or_else(|| PathBuf::from(format!("{}.stats.json", args.out.display())));
    let mut manifest = RunManifest::new(format!("quantize --orientation {orientation:?}"));
    manifest.config(&args.input).output(&args.out).output(&stats_path);
    manifest.effective = json!({ "orientation": format!("{orientation:?}") });

    let exponents: Vec<i32> = tensor.blocks().iter().map(|b| b.scale.exponent()).collect();
    let stats = json!({
        "rows": tensor.rows(),
        "cols": tensor.cols(),
        "orientation": format!("{orientation:?}"),
        "blocks": exponents.len(),
        "saturated_elements": saturated,
        "min_scale_exponent": exponents.iter().min(),
        "max_scale_exponent": exponents.iter().max(),
        "tensor_sha256": sha256_hex(&fs::read(&args.out)?),
    });
    emit_json(Some(&stats_path), &manifest.wrap("quantize_stats", stats))
}

// ---------------------------------------------------------------------------
// gen-model
// ---------------------------------------------------------------------------

#[derive(Args, Debug)]
pub struct GenModelArgs {
    /// Stack-shape JSON; omitted means a small built-in self-test shape.
    #[arg(long)]
    pub config: Option<PathBuf>,

    /// Weight generator seed.
    #[arg(long)]
    pub seed: Option<u64>,

    /// Per-column weight scale spread in binades; wider spreads exercise
    /// multi-binade block exponents.
    #[arg(long, default_value_t = 1.0)]
    pub spread: f64,

    /// Bundle directory to create.
    #[arg(long)]
    pub out: PathBuf,
}

/// A two-layer toy stack small enough for instant smoke runs.
fn default_model_config() -> ModelConfig {
    ModelConfig {
        layers: 2,
        d_model: 64,
        ffn_dim: 128,
        heads: 2,
        d_k: 32,
        max_seq: 64,
        token_source: TokenSource::Synthetic { seq_len: 48, seed: 11, scale: 1.0 },
    }
}

pub fn cmd_gen_model(args: &GenModelArgs) -> Result<()> {
    let cfg: ModelConfig = match &args.config {
        Some(p) => serde_json::from_str(
            &fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?,
        )
        .with_context(|| format!("parsing {}", p.display()))?,
        None => default_model_config(),
    };
    cfg.validate()?;
    let spec = GenSpec { seed: args.seed.unwrap_or(GenSpec::default().seed), scale_spread: args.spread };
    let weights = ModelWeights::generate(&cfg, &spec)?;
    save_model(&args.out, &cfg, &weights)?;

    let mut manifest = RunManifest::new("gen-model");
    if let Some(p) = &args.config {
        manifest.config(p);
    }
    manifest.seed = Some(spec.seed);
    manifest.effective = json!({ "config": cfg, "gen": spec });
    manifest.output(&args.out);
    let info = json!({
        "fingerprint": weights.fingerprint(),
        "layers": cfg.layers,
        "d_model": cfg.d_model,
    });
    emit_json(Some(&args.out.join("manifest.json")), &manifest.wrap("model", info))
}

// ---------------------------------------------------------------------------
// calibrate
// ---------------------------------------------------------------------------

#[derive(Args, Debug)]
pub struct CalibrateArgs {
    /// Model bundle directory.
    #[arg(long)]
    pub model: PathBuf,

    /// Calibration token matrix (F64M) overriding the bundle's token source.
    #[arg(long)]
    pub input: Option<PathBuf>,

    /// Synthetic-token seed override.
    #[arg(long)]
    pub seed: Option<u64>,

    #[command(flatten)]
    pub analog: AnalogOpts,

    /// Output path; defaults to <model>/calibration.json.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

pub fn cmd_calibrate(args: &CalibrateArgs) -> Result<()> {
    let (cfg, weights) = load_model(&args.model)?;
    let analog_cfg = args.analog.to_config()?;
    let (tokens, source) = resolve_tokens(&cfg, args.input.as_deref(), args.seed)?;
    let calibration = calibrate_model(&cfg, &weights, &tokens, &analog_cfg)?;
    let out = args.out.clone().unwrap_or_else(|| args.model.join("calibration.json"));

    let mut manifest = RunManifest::new("calibrate");
    manifest.config(&args.model);
    manifest.seed = args.seed;
    manifest.effective = json!({ "analog": analog_cfg, "tokens": source });
    manifest.output(&out);

    // Keep the loadable calibration schema at the top level; the manifest
    // rides along as an extra key the loader ignores.
    let mut value = serde_json::to_value(&calibration)?;
    value["manifest"] = manifest.to_value();
    emit_json(Some(&out), &value)
}

// ---------------------------------------------------------------------------
// run
// ---------------------------------------------------------------------------

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum RunMode {
    /// Run all three modes and report their divergences.
    Compare,
    /// Full-precision reference forward.
    Reference,
    /// Block-quantized exact-integer forward.
    Digital,
    /// Analog array model forward.
    Analog,
}

#[derive(Args, Debug)]
pub struct RunArgs {
    /// Model bundle directory.
    #[arg(long)]
    pub model: PathBuf,

    #[arg(long, value_enum, default_value_t = RunMode::Compare)]
    pub mode: RunMode,

    /// Token matrix (F64M) overriding the bundle's token source.
    #[arg(long)]
    pub input: Option<PathBuf>,

    /// Synthetic-token seed override.
    #[arg(long)]
    pub seed: Option<u64>,

    #[command(flatten)]
    pub analog: AnalogOpts,

    /// Calibration file; defaults to <model>/calibration.json when present.
    #[arg(long)]
    pub calibration: Option<PathBuf>,

    /// Metrics JSON; stdout when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

pub fn cmd_run(args: &RunArgs) -> Result<()> {
    let (cfg, weights) = load_model(&args.model)?;
    let analog_cfg = args.analog.to_config()?;
    let (tokens, source) = resolve_tokens(&cfg, args.input.as_deref(), args.seed)?;

    let calibration_path = match &args.calibration {
        Some(p) => {
            if !p.exists() {
                bail!("calibration file {} does not exist", p.display());
            }
            Some(p.clone())
        }
        None => {
            let default = args.model.join("calibration.json");
            default.exists().then_some(default)
        }
    };
    let calibration = calibration_path
        .as_deref()
        .map(ModelCalibration::load)
        .transpose()
        .map_err(|e| anyhow!(e))?;

    let payload = match args.mode {
        RunMode::Compare => {
            let cmp = compare_modes(&cfg, &weights, &tokens, &analog_cfg, calibration.as_ref())
                .map_err(|e| actionable(e, &args.model))?;
            json!({ "mode": "compare", "comparison": cmp })
        }
        single => {
            let mode = match single {
                RunMode::Reference => ExecutionMode::ReferenceF64,
                RunMode::Digital => ExecutionMode::DigitalMXFP4,
                RunMode::Analog => ExecutionMode::Analog(analog_cfg),
                RunMode::Compare => unreachable!(),
            };
            let fwd = model_forward(&cfg, &weights, &tokens, &mode, calibration.as_ref())
                .map_err(|e| actionable(e, &args.model))?;
            json!({
                "mode": format!("{single:?}").to_lowercase(),
                "rows": fwd.stream.rows(),
                "cols": fwd.stream.cols(),
                "stream_frobenius": fwd.stream.frobenius_norm(),
                "analog_events": fwd.diagnostics.total(),
                "top1": top1_per_token(&fwd.stream, &weights.head),
            })
        }
    };

    let mut manifest = RunManifest::new(format!("run --mode {:?}", args.mode).to_lowercase());
    manifest.config(&args.model);
    if let Some(p) = &calibration_path {
        manifest.config(p);
    }
    manifest.seed = args.seed;
    manifest.effective = json!({
        "analog": analog_cfg,
        "tokens": source,
        "calibration": calibration_path.as_ref().map(|p| p.display().to_string()),
    });
    if let Some(p) = &args.out {
        manifest.output(p);
    }
    emit_json(args.out.as_deref(), &manifest.wrap("run", payload))
}

// ---------------------------------------------------------------------------
// sweep
// ---------------------------------------------------------------------------

#[derive(Subcommand, Debug)]
pub enum SweepCmd {
    /// Throughput curve over sequence length for a system configuration.
    Seq(SeqSweepArgs),
    /// Accuracy ladder over converter resolution on a model bundle.
    Adc(AdcSweepArgs),
    /// Accuracy ladder over the alignment shift budget on a model bundle.
    Cm(CmSweepArgs),
    /// Accuracy comparison across exponent target strategies.
    Strategy(StrategySweepArgs),
}

pub fn cmd_sweep(cmd: &SweepCmd) -> Result<()> {
    match cmd {
        SweepCmd::Seq(a) => sweep_seq(a),
        SweepCmd::Adc(a) => sweep_adc(a),
        SweepCmd::Cm(a) => sweep_cm(a),
        SweepCmd::Strategy(a) => sweep_strategy(a),
    }
}

#[derive(ValueEnum, Clone, Copy, Debug)]
pub enum SystemArg {
    Base,
    Large,
}

#[derive(Args, Debug)]
pub struct SeqSweepArgs {
    /// Built-in system preset.
    #[arg(long, value_enum, default_value_t = SystemArg::Base)]
    pub system: SystemArg,

    /// System JSON overriding --system.
    #[arg(long)]
    pub config: Option<PathBuf>,

    /// Catalog workload name; omitted means the system's full-width shape.
    #[arg(long)]
    pub workload: Option<String>,

    #[arg(long, default_value_t = 32)]
    pub min: usize,

    #[arg(long, default_value_t = 512)]
    pub max: usize,

    #[arg(long, default_value_t = 1)]
    pub step: usize,

    /// CSV output; stdout when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn load_system(preset: SystemArg, file: Option<&Path>) -> Result<SystemConfig> {
    let system: SystemConfig = match file {
        Some(p) => serde_json::from_str(
            &fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?,
        )
        .with_context(|| format!("parsing {}", p.display()))?,
        None => match preset {
            SystemArg::Base => SystemConfig::base(),
            SystemArg::Large => SystemConfig::large(),
        },
    };
    system.validate()?;
    Ok(system)
}

fn workload_by_name(name: &str) -> Result<Workload> {
    Workload::catalog().into_iter().find(|w| w.name == name).ok_or_else(|| {
        let names: Vec<String> = Workload::catalog().into_iter().map(|w| w.name).collect();
        anyhow!("unknown workload '{name}'; catalog has: {}", names.join(", "))
    })
}

fn sweep_seq(args: &SeqSweepArgs) -> Result<()> {
    let system = load_system(args.system, args.config.as_deref())?;
    let workload = match &args.workload {
        Some(name) => workload_by_name(name)?,
        None => system.full_width_workload(),
    };
    if args.step == 0 {
        bail!("--step must be positive");
    }
    let ns: Vec<usize> = (args.min..=args.max).step_by(args.step).collect();
    if ns.is_empty() {
        bail!("empty sweep range {}..={}", args.min, args.max);
    }
    let rows = tops_curve(&workload, &system, &ns)?;

    let mut manifest = RunManifest::new(format!(
        "sweep seq --system {} --workload {} --min {} --max {} --step {}",
        system.name, workload.name, args.min, args.max, args.step
    ));
    if let Some(p) = &args.config {
        manifest.config(p);
    }
    manifest.effective = json!({ "system": system, "workload": workload });
    if let Some(p) = &args.out {
        manifest.output(p);
    }

    let mut text = manifest.csv_preamble();
    text.push_str(SweepRow::CSV_HEADER);
    text.push('\n');
    for row in &rows {
        text.push_str(&row.csv_line());
        text.push('\n');
    }
    emit_text(args.out.as_deref(), &text)
}

/// One functional sweep point: a label for the CSV plus the settings to run.
struct SweepPoint {
    label: String,
    cfg: AnalogConfig,
}

/// Calibrates and compares one analog configuration per point, in parallel,
/// and renders the shared accuracy CSV schema.
fn functional_sweep(
    model: &Path,
    input: Option<&Path>,
    seed: Option<u64>,
    key_column: &str,
    points: Vec<SweepPoint>,
) -> Result<(String, Value)> {
    let (cfg, weights) = load_model(model)?;
    let (tokens, source) = resolve_tokens(&cfg, input, seed)?;
    let lines: Vec<String> = points
        .par_iter()
        .map(|point| -> Result<String> {
            let calibration = calibrate_model(&cfg, &weights, &tokens, &point.cfg)?;
            let cmp =
                compare_modes(&cfg, &weights, &tokens, &point.cfg, Some(&calibration))?;
            let ev = cmp.analog_events;
            Ok(format!(
                "{},{:.6e},{:.6e},{},{},{},{},{:.4}",
                point.label,
                cmp.end_to_end_analog_vs_digital,
                cmp.max_abs_analog_vs_digital,
                ev.overflow_blocks,
                ev.underflow_blocks,
                ev.residual_underflow_blocks,
                ev.adc_saturations,
                cmp.top1_agreement_analog_vs_digital,
            ))
        })
        .collect::<Result<_>>()?;

    let mut body = format!(
        "{key_column},error_vs_digital,max_abs_diff,overflow_blocks,underflow_blocks,\
         residual_underflow_blocks,adc_saturations,top1_agreement\n"
    );
    for line in &lines {
        body.push_str(line);
        body.push('\n');
    }
    Ok((body, source))
}

fn emit_functional_sweep(
    command: String,
    model: &Path,
    out: Option<&Path>,
    seed: Option<u64>,
    source: Value,
    settings: Value,
    body: &str,
) -> Result<()> {
    let mut manifest = RunManifest::new(command);
    manifest.config(model);
    manifest.seed = seed;
    manifest.effective = json!({ "tokens": source, "points": settings });
    if let Some(p) = out {
        manifest.output(p);
    }
    emit_text(out, &format!("{}{}", manifest.csv_preamble(), body))
}

#[derive(Args, Debug)]
pub struct AdcSweepArgs {
    /// Model bundle directory.
    #[arg(long)]
    pub model: PathBuf,

    /// Token matrix (F64M) overriding the bundle's token source.
    #[arg(long)]
    pub input: Option<PathBuf>,

    /// Synthetic-token seed override.
    #[arg(long)]
    pub seed: Option<u64>,

    /// Converter widths to test.
    #[arg(long, value_delimiter = ',', default_values_t = [6u8, 8, 10, 12])]
    pub bits: Vec<u8>,

    /// Shift budget held fixed across the ladder.
    #[arg(long)]
    pub cm: Option<String>,

    /// Strategy held fixed across the ladder.
    #[arg(long)]
    pub strategy: Option<String>,

    #[arg(long)]
    pub two_pass: bool,

    /// CSV output; stdout when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn sweep_adc(args: &AdcSweepArgs) -> Result<()> {
    let base = AnalogOpts {
        cm: args.cm.clone(),
        adc: None,
        strategy: args.strategy.clone(),
        two_pass: args.two_pass,
    }
    .to_config()?;
    if args.bits.is_empty() {
        bail!("--bits must name at least one converter width");
    }
    let points = args
        .bits
        .iter()
        .map(|&b| {
            let cfg = AnalogConfig { adc: AdcResolution::Bits(b), ..base };
            cfg.validate()?;
            Ok(SweepPoint { label: b.to_string(), cfg })
        })
        .collect::<Result<Vec<_>>>()?;
    let settings = json!({ "bits": args.bits, "base": base });
    let (body, source) =
        functional_sweep(&args.model, args.input.as_deref(), args.seed, "adc_bits", points)?;
    emit_functional_sweep(
        format!("sweep adc --bits {:?}", args.bits),
        &args.model,
        args.out.as_deref(),
        args.seed,
        source,
        settings,
        &body,
    )
}

#[derive(Args, Debug)]
pub struct CmSweepArgs {
    /// Model bundle directory.
    #[arg(long)]
    pub model: PathBuf,

    /// Token matrix (F64M) overriding the bundle's token source.
    #[arg(long)]
    pub input: Option<PathBuf>,

    /// Synthetic-token seed override.
    #[arg(long)]
    pub seed: Option<u64>,

    /// Shift budgets to test, in binades.
    #[arg(long, value_delimiter = ',', default_values_t = [1u32, 2, 3, 4, 5, 6])]
    pub budgets: Vec<u32>,

    /// Converter width held fixed across the ladder.
    #[arg(long)]
    pub adc: Option<String>,

    /// Strategy held fixed across the ladder.
    #[arg(long)]
    pub strategy: Option<String>,

    #[arg(long)]
    pub two_pass: bool,

    /// CSV output; stdout when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn sweep_cm(args: &CmSweepArgs) -> Result<()> {
    let base = AnalogOpts {
        cm: None,
        adc: args.adc.clone(),
        strategy: args.strategy.clone(),
        two_pass: args.two_pass,
    }
    .to_config()?;
    if args.budgets.is_empty() {
        bail!("--budgets must name at least one shift budget");
    }
    let points = args
        .budgets
        .iter()
        .map(|&b| {
            let cfg = AnalogConfig { cm: CmBudget::Limited(b), ..base };
            cfg.validate()?;
            Ok(SweepPoint { label: b.to_string(), cfg })
        })
        .collect::<Result<Vec<_>>>()?;
    let settings = json!({ "budgets": args.budgets, "base": base });
    let (body, source) =
        functional_sweep(&args.model, args.input.as_deref(), args.seed, "cm_bits", points)?;
    emit_functional_sweep(
        format!("sweep cm --budgets {:?}", args.budgets),
        &args.model,
        args.out.as_deref(),
        args.seed,
        source,
        settings,
        &body,
    )
}

#[derive(Args, Debug)]
pub struct StrategySweepArgs {
    /// Model bundle directory.
    #[arg(long)]
    pub model: PathBuf,

    /// Token matrix (F64M) overriding the bundle's token source.
    #[arg(long)]
    pub input: Option<PathBuf>,

    /// Synthetic-token seed override.
    #[arg(long)]
    pub seed: Option<u64>,

    /// Shift budget held fixed across strategies.
    #[arg(long)]
    pub cm: Option<String>,

    /// Converter width held fixed across strategies.
    #[arg(long)]
    pub adc: Option<String>,

    /// CSV output; stdout when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn sweep_strategy(args: &StrategySweepArgs) -> Result<()> {
    let base = AnalogOpts {
        cm: args.cm.clone(),
        adc: args.adc.clone(),
        strategy: None,
        two_pass: false,
    }
    .to_config()?;
    let variants = [
        ("row-hist", ExponentStrategy::RowHist, false),
        ("row-hist-2pass", ExponentStrategy::RowHist, true),
        ("row0", ExponentStrategy::Row0, false),
        ("row-optimal", ExponentStrategy::RowOptimal, false),
    ];
    let points = variants
        .iter()
        .map(|&(label, strategy, two_pass)| {
            let cfg = AnalogConfig { strategy, two_pass, ..base };
            cfg.validate()?;
            Ok(SweepPoint { label: label.to_string(), cfg })
        })
        .collect::<Result<Vec<_>>>()?;
    let settings = json!({ "base": base });
    let (body, source) =
        functional_sweep(&args.model, args.input.as_deref(), args.seed, "strategy", points)?;
    emit_functional_sweep(
        "sweep strategy".to_string(),
        &args.model,
        args.out.as_deref(),
        args.seed,
        source,
        settings,
        &body,
    )
}

// ---------------------------------------------------------------------------
// tables
// ---------------------------------------------------------------------------

#[derive(Args, Debug)]
pub struct TablesArgs {
    /// Table id (t1, t3, t5, t8), an alias (io-penalty, macro, systems,
    /// models), or "all".
    #[arg(long, default_value = "all")]
    pub which: String,

    /// CSV file, or a directory when --which all.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

pub fn cmd_tables(args: &TablesArgs) -> Result<()> {
    let list = if args.which == "all" {
        tables::all()?
    } else {
        vec![tables::by_id(&args.which).map_err(|e| anyhow!(e))?]
    };

    let mut failures: Vec<String> = Vec::new();
    for table in &list {
        let path = match (&args.out, list.len() > 1) {
            (Some(dir), true) => {
                fs::create_dir_all(dir)
                    .with_context(|| format!("creating {}", dir.display()))?;
                Some(dir.join(format!("{}.csv", table.id)))
            }
            (Some(file), false) => Some(file.clone()),
            (None, _) => None,
        };

        let mut manifest = RunManifest::new(format!("tables --which {}", table.id));
        if let Some(p) = &path {
            manifest.output(p);
        }
        manifest.effective = json!({ "table": table.id, "title": table.title });

        let text = format!(
            "{}# table={}\n{}",
            manifest.csv_preamble(),
            table.id,
            table.to_csv()
        );
        emit_text(path.as_deref(), &text)?;

        for cell in table.failing() {
            failures.push(format!(
                "{}/{}/{}: model {} vs reported {} ({})",
                table.id,
                cell.row,
                cell.metric,
                cell.model,
                cell.reported,
                cell.tolerance.label()
            ));
        }
    }

    if !failures.is_empty() {
        bail!("{} table cells outside tolerance:\n  {}", failures.len(), failures.join("\n  "));
    }
    Ok(())
}
