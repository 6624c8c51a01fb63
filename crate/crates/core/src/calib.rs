//! Exponent-target calibration and saturation statistics.
//!
//! Before an analog layer can run with a static alignment target, a
//! representative input set is scanned for the block scale exponents it
//! produces against the programmed weight blocks. The offline strategies pick
//! the layer target from that distribution (its maximum, optionally offset);
//! the online strategies skip the scan and derive a target per evaluation
//! inside the datapath. Calibration also measures the converter full scale
//! as the smallest power of two covering every pre-converter column sum.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::analog::{
    max_pre_adc_magnitude, analog_linear_forward_raw, AdcResolution, AnalogConfig,
    AnalogLayerModel, ExponentStrategy,
};
use crate::error::Error;
use crate::tensor::MxTensor;
use crate::Result;

/// Counts of observed block scale exponents (activation block exponent plus
/// realized weight block exponent) for one layer.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ExponentHistogram {
    counts: BTreeMap<i32, u64>,
}

impl ExponentHistogram {
    pub fn record(&mut self, exponent: i32) {
        self.add(exponent, 1);
    }

    pub fn add(&mut self, exponent: i32, count: u64) {
        if count > 0 {
            *self.counts.entry(exponent).or_insert(0) += count;
        }
    }

    /// Order-independent merge; counts are commutative.
    pub fn merge(&mut self, other: &ExponentHistogram) {
        for (&e, &c) in &other.counts {
            self.add(e, c);
        }
    }

    pub fn total(&self) -> u64 {
        self.counts.values().sum()
    }

    pub fn is_empty(&self) -> bool {
        self.counts.is_empty()
    }

    pub fn max_exponent(&self) -> Option<i32> {
        self.counts.keys().next_back().copied()
    }

    pub fn min_exponent(&self) -> Option<i32> {
        self.counts.keys().next().copied()
    }

    /// Smallest exponent covering at least `pct` percent of the mass.
    /// `pct = 100` reproduces the maximum rule.
    pub fn percentile(&self, pct: f64) -> Option<i32> {
        let total = self.total();
        if total == 0 {
            return None;
        }
        let need = (pct / 100.0 * total as f64).ceil().max(1.0) as u64;
        let mut seen = 0u64;
        for (&e, &c) in &self.counts {
            seen += c;
            if seen >= need {
                return Some(e);
            }
        }
        self.max_exponent()
    }

    pub fn bins(&self) -> impl Iterator<Item = (i32, u64)> + '_ {
        self.counts.iter().map(|(&e, &c)| (e, c))
    }
}

/// Scans one layer's calibration inputs and histograms every block scale the
/// alignment stage would see. One entry per (input row, block row, column).
pub fn collect_histogram(x: &MxTensor, layer: &AnalogLayerModel) -> Result<ExponentHistogram> {
    let (d_in, d_out) = layer.dims();
    if x.cols() != d_in {
        return Err(Error::dimension(format!(
            "calibration input width {} does not match layer depth {d_in}",
            x.cols()
        )));
    }
    if x.rows() == 0 {
        return Err(Error::config("calibration input set is empty"));
    }
    let blocks = layer.block_rows();
    // The weight-side exponents repeat for every input row; histogram them
    // once per block row and convolve with the activation exponents.
    let mut weight_bins: Vec<BTreeMap<i32, u64>> = vec![BTreeMap::new(); blocks];
    for (b, bins) in weight_bins.iter_mut().enumerate() {
        for j in 0..d_out {
            *bins.entry(layer.block_weight_exponent(b, j)).or_insert(0) += 1;
        }
    }
    let mut hist = ExponentHistogram::default();
    for r in 0..x.rows() {
        for (b, bins) in weight_bins.iter().enumerate() {
            let e_x = x.grid_block(r, b).scale.exponent();
            for (&e_w, &c) in bins {
                hist.add(e_x + e_w, c);
            }
        }
    }
    Ok(hist)
}

/// What a strategy turns the histogram into.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TargetRule {
    /// A fixed layer target exponent.
    Static(i32),
    /// The datapath derives a target per column evaluation; nothing to bake.
    PerEvaluation,
}

/// Resolves a strategy against a collected histogram.
pub fn select_target(hist: &ExponentHistogram, strategy: ExponentStrategy) -> Result<TargetRule> {
    match strategy {
        ExponentStrategy::RowHist => hist
            .max_exponent()
            .map(TargetRule::Static)
            .ok_or_else(|| Error::config("cannot pick a target from an empty histogram")),
        ExponentStrategy::RowHistOffset(c) => hist
            .max_exponent()
            .map(|e| TargetRule::Static(e + c))
            .ok_or_else(|| Error::config("cannot pick a target from an empty histogram")),
        ExponentStrategy::Row0 | ExponentStrategy::RowOptimal => Ok(TargetRule::PerEvaluation),
    }
}

/// Alignment outcome fractions over a set of block evaluations.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SaturationStats {
    pub total_blocks: u64,
    pub overflow_blocks: u64,
    /// Blocks zeroed after any recovery pass.
    pub underflow_blocks: u64,
}

impl SaturationStats {
    pub fn overflow_fraction(&self) -> f64 {
        self.fraction(self.overflow_blocks)
    }

    pub fn underflow_fraction(&self) -> f64 {
        self.fraction(self.underflow_blocks)
    }

    pub fn preserved_fraction(&self) -> f64 {
        self.fraction(self.total_blocks - self.overflow_blocks - self.underflow_blocks)
    }

    fn fraction(&self, part: u64) -> f64 {
        if self.total_blocks == 0 {
            0.0
        } else {
            part as f64 / self.total_blocks as f64
        }
    }

    pub fn merge(&mut self, other: &SaturationStats) {
        self.total_blocks += other.total_blocks;
        self.overflow_blocks += other.overflow_blocks;
        self.underflow_blocks += other.underflow_blocks;
    }
}

/// Runs the alignment stage over an input set and tallies window outcomes.
/// The converter is bypassed, so no full scale is needed.
pub fn saturation_stats(
    x: &MxTensor,
    layer: &AnalogLayerModel,
    cfg: &AnalogConfig,
) -> Result<SaturationStats> {
    let probe = AnalogConfig { adc: AdcResolution::Ideal, ..*cfg };
    let (_, diag) = analog_linear_forward_raw(x, layer, &probe)?;
    let (_, d_out) = layer.dims();
    Ok(SaturationStats {
        total_blocks: (x.rows() * layer.block_rows() * d_out) as u64,
        overflow_blocks: diag.overflow_blocks,
        underflow_blocks: diag.residual_underflow_blocks,
    })
}

/// Calibration record for one linear layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerCalibration {
    pub layer: String,
    pub strategy: ExponentStrategy,
    /// Static target exponent; absent for per-evaluation strategies.
    pub e_n: Option<i32>,
    /// Lowered second-pass target when a two-pass run was calibrated.
    pub e_n2: Option<i32>,
    /// Converter full scale as a power-of-two exponent in code units.
    pub fullscale_exp: Option<i32>,
    pub hist: ExponentHistogram,
}

impl LayerCalibration {
    /// Applies the stored target and full scale to a programmed layer.
    pub fn apply(&self, layer: &mut AnalogLayerModel) {
        if let Some(e) = self.e_n {
            layer.set_target_exponent(e);
        }
        if let Some(fs) = self.fullscale_exp {
            layer.set_fullscale_exp(fs);
        }
    }
}

/// Full calibration flow for one layer: histogram, target selection, and
/// full-scale measurement under the final knob settings. Mutates the layer
/// in place and returns the portable record.
pub fn calibrate_layer(
    x: &MxTensor,
    layer: &mut AnalogLayerModel,
    cfg: &AnalogConfig,
    id: impl Into<String>,
) -> Result<LayerCalibration> {
    let hist = collect_histogram(x, layer)?;
    let e_n = match select_target(&hist, cfg.strategy)? {
        TargetRule::Static(e) => {
            layer.set_target_exponent(e);
            Some(e)
        }
        TargetRule::PerEvaluation => None,
    };
    let e_n2 = match (cfg.two_pass, cfg.cm, e_n) {
        (true, crate::analog::CmBudget::Limited(cm), Some(e)) => Some(e - cm as i32),
        _ => None,
    };
    let probe = AnalogConfig { adc: AdcResolution::Ideal, ..*cfg };
    let peak = max_pre_adc_magnitude(x, layer, &probe)?;
    // Zero peak (an all-zero calibration set) still needs a usable scale.
    let fullscale_exp = peak.ceil_log2_abs().unwrap_or(0);
    layer.set_fullscale_exp(fullscale_exp);
    Ok(LayerCalibration {
        layer: id.into(),
        strategy: cfg.strategy,
        e_n,
        e_n2,
        fullscale_exp: Some(fullscale_exp),
        hist,
    })
}

/// Calibration records for a whole model, keyed by layer id.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelCalibration {
    /// Content hash of the weight bundle this calibration belongs to.
    pub model_hash: String,
    pub strategy: ExponentStrategy,
    pub per_layer: Vec<LayerCalibration>,
}

impl ModelCalibration {
    pub fn layer(&self, id: &str) -> Option<&LayerCalibration> {
        self.per_layer.iter().find(|l| l.layer == id)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path)?;
        serde_json::to_writer_pretty(std::io::BufWriter::new(file), self)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path)?;
        Ok(serde_json::from_reader(std::io::BufReader::new(file))?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::analog::{analog_linear_forward_raw, CmBudget};
    use crate::tensor::{Mat, Orientation};
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn toy_setup(seed: u64, rows: usize, d_in: usize, d_out: usize) -> (MxTensor, AnalogLayerModel) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Mat::from_fn(rows, d_in, |_, _| rng.random_range(-4.0..4.0));
        let w = Mat::from_fn(d_in, d_out, |_, _| rng.random_range(-1.0..1.0));
        let xt = MxTensor::quantize_nearest(&x, Orientation::RowMajor);
        let wt = MxTensor::quantize_nearest(&w, Orientation::ColMajor);
        let layer = AnalogLayerModel::program(&wt, None).unwrap();
        (xt, layer)
    }

    #[test]
    fn histogram_counts_merge_and_rank() {
        let mut h = ExponentHistogram::default();
        h.add(5, 10);
        h.add(7, 2);
        assert_eq!(h.total(), 12);
        assert_eq!(h.max_exponent(), Some(7));
        assert_eq!(h.min_exponent(), Some(5));
        assert_eq!(h.percentile(100.0), Some(7));
        assert_eq!(h.percentile(50.0), Some(5));
        let mut other = ExponentHistogram::default();
        other.record(7);
        other.record(-3);
        h.merge(&other);
        assert_eq!(h.total(), 14);
        assert_eq!(h.min_exponent(), Some(-3));
        assert_eq!(h.bins().find(|&(e, _)| e == 7), Some((7, 3)));
    }

    #[test]
    fn histogram_total_counts_every_block_evaluation() {
        let (x, layer) = toy_setup(31, 4, 96, 5);
        let h = collect_histogram(&x, &layer).unwrap();
        // rows * block-rows * columns
        assert_eq!(h.total(), 4 * 3 * 5);
    }

    #[test]
    fn constant_input_collapses_to_single_activation_scale() {
        let x = MxTensor::quantize_nearest(
            &Mat::from_fn(3, 64, |_, _| 1.5f64),
            Orientation::RowMajor,
        );
        let w = MxTensor::quantize_nearest(
            &Mat::from_fn(64, 4, |_, _| 0.75f64),
            Orientation::ColMajor,
        );
        let layer = AnalogLayerModel::program(&w, None).unwrap();
        let h = collect_histogram(&x, &layer).unwrap();
        // Uniform scales on both sides: one bin holds everything.
        assert_eq!(h.bins().count(), 1);
        assert_eq!(h.total(), 3 * 2 * 4);
    }

    #[test]
    fn doubling_inputs_shifts_the_histogram_one_binade() {
        let mut rng = ChaCha8Rng::seed_from_u64(32);
        let base = Mat::from_fn(4, 64, |_, _| rng.random_range(-2.0..2.0));
        let doubled = base.map(|v: f64| v * 2.0);
        let w = Mat::from_fn(64, 6, |_, _| rng.random_range(-1.0..1.0));
        let wt = MxTensor::quantize_nearest(&w, Orientation::ColMajor);
        let layer = AnalogLayerModel::program(&wt, None).unwrap();
        let h1 = collect_histogram(
            &MxTensor::quantize_nearest(&base, Orientation::RowMajor),
            &layer,
        )
        .unwrap();
        let h2 = collect_histogram(
            &MxTensor::quantize_nearest(&doubled, Orientation::RowMajor),
            &layer,
        )
        .unwrap();
        let shifted: Vec<(i32, u64)> = h1.bins().map(|(e, c)| (e + 1, c)).collect();
        let got: Vec<(i32, u64)> = h2.bins().collect();
        assert_eq!(got, shifted);
    }

    #[test]
    fn target_selection_follows_the_strategy() {
        let mut h = ExponentHistogram::default();
        h.add(5, 10);
        h.add(7, 2);
        assert_eq!(
            select_target(&h, ExponentStrategy::RowHist).unwrap(),
            TargetRule::Static(7)
        );
        assert_eq!(
            select_target(&h, ExponentStrategy::RowHistOffset(-2)).unwrap(),
            TargetRule::Static(5)
        );
        assert_eq!(
            select_target(&h, ExponentStrategy::Row0).unwrap(),
            TargetRule::PerEvaluation
        );
        assert_eq!(
            select_target(&h, ExponentStrategy::RowOptimal).unwrap(),
            TargetRule::PerEvaluation
        );
        let empty = ExponentHistogram::default();
        assert!(select_target(&empty, ExponentStrategy::RowHist).is_err());
    }

    #[test]
    fn max_target_never_overflows_on_calibration_data() {
        let (x, mut layer) = toy_setup(33, 6, 128, 8);
        let cfg = AnalogConfig { cm: CmBudget::Limited(3), ..AnalogConfig::default() };
        calibrate_layer(&x, &mut layer, &cfg, "probe").unwrap();
        let stats = saturation_stats(&x, &layer, &cfg).unwrap();
        assert_eq!(stats.overflow_blocks, 0);
        assert!(stats.preserved_fraction() > 0.0);
        let covered = AnalogConfig { cm: CmBudget::Unbounded, ..cfg };
        let wide = saturation_stats(&x, &layer, &covered).unwrap();
        assert_eq!(wide.underflow_fraction(), 0.0);
    }

    #[test]
    fn underflow_fraction_is_monotone_in_budget() {
        let (x, mut layer) = toy_setup(34, 6, 128, 8);
        let base = AnalogConfig::default();
        calibrate_layer(&x, &mut layer, &base, "probe").unwrap();
        let mut last = f64::INFINITY;
        for cm in 1..=6 {
            let cfg = AnalogConfig { cm: CmBudget::Limited(cm), ..base };
            let stats = saturation_stats(&x, &layer, &cfg).unwrap();
            assert!(stats.underflow_fraction() <= last);
            last = stats.underflow_fraction();
        }
    }

    #[test]
    fn calibrated_fullscale_silences_the_converter() {
        let (x, mut layer) = toy_setup(35, 5, 96, 10);
        let cfg = AnalogConfig {
            cm: CmBudget::Limited(4),
            adc: AdcResolution::Bits(12),
            ..AnalogConfig::default()
        };
        calibrate_layer(&x, &mut layer, &cfg, "probe").unwrap();
        assert!(layer.fullscale_exp().is_some());
        let (_, diag) = analog_linear_forward_raw(&x, &layer, &cfg).unwrap();
        assert_eq!(diag.adc_saturations, 0);
    }

    #[test]
    fn online_strategies_run_without_a_static_target() {
        let (x, mut layer) = toy_setup(36, 3, 64, 6);
        for strategy in [ExponentStrategy::Row0, ExponentStrategy::RowOptimal] {
            let cfg = AnalogConfig {
                cm: CmBudget::Limited(4),
                adc: AdcResolution::Bits(12),
                strategy,
                ..AnalogConfig::default()
            };
            let record = calibrate_layer(&x, &mut layer, &cfg, "probe").unwrap();
            assert_eq!(record.e_n, None);
            let (out, _) = analog_linear_forward_raw(&x, &layer, &cfg).unwrap();
            assert!(out.data().iter().all(|v| v.is_finite()));
        }
    }

    #[test]
    fn median_target_centers_the_evaluation() {
        // Three blocks whose scales differ: the first is tiny, the second
        // moderate, the third large. The per-evaluation median picks the
        // middle scale, so the large block overflows and the tiny one can
        // underflow under a narrow budget.
        let mut w = vec![0.0f64; 96];
        for (i, v) in w.iter_mut().enumerate() {
            *v = match i / 32 {
                0 => 0.004,
                1 => 0.5,
                _ => 40.0,
            };
        }
        let wt = MxTensor::quantize_nearest(&Mat::from_vec(96, 1, w), Orientation::ColMajor);
        let layer = AnalogLayerModel::program(&wt, None).unwrap();
        let x = MxTensor::quantize_nearest(
            &Mat::from_fn(1, 96, |_, _| 1.0f64),
            Orientation::RowMajor,
        );
        let cfg = AnalogConfig {
            cm: CmBudget::Limited(2),
            adc: AdcResolution::Ideal,
            strategy: ExponentStrategy::RowOptimal,
            ..AnalogConfig::default()
        };
        let stats = saturation_stats(&x, &layer, &cfg).unwrap();
        assert_eq!(stats.overflow_blocks, 1);
        assert_eq!(stats.underflow_blocks, 1);
    }

    #[test]
    fn calibration_records_round_trip_as_json() {
        let (x, mut layer) = toy_setup(37, 3, 64, 4);
        let cfg = AnalogConfig::default();
        let record = calibrate_layer(&x, &mut layer, &cfg, "enc0.q").unwrap();
        let bundle = ModelCalibration {
            model_hash: "abc123".into(),
            strategy: cfg.strategy,
            per_layer: vec![record],
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("calibration.json");
        bundle.save(&path).unwrap();
        let back = ModelCalibration::load(&path).unwrap();
        assert_eq!(back, bundle);
        assert!(back.layer("enc0.q").is_some());
        assert!(back.layer("enc0.k").is_none());

        // Applying the record to a freshly programmed layer reproduces the
        // calibrated state.
        let mut fresh = AnalogLayerModel::program(
            &MxTensor::quantize_nearest(
                &x.to_real::<f64>().transposed(),
                Orientation::ColMajor,
            ),
            None,
        )
        .unwrap();
        let rec = back.layer("enc0.q").unwrap();
        rec.apply(&mut fresh);
        assert_eq!(Some(fresh.target_exponent()), rec.e_n);
        assert_eq!(fresh.fullscale_exp(), rec.fullscale_exp);
    }
}
