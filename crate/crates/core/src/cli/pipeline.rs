//! End-to-end steps shared by the commands: ensemble sampling of a
//! measurement window, spectral read-out, dataset evaluation and the
//! lambda x delta grid.

use ndarray::{s, Array2, Array3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gauge::{GaugeError, GaugeTable};
use crate::sampler::{ensemble, DriftModel, SamplerConfig, SamplerError, Trajectory};
use crate::signals::{self, estimate_pulse_rate, power_spectrum, summed_power, PulseBand, SignalWindow, SpectrumEstimate};
use crate::synth::Dataset;
use crate::training::{self, prepare_measurement, prepare_target, AblationRow, FilterConfig, TrainConfig, TrainError, TrainingSet};
use crate::uq::{self, max_normalize};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("invalid input: {0}")]
    Input(String),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Sampler(#[from] SamplerError),
    #[error(transparent)]
    Signal(#[from] signals::SignalError),
    #[error(transparent)]
    Uq(#[from] uq::UqError),
    #[error(transparent)]
    Gauge(#[from] GaugeError),
}

pub type Result<T, E = PipelineError> = std::result::Result<T, E>;

/// Spectral read-out settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ReadoutConfig {
    pub band: PulseBand,
    pub pad_factor: usize,
}

impl Default for ReadoutConfig {
    fn default() -> Self {
        Self { band: PulseBand::default(), pad_factor: 10 }
    }
}

/// Prepare a raw measurement window and run the ensemble on it.
pub fn sample_window(
    model: &dyn DriftModel,
    x1: &Array2<f64>,
    fs: f64,
    filter: &FilterConfig,
    cfg: &SamplerConfig,
    jobs: usize,
) -> Result<Vec<Trajectory>> {
    let prepared = prepare_measurement(x1, fs, filter)?;
    Ok(ensemble(model, &prepared, cfg, jobs)?)
}

fn spectra(x: &Array2<f64>, fs: f64, r: &ReadoutConfig) -> Result<Vec<SpectrumEstimate>> {
    let w = SignalWindow::from_samples(x.clone(), fs)?;
    Ok(power_spectrum(&w, r.pad_factor, r.band)?)
}

/// Pulse rate from power summed over every region of every member.
pub fn ensemble_pulse_rate(members: &[Array2<f64>], fs: f64, r: &ReadoutConfig) -> Result<f64> {
    let mut all = Vec::new();
    for m in members {
        all.extend(spectra(m, fs, r)?);
    }
    Ok(estimate_pulse_rate(&all)?)
}

pub fn reference_pulse_rate(x0: &Array2<f64>, fs: f64, r: &ReadoutConfig) -> Result<f64> {
    Ok(estimate_pulse_rate(&spectra(x0, fs, r)?)?)
}

/// In-band power summed over regions, scaled to unit maximum.
pub fn band_profile(x: &Array2<f64>, fs: f64, r: &ReadoutConfig) -> Result<Vec<f64>> {
    let sp = spectra(x, fs, r)?;
    let total = summed_power(&sp)?;
    let bins: Vec<f64> = sp[0].band_bins().map(|k| total[k]).collect();
    Ok(max_normalize(&bins))
}

/// Gauge table over bins `0 < f <= max_bpm` (parts), regions (operators)
/// and members (repeats) of the raw per-region power.
pub fn gauge_table(members: &[Array2<f64>], fs: f64, max_bpm: f64, pad_factor: usize) -> Result<GaugeTable> {
    let r = ReadoutConfig { band: PulseBand { lo_bpm: 0.0, hi_bpm: max_bpm }, pad_factor };
    let per_member = members.iter().map(|m| spectra(m, fs, &r)).collect::<Result<Vec<_>>>()?;
    let first = per_member
        .first()
        .ok_or_else(|| PipelineError::Input("empty ensemble".into()))?;
    let parts: Vec<usize> = first[0].band_bins().filter(|&k| first[0].bin_freqs_bpm[k] > 0.0).collect();
    let (p, o, k) = (parts.len(), first.len(), per_member.len());
    let table = Array3::from_shape_fn((p, o, k), |(i, j, m)| per_member[m][j].power[parts[i]]);
    Ok(GaugeTable::new(table)?)
}

/// Pulse-rate outcome of one test window.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WindowResult {
    pub subject: usize,
    pub t_start: f64,
    pub pred_bpm: f64,
    pub gt_bpm: f64,
}

/// Master seed of the `w`-th window; realization seeds `master ^ k` stay
/// distinct across windows for `k < 2^32`.
pub fn window_seed(seed: u64, w: usize) -> u64 {
    seed ^ ((w as u64) << 32)
}

/// Tile every subject with windows of `length` samples every `stride`
/// samples and compare ensemble and reference pulse rates.
#[allow(clippy::too_many_arguments)]
pub fn evaluate_dataset(
    model: &dyn DriftModel,
    ds: &Dataset,
    length: usize,
    stride: usize,
    filter: &FilterConfig,
    sampler: &SamplerConfig,
    readout: &ReadoutConfig,
    jobs: usize,
) -> Result<Vec<WindowResult>> {
    let fs = ds.sample_rate;
    let r = ds.region_labels.len();
    let mut out = Vec::new();
    let mut w = 0;
    for s in &ds.subjects {
        let x0 = signals::replicate_channels(&s.x0, 1);
        for origin in training::candidate_origins(s.x0.len(), length, stride, 0) {
            let x1 = s.x1.slice(s![origin..origin + length, ..]).to_owned();
            let cfg = SamplerConfig { seed: window_seed(sampler.seed, w), ..sampler.clone() };
            let members: Vec<Array2<f64>> =
                sample_window(model, &x1, fs, filter, &cfg, jobs)?.into_iter().map(|t| t.terminal).collect();
            debug_assert_eq!(members[0].ncols(), r);
            let gt = prepare_target(&x0.slice(s![origin..origin + length, ..]).to_owned());
            out.push(WindowResult {
                subject: s.id,
                t_start: origin as f64 / fs,
                pred_bpm: ensemble_pulse_rate(&members, fs, readout)?,
                gt_bpm: reference_pulse_rate(&gt, fs, readout)?,
            });
            w += 1;
        }
    }
    if out.is_empty() {
        return Err(PipelineError::Input(format!("no window of {length} samples fits the test tracks")));
    }
    Ok(out)
}

pub fn mean_abs_error(results: &[WindowResult]) -> f64 {
    results.iter().map(|r| (r.pred_bpm - r.gt_bpm).abs()).sum::<f64>() / results.len() as f64
}

/// Cell settings of a lambda x delta grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationConfig {
    pub lambdas: Vec<f64>,
    /// Shifts in seconds.
    pub deltas: Vec<f64>,
    /// Test window spacing in samples; defaults to the window length.
    pub test_stride: Option<usize>,
    pub train: TrainConfig,
    pub sampler: SamplerConfig,
    pub readout: ReadoutConfig,
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self {
            lambdas: (0..=10).map(|k| k as f64 / 10.0).collect(),
            deltas: (1..=10).map(f64::from).collect(),
            test_stride: None,
            train: TrainConfig::default(),
            sampler: SamplerConfig::default(),
            readout: ReadoutConfig::default(),
        }
    }
}

/// Train one model per grid cell and report test-window MAE.
pub fn run_ablation(
    train_set: &TrainingSet,
    test: &Dataset,
    cfg: &AblationConfig,
    jobs: usize,
) -> Result<Vec<AblationRow>> {
    if cfg.lambdas.is_empty() || cfg.deltas.is_empty() {
        return Err(PipelineError::Input("ablation grid is empty".into()));
    }
    let stride = cfg.test_stride.unwrap_or(cfg.train.window_length);
    let mut rows = Vec::new();
    for &lambda in &cfg.lambdas {
        for &delta in &cfg.deltas {
            let tc = TrainConfig { lambda_rcl: lambda, delta_shift: delta, ..cfg.train.clone() };
            let outcome = training::train(train_set, &tc, None)?;
            let model = crate::sampler::LearnedFields::from_checkpoint(&outcome.best);
            let res = evaluate_dataset(&model, test, tc.window_length, stride, &tc.filter, &cfg.sampler, &cfg.readout, jobs)?;
            rows.push(AblationRow { lambda, delta, mae_bpm: mean_abs_error(&res) });
        }
    }
    Ok(rows)
}
