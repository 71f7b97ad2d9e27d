//! Paired synthetic datasets: a clean quasi-periodic pulse `x0` and an
//! `R`-channel measurement `x1 = gain * x0 + distractor + wander + noise
//! (+ motion bursts)`.

use std::f64::consts::PI;
use std::path::Path;

use ndarray::Array2;
use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::signals::{self, read_series_csv, write_series_csv, SignalWindow, TimeSeries};
use crate::{seeded_rng, Rng};

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid synth config: {field}: {reason}")]
    Config { field: &'static str, reason: String },
    #[error("invalid argument: {0}")]
    Argument(String),
    #[error(transparent)]
    Signal(#[from] signals::SignalError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("manifest: {0}")]
    Manifest(#[from] serde_json::Error),
}

pub type Result<T, E = SynthError> = std::result::Result<T, E>;

pub const PULSE_BAND_BPM: (f64, f64) = (42.0, 150.0);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub heart_rate_range: [f64; 2],
    pub harmonic_ratio: f64,
    pub region_gains: Vec<f64>,
    pub region_labels: Vec<String>,
    pub distractor_amp: f64,
    pub distractor_freq_range: [f64; 2],
    pub noise_std: f64,
    pub baseline_wander_amp: f64,
    /// Per-channel probability that a motion burst starts in any given second.
    pub motion_burst_prob: f64,
    pub motion_burst_amp: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            heart_rate_range: [55.0, 110.0],
            harmonic_ratio: 0.3,
            region_gains: vec![1.0, 0.9, 0.8, 0.8, 0.6],
            region_labels: vec![
                "forehead_left".into(),
                "forehead_right".into(),
                "cheek_left".into(),
                "cheek_right".into(),
                "chin".into(),
            ],
            distractor_amp: 0.5,
            distractor_freq_range: [42.0, 150.0],
            noise_std: 0.3,
            baseline_wander_amp: 0.5,
            motion_burst_prob: 0.0,
            motion_burst_amp: 3.0,
            seed: 0,
        }
    }
}

fn cfg_err(field: &'static str, reason: impl Into<String>) -> SynthError {
    SynthError::Config { field, reason: reason.into() }
}

impl SynthConfig {
    /// Clean corruption-free config with `r` unit-gain channels.
    pub fn identity(r: usize, seed: u64) -> Self {
        Self {
            region_gains: vec![1.0; r],
            region_labels: signals::default_labels(r),
            distractor_amp: 0.0,
            noise_std: 0.0,
            baseline_wander_amp: 0.0,
            motion_burst_prob: 0.0,
            seed,
            ..Self::default()
        }
    }

    pub fn n_regions(&self) -> usize {
        self.region_gains.len()
    }

    pub fn validate(&self) -> Result<()> {
        let [lo, hi] = self.heart_rate_range;
        if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
            return Err(cfg_err("heart_rate_range", format!("[{lo}, {hi}] is not ordered")));
        }
        if lo < PULSE_BAND_BPM.0 || hi > PULSE_BAND_BPM.1 {
            return Err(cfg_err("heart_rate_range", format!("[{lo}, {hi}] leaves the 42..150 bpm band")));
        }
        if !(0.0..1.0).contains(&self.harmonic_ratio) {
            return Err(cfg_err("harmonic_ratio", format!("{} not in [0, 1)", self.harmonic_ratio)));
        }
        if self.region_gains.is_empty() {
            return Err(cfg_err("region_gains", "at least one region is required"));
        }
        if self.region_gains.iter().any(|g| !g.is_finite()) {
            return Err(cfg_err("region_gains", "gains must be finite"));
        }
        if self.region_labels.len() != self.region_gains.len() {
            return Err(cfg_err(
                "region_labels",
                format!("{} labels for {} gains", self.region_labels.len(), self.region_gains.len()),
            ));
        }
        let [dlo, dhi] = self.distractor_freq_range;
        if !(dlo.is_finite() && dhi.is_finite() && 0.0 < dlo && dlo <= dhi) {
            return Err(cfg_err("distractor_freq_range", format!("[{dlo}, {dhi}] is not ordered")));
        }
        for (field, v) in [
            ("distractor_amp", self.distractor_amp),
            ("noise_std", self.noise_std),
            ("baseline_wander_amp", self.baseline_wander_amp),
            ("motion_burst_amp", self.motion_burst_amp),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(cfg_err(field, format!("{v} must be finite and >= 0")));
            }
        }
        if !(0.0..=1.0).contains(&self.motion_burst_prob) {
            return Err(cfg_err("motion_burst_prob", format!("{} not in [0, 1]", self.motion_burst_prob)));
        }
        Ok(())
    }
}

fn uniform(rng: &mut Rng, [lo, hi]: [f64; 2]) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.random_range(lo..hi)
    }
}

/// `sin(2 pi f k / (60 fs) + phi) + h * sin(4 pi f k / (60 fs) + phi2)`.
pub fn generate_pulse(cfg: &SynthConfig, f_bpm: f64, t: usize, fs: f64, rng: &mut Rng) -> Result<Vec<f64>> {
    if !(PULSE_BAND_BPM.0..=PULSE_BAND_BPM.1).contains(&f_bpm) {
        return Err(SynthError::Argument(format!("pulse rate {f_bpm} bpm outside 42..150")));
    }
    if t < 2 {
        return Err(SynthError::Argument(format!("need at least 2 samples, got {t}")));
    }
    let phi = rng.random_range(0.0..2.0 * PI);
    let phi2 = rng.random_range(0.0..2.0 * PI);
    let w = 2.0 * PI * f_bpm / (60.0 * fs);
    Ok((0..t)
        .map(|k| {
            let k = k as f64;
            (w * k + phi).sin() + cfg.harmonic_ratio * (2.0 * w * k + phi2).sin()
        })
        .collect())
}

fn burst_shape(len: usize) -> Vec<f64> {
    // linear ramp under a Hann taper
    let denom = (len.max(2) - 1) as f64;
    (0..len)
        .map(|i| {
            let u = i as f64 / denom;
            u * (0.5 - 0.5 * (2.0 * PI * u).cos())
        })
        .collect()
}

/// Corrupt one clean track into `R` measurement channels.
pub fn forward_corrupt(x0: &[f64], cfg: &SynthConfig, fs: f64, rng: &mut Rng) -> Result<SignalWindow> {
    cfg.validate()?;
    let t = x0.len();
    let r = cfg.n_regions();
    let mut out = Array2::zeros((t, r));
    let burst_len = fs.round().max(2.0) as usize;
    let shape = burst_shape(burst_len);
    for (j, gain) in cfg.region_gains.iter().enumerate() {
        let fd = uniform(rng, cfg.distractor_freq_range);
        let phd = rng.random_range(0.0..2.0 * PI);
        let fw = rng.random_range(0.05..0.3);
        let phw = rng.random_range(0.0..2.0 * PI);
        let wd = 2.0 * PI * fd / (60.0 * fs);
        let ww = 2.0 * PI * fw / fs;
        for k in 0..t {
            let kf = k as f64;
            let noise: f64 = rng.sample(StandardNormal);
            out[[k, j]] = gain * x0[k]
                + cfg.distractor_amp * (wd * kf + phd).sin()
                + cfg.baseline_wander_amp * (ww * kf + phw).sin()
                + cfg.noise_std * noise;
        }
        if cfg.motion_burst_prob > 0.0 {
            let seconds = (t as f64 / fs).floor() as usize;
            for sec in 0..seconds {
                if rng.random::<f64>() < cfg.motion_burst_prob {
                    let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
                    let start = (sec as f64 * fs) as usize;
                    for (i, s) in shape.iter().enumerate() {
                        if start + i < t {
                            out[[start + i, j]] += sign * cfg.motion_burst_amp * s;
                        }
                    }
                }
            }
        }
    }
    Ok(SignalWindow::new(out, fs, cfg.region_labels.clone(), 0.0)?)
}

/// One subject's paired long tracks.
#[derive(Debug, Clone, PartialEq)]
pub struct SubjectTrack {
    pub id: usize,
    pub rate_bpm: f64,
    pub seed: u64,
    pub x0: Vec<f64>,
    pub x1: Array2<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub sample_rate: f64,
    pub duration: f64,
    pub region_labels: Vec<String>,
    pub config: SynthConfig,
    pub subjects: Vec<SubjectTrack>,
}

pub fn make_dataset(cfg: &SynthConfig, n_subjects: usize, duration: f64, fs: f64) -> Result<Dataset> {
    cfg.validate()?;
    if n_subjects == 0 {
        return Err(SynthError::Argument("n_subjects must be >= 1".into()));
    }
    if !(fs > 0.0 && fs.is_finite()) {
        return Err(SynthError::Argument(format!("sample rate {fs} must be > 0")));
    }
    let n = (duration * fs).round();
    if !(n >= 2.0) {
        return Err(SynthError::Argument(format!("duration {duration} s at {fs} Hz gives < 2 samples")));
    }
    let n = n as usize;
    let subjects = (0..n_subjects)
        .map(|id| {
            let seed = cfg.seed.wrapping_add(id as u64);
            let mut rng = seeded_rng(seed);
            let rate_bpm = uniform(&mut rng, cfg.heart_rate_range);
            let x0 = generate_pulse(cfg, rate_bpm, n, fs, &mut rng)?;
            let x1 = forward_corrupt(&x0, cfg, fs, &mut rng)?.into_samples();
            Ok(SubjectTrack { id, rate_bpm, seed, x0, x1 })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset {
        sample_rate: fs,
        duration,
        region_labels: cfg.region_labels.clone(),
        config: cfg.clone(),
        subjects,
    })
}

pub const DATASET_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SubjectEntry {
    pub id: usize,
    pub seed: u64,
    /// Constant-rate schedule: `[[t_start_s, rate_bpm]]`.
    pub rate_schedule: Vec<[f64; 2]>,
    pub x0_file: String,
    pub x1_file: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub sample_rate: f64,
    pub duration: f64,
    pub n_samples: usize,
    pub region_labels: Vec<String>,
    pub seed: u64,
    pub config: SynthConfig,
    pub subjects: Vec<SubjectEntry>,
}

pub const DATASET_MANIFEST: &str = "dataset.json";

impl Dataset {
    pub fn n_regions(&self) -> usize {
        self.region_labels.len()
    }

    pub fn n_samples(&self) -> usize {
        self.subjects.first().map_or(0, |s| s.x0.len())
    }

    pub fn manifest(&self) -> DatasetManifest {
        DatasetManifest {
            format_version: DATASET_FORMAT_VERSION,
            sample_rate: self.sample_rate,
            duration: self.duration,
            n_samples: self.n_samples(),
            region_labels: self.region_labels.clone(),
            seed: self.config.seed,
            config: self.config.clone(),
            subjects: self
                .subjects
                .iter()
                .map(|s| SubjectEntry {
                    id: s.id,
                    seed: s.seed,
                    rate_schedule: vec![[0.0, s.rate_bpm]],
                    x0_file: format!("subject_{:03}_x0.csv", s.id),
                    x1_file: format!("subject_{:03}_x1.csv", s.id),
                })
                .collect(),
        }
    }

    /// One CSV per track plus `dataset.json`.
    pub fn write_dir(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let manifest = self.manifest();
        for (s, e) in self.subjects.iter().zip(&manifest.subjects) {
            let x0 = TimeSeries::from_samples(
                signals::replicate_channels(&s.x0, 1),
                self.sample_rate,
                vec!["pulse".into()],
            );
            write_series_csv(&dir.join(&e.x0_file), &x0)?;
            let x1 = TimeSeries::from_samples(s.x1.clone(), self.sample_rate, self.region_labels.clone());
            write_series_csv(&dir.join(&e.x1_file), &x1)?;
        }
        let text = serde_json::to_string_pretty(&manifest)?;
        std::fs::write(dir.join(DATASET_MANIFEST), text + "\n")?;
        Ok(())
    }

    pub fn read_dir(dir: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(dir.join(DATASET_MANIFEST))?;
        let m: DatasetManifest = serde_json::from_str(&text)?;
        if m.format_version != DATASET_FORMAT_VERSION {
            return Err(SynthError::Argument(format!("unsupported dataset format {}", m.format_version)));
        }
        let subjects = m
            .subjects
            .iter()
            .map(|e| {
                let x0 = read_series_csv(&dir.join(&e.x0_file))?;
                let x1 = read_series_csv(&dir.join(&e.x1_file))?;
                if x0.samples.nrows() != x1.samples.nrows() || x1.labels != m.region_labels {
                    return Err(SynthError::Argument(format!("subject {} tracks are inconsistent", e.id)));
                }
                Ok(SubjectTrack {
                    id: e.id,
                    rate_bpm: e.rate_schedule.first().map_or(f64::NAN, |r| r[1]),
                    seed: e.seed,
                    x0: x0.samples.column(0).to_vec(),
                    x1: x1.samples,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            sample_rate: m.sample_rate,
            duration: m.duration,
            region_labels: m.region_labels,
            config: m.config,
            subjects,
        })
    }
}
