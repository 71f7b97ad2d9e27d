//! Multichannel 1-D signal handling: windows, band-pass filtering, power
//! spectra and pulse-rate readout.

mod csvio;
mod filter;
mod spectrum;

pub use csvio::{read_series_csv, write_series_csv, write_spectrum_csv, TimeSeries};
pub use filter::{design_bandpass, fir_bandpass, frequency_response, FirDesign};
pub use spectrum::{estimate_pulse_rate, power_spectrum, summed_power, PulseBand, SpectrumEstimate};

use ndarray::{s, Array1, Array2, ArrayView2};
use thiserror::Error;

/// Default guard for [`channel_ratio`] denominators.
pub const DEFAULT_GREEN_EPS: f64 = 1e-12;

#[derive(Debug, Error, PartialEq)]
pub enum SignalError {
    #[error("invalid argument: {0}")]
    Argument(String),
    #[error("invalid band [{lo_bpm}, {hi_bpm}] bpm for sample rate {sample_rate} Hz")]
    Band { lo_bpm: f64, hi_bpm: f64, sample_rate: f64 },
    #[error("degenerate denominator at index {index} (|green| = {value:e})")]
    DegenerateDenominator { index: usize, value: f64 },
    #[error("csv: {0}")]
    Csv(String),
}

pub type Result<T, E = SignalError> = std::result::Result<T, E>;

/// A `T x R` block of samples at a fixed sample rate.
#[derive(Debug, Clone, PartialEq)]
pub struct SignalWindow {
    samples: Array2<f64>,
    sample_rate: f64,
    region_labels: Vec<String>,
    t_start: f64,
}

impl SignalWindow {
    pub fn new(
        samples: Array2<f64>,
        sample_rate: f64,
        region_labels: Vec<String>,
        t_start: f64,
    ) -> Result<Self> {
        let (t, r) = samples.dim();
        if t < 2 {
            return Err(SignalError::Argument(format!("window needs T >= 2 samples, got {t}")));
        }
        if r < 1 {
            return Err(SignalError::Argument("window needs at least one region".into()));
        }
        if !(sample_rate > 0.0 && sample_rate.is_finite()) {
            return Err(SignalError::Argument(format!("sample rate must be > 0, got {sample_rate}")));
        }
        if region_labels.len() != r {
            return Err(SignalError::Argument(format!(
                "{} region labels for {r} channels",
                region_labels.len()
            )));
        }
        if let Some(pos) = samples.iter().position(|v| !v.is_finite()) {
            return Err(SignalError::Argument(format!("non-finite sample at flat index {pos}")));
        }
        Ok(Self { samples, sample_rate, region_labels, t_start })
    }

    /// Window with generic labels `ch1..chR` starting at time zero.
    pub fn from_samples(samples: Array2<f64>, sample_rate: f64) -> Result<Self> {
        let labels = default_labels(samples.ncols());
        Self::new(samples, sample_rate, labels, 0.0)
    }

    pub fn samples(&self) -> &Array2<f64> {
        &self.samples
    }

    pub fn into_samples(self) -> Array2<f64> {
        self.samples
    }

    pub fn sample_rate(&self) -> f64 {
        self.sample_rate
    }

    pub fn region_labels(&self) -> &[String] {
        &self.region_labels
    }

    pub fn t_start(&self) -> f64 {
        self.t_start
    }

    pub fn len(&self) -> usize {
        self.samples.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn n_regions(&self) -> usize {
        self.samples.ncols()
    }

    /// Same metadata, new samples of identical shape.
    pub fn with_samples(&self, samples: Array2<f64>) -> Result<Self> {
        if samples.dim() != self.samples.dim() {
            return Err(SignalError::Argument(format!(
                "shape {:?} does not match window shape {:?}",
                samples.dim(),
                self.samples.dim()
            )));
        }
        Self::new(samples, self.sample_rate, self.region_labels.clone(), self.t_start)
    }

    /// Zero-mean, unit-variance scaling per channel; constant channels are
    /// only centred.
    pub fn standardized(&self) -> Self {
        let mut out = self.samples.clone();
        standardize_columns(&mut out);
        Self { samples: out, ..self.clone() }
    }
}

pub(crate) fn default_labels(r: usize) -> Vec<String> {
    (1..=r).map(|i| format!("ch{i}")).collect()
}

pub fn standardize_columns(m: &mut Array2<f64>) {
    for mut col in m.columns_mut() {
        let n = col.len() as f64;
        let mean = col.sum() / n;
        let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        let sd = var.sqrt();
        if sd > 0.0 {
            col.mapv_inplace(|v| (v - mean) / sd);
        } else {
            col.mapv_inplace(|v| v - mean);
        }
    }
}

/// Elementwise `red / green`.
pub fn channel_ratio(red: &[f64], green: &[f64], eps_green: f64) -> Result<Vec<f64>> {
    if red.len() != green.len() {
        return Err(SignalError::Argument(format!(
            "red has {} samples, green has {}",
            red.len(),
            green.len()
        )));
    }
    if let Some((index, &value)) = green.iter().enumerate().find(|(_, g)| g.abs() <= eps_green) {
        return Err(SignalError::DegenerateDenominator { index, value });
    }
    Ok(red.iter().zip(green).map(|(r, g)| r / g).collect())
}

/// Windows of `length` rows at offsets `0, stride, 2*stride, ...` while the
/// whole window fits inside `series`.
pub fn extract_windows(
    series: ArrayView2<'_, f64>,
    sample_rate: f64,
    region_labels: &[String],
    length: usize,
    stride: usize,
) -> Result<Vec<SignalWindow>> {
    let total = series.nrows();
    if stride == 0 {
        return Err(SignalError::Argument("stride must be >= 1".into()));
    }
    if length > total {
        return Err(SignalError::Argument(format!(
            "window length {length} exceeds series length {total}"
        )));
    }
    let count = (total - length) / stride + 1;
    (0..count)
        .map(|k| {
            let off = k * stride;
            SignalWindow::new(
                series.slice(s![off..off + length, ..]).to_owned(),
                sample_rate,
                region_labels.to_vec(),
                off as f64 / sample_rate,
            )
        })
        .collect()
}

/// Copy a single series into `r` identical channels.
pub fn replicate_channels(series: &[f64], r: usize) -> Array2<f64> {
    let col = Array1::from(series.to_vec());
    Array2::from_shape_fn((series.len(), r), |(i, _)| col[i])
}
