use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use super::{Result, SignalError, SignalWindow};

/// Physiological pulse band in beats per minute.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PulseBand {
    pub lo_bpm: f64,
    pub hi_bpm: f64,
}

impl Default for PulseBand {
    fn default() -> Self {
        Self { lo_bpm: 42.0, hi_bpm: 150.0 }
    }
}

impl PulseBand {
    pub fn new(lo_bpm: f64, hi_bpm: f64) -> Result<Self> {
        if !(lo_bpm < hi_bpm) || !lo_bpm.is_finite() || !hi_bpm.is_finite() {
            return Err(SignalError::Argument(format!("band [{lo_bpm}, {hi_bpm}] is not ordered")));
        }
        Ok(Self { lo_bpm, hi_bpm })
    }

    pub fn contains(&self, bpm: f64) -> bool {
        bpm >= self.lo_bpm && bpm <= self.hi_bpm
    }
}

/// One-sided power spectrum of a single channel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectrumEstimate {
    pub power: Vec<f64>,
    pub bin_freqs_bpm: Vec<f64>,
    pub band_lo_bpm: f64,
    pub band_hi_bpm: f64,
    /// Length of the zero-padded transform the bins came from.
    pub fft_len: usize,
}

impl SpectrumEstimate {
    pub fn band(&self) -> PulseBand {
        PulseBand { lo_bpm: self.band_lo_bpm, hi_bpm: self.band_hi_bpm }
    }

    /// Sum of `|X_k|^2` over the full two-sided transform.
    pub fn two_sided_sum(&self) -> f64 {
        let last = self.power.len() - 1;
        self.power
            .iter()
            .enumerate()
            .map(|(k, p)| {
                let mirrored = k != 0 && !(self.fft_len % 2 == 0 && k == last);
                if mirrored {
                    2.0 * p
                } else {
                    *p
                }
            })
            .sum()
    }

    /// Bin indices inside the band.
    pub fn band_bins(&self) -> impl Iterator<Item = usize> + '_ {
        let band = self.band();
        self.bin_freqs_bpm
            .iter()
            .enumerate()
            .filter(move |(_, f)| band.contains(**f))
            .map(|(k, _)| k)
    }

    fn same_grid(&self, other: &Self) -> bool {
        self.bin_freqs_bpm == other.bin_freqs_bpm
            && self.band_lo_bpm == other.band_lo_bpm
            && self.band_hi_bpm == other.band_hi_bpm
    }
}

pub(crate) fn hanning(n: usize) -> Vec<f64> {
    let denom = (n - 1) as f64;
    (0..n)
        .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / denom).cos())
        .collect()
}

/// Hanning-windowed, zero-padded (`pad_factor * T`) power spectrum of every
/// channel; bins are reported in bpm.
pub fn power_spectrum(w: &SignalWindow, pad_factor: usize, band: PulseBand) -> Result<Vec<SpectrumEstimate>> {
    if pad_factor < 1 {
        return Err(SignalError::Argument("pad_factor must be >= 1".into()));
    }
    let t = w.len();
    if t < 2 {
        return Err(SignalError::Argument(format!("need T >= 2 samples, got {t}")));
    }
    let n_fft = pad_factor * t;
    let fft = FftPlanner::<f64>::new().plan_fft_forward(n_fft);
    let win = hanning(t);
    let n_bins = n_fft / 2 + 1;
    let bin_hz = w.sample_rate() / n_fft as f64;
    let freqs: Vec<f64> = (0..n_bins).map(|k| k as f64 * bin_hz * 60.0).collect();

    let mut buf = vec![Complex::new(0.0, 0.0); n_fft];
    let out = w
        .samples()
        .columns()
        .into_iter()
        .map(|col| {
            buf.iter_mut().for_each(|c| *c = Complex::new(0.0, 0.0));
            for (i, (x, h)) in col.iter().zip(&win).enumerate() {
                buf[i].re = x * h;
            }
            fft.process(&mut buf);
            SpectrumEstimate {
                power: buf[..n_bins].iter().map(|c| c.norm_sqr()).collect(),
                bin_freqs_bpm: freqs.clone(),
                band_lo_bpm: band.lo_bpm,
                band_hi_bpm: band.hi_bpm,
                fft_len: n_fft,
            }
        })
        .collect();
    Ok(out)
}

/// Elementwise sum of power over a set of spectra sharing one grid.
pub fn summed_power(spectra: &[SpectrumEstimate]) -> Result<Vec<f64>> {
    let first = spectra
        .first()
        .ok_or_else(|| SignalError::Argument("no spectra to sum".into()))?;
    let mut total = vec![0.0; first.power.len()];
    for s in spectra {
        if !first.same_grid(s) {
            return Err(SignalError::Argument("spectra do not share a bin grid and band".into()));
        }
        for (acc, p) in total.iter_mut().zip(&s.power) {
            *acc += p;
        }
    }
    Ok(total)
}

/// Frequency of the maximal summed in-band power; ties go to the lower bin.
pub fn estimate_pulse_rate(spectra: &[SpectrumEstimate]) -> Result<f64> {
    let total = summed_power(spectra)?;
    let first = &spectra[0];
    let mut best: Option<(usize, f64)> = None;
    for k in first.band_bins() {
        match best {
            Some((_, p)) if total[k] <= p => {}
            _ => best = Some((k, total[k])),
        }
    }
    best.map(|(k, _)| first.bin_freqs_bpm[k])
        .ok_or_else(|| SignalError::Argument("no spectral bins inside the band".into()))
}
