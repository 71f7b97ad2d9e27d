use ndarray::Array2;

use super::{Result, SignalError, SignalWindow};

/// Linear-phase FIR band-pass designed by the windowed-sinc method
/// (Hamming window), scaled to unit gain at the passband centre.
#[derive(Debug, Clone, PartialEq)]
pub struct FirDesign {
    pub taps: Vec<f64>,
    pub sample_rate: f64,
    pub lo_bpm: f64,
    pub hi_bpm: f64,
}

fn sinc(x: f64) -> f64 {
    if x == 0.0 {
        1.0
    } else {
        let px = std::f64::consts::PI * x;
        px.sin() / px
    }
}

pub fn design_bandpass(lo_bpm: f64, hi_bpm: f64, taps: usize, sample_rate: f64) -> Result<FirDesign> {
    if taps < 3 || taps % 2 == 0 {
        return Err(SignalError::Argument(format!("taps must be odd and >= 3, got {taps}")));
    }
    let nyquist_bpm = 30.0 * sample_rate;
    if !(lo_bpm > 0.0 && lo_bpm < hi_bpm && hi_bpm < nyquist_bpm) {
        return Err(SignalError::Band { lo_bpm, hi_bpm, sample_rate });
    }
    let f1 = lo_bpm / 60.0 / sample_rate;
    let f2 = hi_bpm / 60.0 / sample_rate;
    let centre = 0.5 * (taps - 1) as f64;
    let mut h: Vec<f64> = (0..taps)
        .map(|n| {
            let m = n as f64 - centre;
            let ideal = 2.0 * f2 * sinc(2.0 * f2 * m) - 2.0 * f1 * sinc(2.0 * f1 * m);
            let w = 0.54 - 0.46 * (2.0 * std::f64::consts::PI * n as f64 / (taps - 1) as f64).cos();
            ideal * w
        })
        .collect();
    let fc = 0.5 * (f1 + f2);
    let gain: f64 = h
        .iter()
        .enumerate()
        .map(|(n, v)| v * (2.0 * std::f64::consts::PI * fc * (n as f64 - centre)).cos())
        .sum();
    for v in &mut h {
        *v /= gain;
    }
    Ok(FirDesign { taps: h, sample_rate, lo_bpm, hi_bpm })
}

/// Zero-phase (delay-compensated) response of a symmetric design at `freq_hz`.
pub fn frequency_response(design: &FirDesign, freq_hz: f64) -> f64 {
    let centre = 0.5 * (design.taps.len() - 1) as f64;
    let f = freq_hz / design.sample_rate;
    design
        .taps
        .iter()
        .enumerate()
        .map(|(n, v)| v * (2.0 * std::f64::consts::PI * f * (n as f64 - centre)).cos())
        .sum()
}

fn reflect(i: isize, len: usize) -> usize {
    let last = len as isize - 1;
    let mut i = i;
    // repeated reflection keeps tiny windows in range
    loop {
        if i < 0 {
            i = -i;
        } else if i > last {
            i = 2 * last - i;
        } else {
            return i as usize;
        }
    }
}

impl FirDesign {
    /// Filter every column, compensating the `(taps-1)/2` group delay.
    /// Edges use mirror reflection.
    pub fn apply(&self, samples: &Array2<f64>) -> Array2<f64> {
        let (t, r) = samples.dim();
        let c = (self.taps.len() / 2) as isize;
        let mut out = Array2::zeros((t, r));
        for j in 0..r {
            let col = samples.column(j);
            for n in 0..t {
                let mut acc = 0.0;
                for (k, h) in self.taps.iter().enumerate() {
                    let idx = reflect(n as isize + c - k as isize, t);
                    acc += h * col[idx];
                }
                out[[n, j]] = acc;
            }
        }
        out
    }
}

pub fn fir_bandpass(w: &SignalWindow, lo_bpm: f64, hi_bpm: f64, taps: usize) -> Result<SignalWindow> {
    let design = design_bandpass(lo_bpm, hi_bpm, taps, w.sample_rate())?;
    w.with_samples(design.apply(w.samples()))
}
