use std::path::Path;

use ndarray::Array2;

use super::{Result, SignalError, SignalWindow, SpectrumEstimate};

/// A long multichannel track as stored on disk: `time,<region1>,...`.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeSeries {
    pub time: Vec<f64>,
    pub labels: Vec<String>,
    pub samples: Array2<f64>,
}

impl TimeSeries {
    pub fn from_samples(samples: Array2<f64>, sample_rate: f64, labels: Vec<String>) -> Self {
        let time = (0..samples.nrows()).map(|i| i as f64 / sample_rate).collect();
        Self { time, labels, samples }
    }

    /// Sample rate inferred from the first time step.
    pub fn sample_rate(&self) -> Result<f64> {
        if self.time.len() < 2 {
            return Err(SignalError::Csv("need at least two rows to infer a sample rate".into()));
        }
        let dt = self.time[1] - self.time[0];
        if !(dt > 0.0) {
            return Err(SignalError::Csv("time column is not increasing".into()));
        }
        // Decimal time stamps rarely invert exactly; snap to 1e-9 Hz.
        Ok(((1.0 / dt) * 1e9).round() / 1e9)
    }

    pub fn to_window(&self) -> Result<SignalWindow> {
        SignalWindow::new(
            self.samples.clone(),
            self.sample_rate()?,
            self.labels.clone(),
            self.time[0],
        )
    }
}

fn csv_err(e: impl std::fmt::Display) -> SignalError {
    SignalError::Csv(e.to_string())
}

pub fn write_series_csv(path: &Path, series: &TimeSeries) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    let mut header = vec!["time".to_string()];
    header.extend(series.labels.iter().cloned());
    w.write_record(&header).map_err(csv_err)?;
    for (i, row) in series.samples.rows().into_iter().enumerate() {
        let mut rec = vec![series.time[i].to_string()];
        rec.extend(row.iter().map(|v| v.to_string()));
        w.write_record(&rec).map_err(csv_err)?;
    }
    w.flush().map_err(csv_err)
}

pub fn read_series_csv(path: &Path) -> Result<TimeSeries> {
    let mut r = csv::Reader::from_path(path).map_err(|e| SignalError::Csv(format!("{}: {e}", path.display())))?;
    let header = r.headers().map_err(csv_err)?.clone();
    if header.len() < 2 || &header[0] != "time" {
        return Err(SignalError::Csv(format!(
            "{}: header must be `time,<region1>,...`",
            path.display()
        )));
    }
    let labels: Vec<String> = header.iter().skip(1).map(str::to_string).collect();
    let mut time = Vec::new();
    let mut flat = Vec::new();
    for (line, rec) in r.records().enumerate() {
        let rec = rec.map_err(csv_err)?;
        if rec.len() != header.len() {
            return Err(SignalError::Csv(format!("row {} has {} fields", line + 2, rec.len())));
        }
        let parse = |s: &str| {
            s.trim()
                .parse::<f64>()
                .map_err(|e| SignalError::Csv(format!("row {}: `{s}`: {e}", line + 2)))
        };
        time.push(parse(&rec[0])?);
        for f in rec.iter().skip(1) {
            flat.push(parse(f)?);
        }
    }
    let samples = Array2::from_shape_vec((time.len(), labels.len()), flat).map_err(csv_err)?;
    Ok(TimeSeries { time, labels, samples })
}

/// `freq_bpm,power_ch1,...` for spectra sharing one grid.
pub fn write_spectrum_csv(path: &Path, spectra: &[SpectrumEstimate]) -> Result<()> {
    let first = spectra
        .first()
        .ok_or_else(|| SignalError::Argument("no spectra to write".into()))?;
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    let mut header = vec!["freq_bpm".to_string()];
    header.extend((1..=spectra.len()).map(|i| format!("power_ch{i}")));
    w.write_record(&header).map_err(csv_err)?;
    for (k, f) in first.bin_freqs_bpm.iter().enumerate() {
        let mut rec = vec![f.to_string()];
        rec.extend(spectra.iter().map(|s| s.power[k].to_string()));
        w.write_record(&rec).map_err(csv_err)?;
    }
    w.flush().map_err(csv_err)
}
