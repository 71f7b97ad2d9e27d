//! ANOVA gauge repeatability and reproducibility.
//!
//! Parts are frequency bins, operators are facial regions and repeats are
//! sampler realizations. Variance components come from the two-way crossed
//! ANOVA with interaction:
//!
//! ```text
//! repeatability = MS_E
//! interaction   = (MS_PO - MS_E) / K
//! operator      = (MS_O - MS_PO) / (P K)
//! part          = (MS_P - MS_PO) / (O K)
//! ```
//!
//! Negative estimates are clipped to zero. Reproducibility is operator plus
//! interaction; repeatability, reproducibility and part make up the total.

use std::io::Write as _;
use std::path::Path;

use ndarray::Array3;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum GaugeError {
    #[error("invalid gauge table: {0}")]
    Table(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = GaugeError> = std::result::Result<T, E>;

/// Measurements indexed `[part, operator, repeat]`.
#[derive(Debug, Clone, PartialEq)]
pub struct GaugeTable {
    measurements: Array3<f64>,
}

impl GaugeTable {
    pub fn new(measurements: Array3<f64>) -> Result<Self> {
        let (p, o, k) = measurements.dim();
        if k < 2 {
            return Err(GaugeError::Table(format!("{k} repeats: at least 2 are needed for repeatability")));
        }
        if p < 2 || o < 2 {
            return Err(GaugeError::Table(format!("need at least 2 parts and 2 operators, got {p} x {o}")));
        }
        if measurements.iter().any(|v| !v.is_finite()) {
            return Err(GaugeError::Table("non-finite measurement".into()));
        }
        Ok(Self { measurements })
    }

    pub fn measurements(&self) -> &Array3<f64> {
        &self.measurements
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GaugeRr {
    pub repeatability: f64,
    pub reproducibility: f64,
    pub operator: f64,
    pub interaction: f64,
    pub part: f64,
    pub total: f64,
    pub pct_repeatability: f64,
    pub pct_reproducibility: f64,
    pub pct_operator: f64,
    pub pct_part: f64,
    /// All components were zero; percentages follow the part = 100 convention.
    pub degenerate: bool,
}

pub fn gauge_rr(table: &GaugeTable) -> GaugeRr {
    let y = &table.measurements;
    let (p, o, k) = y.dim();
    let (pf, of, kf) = (p as f64, o as f64, k as f64);
    // Centre on one measurement so a constant table gives exact zeros.
    let shift = y[[0, 0, 0]];
    let mut cell = vec![0.0; p * o];
    for i in 0..p {
        for j in 0..o {
            cell[i * o + j] = (0..k).map(|r| y[[i, j, r]] - shift).sum::<f64>() / kf;
        }
    }
    let part_mean: Vec<f64> = (0..p).map(|i| (0..o).map(|j| cell[i * o + j]).sum::<f64>() / of).collect();
    let op_mean: Vec<f64> = (0..o).map(|j| (0..p).map(|i| cell[i * o + j]).sum::<f64>() / pf).collect();
    let grand = part_mean.iter().sum::<f64>() / pf;

    let ss_p = of * kf * part_mean.iter().map(|m| (m - grand).powi(2)).sum::<f64>();
    let ss_o = pf * kf * op_mean.iter().map(|m| (m - grand).powi(2)).sum::<f64>();
    let mut ss_po = 0.0;
    let mut ss_e = 0.0;
    for i in 0..p {
        for j in 0..o {
            let c = cell[i * o + j];
            ss_po += (c - part_mean[i] - op_mean[j] + grand).powi(2);
            for r in 0..k {
                ss_e += (y[[i, j, r]] - shift - c).powi(2);
            }
        }
    }
    ss_po *= kf;
    let ms_p = ss_p / (pf - 1.0);
    let ms_o = ss_o / (of - 1.0);
    let ms_po = ss_po / ((pf - 1.0) * (of - 1.0));
    let ms_e = ss_e / (pf * of * (kf - 1.0));

    let repeatability = ms_e.max(0.0);
    let interaction = ((ms_po - ms_e) / kf).max(0.0);
    let operator = ((ms_o - ms_po) / (pf * kf)).max(0.0);
    let part = ((ms_p - ms_po) / (of * kf)).max(0.0);
    let reproducibility = operator + interaction;
    let total = repeatability + reproducibility + part;
    let degenerate = total <= 0.0;
    let pct = |v: f64| if degenerate { 0.0 } else { 100.0 * v / total };
    GaugeRr {
        repeatability,
        reproducibility,
        operator,
        interaction,
        part,
        total,
        pct_repeatability: pct(repeatability),
        pct_reproducibility: pct(reproducibility),
        pct_operator: pct(operator),
        pct_part: if degenerate { 100.0 } else { pct(part) },
        degenerate,
    }
}

pub const GAUGE_HEADER: &str = "Source,Variance,% Variance";

pub fn write_gauge_csv(path: &Path, g: &GaugeRr) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "{GAUGE_HEADER}")?;
    for (name, v, pct) in [
        ("Repeatability", g.repeatability, g.pct_repeatability),
        ("Reproducibility", g.reproducibility, g.pct_reproducibility),
        ("Operator", g.operator, g.pct_operator),
        ("Part", g.part, g.pct_part),
    ] {
        writeln!(f, "{name},{v},{pct}")?;
    }
    f.flush()?;
    Ok(())
}
