//! Accuracy and predictive-uncertainty metrics over ensembles.
//!
//! Per-bin predictions are Gaussian with the ensemble mean and standard
//! deviation; `sigma` is floored at [`SIGMA_MIN`] wherever it divides.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};
use statrs::distribution::{Continuous, ContinuousCDF, Normal};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum UqError {
    #[error("invalid argument: {0}")]
    Argument(String),
    #[error("degenerate correlation: constant input")]
    DegenerateCorrelation,
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
}

pub type Result<T, E = UqError> = std::result::Result<T, E>;

pub const SIGMA_MIN: f64 = 1e-6;
pub const DEFAULT_ALPHA: f64 = 0.05;

/// `0.05, 0.10, ..., 0.95`.
pub fn default_levels() -> Vec<f64> {
    (1..=19).map(|k| k as f64 * 0.05).collect()
}

fn std_normal() -> Normal {
    Normal::new(0.0, 1.0).expect("unit normal")
}

fn same_len(what: &str, lens: &[usize]) -> Result<usize> {
    let n = lens[0];
    if n == 0 || lens.iter().any(|l| *l != n) {
        return Err(UqError::Argument(format!("{what}: lengths {lens:?} must be equal and nonzero")));
    }
    Ok(n)
}

fn finite(name: &'static str, xs: &[f64]) -> Result<()> {
    if xs.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(UqError::NonFinite(name))
    }
}

fn floor(s: f64) -> f64 {
    s.max(SIGMA_MIN)
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Standard Pearson coefficient.
pub fn pearson(a: &[f64], b: &[f64]) -> Result<f64> {
    same_len("pearson", &[a.len(), b.len()])?;
    let (ma, mb) = (mean(a), mean(b));
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa == 0.0 || sbb == 0.0 {
        return Err(UqError::DegenerateCorrelation);
    }
    Ok(sab / (saa * sbb).sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PulseMetrics {
    pub mae: f64,
    pub rmse: f64,
    /// `None` when either input is constant.
    pub pcc: Option<f64>,
}

pub fn pulse_metrics(pred: &[f64], gt: &[f64]) -> Result<PulseMetrics> {
    same_len("pulse_metrics", &[pred.len(), gt.len()])?;
    finite("pred", pred)?;
    finite("gt", gt)?;
    let mae = pred.iter().zip(gt).map(|(p, g)| (p - g).abs()).sum::<f64>() / pred.len() as f64;
    let mse = pred.iter().zip(gt).map(|(p, g)| (p - g).powi(2)).sum::<f64>() / pred.len() as f64;
    let pcc = match pearson(pred, gt) {
        Ok(r) => Some(r),
        Err(UqError::DegenerateCorrelation) => None,
        Err(e) => return Err(e),
    };
    Ok(PulseMetrics { mae, rmse: mse.sqrt(), pcc })
}

/// Mean of `-ln N(y | mu, sigma^2)`.
pub fn gaussian_nll(y: &[f64], mu: &[f64], sigma: &[f64]) -> Result<f64> {
    let n = same_len("gaussian_nll", &[y.len(), mu.len(), sigma.len()])?;
    finite("y", y)?;
    finite("mu", mu)?;
    finite("sigma", sigma)?;
    let total: f64 = y
        .iter()
        .zip(mu)
        .zip(sigma)
        .map(|((y, m), s)| {
            let s = floor(*s);
            0.5 * (2.0 * PI * s * s).ln() + (y - m).powi(2) / (2.0 * s * s)
        })
        .sum();
    Ok(total / n as f64)
}

/// Mean closed-form CRPS of `N(mu, sigma^2)` against `y`.
pub fn crps_gaussian(y: &[f64], mu: &[f64], sigma: &[f64]) -> Result<f64> {
    let n = same_len("crps_gaussian", &[y.len(), mu.len(), sigma.len()])?;
    finite("y", y)?;
    finite("mu", mu)?;
    finite("sigma", sigma)?;
    let nd = std_normal();
    let inv_sqrt_pi = 1.0 / PI.sqrt();
    let total: f64 = y
        .iter()
        .zip(mu)
        .zip(sigma)
        .map(|((y, m), s)| {
            let s = floor(*s);
            let z = (y - m) / s;
            s * (z * (2.0 * nd.cdf(z) - 1.0) + 2.0 * nd.pdf(z) - inv_sqrt_pi)
        })
        .sum();
    Ok(total / n as f64)
}

/// Mean predictive variance.
pub fn sharpness(sigma: &[f64]) -> f64 {
    if sigma.is_empty() {
        return 0.0;
    }
    sigma.iter().map(|s| s * s).sum::<f64>() / sigma.len() as f64
}

fn check_taus(taus: &[f64]) -> Result<()> {
    if taus.is_empty() {
        return Err(UqError::Argument("no quantile levels".into()));
    }
    if let Some(t) = taus.iter().find(|t| !(**t > 0.0 && **t < 1.0)) {
        return Err(UqError::Argument(format!("quantile level {t} outside (0, 1)")));
    }
    Ok(())
}

/// `quantiles[j][i]`: Gaussian quantile at `taus[j]` for bin `i`.
pub fn gaussian_quantiles(mu: &[f64], sigma: &[f64], taus: &[f64]) -> Result<Vec<Vec<f64>>> {
    same_len("gaussian_quantiles", &[mu.len(), sigma.len()])?;
    check_taus(taus)?;
    let nd = std_normal();
    Ok(taus
        .iter()
        .map(|t| {
            let z = nd.inverse_cdf(*t);
            mu.iter().zip(sigma).map(|(m, s)| m + z * s).collect()
        })
        .collect())
}

/// Mean pinball loss over bins and levels.
pub fn check_score(y: &[f64], quantiles: &[Vec<f64>], taus: &[f64]) -> Result<f64> {
    check_taus(taus)?;
    if quantiles.len() != taus.len() {
        return Err(UqError::Argument(format!("{} quantile rows for {} levels", quantiles.len(), taus.len())));
    }
    finite("y", y)?;
    let mut total = 0.0;
    for (q, tau) in quantiles.iter().zip(taus) {
        same_len("check_score", &[y.len(), q.len()])?;
        finite("quantiles", q)?;
        total += y
            .iter()
            .zip(q)
            .map(|(y, q)| if y >= q { (y - q) * tau } else { (q - y) * (1.0 - tau) })
            .sum::<f64>();
    }
    Ok(total / (y.len() * taus.len()) as f64)
}

/// Central Gaussian `(1 - alpha)` interval bounds.
pub fn gaussian_interval(mu: &[f64], sigma: &[f64], alpha: f64) -> Result<(Vec<f64>, Vec<f64>)> {
    same_len("gaussian_interval", &[mu.len(), sigma.len()])?;
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(UqError::Argument(format!("alpha {alpha} outside (0, 1)")));
    }
    let z = std_normal().inverse_cdf(1.0 - alpha / 2.0);
    Ok((
        mu.iter().zip(sigma).map(|(m, s)| m - z * s).collect(),
        mu.iter().zip(sigma).map(|(m, s)| m + z * s).collect(),
    ))
}

/// Mean interval score; a `y` on a bound counts as covered.
pub fn interval_score(y: &[f64], lo: &[f64], hi: &[f64], alpha: f64) -> Result<f64> {
    let n = same_len("interval_score", &[y.len(), lo.len(), hi.len()])?;
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(UqError::Argument(format!("alpha {alpha} outside (0, 1)")));
    }
    finite("y", y)?;
    finite("lower", lo)?;
    finite("upper", hi)?;
    if let Some(i) = lo.iter().zip(hi).position(|(l, u)| l > u) {
        return Err(UqError::Argument(format!("lower bound above upper bound at bin {i}")));
    }
    let k = 2.0 / alpha;
    let total: f64 = y
        .iter()
        .zip(lo)
        .zip(hi)
        .map(|((y, l), u)| {
            let mut s = u - l;
            if y < l {
                s += k * (l - y);
            }
            if y > u {
                s += k * (y - u);
            }
            s
        })
        .sum();
    Ok(total / n as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationCurve {
    pub levels: Vec<f64>,
    pub observed: Vec<f64>,
    pub miscalibration_area: f64,
}

/// Observed coverage of central Gaussian intervals at each level.
pub fn calibration_curve(y: &[f64], mu: &[f64], sigma: &[f64], levels: &[f64]) -> Result<CalibrationCurve> {
    let n = same_len("calibration_curve", &[y.len(), mu.len(), sigma.len()])?;
    check_taus(levels)?;
    finite("y", y)?;
    finite("mu", mu)?;
    finite("sigma", sigma)?;
    let nd = std_normal();
    let zs: Vec<f64> = y.iter().zip(mu).zip(sigma).map(|((y, m), s)| ((y - m) / floor(*s)).abs()).collect();
    let observed: Vec<f64> = levels
        .iter()
        .map(|p| {
            let half = nd.inverse_cdf(0.5 + p / 2.0);
            zs.iter().filter(|z| **z <= half).count() as f64 / n as f64
        })
        .collect();
    let area = levels.iter().zip(&observed).map(|(p, o)| (o - p).abs()).sum::<f64>() / levels.len() as f64;
    Ok(CalibrationCurve { levels: levels.to_vec(), observed, miscalibration_area: area })
}

/// Scale to unit maximum; an all-zero input is returned unchanged.
pub fn max_normalize(x: &[f64]) -> Vec<f64> {
    let m = x.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    if m > 0.0 {
        x.iter().map(|v| v / m).collect()
    } else {
        x.to_vec()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpectrumMetrics {
    pub mae: f64,
    pub rmse: f64,
    /// `None` when the reference spectrum is constant.
    pub r2: Option<f64>,
    pub pcc: Option<f64>,
}

/// Bin-wise regression metrics after max-normalizing both spectra.
pub fn spectrum_metrics(pred: &[f64], gt: &[f64]) -> Result<SpectrumMetrics> {
    let n = same_len("spectrum_metrics", &[pred.len(), gt.len()])?;
    finite("pred", pred)?;
    finite("gt", gt)?;
    let p = max_normalize(pred);
    let g = max_normalize(gt);
    let mae = p.iter().zip(&g).map(|(a, b)| (a - b).abs()).sum::<f64>() / n as f64;
    let ss_res: f64 = p.iter().zip(&g).map(|(a, b)| (a - b).powi(2)).sum();
    let mg = mean(&g);
    let ss_tot: f64 = g.iter().map(|b| (b - mg).powi(2)).sum();
    let r2 = (ss_tot > 0.0).then(|| 1.0 - ss_res / ss_tot);
    let pcc = pearson(&p, &g).ok();
    Ok(SpectrumMetrics { mae, rmse: (ss_res / n as f64).sqrt(), r2, pcc })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BlandAltman {
    pub mean_diff: f64,
    /// Sample standard deviation of the differences.
    pub sd_diff: f64,
    pub loa_lo: f64,
    pub loa_hi: f64,
}

pub fn bland_altman(pred: &[f64], gt: &[f64]) -> Result<BlandAltman> {
    let n = same_len("bland_altman", &[pred.len(), gt.len()])?;
    if n < 2 {
        return Err(UqError::Argument("bland_altman needs at least 2 pairs".into()));
    }
    let d: Vec<f64> = pred.iter().zip(gt).map(|(p, g)| p - g).collect();
    finite("differences", &d)?;
    let m = mean(&d);
    let sd = (d.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt();
    Ok(BlandAltman { mean_diff: m, sd_diff: sd, loa_lo: m - 1.96 * sd, loa_hi: m + 1.96 * sd })
}

/// Per-bin ensemble mean and sample standard deviation (zero for a single
/// member). `members[k][i]` is member `k` at bin `i`.
pub fn ensemble_moments(members: &[Vec<f64>]) -> Result<(Vec<f64>, Vec<f64>)> {
    if members.is_empty() {
        return Err(UqError::Argument("empty ensemble".into()));
    }
    let lens: Vec<usize> = members.iter().map(Vec::len).collect();
    let bins = same_len("ensemble", &lens)?;
    let k = members.len() as f64;
    let mut mu = vec![0.0; bins];
    for m in members {
        finite("ensemble", m)?;
        for (a, v) in mu.iter_mut().zip(m) {
            *a += v / k;
        }
    }
    let mut sd = vec![0.0; bins];
    if members.len() > 1 {
        for m in members {
            for ((a, v), c) in sd.iter_mut().zip(m).zip(&mu) {
                *a += (v - c).powi(2);
            }
        }
        sd.iter_mut().for_each(|a| *a = (*a / (k - 1.0)).sqrt());
    }
    Ok((mu, sd))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UncertaintyReport {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    /// Gaussian quantiles per level in `quantile_levels`, then per bin.
    pub quantile_levels: Vec<f64>,
    pub quantiles: Vec<Vec<f64>>,
    pub nll: f64,
    pub crps: f64,
    pub sharpness: f64,
    pub check_score: f64,
    pub interval_score: f64,
    pub interval_alpha: f64,
    pub calibration_curve: Vec<(f64, f64)>,
    pub miscalibration_area: f64,
    /// Set when any `sigma` fell below the floor, e.g. a collapsed ensemble.
    pub sigma_floored: bool,
}

/// All scalar UQ metrics of an ensemble against `y`, bin by bin.
pub fn uncertainty_report(y: &[f64], members: &[Vec<f64>], alpha: f64) -> Result<UncertaintyReport> {
    let (mu, sd) = ensemble_moments(members)?;
    same_len("uncertainty_report", &[y.len(), mu.len()])?;
    let levels = default_levels();
    let quantiles = gaussian_quantiles(&mu, &sd, &levels)?;
    let (lo, hi) = gaussian_interval(&mu, &sd, alpha)?;
    let cal = calibration_curve(y, &mu, &sd, &levels)?;
    Ok(UncertaintyReport {
        nll: gaussian_nll(y, &mu, &sd)?,
        crps: crps_gaussian(y, &mu, &sd)?,
        sharpness: sharpness(&sd),
        check_score: check_score(y, &quantiles, &levels)?,
        interval_score: interval_score(y, &lo, &hi, alpha)?,
        interval_alpha: alpha,
        calibration_curve: cal.levels.iter().copied().zip(cal.observed.iter().copied()).collect(),
        miscalibration_area: cal.miscalibration_area,
        sigma_floored: sd.iter().any(|s| *s < SIGMA_MIN),
        quantile_levels: levels,
        quantiles,
        mean: mu,
        std: sd,
    })
}
