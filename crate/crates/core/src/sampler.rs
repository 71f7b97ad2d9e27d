//! Reverse-time SDE sampling from a measurement `x1` to pulse estimates.
//!
//! In reversed time `s = 1 - t` the Euler-Maruyama step is
//!
//! ```text
//! X <- X - b_B(1 - s, X) ds + sqrt(2 eps) dW,    b_B = b - eps * s_theta
//! ```
//!
//! with `b = v + gamma'(t) n` and `s_theta = -n / gamma(t)`, integrated from
//! `s = t_clamp` to `s = 1 - t_clamp`.

use ndarray::{Array2, Zip};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::interpolant::{self, gamma, gamma_dot, standard_normal, GaussianCoupling};
use crate::vectorfield::{forward_batch, AutodiffError, Checkpoint, VectorFieldParams};
use crate::{seeded_rng, Rng};

#[derive(Debug, Error)]
pub enum SamplerError {
    #[error("invalid sampler config: {field}: {reason}")]
    Config { field: &'static str, reason: String },
    #[error("drift is singular at t = {0}")]
    Singularity(f64),
    #[error("shape error: {0}")]
    Shape(String),
    #[error("state blew up at step {step} (t = {t}){}", realization.map(|k| format!(" in realization {k}")).unwrap_or_default())]
    Blowup { step: usize, t: f64, realization: Option<usize> },
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Interpolant(#[from] interpolant::InterpolantError),
}

pub type Result<T, E = SamplerError> = std::result::Result<T, E>;

fn cfg_err(field: &'static str, reason: impl Into<String>) -> SamplerError {
    SamplerError::Config { field, reason: reason.into() }
}

/// How the deterministic drift combines flow and denoiser.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum DriftForm {
    /// `b = v + gamma' n`.
    #[default]
    Consistent,
    /// `b = v - gamma' gamma n`, kept for comparison.
    Appendix,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DriftVariant {
    Plain,
    Forward,
    Backward,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerConfig {
    pub epsilon: f64,
    pub steps: usize,
    pub t_clamp: f64,
    pub n_realizations: usize,
    pub seed: u64,
    /// Interpolation times at which to keep the state.
    pub snapshot_times: Vec<f64>,
    pub drift_form: DriftForm,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            epsilon: 0.5,
            steps: 500,
            t_clamp: 1e-3,
            n_realizations: 100,
            seed: 0,
            snapshot_times: Vec::new(),
            drift_form: DriftForm::Consistent,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon.is_finite() && self.epsilon >= 0.0) {
            return Err(cfg_err("epsilon", format!("{} must be finite and >= 0", self.epsilon)));
        }
        if self.steps < 2 {
            return Err(cfg_err("steps", format!("{} must be >= 2", self.steps)));
        }
        if !(self.t_clamp > 0.0 && self.t_clamp < 0.1) {
            return Err(cfg_err("t_clamp", format!("{} not in (0, 0.1)", self.t_clamp)));
        }
        if self.n_realizations == 0 {
            return Err(cfg_err("n_realizations", "must be >= 1"));
        }
        if let Some(t) = self.snapshot_times.iter().find(|t| !(0.0..=1.0).contains(*t)) {
            return Err(cfg_err("snapshot_times", format!("{t} outside [0, 1]")));
        }
        Ok(())
    }

    pub fn ds(&self) -> f64 {
        (1.0 - 2.0 * self.t_clamp) / self.steps as f64
    }

    /// Interpolation time after `k` steps.
    pub fn time_at(&self, k: usize) -> f64 {
        1.0 - self.t_clamp - k as f64 * self.ds()
    }
}

/// Flow and denoiser predictions for a batch of states at a common time.
pub trait DriftModel: Sync {
    fn fields(&self, t: f64, xs: &[&Array2<f64>]) -> Result<(Vec<Array2<f64>>, Vec<Array2<f64>>)>;

    /// Channel count the model expects, if fixed.
    fn regions(&self) -> Option<usize> {
        None
    }
}

/// Trained flow and denoiser networks.
#[derive(Debug, Clone)]
pub struct LearnedFields {
    pub flow: VectorFieldParams,
    pub denoiser: VectorFieldParams,
}

impl LearnedFields {
    pub fn from_checkpoint(ck: &Checkpoint) -> Self {
        Self { flow: ck.flow.clone(), denoiser: ck.denoiser.clone() }
    }
}

impl DriftModel for LearnedFields {
    fn fields(&self, t: f64, xs: &[&Array2<f64>]) -> Result<(Vec<Array2<f64>>, Vec<Array2<f64>>)> {
        let ts = vec![t; xs.len()];
        Ok((forward_batch(&self.flow, &ts, xs)?, forward_batch(&self.denoiser, &ts, xs)?))
    }

    fn regions(&self) -> Option<usize> {
        Some(self.flow.arch().regions)
    }
}

impl DriftModel for GaussianCoupling {
    fn fields(&self, t: f64, xs: &[&Array2<f64>]) -> Result<(Vec<Array2<f64>>, Vec<Array2<f64>>)> {
        let v = xs.iter().map(|x| self.flow(t, x)).collect();
        let n = xs.iter().map(|x| self.denoiser(t, x)).collect::<Result<_, _>>()?;
        Ok((v, n))
    }
}

fn combine(t: f64, v: &Array2<f64>, n: &Array2<f64>, eps: f64, variant: DriftVariant, form: DriftForm) -> Result<Array2<f64>> {
    let g = gamma(t)?;
    let gd = gamma_dot(t).map_err(|_| SamplerError::Singularity(t))?;
    let coef_n = match form {
        DriftForm::Consistent => gd,
        DriftForm::Appendix => -gd * g,
    };
    // s = -n / gamma, so eps * s contributes -eps / gamma per unit of n.
    let score_coef = match variant {
        DriftVariant::Plain => 0.0,
        DriftVariant::Forward => -eps / g,
        DriftVariant::Backward => eps / g,
    };
    let c = coef_n + score_coef;
    let mut out = v.clone();
    Zip::from(&mut out).and(n).for_each(|o, &nv| *o += c * nv);
    Ok(out)
}

fn check_time(t: f64) -> Result<()> {
    if !(t > 0.0 && t < 1.0) {
        return Err(SamplerError::Singularity(t));
    }
    Ok(())
}

/// `b`, `b_F = b + eps s` or `b_B = b - eps s` at `(t, x)`.
pub fn drift(
    model: &dyn DriftModel,
    t: f64,
    x: &Array2<f64>,
    epsilon: f64,
    variant: DriftVariant,
    form: DriftForm,
) -> Result<Array2<f64>> {
    check_time(t)?;
    let (v, n) = model.fields(t, &[x])?;
    combine(t, &v[0], &n[0], epsilon, variant, form)
}

/// Path of one realization. Intermediate states are kept only at the
/// requested snapshot times.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    /// Grid times, strictly decreasing from `1 - t_clamp` to `t_clamp`.
    pub times: Vec<f64>,
    /// `(requested t, state at the nearest grid time)`.
    pub snapshots: Vec<(f64, Array2<f64>)>,
    pub terminal: Array2<f64>,
}

/// Grid step at which each requested snapshot is taken.
pub fn snapshot_steps(cfg: &SamplerConfig) -> Vec<usize> {
    let ds = cfg.ds();
    cfg.snapshot_times
        .iter()
        .map(|t| (((1.0 - cfg.t_clamp - t) / ds).round().max(0.0) as usize).min(cfg.steps))
        .collect()
}

enum Noise<'a> {
    Rngs(&'a mut [Rng]),
    /// Wiener increments per step, shared across the batch's realizations in
    /// order: `dw[step][member]`.
    Increments(&'a [Vec<Array2<f64>>]),
}

fn check_inputs(model: &dyn DriftModel, x1s: &[Array2<f64>], cfg: &SamplerConfig) -> Result<()> {
    cfg.validate()?;
    let Some(first) = x1s.first() else {
        return Err(SamplerError::Shape("no initial states".into()));
    };
    if let Some(x) = x1s.iter().find(|x| x.dim() != first.dim()) {
        return Err(SamplerError::Shape(format!("state {:?} differs from {:?}", x.dim(), first.dim())));
    }
    if let Some(r) = model.regions() {
        if first.ncols() != r {
            return Err(SamplerError::Shape(format!("{} channels, model expects {r}", first.ncols())));
        }
    }
    if x1s.iter().any(|x| x.iter().any(|v| !v.is_finite())) {
        return Err(SamplerError::Shape("initial state is not finite".into()));
    }
    Ok(())
}

fn integrate(
    model: &dyn DriftModel,
    x1s: &[Array2<f64>],
    cfg: &SamplerConfig,
    mut noise: Noise<'_>,
    first_index: Option<usize>,
) -> Result<Vec<Trajectory>> {
    check_inputs(model, x1s, cfg)?;
    let ds = cfg.ds();
    let sigma = (2.0 * cfg.epsilon).sqrt();
    let sq_ds = ds.sqrt();
    let snaps = snapshot_steps(cfg);
    let mut xs: Vec<Array2<f64>> = x1s.to_vec();
    let mut snapshots: Vec<Vec<(f64, Array2<f64>)>> = vec![Vec::new(); xs.len()];
    let record = |k: usize, xs: &[Array2<f64>], snapshots: &mut Vec<Vec<(f64, Array2<f64>)>>| {
        for (req, _) in cfg.snapshot_times.iter().zip(&snaps).filter(|(_, s)| **s == k) {
            for (m, x) in xs.iter().enumerate() {
                snapshots[m].push((*req, x.clone()));
            }
        }
    };
    record(0, &xs, &mut snapshots);
    for k in 0..cfg.steps {
        let t = cfg.time_at(k);
        let refs: Vec<&Array2<f64>> = xs.iter().collect();
        let (v, n) = model.fields(t, &refs)?;
        for (m, x) in xs.iter_mut().enumerate() {
            let bb = combine(t, &v[m], &n[m], cfg.epsilon, DriftVariant::Backward, cfg.drift_form)?;
            let dw = match &mut noise {
                Noise::Rngs(rngs) => standard_normal(x.dim(), &mut rngs[m]) * sq_ds,
                Noise::Increments(inc) => inc[k][m].clone(),
            };
            Zip::from(&mut *x).and(&bb).and(&dw).for_each(|xv, &b, &w| *xv += -b * ds + sigma * w);
            if x.iter().any(|v| !v.is_finite()) {
                return Err(SamplerError::Blowup {
                    step: k + 1,
                    t: cfg.time_at(k + 1),
                    realization: first_index.map(|i| i + m),
                });
            }
        }
        record(k + 1, &xs, &mut snapshots);
    }
    let times: Vec<f64> = (0..=cfg.steps).map(|k| cfg.time_at(k)).collect();
    Ok(xs
        .into_iter()
        .zip(snapshots)
        .map(|(terminal, snapshots)| Trajectory { times: times.clone(), snapshots, terminal })
        .collect())
}

/// One realization started at `x1`.
pub fn reverse_sample(model: &dyn DriftModel, x1: &Array2<f64>, cfg: &SamplerConfig, rng: &mut Rng) -> Result<Trajectory> {
    let mut rngs = [rng.clone()];
    let out = integrate(model, std::slice::from_ref(x1), cfg, Noise::Rngs(&mut rngs), None)?;
    *rng = rngs[0].clone();
    Ok(out.into_iter().next().expect("one trajectory"))
}

/// Several realizations advanced together, each with its own stream.
pub fn reverse_sample_batch(
    model: &dyn DriftModel,
    x1s: &[Array2<f64>],
    cfg: &SamplerConfig,
    rngs: &mut [Rng],
) -> Result<Vec<Trajectory>> {
    if rngs.len() != x1s.len() {
        return Err(SamplerError::Shape(format!("{} states with {} rng streams", x1s.len(), rngs.len())));
    }
    integrate(model, x1s, cfg, Noise::Rngs(rngs), None)
}

/// One realization driven by given Wiener increments (`steps` arrays, each
/// distributed as `N(0, ds)`).
pub fn reverse_sample_with_increments(
    model: &dyn DriftModel,
    x1: &Array2<f64>,
    cfg: &SamplerConfig,
    increments: &[Array2<f64>],
) -> Result<Trajectory> {
    if increments.len() != cfg.steps || increments.iter().any(|d| d.dim() != x1.dim()) {
        return Err(SamplerError::Shape(format!(
            "{} increments for {} steps of shape {:?}",
            increments.len(),
            cfg.steps,
            x1.dim()
        )));
    }
    let per_step: Vec<Vec<Array2<f64>>> = increments.iter().map(|d| vec![d.clone()]).collect();
    let out = integrate(model, std::slice::from_ref(x1), cfg, Noise::Increments(&per_step), None)?;
    Ok(out.into_iter().next().expect("one trajectory"))
}

/// Sum consecutive blocks of `factor` fine increments.
pub fn coarsen_increments(fine: &[Array2<f64>], factor: usize) -> Result<Vec<Array2<f64>>> {
    if factor == 0 || fine.len() % factor != 0 {
        return Err(SamplerError::Shape(format!("{} increments not divisible by {factor}", fine.len())));
    }
    Ok(fine
        .chunks(factor)
        .map(|c| c.iter().skip(1).fold(c[0].clone(), |acc, d| acc + d))
        .collect())
}

/// Seed of realization `k`.
pub fn realization_seed(master: u64, k: usize) -> u64 {
    master ^ k as u64
}

/// `cfg.n_realizations` realizations from the same `x1`, realization `k`
/// seeded with `cfg.seed ^ k`. Work is split over `jobs` threads; the result
/// does not depend on `jobs`.
pub fn ensemble(model: &dyn DriftModel, x1: &Array2<f64>, cfg: &SamplerConfig, jobs: usize) -> Result<Vec<Trajectory>> {
    cfg.validate()?;
    let n = cfg.n_realizations;
    let jobs = jobs.clamp(1, n);
    let chunk = n.div_ceil(jobs);
    let ranges: Vec<(usize, usize)> = (0..n).step_by(chunk).map(|a| (a, (a + chunk).min(n))).collect();
    let run = |&(a, b): &(usize, usize)| -> Result<Vec<Trajectory>> {
        let mut rngs: Vec<Rng> = (a..b).map(|k| seeded_rng(realization_seed(cfg.seed, k))).collect();
        let x1s = vec![x1.clone(); b - a];
        integrate(model, &x1s, cfg, Noise::Rngs(&mut rngs), Some(a))
    };
    let parts: Vec<Result<Vec<Trajectory>>> = if jobs == 1 {
        ranges.iter().map(run).collect()
    } else {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build()
            .map_err(|e| cfg_err("jobs", e.to_string()))?;
        pool.install(|| ranges.par_iter().map(run).collect())
    };
    let mut out = Vec::with_capacity(n);
    for p in parts {
        out.extend(p?);
    }
    Ok(out)
}
