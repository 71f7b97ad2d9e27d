//! Loss assembly and the training loop.
//!
//! Each step draws a batch of couples: a window pair `(x0, x1)` and the pair
//! starting `delta` samples earlier in the same subject. Both members of a
//! couple share the interpolation time `t` and the noise `z`. The loss is
//!
//! ```text
//! MSE(v(t, x_t), x1 - x0) + MSE(n(t, x_t), z) + lambda * RCL(r, r')
//! ```
//!
//! with `r = (x1 - x0) - v(t, x_t)` the flow residual of each member.

use std::io::Write as _;
use std::path::Path;

use ndarray::{s, Array2};
use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::interpolant::{self, standard_normal};
use crate::signals::{self, design_bandpass, standardize_columns, FirDesign};
use crate::synth::Dataset;
use crate::vectorfield::{
    adam_step, forward_on_tape, row_correlation, stack_windows, AdamState, ArchSpec, AutodiffError, BoundParams,
    Checkpoint, FinalLayerInit, NodeId, Tape, Tensor, VectorFieldParams,
};
use crate::{seeded_rng, Rng};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {field}: {reason}")]
    Config { field: &'static str, reason: String },
    #[error("invalid argument: {0}")]
    Argument(String),
    #[error("degenerate correlation: both inputs are constant")]
    DegenerateCorrelation,
    #[error("subject {subject}: origin {origin} has less than {delta} samples of history")]
    InsufficientHistory { subject: usize, origin: usize, delta: usize },
    #[error("training diverged at step {step}: {term} = {value}")]
    Divergence { step: u64, term: &'static str, value: f64 },
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Signal(#[from] signals::SignalError),
    #[error(transparent)]
    Interpolant(#[from] interpolant::InterpolantError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = TrainError> = std::result::Result<T, E>;

/// Loss at or above this value counts as divergence.
pub const DIVERGENCE_THRESHOLD: f64 = 1e6;

fn cfg_err(field: &'static str, reason: impl Into<String>) -> TrainError {
    TrainError::Config { field, reason: reason.into() }
}

/// `1 - pearson(p, q)`.
pub fn rcl_loss(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() || p.len() < 2 {
        return Err(TrainError::Argument(format!(
            "rcl needs equal lengths >= 2, got {} and {}",
            p.len(),
            q.len()
        )));
    }
    let constant = |v: &[f64]| v.iter().all(|x| *x == v[0]);
    if constant(p) && constant(q) {
        return Err(TrainError::DegenerateCorrelation);
    }
    Ok(row_correlation(p, q, false).loss)
}

/// Fraction of a window shared with its copy shifted by `delta` samples.
pub fn overlap_fraction(delta: usize, length: usize) -> f64 {
    if length == 0 {
        return 0.0;
    }
    length.saturating_sub(delta) as f64 / length as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FilterConfig {
    pub enabled: bool,
    pub lo_bpm: f64,
    pub hi_bpm: f64,
    pub taps: usize,
}

impl Default for FilterConfig {
    fn default() -> Self {
        Self { enabled: true, lo_bpm: 42.0, hi_bpm: 150.0, taps: 5 }
    }
}

impl FilterConfig {
    fn design(&self, fs: f64) -> Result<Option<FirDesign>> {
        if !self.enabled {
            return Ok(None);
        }
        Ok(Some(design_bandpass(self.lo_bpm, self.hi_bpm, self.taps, fs)?))
    }
}

/// Network shape without the region count, which comes from the data.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetConfig {
    pub hidden: usize,
    pub blocks: usize,
    pub kernel: usize,
    pub time_embed_dim: usize,
    pub time_scale: f64,
}

impl Default for NetConfig {
    fn default() -> Self {
        let a = ArchSpec::standard(1);
        Self {
            hidden: a.hidden,
            blocks: a.blocks,
            kernel: a.kernel,
            time_embed_dim: a.time_embed_dim,
            time_scale: a.time_scale,
        }
    }
}

impl NetConfig {
    pub fn arch(&self, regions: usize) -> ArchSpec {
        ArchSpec {
            regions,
            hidden: self.hidden,
            blocks: self.blocks,
            kernel: self.kernel,
            time_embed_dim: self.time_embed_dim,
            time_scale: self.time_scale,
        }
    }
}

/// What the correlation term compares across a couple.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum RclTarget {
    /// Flow residuals `(x1 - x0) - v(t, x_t)`.
    #[default]
    Residual,
    /// Predicted flows `v(t, x_t)` themselves (diagnostic).
    PredictedFlow,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lambda_rcl: f64,
    /// Shift between the members of a couple, in seconds.
    pub delta_shift: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub lr: f64,
    pub seed: u64,
    /// Window length in samples.
    pub window_length: usize,
    /// Spacing of training window origins in samples.
    pub stride: usize,
    /// Stop after this many optimizer steps even if epochs remain.
    pub max_steps: Option<u64>,
    /// Share of subjects held out for validation.
    pub val_fraction: f64,
    /// Validation loss is evaluated every `val_every` steps and at the end.
    pub val_every: u64,
    /// Cap on the number of validation couples.
    pub val_pairs: usize,
    pub t_min: f64,
    pub rcl_target: RclTarget,
    pub net: NetConfig,
    pub filter: FilterConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lambda_rcl: 0.1,
            delta_shift: 9.0,
            batch_size: 32,
            epochs: 10,
            lr: 1e-3,
            seed: 0,
            window_length: 250,
            stride: 10,
            max_steps: None,
            val_fraction: 0.1,
            val_every: 50,
            val_pairs: 64,
            t_min: interpolant::DEFAULT_T_MIN,
            rcl_target: RclTarget::Residual,
            net: NetConfig::default(),
            filter: FilterConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_rcl.is_finite() && self.lambda_rcl >= 0.0) {
            return Err(cfg_err("lambda_rcl", format!("{} must be finite and >= 0", self.lambda_rcl)));
        }
        if !(self.delta_shift.is_finite() && self.delta_shift >= 0.0) {
            return Err(cfg_err("delta_shift", format!("{} must be >= 0 seconds", self.delta_shift)));
        }
        if self.batch_size == 0 {
            return Err(cfg_err("batch_size", "must be >= 1"));
        }
        if self.epochs == 0 {
            return Err(cfg_err("epochs", "must be >= 1"));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(cfg_err("lr", format!("{} must be > 0", self.lr)));
        }
        if self.window_length < 2 {
            return Err(cfg_err("window_length", "must be >= 2 samples"));
        }
        if self.stride == 0 {
            return Err(cfg_err("stride", "must be >= 1"));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(cfg_err("val_fraction", format!("{} not in [0, 1)", self.val_fraction)));
        }
        if self.val_every == 0 {
            return Err(cfg_err("val_every", "must be >= 1"));
        }
        if !(self.t_min > 0.0 && self.t_min < 0.5) {
            return Err(cfg_err("t_min", format!("{} not in (0, 0.5)", self.t_min)));
        }
        self.net.arch(1).validate().map_err(|e| cfg_err("net", e.to_string()))?;
        if self.filter.enabled && self.filter.taps < 3 {
            return Err(cfg_err("filter.taps", "must be >= 3"));
        }
        Ok(())
    }

    pub fn delta_samples(&self, fs: f64) -> usize {
        (self.delta_shift * fs).round() as usize
    }
}

/// Band-pass (optional) and per-channel standardization of a measurement.
pub fn prepare_measurement(x1: &Array2<f64>, fs: f64, filter: &FilterConfig) -> Result<Array2<f64>> {
    let mut out = match filter.design(fs)? {
        Some(d) => d.apply(x1),
        None => x1.clone(),
    };
    standardize_columns(&mut out);
    Ok(out)
}

/// Per-channel standardization of a clean target window.
pub fn prepare_target(x0: &Array2<f64>) -> Array2<f64> {
    let mut out = x0.clone();
    standardize_columns(&mut out);
    out
}

/// One `(x0, x1)` training pair, both `T x R` and standardized.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowPair {
    pub x0: Array2<f64>,
    pub x1: Array2<f64>,
}

/// A window pair and its copy starting `delta` samples earlier.
#[derive(Debug, Clone, PartialEq)]
pub struct ShiftedPair {
    pub first: WindowPair,
    pub second: WindowPair,
}

/// Long paired tracks ready for windowing: `x0` replicated to `R` channels.
#[derive(Debug, Clone)]
pub struct TrainingSet {
    pub sample_rate: f64,
    pub subject_ids: Vec<usize>,
    pub x0: Vec<Array2<f64>>,
    pub x1: Vec<Array2<f64>>,
    filter: Option<FirDesign>,
}

impl TrainingSet {
    pub fn from_dataset(ds: &Dataset, filter: &FilterConfig) -> Result<Self> {
        if ds.subjects.is_empty() {
            return Err(TrainError::Argument("dataset has no subjects".into()));
        }
        let r = ds.region_labels.len();
        Ok(Self {
            sample_rate: ds.sample_rate,
            subject_ids: ds.subjects.iter().map(|s| s.id).collect(),
            x0: ds.subjects.iter().map(|s| signals::replicate_channels(&s.x0, r)).collect(),
            x1: ds.subjects.iter().map(|s| s.x1.clone()).collect(),
            filter: filter.design(ds.sample_rate)?,
        })
    }

    pub fn n_subjects(&self) -> usize {
        self.x0.len()
    }

    pub fn n_regions(&self) -> usize {
        self.x1[0].ncols()
    }

    pub fn track_len(&self, subject: usize) -> usize {
        self.x0[subject].nrows()
    }

    /// Prepared window pair of `length` samples starting at `origin`.
    pub fn window(&self, subject: usize, origin: usize, length: usize) -> Result<WindowPair> {
        let n = self.track_len(subject);
        if origin + length > n {
            return Err(TrainError::Argument(format!(
                "window [{origin}, {}) exceeds track length {n}",
                origin + length
            )));
        }
        let x0 = self.x0[subject].slice(s![origin..origin + length, ..]).to_owned();
        let x1 = self.x1[subject].slice(s![origin..origin + length, ..]).to_owned();
        let mut x1 = match &self.filter {
            Some(d) => d.apply(&x1),
            None => x1,
        };
        standardize_columns(&mut x1);
        Ok(WindowPair { x0: prepare_target(&x0), x1 })
    }
}

/// The pair at `origin` and the pair `delta` samples earlier.
pub fn sample_shifted_pair(
    set: &TrainingSet,
    subject: usize,
    origin: usize,
    delta: usize,
    length: usize,
) -> Result<ShiftedPair> {
    if subject >= set.n_subjects() {
        return Err(TrainError::Argument(format!("subject index {subject} out of range")));
    }
    if origin < delta {
        return Err(TrainError::InsufficientHistory { subject, origin, delta });
    }
    Ok(ShiftedPair {
        first: set.window(subject, origin, length)?,
        second: set.window(subject, origin - delta, length)?,
    })
}

/// Origins on the stride grid that have `delta` samples of history.
pub fn candidate_origins(track_len: usize, length: usize, stride: usize, delta: usize) -> Vec<usize> {
    if length > track_len || stride == 0 {
        return Vec::new();
    }
    (0..=(track_len - length) / stride)
        .map(|k| k * stride)
        .filter(|o| *o >= delta)
        .collect()
}

/// Interpolation time and noise shared by the two members of each couple.
#[derive(Debug, Clone, PartialEq)]
pub struct LossDraw {
    pub ts: Vec<f64>,
    pub zs: Vec<Array2<f64>>,
}

pub fn draw_noise(batch: &[ShiftedPair], t_min: f64, rng: &mut Rng) -> LossDraw {
    let mut ts = Vec::with_capacity(batch.len());
    let mut zs = Vec::with_capacity(batch.len());
    for c in batch {
        ts.push(rng.random_range(t_min..=1.0 - t_min));
        zs.push(standard_normal(c.first.x0.dim(), rng));
    }
    LossDraw { ts, zs }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub flow: f64,
    pub score: f64,
    /// Unweighted correlation term.
    pub rcl: f64,
    pub total: f64,
}

/// Tape ids of the loss terms.
#[derive(Debug, Clone, Copy)]
pub struct LossNodes {
    pub flow: NodeId,
    pub score: NodeId,
    pub rcl: NodeId,
    pub total: NodeId,
}

impl LossNodes {
    pub fn values(&self, tape: &Tape) -> Result<LossBreakdown> {
        Ok(LossBreakdown {
            flow: tape.value(self.flow).item()?,
            score: tape.value(self.score).item()?,
            rcl: tape.value(self.rcl).item()?,
            total: tape.value(self.total).item()?,
        })
    }
}

/// Predictions and targets for both couple members, already on the tape.
#[derive(Debug, Clone, Copy)]
pub struct CoupleNodes {
    pub v: [NodeId; 2],
    pub n: [NodeId; 2],
    pub flow_target: [NodeId; 2],
    pub z: [NodeId; 2],
}

/// Combine predictions into the loss terms.
pub fn assemble_loss(tape: &mut Tape, c: &CoupleNodes, lambda: f64, target: RclTarget) -> Result<LossNodes> {
    let f0 = tape.mse(c.v[0], c.flow_target[0])?;
    let f1 = tape.mse(c.v[1], c.flow_target[1])?;
    let fsum = tape.add(f0, f1)?;
    let flow = tape.scale(fsum, 0.5);
    let n0 = tape.mse(c.n[0], c.z[0])?;
    let n1 = tape.mse(c.n[1], c.z[1])?;
    let nsum = tape.add(n0, n1)?;
    let score = tape.scale(nsum, 0.5);
    let (p, q) = match target {
        RclTarget::Residual => (tape.sub(c.flow_target[0], c.v[0])?, tape.sub(c.flow_target[1], c.v[1])?),
        RclTarget::PredictedFlow => (c.v[0], c.v[1]),
    };
    let rcl = tape.rcl(p, q)?;
    let mut total = tape.add(flow, score)?;
    if lambda != 0.0 {
        let w = tape.scale(rcl, lambda);
        total = tape.add(total, w)?;
    }
    Ok(LossNodes { flow, score, rcl, total })
}

/// Both networks' forward passes for a batch of couples and the loss terms.
#[allow(clippy::too_many_arguments)]
pub fn build_loss(
    tape: &mut Tape,
    flow: &VectorFieldParams,
    flow_ids: &BoundParams,
    denoiser: &VectorFieldParams,
    denoiser_ids: &BoundParams,
    batch: &[ShiftedPair],
    draw: &LossDraw,
    lambda: f64,
    target: RclTarget,
) -> Result<LossNodes> {
    if batch.is_empty() || draw.ts.len() != batch.len() || draw.zs.len() != batch.len() {
        return Err(TrainError::Argument(format!(
            "batch of {} couples with {} noise draws",
            batch.len(),
            draw.ts.len()
        )));
    }
    let members: [Vec<&WindowPair>; 2] =
        [batch.iter().map(|c| &c.first).collect(), batch.iter().map(|c| &c.second).collect()];
    let z_leaf = tape.leaf(stack_windows(draw.zs.iter())?);
    let mut v = [z_leaf; 2];
    let mut n = [z_leaf; 2];
    let mut flow_target = [z_leaf; 2];
    for (m, pairs) in members.iter().enumerate() {
        let mut xt = Vec::with_capacity(pairs.len());
        let mut ft = Vec::with_capacity(pairs.len());
        for (k, p) in pairs.iter().enumerate() {
            let smp = interpolant::sample_point_with_noise(&p.x0, &p.x1, draw.ts[k], draw.zs[k].clone())?;
            xt.push(smp.x_t);
            ft.push(smp.flow_target);
        }
        let x = tape.leaf(stack_windows(xt.iter())?);
        flow_target[m] = tape.leaf(stack_windows(ft.iter())?);
        v[m] = forward_on_tape(tape, flow, flow_ids, &draw.ts, x)?;
        n[m] = forward_on_tape(tape, denoiser, denoiser_ids, &draw.ts, x)?;
    }
    let nodes = CoupleNodes { v, n, flow_target, z: [z_leaf, z_leaf] };
    assemble_loss(tape, &nodes, lambda, target)
}

/// Loss of a batch without gradients.
pub fn total_loss(
    flow: &VectorFieldParams,
    denoiser: &VectorFieldParams,
    batch: &[ShiftedPair],
    draw: &LossDraw,
    lambda: f64,
    target: RclTarget,
) -> Result<LossBreakdown> {
    let mut tape = Tape::new();
    let fb = flow.bind(&mut tape);
    let db = denoiser.bind(&mut tape);
    let nodes = build_loss(&mut tape, flow, &fb, denoiser, &db, batch, draw, lambda, target)?;
    nodes.values(&tape)
}

/// Networks plus optimizer state.
#[derive(Debug, Clone, PartialEq)]
pub struct Trainer {
    pub flow: VectorFieldParams,
    pub denoiser: VectorFieldParams,
    pub flow_opt: AdamState,
    pub denoiser_opt: AdamState,
    pub step: u64,
}

impl Trainer {
    /// Fresh networks with zero-initialized output layers.
    pub fn new(arch: ArchSpec, lr: f64, seed: u64) -> Result<Self> {
        let mut rng = seeded_rng(seed);
        let flow = VectorFieldParams::init(arch, FinalLayerInit::Zero, &mut rng)?;
        let denoiser = VectorFieldParams::init(arch, FinalLayerInit::Zero, &mut rng)?;
        Ok(Self {
            flow_opt: AdamState::new(flow.tensors(), lr),
            denoiser_opt: AdamState::new(denoiser.tensors(), lr),
            flow,
            denoiser,
            step: 0,
        })
    }

    pub fn from_checkpoint(ck: &Checkpoint, lr: f64) -> Result<Self> {
        let opt = |s: &Option<AdamState>, p: &VectorFieldParams| {
            let mut st = s.clone().unwrap_or_else(|| AdamState::new(p.tensors(), lr));
            st.lr = lr;
            st
        };
        Ok(Self {
            flow_opt: opt(&ck.flow_opt, &ck.flow),
            denoiser_opt: opt(&ck.denoiser_opt, &ck.denoiser),
            flow: ck.flow.clone(),
            denoiser: ck.denoiser.clone(),
            step: ck.step,
        })
    }

    pub fn checkpoint(&self, train_config: serde_json::Value) -> Checkpoint {
        Checkpoint {
            flow: self.flow.clone(),
            denoiser: self.denoiser.clone(),
            flow_opt: Some(self.flow_opt.clone()),
            denoiser_opt: Some(self.denoiser_opt.clone()),
            step: self.step,
            train_config,
        }
    }

    /// One Adam update of both networks on the combined loss.
    pub fn step(&mut self, batch: &[ShiftedPair], draw: &LossDraw, lambda: f64, target: RclTarget) -> Result<LossBreakdown> {
        let step = self.step + 1;
        let mut tape = Tape::new();
        let fb = self.flow.bind(&mut tape);
        let db = self.denoiser.bind(&mut tape);
        let nodes = build_loss(&mut tape, &self.flow, &fb, &self.denoiser, &db, batch, draw, lambda, target)?;
        let loss = nodes.values(&tape)?;
        for (term, value) in
            [("flow_loss", loss.flow), ("score_loss", loss.score), ("rcl_loss", loss.rcl), ("total", loss.total)]
        {
            if !value.is_finite() || value.abs() > DIVERGENCE_THRESHOLD {
                return Err(TrainError::Divergence { step, term, value });
            }
        }
        if let Err(AutodiffError::NonFinite { op, .. }) = tape.check_finite() {
            return Err(TrainError::Divergence { step, term: op_name(op), value: f64::NAN });
        }
        let mut grads = tape.backward(nodes.total)?;
        let collect = |ids: &BoundParams, p: &VectorFieldParams, g: &mut crate::vectorfield::Gradients| -> Vec<Tensor> {
            ids.ids
                .iter()
                .zip(p.tensors())
                .map(|(id, t)| g.take(*id).unwrap_or_else(|| Tensor::zeros(t.shape())))
                .collect()
        };
        let gf = collect(&fb, &self.flow, &mut grads);
        let gd = collect(&db, &self.denoiser, &mut grads);
        adam_step(self.flow.tensors_mut(), &gf, &mut self.flow_opt).map_err(|e| diverged(e, step))?;
        adam_step(self.denoiser.tensors_mut(), &gd, &mut self.denoiser_opt).map_err(|e| diverged(e, step))?;
        self.step = step;
        Ok(loss)
    }
}

fn op_name(op: crate::vectorfield::OpKind) -> &'static str {
    use crate::vectorfield::OpKind::*;
    match op {
        Leaf => "input",
        Add => "add",
        Sub => "sub",
        Mul => "mul",
        Scale => "scale",
        Silu => "silu",
        Conv1d => "conv1d",
        AddChannelBias => "time_bias",
        Linear => "linear",
        Sum => "sum",
        Mean => "mean",
        Mse => "mse",
        Rcl => "rcl",
    }
}

fn diverged(e: AutodiffError, step: u64) -> TrainError {
    match e {
        AutodiffError::NonFiniteGradient { .. } => TrainError::Divergence { step, term: "gradient", value: f64::NAN },
        other => other.into(),
    }
}

/// One row of the loss-curve CSV.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CurveRow {
    pub step: u64,
    pub loss: LossBreakdown,
    pub val_total: Option<f64>,
}

pub const CURVE_HEADER: &str = "step,flow_loss,score_loss,rcl_loss,total,val_total";

pub fn write_curve_csv(path: &Path, rows: &[CurveRow]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "{CURVE_HEADER}")?;
    for r in rows {
        let val = r.val_total.map(|v| v.to_string()).unwrap_or_default();
        writeln!(f, "{},{},{},{},{},{}", r.step, r.loss.flow, r.loss.score, r.loss.rcl, r.loss.total, val)?;
    }
    f.flush()?;
    Ok(())
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters with the lowest validation loss (the last ones when there
    /// is no validation split).
    pub best: Checkpoint,
    pub last: Checkpoint,
    pub curve: Vec<CurveRow>,
    pub train_subjects: Vec<usize>,
    pub val_subjects: Vec<usize>,
}

/// Training and validation subject indices: the last `round(f * S)` subjects
/// are held out, at least one when `f > 0` and `S >= 2`.
pub fn split_subjects(n: usize, val_fraction: f64) -> (Vec<usize>, Vec<usize>) {
    let mut n_val = (val_fraction * n as f64).round() as usize;
    if val_fraction > 0.0 && n >= 2 {
        n_val = n_val.max(1);
    }
    let n_val = n_val.min(n.saturating_sub(1));
    ((0..n - n_val).collect(), (n - n_val..n).collect())
}

const VALIDATION_SALT: u64 = 0x5a17_0000_0000_0001;

fn mix(seed: u64, k: u64) -> u64 {
    seed.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(k.wrapping_mul(0xbf58_476d_1ce4_e5b9)).rotate_left(17)
        ^ k
}

fn couples(
    set: &TrainingSet,
    subjects: &[usize],
    cfg: &TrainConfig,
    delta: usize,
) -> Vec<(usize, usize)> {
    subjects
        .iter()
        .flat_map(|&s| {
            candidate_origins(set.track_len(s), cfg.window_length, cfg.stride, delta)
                .into_iter()
                .map(move |o| (s, o))
        })
        .collect()
}

/// Run Adam over shuffled shifted-pair batches, optionally continuing from
/// `resume`. The result depends only on the data and `cfg`.
pub fn train(set: &TrainingSet, cfg: &TrainConfig, resume: Option<&Checkpoint>) -> Result<TrainOutcome> {
    cfg.validate()?;
    let fs = set.sample_rate;
    let delta = cfg.delta_samples(fs);
    let arch = cfg.net.arch(set.n_regions());
    let (train_idx, val_idx) = split_subjects(set.n_subjects(), cfg.val_fraction);
    let train_couples = couples(set, &train_idx, cfg, delta);
    if train_couples.is_empty() {
        return Err(cfg_err(
            "delta_shift",
            format!(
                "no window of {} samples has {delta} samples of history in the training subjects",
                cfg.window_length
            ),
        ));
    }
    let mut val_couples = couples(set, &val_idx, cfg, delta);
    if val_couples.len() > cfg.val_pairs {
        let n = val_couples.len();
        val_couples = (0..cfg.val_pairs).map(|k| val_couples[k * n / cfg.val_pairs]).collect();
    }
    let val_batch = val_couples
        .iter()
        .map(|&(s, o)| sample_shifted_pair(set, s, o, delta, cfg.window_length))
        .collect::<Result<Vec<_>>>()?;
    let val_draw = draw_noise(&val_batch, cfg.t_min, &mut seeded_rng(cfg.seed ^ VALIDATION_SALT));

    let config_echo = serde_json::to_value(cfg).expect("config serializes");
    let mut trainer = match resume {
        Some(ck) => {
            if *ck.arch() != arch {
                return Err(cfg_err("net", format!("checkpoint architecture {:?} differs from {arch:?}", ck.arch())));
            }
            Trainer::from_checkpoint(ck, cfg.lr)?
        }
        None => Trainer::new(arch, cfg.lr, cfg.seed)?,
    };

    let per_epoch = train_couples.len().div_ceil(cfg.batch_size) as u64;
    let mut total_steps = per_epoch * cfg.epochs as u64;
    if let Some(m) = cfg.max_steps {
        total_steps = total_steps.min(m);
    }
    let validate = |t: &Trainer| -> Result<Option<f64>> {
        if val_batch.is_empty() {
            return Ok(None);
        }
        let l = total_loss(&t.flow, &t.denoiser, &val_batch, &val_draw, cfg.lambda_rcl, cfg.rcl_target)?;
        Ok(Some(l.total))
    };

    let mut curve = Vec::new();
    let mut best: Option<(f64, Checkpoint)> = None;
    let mut order: Vec<(usize, usize)> = Vec::new();
    let mut order_epoch = u64::MAX;
    let start = trainer.step;
    for step in start..start + total_steps {
        let epoch = step / per_epoch;
        if epoch != order_epoch {
            order = train_couples.clone();
            order.shuffle(&mut seeded_rng(mix(cfg.seed, epoch)));
            order_epoch = epoch;
        }
        let k = (step % per_epoch) as usize * cfg.batch_size;
        let batch = order[k..(k + cfg.batch_size).min(order.len())]
            .iter()
            .map(|&(s, o)| sample_shifted_pair(set, s, o, delta, cfg.window_length))
            .collect::<Result<Vec<_>>>()?;
        let mut rng = seeded_rng(mix(cfg.seed ^ 0x7f4a, step));
        let draw = draw_noise(&batch, cfg.t_min, &mut rng);
        let loss = trainer.step(&batch, &draw, cfg.lambda_rcl, cfg.rcl_target)?;
        let done = trainer.step;
        let val_total = if done % cfg.val_every == 0 || step + 1 == start + total_steps {
            validate(&trainer)?
        } else {
            None
        };
        if let Some(v) = val_total {
            if !v.is_finite() {
                return Err(TrainError::Divergence { step: done, term: "val_total", value: v });
            }
            if best.as_ref().is_none_or(|(b, _)| v < *b) {
                best = Some((v, trainer.checkpoint(config_echo.clone())));
            }
        }
        curve.push(CurveRow { step: done, loss, val_total });
    }
    let last = trainer.checkpoint(config_echo);
    let best = best.map_or_else(|| last.clone(), |(_, c)| c);
    Ok(TrainOutcome {
        best,
        last,
        curve,
        train_subjects: train_idx.iter().map(|&i| set.subject_ids[i]).collect(),
        val_subjects: val_idx.iter().map(|&i| set.subject_ids[i]).collect(),
    })
}

/// One cell of a lambda x delta grid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub lambda: f64,
    pub delta: f64,
    pub mae_bpm: f64,
}

pub const ABLATION_HEADER: &str = "lambda,delta,mae_bpm";

pub fn write_ablation_csv(path: &Path, rows: &[AblationRow]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "{ABLATION_HEADER}")?;
    for r in rows {
        writeln!(f, "{},{},{}", r.lambda, r.delta, r.mae_bpm)?;
    }
    f.flush()?;
    Ok(())
}
