//! Command-line front end.
//!
//! Every command validates its configuration and inputs before it creates
//! the output directory, and finishes by writing `manifest.json` with the
//! digests of everything it read and wrote. Exit codes: 0 ok, 2 config or
//! input error, 3 numeric divergence, 4 integrity failure, 1 anything else.

pub mod pipeline;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use ndarray::{s, Array2};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gauge::{self, gauge_rr, GaugeError};
use crate::sampler::{DriftForm, DriftModel, LearnedFields, SamplerConfig, SamplerError, Trajectory};
use crate::signals::{read_series_csv, write_series_csv, TimeSeries};
use crate::signals::{PulseBand, SignalError};
use crate::synth::{make_dataset, Dataset, SynthConfig, SynthError};
use crate::training::{self, prepare_target, TrainConfig, TrainError, TrainingSet};
use crate::uq::{self, UqError};
use crate::vectorfield::{sha256_hex, Checkpoint, CheckpointError};
use pipeline::{PipelineError, ReadoutConfig};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const OUT_ROOT_ENV: &str = "PULSEFLOW_OUT";
pub const ENSEMBLE_FILE: &str = "ensemble.csv";
pub const CHECKPOINT_FILE: &str = "checkpoint.json";
pub const CHECKPOINT_LAST_FILE: &str = "checkpoint_last.json";

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config: {0}")]
    Config(String),
    #[error("input: {0}")]
    Input(String),
    #[error("divergence: {0}")]
    Divergence(String),
    #[error("integrity: {0}")]
    Integrity(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("{0}")]
    Other(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) | CliError::Input(_) => 2,
            CliError::Divergence(_) => 3,
            CliError::Integrity(_) => 4,
            CliError::Io(_) | CliError::Other(_) => 1,
        }
    }
}

pub type Result<T, E = CliError> = std::result::Result<T, E>;

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Config { .. } => CliError::Config(e.to_string()),
            TrainError::Argument(_)
            | TrainError::InsufficientHistory { .. }
            | TrainError::DegenerateCorrelation
            | TrainError::Signal(_) => CliError::Input(e.to_string()),
            TrainError::Divergence { .. } => CliError::Divergence(e.to_string()),
            TrainError::Io(e) => CliError::Io(e),
            _ => CliError::Other(e.to_string()),
        }
    }
}

impl From<SamplerError> for CliError {
    fn from(e: SamplerError) -> Self {
        match e {
            SamplerError::Config { .. } => CliError::Config(e.to_string()),
            SamplerError::Shape(_) => CliError::Input(e.to_string()),
            SamplerError::Blowup { .. } | SamplerError::Singularity(_) => CliError::Divergence(e.to_string()),
            _ => CliError::Other(e.to_string()),
        }
    }
}

impl From<SynthError> for CliError {
    fn from(e: SynthError) -> Self {
        match e {
            SynthError::Config { .. } => CliError::Config(e.to_string()),
            SynthError::Io(e) => CliError::Io(e),
            _ => CliError::Input(e.to_string()),
        }
    }
}

impl From<SignalError> for CliError {
    fn from(e: SignalError) -> Self {
        CliError::Input(e.to_string())
    }
}

impl From<UqError> for CliError {
    fn from(e: UqError) -> Self {
        CliError::Input(e.to_string())
    }
}

impl From<GaugeError> for CliError {
    fn from(e: GaugeError) -> Self {
        match e {
            GaugeError::Io(e) => CliError::Io(e),
            GaugeError::Table(_) => CliError::Input(e.to_string()),
        }
    }
}

impl From<CheckpointError> for CliError {
    fn from(e: CheckpointError) -> Self {
        match e {
            CheckpointError::Io(e) => CliError::Input(format!("checkpoint: {e}")),
            _ => CliError::Integrity(e.to_string()),
        }
    }
}

impl From<PipelineError> for CliError {
    fn from(e: PipelineError) -> Self {
        match e {
            PipelineError::Input(m) => CliError::Input(m),
            PipelineError::Train(e) => e.into(),
            PipelineError::Sampler(e) => e.into(),
            PipelineError::Signal(e) => e.into(),
            PipelineError::Uq(e) => e.into(),
            PipelineError::Gauge(e) => e.into(),
        }
    }
}

fn json_err(e: serde_json::Error) -> CliError {
    CliError::Other(e.to_string())
}

// ---------------------------------------------------------------------------
// Manifest

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileRecord {
    pub path: String,
    pub sha256: String,
}

/// Provenance of one command run. Output paths are relative to the
/// directory holding the manifest.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub tool_version: String,
    pub config: serde_json::Value,
    pub seeds: BTreeMap<String, u64>,
    pub inputs: Vec<FileRecord>,
    pub outputs: Vec<FileRecord>,
    pub checkpoint_sha256: Option<String>,
    pub wall_clock_s: f64,
}

pub fn file_sha256(path: &Path) -> Result<String> {
    Ok(sha256_hex(&std::fs::read(path)?))
}

fn record(path: &Path, shown: String) -> Result<FileRecord> {
    Ok(FileRecord { path: shown, sha256: file_sha256(path)? })
}

/// Records for a file, or for every file of a directory in name order.
fn input_records(path: &Path) -> Result<Vec<FileRecord>> {
    if path.is_dir() {
        let mut names: Vec<PathBuf> = std::fs::read_dir(path)?
            .map(|e| e.map(|e| e.path()))
            .collect::<std::io::Result<_>>()?;
        names.retain(|p| p.is_file() && p.file_name().is_some_and(|n| n != MANIFEST_FILE));
        names.sort();
        names.iter().map(|p| record(p, p.display().to_string())).collect()
    } else {
        Ok(vec![record(path, path.display().to_string())?])
    }
}

impl RunManifest {
    fn new(command: &str, config: serde_json::Value) -> Self {
        Self {
            command: command.to_string(),
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            config,
            seeds: BTreeMap::new(),
            inputs: Vec::new(),
            outputs: Vec::new(),
            checkpoint_sha256: None,
            wall_clock_s: 0.0,
        }
    }

    fn add_input(&mut self, path: &Path) -> Result<()> {
        self.inputs.extend(input_records(path)?);
        Ok(())
    }

    fn write(mut self, dir: &Path, outputs: &[String], started: Instant) -> Result<()> {
        self.outputs = outputs.iter().map(|n| record(&dir.join(n), n.clone())).collect::<Result<_>>()?;
        self.wall_clock_s = started.elapsed().as_secs_f64();
        let text = serde_json::to_string_pretty(&self).map_err(json_err)?;
        std::fs::write(dir.join(MANIFEST_FILE), text + "\n")?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(dir.join(MANIFEST_FILE))
            .map_err(|e| CliError::Input(format!("{}: {e}", dir.join(MANIFEST_FILE).display())))?;
        serde_json::from_str(&text).map_err(|e| CliError::Integrity(format!("manifest: {e}")))
    }

    /// Re-hash every recorded output under `dir`.
    pub fn verify(&self, dir: &Path) -> Result<()> {
        for o in &self.outputs {
            let computed = file_sha256(&dir.join(&o.path))
                .map_err(|e| CliError::Integrity(format!("{}: {e}", o.path)))?;
            if computed != o.sha256 {
                return Err(CliError::Integrity(format!(
                    "{}: recorded {}, computed {computed}",
                    o.path, o.sha256
                )));
            }
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Arguments

#[derive(Debug, Parser)]
#[command(name = "pulseflow", version, about = "Posterior sampling of pulse signals from noisy multichannel tracks")]
pub struct Cli {
    /// Worker threads for ensemble sampling. Outputs do not depend on it.
    #[arg(long, global = true, default_value_t = 1)]
    pub jobs: usize,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic paired dataset.
    Generate(GenerateArgs),
    /// Train flow and denoiser networks on a dataset.
    Train(TrainArgs),
    /// Draw posterior reconstructions of one measurement window.
    Sample(SampleArgs),
    /// Score ensembles against reference pulses.
    Evaluate(EvaluateArgs),
    /// Gauge R&R of one ensemble.
    Gauge(GaugeArgs),
    /// Train and evaluate a lambda x delta grid.
    Ablate(AblateArgs),
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub lambda_rcl: Option<f64>,
    /// Shift between the two windows of a couple, in seconds.
    #[arg(long)]
    pub delta_shift: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub max_steps: Option<u64>,
    /// Continue from a checkpoint written by an earlier run.
    #[arg(long)]
    pub resume: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SampleArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Measurement CSV `time,<region>...`.
    #[arg(long)]
    pub input: PathBuf,
    /// First row of the window; without it the file must hold exactly one window.
    #[arg(long)]
    pub start: Option<usize>,
    /// Sampler settings in TOML; flags override them.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub epsilon: Option<f64>,
    /// `a..b:step` or a comma list of interpolation times.
    #[arg(long)]
    pub snapshots: Option<String>,
    #[arg(long, value_parser = parse_drift_form)]
    pub drift_form: Option<DriftForm>,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    /// Directories written by `sample`.
    #[arg(long, num_args = 1.., required = true)]
    pub ensemble: Vec<PathBuf>,
    /// Reference pulse CSVs, one per ensemble.
    #[arg(long, num_args = 1.., required = true)]
    pub gt: Vec<PathBuf>,
    #[arg(long, num_args = 2, value_names = ["LO", "HI"])]
    pub band: Option<Vec<f64>>,
    #[arg(long, default_value_t = 10)]
    pub pad: usize,
    #[arg(long, default_value_t = uq::DEFAULT_ALPHA)]
    pub alpha: f64,
    /// Upper frequency of the gauge parts.
    #[arg(long, default_value_t = 200.0)]
    pub gauge_max_bpm: f64,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GaugeArgs {
    #[arg(long)]
    pub ensemble: PathBuf,
    #[arg(long, default_value_t = 200.0)]
    pub max_bpm: f64,
    #[arg(long, default_value_t = 10)]
    pub pad: usize,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Training dataset.
    #[arg(long)]
    pub dataset: PathBuf,
    /// Held-out dataset the cells are scored on.
    #[arg(long)]
    pub test: PathBuf,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn parse_drift_form(s: &str) -> std::result::Result<DriftForm, String> {
    match s {
        "consistent" => Ok(DriftForm::Consistent),
        "appendix" => Ok(DriftForm::Appendix),
        _ => Err(format!("unknown drift form `{s}` (consistent | appendix)")),
    }
}

/// `a..b:step` (inclusive) or `t1,t2,...`.
pub fn parse_snapshots(s: &str) -> Result<Vec<f64>> {
    let bad = || CliError::Config(format!("snapshots: cannot parse `{s}`"));
    let num = |v: &str| v.trim().parse::<f64>().map_err(|_| bad());
    if let Some((range, step)) = s.split_once(':') {
        let (a, b) = range.split_once("..").ok_or_else(bad)?;
        let (a, b, h) = (num(a)?, num(b)?, num(step)?);
        if !(h > 0.0) || b < a {
            return Err(bad());
        }
        let n = ((b - a) / h + 1e-9).floor() as usize;
        // Round to the step's decimal grid so 0.1 * 3 prints as 0.3.
        Ok((0..=n).map(|k| ((a + k as f64 * h) * 1e9).round() / 1e9).collect())
    } else {
        s.split(',').map(num).collect()
    }
}

// ---------------------------------------------------------------------------
// Configs

/// `generate` settings; `[synth]` holds the corruption model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenerateConfig {
    pub n_subjects: usize,
    pub duration: f64,
    pub sample_rate: f64,
    pub synth: SynthConfig,
}

impl Default for GenerateConfig {
    fn default() -> Self {
        Self { n_subjects: 3, duration: 60.0, sample_rate: 25.0, synth: SynthConfig::default() }
    }
}

pub fn read_toml<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    toml::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
}

/// What `train` stores alongside the weights so `sample` can check its input.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub config: TrainConfig,
    pub sample_rate: f64,
    pub region_labels: Vec<String>,
}

impl CheckpointMeta {
    pub fn of(ck: &Checkpoint) -> Result<Self> {
        serde_json::from_value(ck.train_config.clone())
            .map_err(|e| CliError::Input(format!("checkpoint was not written by `train`: {e}")))
    }
}

fn out_dir(explicit: Option<PathBuf>, command: &str) -> PathBuf {
    explicit.unwrap_or_else(|| {
        std::env::var_os(OUT_ROOT_ENV)
            .map(PathBuf::from)
            .unwrap_or_else(|| PathBuf::from("pulseflow_out"))
            .join(command)
    })
}

fn to_json<T: Serialize>(v: &T) -> Result<serde_json::Value> {
    serde_json::to_value(v).map_err(json_err)
}

fn read_dataset(dir: &Path) -> Result<Dataset> {
    Dataset::read_dir(dir).map_err(|e| CliError::Input(format!("dataset {}: {e}", dir.display())))
}

// ---------------------------------------------------------------------------
// Commands

pub fn run(cli: Cli) -> Result<()> {
    if cli.jobs == 0 {
        return Err(CliError::Config("--jobs must be >= 1".into()));
    }
    match cli.command {
        Command::Generate(a) => cmd_generate(a),
        Command::Train(a) => cmd_train(a),
        Command::Sample(a) => cmd_sample(a, cli.jobs),
        Command::Evaluate(a) => cmd_evaluate(a),
        Command::Gauge(a) => cmd_gauge(a),
        Command::Ablate(a) => cmd_ablate(a, cli.jobs),
    }
}

/// Parse the process arguments, run, and return the exit code.
pub fn main() -> i32 {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn cmd_generate(a: GenerateArgs) -> Result<()> {
    let started = Instant::now();
    let mut cfg: GenerateConfig = read_toml(&a.config)?;
    if let Some(s) = a.seed {
        cfg.synth.seed = s;
    }
    let ds = make_dataset(&cfg.synth, cfg.n_subjects, cfg.duration, cfg.sample_rate)?;
    let dir = out_dir(a.out, "generate");
    ds.write_dir(&dir)?;
    let mut m = RunManifest::new("generate", to_json(&cfg)?);
    m.seeds.insert("synth".into(), cfg.synth.seed);
    m.add_input(&a.config)?;
    let mut outputs = vec![crate::synth::DATASET_MANIFEST.to_string()];
    for e in ds.manifest().subjects {
        outputs.push(e.x0_file);
        outputs.push(e.x1_file);
    }
    m.write(&dir, &outputs, started)
}

pub fn cmd_train(a: TrainArgs) -> Result<()> {
    let started = Instant::now();
    let mut cfg: TrainConfig = match &a.config {
        Some(p) => read_toml(p)?,
        None => TrainConfig::default(),
    };
    if let Some(v) = a.lambda_rcl {
        cfg.lambda_rcl = v;
    }
    if let Some(v) = a.delta_shift {
        cfg.delta_shift = v;
    }
    if let Some(v) = a.seed {
        cfg.seed = v;
    }
    if let Some(v) = a.epochs {
        cfg.epochs = v;
    }
    if a.max_steps.is_some() {
        cfg.max_steps = a.max_steps;
    }
    cfg.validate()?;
    let ds = read_dataset(&a.dataset)?;
    let resume = a.resume.as_deref().map(Checkpoint::load).transpose()?;
    if let Some(ck) = &resume {
        let meta = CheckpointMeta::of(ck)?;
        if meta.region_labels != ds.region_labels || meta.sample_rate != ds.sample_rate {
            return Err(CliError::Input("resume checkpoint was trained on a different channel layout".into()));
        }
    }
    let set = TrainingSet::from_dataset(&ds, &cfg.filter)?;
    let outcome = training::train(&set, &cfg, resume.as_ref())?;

    let meta = to_json(&CheckpointMeta {
        config: cfg.clone(),
        sample_rate: ds.sample_rate,
        region_labels: ds.region_labels.clone(),
    })?;
    let (mut best, mut last) = (outcome.best, outcome.last);
    best.train_config = meta.clone();
    last.train_config = meta;

    let dir = out_dir(a.out, "train");
    std::fs::create_dir_all(&dir)?;
    best.save(&dir.join(CHECKPOINT_FILE))?;
    last.save(&dir.join(CHECKPOINT_LAST_FILE))?;
    training::write_curve_csv(&dir.join("loss_curve.csv"), &outcome.curve)?;

    let mut m = RunManifest::new("train", to_json(&cfg)?);
    m.seeds.insert("train".into(), cfg.seed);
    if let Some(p) = &a.config {
        m.add_input(p)?;
    }
    m.add_input(&a.dataset)?;
    if let Some(p) = &a.resume {
        m.add_input(p)?;
    }
    m.checkpoint_sha256 = Some(file_sha256(&dir.join(CHECKPOINT_FILE))?);
    let outputs = [CHECKPOINT_FILE, CHECKPOINT_LAST_FILE, "loss_curve.csv"].map(String::from);
    m.write(&dir, &outputs, started)
}

/// Header label of realization `k`, region `label`.
fn member_column(k: usize, label: &str) -> String {
    format!("r{k:03}_{label}")
}

fn write_members(path: &Path, time: &[f64], labels: &[String], members: &[&Array2<f64>]) -> Result<()> {
    let t = time.len();
    let r = labels.len();
    let mut samples = Array2::zeros((t, members.len() * r));
    let mut cols = Vec::with_capacity(members.len() * r);
    for (k, x) in members.iter().enumerate() {
        samples.slice_mut(s![.., k * r..(k + 1) * r]).assign(x);
        cols.extend(labels.iter().map(|l| member_column(k, l)));
    }
    let series = TimeSeries { time: time.to_vec(), labels: cols, samples };
    Ok(write_series_csv(path, &series)?)
}

/// An ensemble read back from `ensemble.csv`.
#[derive(Debug, Clone)]
pub struct EnsembleFile {
    pub time: Vec<f64>,
    pub sample_rate: f64,
    pub region_labels: Vec<String>,
    pub members: Vec<Array2<f64>>,
}

pub fn read_ensemble(dir: &Path) -> Result<EnsembleFile> {
    let ts = read_series_csv(&dir.join(ENSEMBLE_FILE))?;
    let mut labels = Vec::new();
    for c in &ts.labels {
        let (head, label) = c
            .split_once('_')
            .filter(|(h, _)| h.starts_with('r'))
            .ok_or_else(|| CliError::Input(format!("ensemble column `{c}` is not r<k>_<region>")))?;
        if head == "r000" {
            labels.push(label.to_string());
        }
    }
    let r = labels.len();
    if r == 0 || ts.labels.len() % r != 0 {
        return Err(CliError::Input("ensemble columns do not form whole realizations".into()));
    }
    let n = ts.labels.len() / r;
    for k in 0..n {
        for (j, l) in labels.iter().enumerate() {
            if ts.labels[k * r + j] != member_column(k, l) {
                return Err(CliError::Input(format!("unexpected ensemble column `{}`", ts.labels[k * r + j])));
            }
        }
    }
    let members = (0..n).map(|k| ts.samples.slice(s![.., k * r..(k + 1) * r]).to_owned()).collect();
    Ok(EnsembleFile { sample_rate: ts.sample_rate()?, time: ts.time, region_labels: labels, members })
}

pub fn snapshot_file(t: f64) -> String {
    format!("snapshot_t{t:.2}.csv")
}

pub fn cmd_sample(a: SampleArgs, jobs: usize) -> Result<()> {
    let started = Instant::now();
    let mut cfg: SamplerConfig = match &a.config {
        Some(p) => read_toml(p)?,
        None => SamplerConfig::default(),
    };
    if let Some(v) = a.n {
        cfg.n_realizations = v;
    }
    if let Some(v) = a.seed {
        cfg.seed = v;
    }
    if let Some(v) = a.steps {
        cfg.steps = v;
    }
    if let Some(v) = a.epsilon {
        cfg.epsilon = v;
    }
    if let Some(v) = a.drift_form {
        cfg.drift_form = v;
    }
    if let Some(s) = &a.snapshots {
        cfg.snapshot_times = parse_snapshots(s)?;
    }
    cfg.validate()?;
    let names: Vec<String> = cfg.snapshot_times.iter().map(|&t| snapshot_file(t)).collect();
    if let Some(d) = names.iter().enumerate().find(|(i, n)| names[..*i].contains(n)) {
        return Err(CliError::Config(format!("snapshot times collide on {}", d.1)));
    }

    let ck = Checkpoint::load(&a.checkpoint)?;
    let meta = CheckpointMeta::of(&ck)?;
    let ts = read_series_csv(&a.input)?;
    let fs = ts.sample_rate()?;
    if (fs - meta.sample_rate).abs() > 1e-6 * meta.sample_rate {
        return Err(CliError::Input(format!("input sampled at {fs} Hz, model trained at {} Hz", meta.sample_rate)));
    }
    if ts.labels != meta.region_labels {
        return Err(CliError::Input(format!(
            "input regions {:?} differ from the trained {:?}",
            ts.labels, meta.region_labels
        )));
    }
    let len = meta.config.window_length;
    let start = a.start.unwrap_or(0);
    let fits = match a.start {
        Some(_) => start + len <= ts.time.len(),
        None => ts.time.len() == len,
    };
    if !fits {
        return Err(CliError::Input(format!(
            "input has {} rows; the model expects windows of {len} (from row {start})",
            ts.time.len()
        )));
    }
    let x1 = ts.samples.slice(s![start..start + len, ..]).to_owned();
    let time = ts.time[start..start + len].to_vec();

    let model = LearnedFields::from_checkpoint(&ck);
    if model.regions().is_some_and(|r| r != x1.ncols()) {
        return Err(CliError::Input("checkpoint architecture does not match the input".into()));
    }
    let runs: Vec<Trajectory> = pipeline::sample_window(&model, &x1, fs, &meta.config.filter, &cfg, jobs)?;

    let dir = out_dir(a.out, "sample");
    std::fs::create_dir_all(&dir)?;
    let labels = &meta.region_labels;
    let terminals: Vec<&Array2<f64>> = runs.iter().map(|t| &t.terminal).collect();
    write_members(&dir.join(ENSEMBLE_FILE), &time, labels, &terminals)?;
    let mut outputs = vec![ENSEMBLE_FILE.to_string()];
    for (i, name) in names.iter().enumerate() {
        let states: Vec<&Array2<f64>> = runs.iter().map(|t| &t.snapshots[i].1).collect();
        write_members(&dir.join(name), &time, labels, &states)?;
        outputs.push(name.clone());
    }

    let mut m = RunManifest::new("sample", to_json(&cfg)?);
    m.seeds.insert("sampler".into(), cfg.seed);
    m.add_input(&a.input)?;
    if let Some(p) = &a.config {
        m.add_input(p)?;
    }
    m.checkpoint_sha256 = Some(file_sha256(&a.checkpoint)?);
    m.add_input(&a.checkpoint)?;
    m.write(&dir, &outputs, started)
}

/// Per-window line of the evaluation report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WindowScore {
    /// Position of the ensemble on the command line.
    pub index: usize,
    pub pred_bpm: f64,
    pub gt_bpm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub band: PulseBand,
    pub pad_factor: usize,
    pub windows: Vec<WindowScore>,
    pub pulse: uq::PulseMetrics,
    pub spectrum: uq::SpectrumMetrics,
    pub uncertainty: uq::UncertaintyReport,
    /// Needs at least two windows.
    pub bland_altman: Option<uq::BlandAltman>,
    pub gauge: gauge::GaugeRr,
}

/// Reference window aligned with an ensemble's time stamps.
fn aligned_reference(gt: &TimeSeries, ens: &EnsembleFile, gt_path: &Path) -> Result<Array2<f64>> {
    let fs = gt.sample_rate()?;
    if (fs - ens.sample_rate).abs() > 1e-6 * ens.sample_rate {
        return Err(CliError::Input(format!(
            "{}: sampled at {fs} Hz, ensemble at {} Hz",
            gt_path.display(),
            ens.sample_rate
        )));
    }
    if gt.samples.ncols() != 1 {
        return Err(CliError::Input(format!("{}: expected one pulse column", gt_path.display())));
    }
    let t = ens.time.len();
    let start = if gt.time.len() == t {
        0
    } else {
        ((ens.time[0] - gt.time[0]) * fs).round().max(0.0) as usize
    };
    if start + t > gt.time.len() || (gt.time[start] - ens.time[0]).abs() > 0.5 / fs {
        return Err(CliError::Input(format!(
            "{}: {} rows do not cover the ensemble's {t} rows from t = {}",
            gt_path.display(),
            gt.time.len(),
            ens.time[0]
        )));
    }
    Ok(prepare_target(&gt.samples.slice(s![start..start + t, ..]).to_owned()))
}

pub fn evaluate_ensembles(
    ensembles: &[EnsembleFile],
    references: &[Array2<f64>],
    readout: &ReadoutConfig,
    alpha: f64,
    gauge_max_bpm: f64,
) -> Result<EvaluationReport> {
    let mut windows = Vec::new();
    let mut y = Vec::new();
    let mut mean_profile = Vec::new();
    let mut member_profiles: Vec<Vec<f64>> = Vec::new();
    let mut gauge_tables = Vec::new();
    for (index, (ens, x0)) in ensembles.iter().zip(references).enumerate() {
        let fs = ens.sample_rate;
        let n = ens.members.len();
        if member_profiles.is_empty() {
            member_profiles = vec![Vec::new(); n];
        } else if member_profiles.len() != n {
            return Err(CliError::Input("ensembles have different realization counts".into()));
        }
        let gt_profile = pipeline::band_profile(x0, fs, readout)?;
        let profiles =
            ens.members.iter().map(|m| pipeline::band_profile(m, fs, readout)).collect::<Result<Vec<_>, _>>()?;
        let (mu, _) = uq::ensemble_moments(&profiles)?;
        for (acc, p) in member_profiles.iter_mut().zip(profiles) {
            acc.extend(p);
        }
        y.extend(gt_profile);
        mean_profile.extend(mu);
        windows.push(WindowScore {
            index,
            pred_bpm: pipeline::ensemble_pulse_rate(&ens.members, fs, readout)?,
            gt_bpm: pipeline::reference_pulse_rate(x0, fs, readout)?,
        });
        gauge_tables.push(pipeline::gauge_table(&ens.members, fs, gauge_max_bpm, readout.pad_factor)?);
    }
    let pred: Vec<f64> = windows.iter().map(|w| w.pred_bpm).collect();
    let gt: Vec<f64> = windows.iter().map(|w| w.gt_bpm).collect();
    // Bins of every window are distinct parts.
    let tables: Vec<_> = gauge_tables.iter().map(|t| t.measurements().view()).collect();
    let stacked = ndarray::concatenate(ndarray::Axis(0), &tables)
        .map_err(|e| CliError::Input(format!("gauge tables do not stack: {e}")))?;
    Ok(EvaluationReport {
        band: readout.band,
        pad_factor: readout.pad_factor,
        pulse: uq::pulse_metrics(&pred, &gt)?,
        spectrum: uq::spectrum_metrics(&mean_profile, &y)?,
        uncertainty: uq::uncertainty_report(&y, &member_profiles, alpha)?,
        bland_altman: (windows.len() >= 2).then(|| uq::bland_altman(&pred, &gt)).transpose()?,
        gauge: gauge_rr(&gauge::GaugeTable::new(stacked)?),
        windows,
    })
}

pub fn cmd_evaluate(a: EvaluateArgs) -> Result<()> {
    let started = Instant::now();
    if a.ensemble.len() != a.gt.len() {
        return Err(CliError::Input(format!(
            "{} ensembles but {} reference files",
            a.ensemble.len(),
            a.gt.len()
        )));
    }
    let band = match &a.band {
        Some(b) => PulseBand::new(b[0], b[1])?,
        None => PulseBand::default(),
    };
    if a.pad == 0 {
        return Err(CliError::Config("--pad must be >= 1".into()));
    }
    if !(a.alpha > 0.0 && a.alpha < 1.0) {
        return Err(CliError::Config(format!("--alpha {} not in (0, 1)", a.alpha)));
    }
    let readout = ReadoutConfig { band, pad_factor: a.pad };
    let mut ensembles = Vec::new();
    let mut refs = Vec::new();
    for (e, g) in a.ensemble.iter().zip(&a.gt) {
        let ens = read_ensemble(e)?;
        let x0 = aligned_reference(&read_series_csv(g)?, &ens, g)?;
        ensembles.push(ens);
        refs.push(x0);
    }
    let report = evaluate_ensembles(&ensembles, &refs, &readout, a.alpha, a.gauge_max_bpm)?;

    let dir = out_dir(a.out, "evaluate");
    std::fs::create_dir_all(&dir)?;
    let text = serde_json::to_string_pretty(&report).map_err(json_err)?;
    std::fs::write(dir.join("report.json"), text + "\n")?;
    let mut cal = String::from("level,observed\n");
    for (l, o) in &report.uncertainty.calibration_curve {
        cal.push_str(&format!("{l},{o}\n"));
    }
    std::fs::write(dir.join("calibration.csv"), cal)?;
    let mut ba = String::from("pred_bpm,gt_bpm,mean_bpm,diff_bpm\n");
    for w in &report.windows {
        ba.push_str(&format!(
            "{},{},{},{}\n",
            w.pred_bpm,
            w.gt_bpm,
            0.5 * (w.pred_bpm + w.gt_bpm),
            w.pred_bpm - w.gt_bpm
        ));
    }
    std::fs::write(dir.join("bland_altman.csv"), ba)?;
    gauge::write_gauge_csv(&dir.join("gauge.csv"), &report.gauge)?;

    let echo = serde_json::json!({
        "band": band,
        "pad": a.pad,
        "alpha": a.alpha,
        "gauge_max_bpm": a.gauge_max_bpm,
    });
    let mut m = RunManifest::new("evaluate", echo);
    for (e, g) in a.ensemble.iter().zip(&a.gt) {
        m.add_input(&e.join(ENSEMBLE_FILE))?;
        m.add_input(g)?;
    }
    let outputs = ["report.json", "calibration.csv", "bland_altman.csv", "gauge.csv"].map(String::from);
    m.write(&dir, &outputs, started)
}

pub fn cmd_gauge(a: GaugeArgs) -> Result<()> {
    let started = Instant::now();
    if a.pad == 0 {
        return Err(CliError::Config("--pad must be >= 1".into()));
    }
    if !(a.max_bpm > 0.0) {
        return Err(CliError::Config(format!("--max-bpm {} must be > 0", a.max_bpm)));
    }
    let ens = read_ensemble(&a.ensemble)?;
    let g = gauge_rr(&pipeline::gauge_table(&ens.members, ens.sample_rate, a.max_bpm, a.pad)?);
    let dir = out_dir(a.out, "gauge");
    std::fs::create_dir_all(&dir)?;
    gauge::write_gauge_csv(&dir.join("gauge.csv"), &g)?;
    let mut m = RunManifest::new("gauge", serde_json::json!({ "max_bpm": a.max_bpm, "pad": a.pad }));
    m.add_input(&a.ensemble.join(ENSEMBLE_FILE))?;
    m.write(&dir, &["gauge.csv".to_string()], started)
}

pub fn cmd_ablate(a: AblateArgs, jobs: usize) -> Result<()> {
    let started = Instant::now();
    let cfg: pipeline::AblationConfig = read_toml(&a.config)?;
    cfg.train.validate()?;
    cfg.sampler.validate()?;
    for &d in &cfg.deltas {
        TrainConfig { delta_shift: d, ..cfg.train.clone() }.validate()?;
    }
    for &l in &cfg.lambdas {
        TrainConfig { lambda_rcl: l, ..cfg.train.clone() }.validate()?;
    }
    let train_ds = read_dataset(&a.dataset)?;
    let test_ds = read_dataset(&a.test)?;
    if test_ds.region_labels != train_ds.region_labels || test_ds.sample_rate != train_ds.sample_rate {
        return Err(CliError::Input("training and test datasets differ in layout".into()));
    }
    let set = TrainingSet::from_dataset(&train_ds, &cfg.train.filter)?;
    let rows = pipeline::run_ablation(&set, &test_ds, &cfg, jobs)?;
    let dir = out_dir(a.out, "ablate");
    std::fs::create_dir_all(&dir)?;
    training::write_ablation_csv(&dir.join("ablation.csv"), &rows)?;
    let mut m = RunManifest::new("ablate", to_json(&cfg)?);
    m.seeds.insert("train".into(), cfg.train.seed);
    m.seeds.insert("sampler".into(), cfg.sampler.seed);
    m.add_input(&a.config)?;
    m.add_input(&a.dataset)?;
    m.add_input(&a.test)?;
    m.write(&dir, &["ablation.csv".to_string()], started)
}
