use std::path::{Path, PathBuf};
use std::process::Command;

use pulseflow::cli::{read_ensemble, RunManifest, OUT_ROOT_ENV};

const GEN: &str = "n_subjects = 3\nduration = 20.0\nsample_rate = 10.0\n[synth]\nseed = 3\n";
const TRAIN: &str = "window_length = 50\nstride = 10\ndelta_shift = 2.0\nbatch_size = 4\nmax_steps = 4\nval_every = 2\n\
                     [net]\nhidden = 4\nblocks = 1\nkernel = 3\ntime_embed_dim = 4\n";

struct Work {
    tmp: tempfile::TempDir,
}

impl Work {
    fn new() -> Self {
        let w = Self { tmp: tempfile::tempdir().unwrap() };
        w.write("gen.toml", GEN);
        w.write("train.toml", TRAIN);
        w
    }

    fn path(&self, p: &str) -> PathBuf {
        self.tmp.path().join(p)
    }

    fn write(&self, name: &str, text: &str) {
        std::fs::write(self.path(name), text).unwrap();
    }

    fn run_env(&self, args: &[&str], env: &[(&str, &Path)]) -> (i32, String) {
        let mut c = Command::new(env!("CARGO_BIN_EXE_pulseflow"));
        c.args(args).current_dir(self.tmp.path()).env_remove(OUT_ROOT_ENV);
        for (k, v) in env {
            c.env(k, v);
        }
        let out = c.output().unwrap();
        (out.status.code().unwrap_or(-1), String::from_utf8_lossy(&out.stderr).into_owned())
    }

    fn run(&self, args: &[&str]) -> (i32, String) {
        self.run_env(args, &[])
    }

    fn ok(&self, args: &[&str]) {
        let (code, err) = self.run(args);
        assert_eq!(code, 0, "{args:?}: {err}");
    }

    /// Dataset in `ds/` and a trained model in `tr/`.
    fn trained(self) -> Self {
        self.ok(&["generate", "--config", "gen.toml", "--out", "ds"]);
        self.ok(&["train", "--config", "train.toml", "--dataset", "ds", "--out", "tr"]);
        self
    }

    fn sample(&self, out: &str, extra: &[&str]) -> (i32, String) {
        let mut args = vec![
            "sample", "--checkpoint", "tr/checkpoint.json", "--input", "ds/subject_000_x1.csv", "--start", "60",
            "--n", "3", "--steps", "10", "--out", out,
        ];
        args.extend_from_slice(extra);
        self.run(&args)
    }
}

fn pulse_csv(rows: usize, fs: f64, bpm: f64, columns: &[String]) -> String {
    let mut s = format!("time,{}\n", columns.join(","));
    for i in 0..rows {
        let t = i as f64 / fs;
        let v = (2.0 * std::f64::consts::PI * bpm / 60.0 * t).sin() + 0.2 * (0.9 * t).cos();
        s.push_str(&t.to_string());
        for _ in columns {
            s.push_str(&format!(",{v}"));
        }
        s.push('\n');
    }
    s
}

#[test]
fn malformed_configs_exit_2_without_output() {
    let w = Work::new();
    w.write("bad.toml", "n_subjects = [\n");
    w.write("unknown.toml", "n_subjects = 2\nwobble = 1\n");
    for cfg in ["bad.toml", "unknown.toml", "missing.toml"] {
        let (code, err) = w.run(&["generate", "--config", cfg, "--out", "ds"]);
        assert_eq!(code, 2, "{cfg}: {err}");
        assert!(!w.path("ds").exists());
    }
    w.write("neg.toml", "batch_size = 0\n");
    let (code, _) = w.run(&["train", "--config", "neg.toml", "--dataset", "nowhere", "--out", "tr"]);
    assert_eq!(code, 2);
    assert!(!w.path("tr").exists());
}

#[test]
fn sample_checks_its_input() {
    let w = Work::new().trained();
    // Whole track without --start: wrong number of rows.
    let (code, err) = w.run(&[
        "sample", "--checkpoint", "tr/checkpoint.json", "--input", "ds/subject_000_x1.csv", "--out", "s",
    ]);
    assert_eq!(code, 2, "{err}");
    let (code, _) = w.sample("s", &["--start", "190"]);
    assert_eq!(code, 2);
    w.write("two.csv", &pulse_csv(50, 10.0, 70.0, &["a".into(), "b".into()]));
    let (code, err) = w.run(&["sample", "--checkpoint", "tr/checkpoint.json", "--input", "two.csv", "--out", "s"]);
    assert_eq!(code, 2, "{err}");
    let (code, _) = w.sample("s", &["--epsilon", "-1"]);
    assert_eq!(code, 2);
    assert!(!w.path("s").exists());
}

#[test]
fn corrupted_checkpoint_is_an_integrity_failure() {
    let w = Work::new().trained();
    let text = std::fs::read_to_string(w.path("tr/checkpoint.json")).unwrap();
    let i = text.find("\"step\":").unwrap() + 7;
    let mut bytes = text.into_bytes();
    bytes[i] = if bytes[i] == b'9' { b'8' } else { b'9' };
    std::fs::write(w.path("bad.json"), bytes).unwrap();
    let (code, err) = w.run(&[
        "sample", "--checkpoint", "bad.json", "--input", "ds/subject_000_x1.csv", "--start", "0", "--out", "s",
    ]);
    assert_eq!(code, 4, "{err}");
    let (code, _) = w.run(&["train", "--config", "train.toml", "--dataset", "ds", "--resume", "bad.json", "--out", "r"]);
    assert_eq!(code, 4);
}

#[test]
fn snapshot_range_writes_one_file_per_time() {
    let w = Work::new().trained();
    let (code, err) = w.sample("s", &["--snapshots", "0.1..1.0:0.1"]);
    assert_eq!(code, 0, "{err}");
    let mut snaps: Vec<String> = std::fs::read_dir(w.path("s"))
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .filter(|n| n.starts_with("snapshot_t"))
        .collect();
    snaps.sort();
    assert_eq!(snaps.len(), 10);
    assert_eq!(snaps[0], "snapshot_t0.10.csv");
    assert_eq!(snaps[9], "snapshot_t1.00.csv");
    let ens = read_ensemble(&w.path("s")).unwrap();
    assert_eq!(ens.members.len(), 3);
    assert_eq!(ens.members[0].nrows(), 50);
    let m = RunManifest::load(&w.path("s")).unwrap();
    assert_eq!(m.outputs.len(), 11);
    m.verify(&w.path("s")).unwrap();
}

#[test]
fn train_flags_reach_the_manifest_and_resume_continues() {
    let w = Work::new();
    w.ok(&["generate", "--config", "gen.toml", "--out", "ds"]);
    w.ok(&[
        "train", "--config", "train.toml", "--dataset", "ds", "--lambda-rcl", "0.1", "--delta-shift", "9", "--out", "tr",
    ]);
    let m = RunManifest::load(&w.path("tr")).unwrap();
    assert_eq!(m.command, "train");
    assert_eq!(m.config["lambda_rcl"], 0.1);
    assert_eq!(m.config["delta_shift"], 9.0);
    assert!(m.checkpoint_sha256.is_some());
    w.ok(&["train", "--config", "train.toml", "--dataset", "ds", "--resume", "tr/checkpoint_last.json", "--out", "tr2"]);
    let curve = std::fs::read_to_string(w.path("tr2/loss_curve.csv")).unwrap();
    let first_step: u64 = curve.lines().nth(1).unwrap().split(',').next().unwrap().parse().unwrap();
    assert_eq!(first_step, 5);
}

#[test]
fn manifest_detects_tampering() {
    let w = Work::new();
    w.ok(&["generate", "--config", "gen.toml", "--out", "ds"]);
    let m = RunManifest::load(&w.path("ds")).unwrap();
    m.verify(&w.path("ds")).unwrap();
    assert_eq!(m.seeds["synth"], 3);
    let f = w.path("ds/subject_001_x0.csv");
    let mut text = std::fs::read_to_string(&f).unwrap();
    text.push('\n');
    std::fs::write(&f, text).unwrap();
    assert!(m.verify(&w.path("ds")).is_err());
}

#[test]
fn generate_reruns_are_identical() {
    let w = Work::new();
    w.ok(&["generate", "--config", "gen.toml", "--seed", "11", "--out", "a"]);
    w.ok(&["generate", "--config", "gen.toml", "--seed", "11", "--out", "b"]);
    w.ok(&["generate", "--config", "gen.toml", "--seed", "12", "--out", "c"]);
    let read = |d: &str, f: &str| std::fs::read(w.path(d).join(f)).unwrap();
    for f in ["subject_000_x0.csv", "subject_002_x1.csv"] {
        assert_eq!(read("a", f), read("b", f));
        assert_ne!(read("a", f), read("c", f));
    }
}

#[test]
fn out_root_comes_from_the_environment() {
    let w = Work::new();
    let root = w.path("runs");
    let (code, err) = w.run_env(&["generate", "--config", "gen.toml"], &[(OUT_ROOT_ENV, &root)]);
    assert_eq!(code, 0, "{err}");
    assert!(root.join("generate/manifest.json").exists());
    w.ok(&["generate", "--config", "gen.toml"]);
    assert!(w.path("pulseflow_out/generate/manifest.json").exists());
}

/// Two-region ensemble whose realizations all equal the reference.
fn perfect_ensemble(w: &Work, dir: &str, members: usize, bpm: f64) {
    std::fs::create_dir_all(w.path(dir)).unwrap();
    let cols: Vec<String> =
        (0..members).flat_map(|k| ["cheek", "forehead"].map(|r| format!("r{k:03}_{r}"))).collect();
    w.write(&format!("{dir}/ensemble.csv"), &pulse_csv(100, 10.0, bpm, &cols));
    w.write(&format!("{dir}_gt.csv"), &pulse_csv(100, 10.0, bpm, &["pulse".to_string()]));
}

#[test]
fn evaluate_a_perfect_ensemble() {
    let w = Work::new();
    perfect_ensemble(&w, "e1", 4, 72.0);
    perfect_ensemble(&w, "e2", 4, 90.0);
    w.ok(&["evaluate", "--ensemble", "e1", "e2", "--gt", "e1_gt.csv", "e2_gt.csv", "--out", "ev"]);
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(w.path("ev/report.json")).unwrap()).unwrap();
    assert_eq!(report["pulse"]["mae"], 0.0);
    assert_eq!(report["uncertainty"]["sigma_floored"], true);
    assert!(report["bland_altman"].is_object());
    assert_eq!(report["windows"].as_array().unwrap().len(), 2);
    assert!((report["windows"][0]["gt_bpm"].as_f64().unwrap() - 72.0).abs() < 0.7);
    RunManifest::load(&w.path("ev")).unwrap().verify(&w.path("ev")).unwrap();

    w.ok(&["evaluate", "--ensemble", "e1", "--gt", "e1_gt.csv", "--band", "42", "150", "--out", "ev2"]);
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(w.path("ev2/report.json")).unwrap()).unwrap();
    assert_eq!(report["band"]["lo_bpm"], 42.0);
    assert_eq!(report["band"]["hi_bpm"], 150.0);
    assert!(report["bland_altman"].is_null());
}

#[test]
fn evaluate_rejects_mismatched_references() {
    let w = Work::new();
    perfect_ensemble(&w, "e1", 3, 72.0);
    w.write("short.csv", &pulse_csv(60, 10.0, 72.0, &["pulse".to_string()]));
    w.write("fast.csv", &pulse_csv(100, 25.0, 72.0, &["pulse".to_string()]));
    for gt in ["short.csv", "fast.csv"] {
        let (code, err) = w.run(&["evaluate", "--ensemble", "e1", "--gt", gt, "--out", "ev"]);
        assert_eq!(code, 2, "{gt}: {err}");
    }
    let (code, _) = w.run(&["evaluate", "--ensemble", "e1", "--gt", "e1_gt.csv", "--band", "150", "42", "--out", "ev"]);
    assert_eq!(code, 2);
    assert!(!w.path("ev").exists());
}

#[test]
fn gauge_needs_two_realizations() {
    let w = Work::new();
    perfect_ensemble(&w, "one", 1, 72.0);
    let (code, err) = w.run(&["gauge", "--ensemble", "one", "--out", "g"]);
    assert_eq!(code, 2, "{err}");
    perfect_ensemble(&w, "four", 4, 72.0);
    w.ok(&["gauge", "--ensemble", "four", "--out", "g"]);
    let csv = std::fs::read_to_string(w.path("g/gauge.csv")).unwrap();
    assert!(csv.lines().any(|l| l.starts_with("Repeatability,0,")), "{csv}");
}
