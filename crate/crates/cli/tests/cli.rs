use std::path::Path;
use std::process::{Command, Output};

use serde_json::{json, Value};

fn flowpose(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_flowpose"))
        .current_dir(dir)
        .env("FLOWPOSE_LOG", "error")
        .args(args)
        .output()
        .expect("spawn flowpose")
}

fn ok(dir: &Path, args: &[&str]) -> Output {
    let out = flowpose(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn fails_with(dir: &Path, args: &[&str], needle: &str) {
    let out = flowpose(dir, args);
    assert!(!out.status.success(), "{args:?} should fail");
    let err = String::from_utf8_lossy(&out.stderr);
    assert_eq!(err.trim_end().lines().count(), 1, "diagnostic should be one line: {err}");
    assert!(err.contains(needle), "expected {needle:?} in {err}");
}

fn read(dir: &Path, name: &str) -> Vec<u8> {
    std::fs::read(dir.join(name)).unwrap_or_else(|e| panic!("{name}: {e}"))
}

const SMALL: &str = "[train]\nepochs = 2\nsequences = 10\nbatch = 4\n";

fn keypoint_file(frames: usize) -> Value {
    let frames: Vec<Value> = (0..frames)
        .map(|t| {
            let kp: Vec<Value> = (0..8)
                .map(|j| {
                    if j == 5 {
                        Value::Null
                    } else {
                        json!([100.0 + 3.0 * j as f64 + t as f64, 80.0 + 10.0 * j as f64, 0.9])
                    }
                })
                .collect();
            json!({ "crop": { "cx": 112.0, "cy": 112.0, "size": 224.0 }, "keypoints": kp })
        })
        .collect();
    json!({ "fps": 25.0, "joints": 8, "frames": frames })
}

#[test]
fn generate_is_byte_identical_across_runs() {
    let d = tempfile::tempdir().unwrap();
    ok(d.path(), &["generate", "--seed", "5", "--sequences", "3", "--out", "a.fpds"]);
    ok(d.path(), &["generate", "--seed", "5", "--sequences", "3", "--out", "b.fpds", "--threads", "3"]);
    ok(d.path(), &["generate", "--seed", "6", "--sequences", "3", "--out", "c.fpds"]);
    assert_eq!(read(d.path(), "a.fpds"), read(d.path(), "b.fpds"));
    assert_ne!(read(d.path(), "a.fpds"), read(d.path(), "c.fpds"));
}

#[test]
fn train_is_deterministic_across_thread_counts() {
    let d = tempfile::tempdir().unwrap();
    std::fs::write(d.path().join("c.toml"), SMALL).unwrap();
    ok(d.path(), &["--config", "c.toml", "--seed", "2", "train", "--out", "r1"]);
    ok(d.path(), &["--config", "c.toml", "--seed", "2", "--threads", "4", "train", "--out", "r4"]);
    for f in ["checkpoint.json", "metrics.csv"] {
        assert_eq!(read(d.path(), &format!("r1/{f}")), read(d.path(), &format!("r4/{f}")), "{f}");
    }
    let csv = String::from_utf8(read(d.path(), "r1/metrics.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert!(lines[0].starts_with("epoch,total,nll,"));
    assert_eq!(lines.len(), 4, "header plus epochs 0..=2");
}

#[test]
fn eval_writes_csv_and_json_and_is_reproducible() {
    let d = tempfile::tempdir().unwrap();
    ok(d.path(), &["generate", "--seed", "1", "--sequences", "2", "--out", "d.fpds"]);
    let args = ["eval", "--checkpoint", "init", "--dataset", "d.fpds", "--samples", "4"];
    ok(d.path(), &[&args[..], &["--out", "e1"]].concat());
    ok(d.path(), &[&args[..], &["--out", "e2", "--threads", "2"]].concat());
    assert_eq!(read(d.path(), "e1/report.csv"), read(d.path(), "e2/report.csv"));
    assert_eq!(read(d.path(), "e1/report.json"), read(d.path(), "e2/report.json"));
    let csv = String::from_utf8(read(d.path(), "e1/report.csv")).unwrap();
    assert_eq!(csv.lines().count(), 4);
    assert!(csv.lines().last().unwrap().starts_with("all,"));
    let v: Value = serde_json::from_slice(&read(d.path(), "e1/report.json")).unwrap();
    assert_eq!(v["sequences"].as_array().unwrap().len(), 2);
    assert!(v["aggregate"]["min_over_n"]["mean"].as_f64().unwrap() > 0.0);
}

#[test]
fn sample_from_keypoint_file() {
    let d = tempfile::tempdir().unwrap();
    std::fs::write(d.path().join("kp.json"), keypoint_file(5).to_string()).unwrap();
    ok(d.path(), &["sample", "--checkpoint", "init", "--keypoints", "kp.json", "--samples", "3", "--out", "s.json"]);
    ok(d.path(), &["sample", "--checkpoint", "init", "--keypoints", "kp.json", "--samples", "3", "--out", "t.json"]);
    assert_eq!(read(d.path(), "s.json"), read(d.path(), "t.json"));
    let v: Value = serde_json::from_slice(&read(d.path(), "s.json")).unwrap();
    let frames = v["frames"].as_array().unwrap();
    assert_eq!(frames.len(), 5);
    for f in frames {
        let h = f["hypotheses"].as_array().unwrap();
        assert_eq!(h.len(), 3);
        for x in h {
            assert_eq!(x["theta_axis_angle"].as_array().unwrap().len(), 24);
            assert!(x["log_prob"].as_f64().unwrap().is_finite());
        }
    }
}

#[test]
fn fit_and_export_mesh_agree() {
    let d = tempfile::tempdir().unwrap();
    std::fs::write(d.path().join("kp.json"), keypoint_file(3).to_string()).unwrap();
    std::fs::write(d.path().join("c.toml"), "[fit]\nmax_iters = 20\n").unwrap();
    ok(
        d.path(),
        &["--config", "c.toml", "fit", "--checkpoint", "init", "--keypoints", "kp.json", "--out", "f.json", "--meshes", "m"],
    );
    ok(d.path(), &["export-mesh", "--fit", "f.json", "--out", "n"]);
    let v: Value = serde_json::from_slice(&read(d.path(), "f.json")).unwrap();
    let frames = v["frames"].as_array().unwrap();
    assert_eq!(frames.len(), 3);
    for f in frames {
        let trace: Vec<f64> = f["energy_trace"].as_array().unwrap().iter().map(|e| e.as_f64().unwrap()).collect();
        assert!(trace.last().unwrap() <= &trace[0]);
    }
    for t in 0..3 {
        let name = format!("frame_{t:04}.obj");
        let obj = read(d.path(), &format!("m/{name}"));
        assert_eq!(obj, read(d.path(), &format!("n/{name}")));
        let text = String::from_utf8(obj).unwrap();
        assert!(text.lines().any(|l| l.starts_with("v ")));
        assert!(text.lines().any(|l| l.starts_with("f ")));
    }
}

#[test]
fn errors_are_one_line_and_nonzero() {
    let d = tempfile::tempdir().unwrap();
    fails_with(d.path(), &["eval", "--checkpoint", "missing.json", "--dataset", "x", "--out", "o"], "missing.json");
    std::fs::write(d.path().join("bad.json"), "{\"fps\": 25, \"joints\": 8, \"frames\": [{}]}").unwrap();
    fails_with(
        d.path(),
        &["sample", "--checkpoint", "init", "--keypoints", "bad.json", "--out", "s.json"],
        "frame 0",
    );
    std::fs::write(d.path().join("c.toml"), "[train]\nbatch = 0\n").unwrap();
    fails_with(d.path(), &["--config", "c.toml", "train", "--out", "r"], "batch");
    fails_with(d.path(), &["sample", "--checkpoint", "init", "--out", "s.json"], "--keypoints");
}

#[test]
fn every_flag_is_described_in_help() {
    let dir = tempfile::tempdir().unwrap();
    for sub in ["generate", "train", "eval", "sample", "fit", "export-mesh"] {
        let help = String::from_utf8(ok(dir.path(), &[sub, "--help"]).stdout).unwrap();
        for line in help.lines().map(str::trim_start).filter(|l| l.starts_with("--") || l.starts_with("-h")) {
            let described = line.split("  ").filter(|p| !p.trim().is_empty()).count() >= 2;
            assert!(described, "{sub}: undocumented flag `{line}`");
        }
    }
    fails_with(dir.path(), &["generate", "--out", "x", "--bogus"], "--bogus");
}
