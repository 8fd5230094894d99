use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::{json, Value};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_rnsde"))
}

/// A complete config small enough to train and evaluate in seconds.
fn tiny_config(dir: &Path) -> PathBuf {
    let cfg = json!({
        "name": "tiny",
        "geometry": { "size": 16, "angle_step": 6.0, "theta_miss": 90.0 },
        "schedule": { "T": 8, "lambda2": 0.01 },
        "sampler": { "sa_count": 2, "travel_r": 1 },
        "dataset": { "n_train": 6, "n_test": 2, "phantom": { "size": 16 } },
        "paths": { "data": dir.join("data"), "checkpoints": dir.join("ckpt") },
        "pinv": { "model": { "width": 4, "levels": 2 }, "train": { "steps": 6, "phase1_steps": 3, "batch_size": 2, "eval_every": 3 } },
        "restorer": { "model": { "width": 4, "levels": 2 }, "train": { "steps": 6, "batch_size": 2, "eval_every": 3 } },
        "score": { "model": { "width": 4, "blocks": 1, "emb_dim": 8 }, "train": { "steps": 6, "batch_size": 2 } },
        "eval": { "theta_miss": [90.0], "runs": 2, "chunk": 3, "tv": { "iters": 5 } }
    });
    let path = dir.join("c.json");
    fs::write(&path, serde_json::to_string_pretty(&cfg).unwrap()).unwrap();
    path
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = run(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn error_line(out: &Output) -> Value {
    let text = String::from_utf8_lossy(&out.stderr);
    let line = text.lines().last().expect("an error line");
    serde_json::from_str(line).expect("machine-readable error")
}

fn prepare(dir: &Path) -> PathBuf {
    let c = tiny_config(dir);
    let c = s(&c).to_string();
    for cmd in ["train-pinv", "train-restorer", "train-score"] {
        if cmd == "train-pinv" {
            ok(&["dataset", "build", "--config", &c, "--out", s(&dir.join("runs/data"))]);
        }
        ok(&[cmd, "--config", &c, "--out", s(&dir.join(format!("runs/{cmd}")))]);
    }
    PathBuf::from(c)
}

#[test]
fn defaults_print_a_valid_config() {
    let out = ok(&["defaults"]);
    let v: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["schedule"]["T"], 100);
    assert_eq!(v["eval"]["theta_miss"], json!([60.0, 90.0, 120.0]));
}

#[test]
fn usage_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.json");
    fs::write(&bad, r#"{ "schedule": { "T": 0 } }"#).unwrap();
    let out = run(&["train-pinv", "--config", s(&bad), "--out", s(dir.path())]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(error_line(&out)["error"], "usage");
    let out = run(&["train-pinv", "--set", "no.such.key=1", "--out", s(dir.path())]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(run(&["frobnicate"]).status.code(), Some(2));
    let out = run(&["fbp", "--input", "x.rnt"]);
    assert_eq!(out.status.code(), Some(2), "missing --out is a usage error");
}

#[test]
fn evaluate_without_checkpoints_names_the_missing_artifact() {
    let dir = tempfile::tempdir().unwrap();
    let c = tiny_config(dir.path());
    let out = run(&["evaluate", "--config", s(&c), "--out", s(&dir.path().join("eval"))]);
    assert_eq!(out.status.code(), Some(3));
    let err = error_line(&out);
    assert_eq!(err["error"], "dependency");
    assert!(err["message"].as_str().unwrap().contains("pinv_miss90.rnt"), "{err}");
}

#[test]
fn project_then_fbp_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let c = tiny_config(dir.path());
    ok(&["dataset", "build", "--config", s(&c), "--out", s(&dir.path().join("r0"))]);
    let img = dir.path().join("data/miss90/test/p000006.img.rnt");
    ok(&["project", "--config", s(&c), "--input", s(&img), "--out", s(&dir.path().join("r1")), "--export-png"]);
    let stored = fs::read(dir.path().join("data/miss90/test/p000006.sino.rnt")).unwrap();
    assert_eq!(fs::read(dir.path().join("r1/sino.rnt")).unwrap(), stored);
    assert!(dir.path().join("r1/sino.png").exists());
    let sino = dir.path().join("r1/sino.rnt");
    ok(&["fbp", "--config", s(&c), "--input", s(&sino), "--out", s(&dir.path().join("r2"))]);
    let stored = fs::read(dir.path().join("data/miss90/test/p000006.fbp.rnt")).unwrap();
    assert_eq!(fs::read(dir.path().join("r2/fbp.rnt")).unwrap(), stored);
    let prov: Value = serde_json::from_str(&fs::read_to_string(dir.path().join("r2/provenance.json")).unwrap()).unwrap();
    assert_eq!(prov["inputs"].as_array().unwrap().len(), 2);
    assert_eq!(prov["input_hash"].as_str().unwrap().len(), 64);
}

#[test]
fn pipeline_sample_evaluate_and_ablate() {
    let dir = tempfile::tempdir().unwrap();
    let c = prepare(dir.path());
    let c = s(&c);
    let a = dir.path().join("sa");
    let b = dir.path().join("sb");
    for out in [&a, &b] {
        ok(&["sample", "--config", c, "--seed", "7", "--out", s(out), "--export-png"]);
    }
    for name in ["sample.rnt", "average.rnt", "trace_seed7.csv", "trace_seed8.csv", "sample.png", "config.json", "provenance.json"] {
        assert_eq!(fs::read(a.join(name)).unwrap(), fs::read(b.join(name)).unwrap(), "{name} differs");
    }
    let report: Value = serde_json::from_str(&fs::read_to_string(a.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["T_tt"], 9);
    assert_eq!(report["samples"].as_array().unwrap().len(), 2);
    let trace = fs::read_to_string(a.join("trace_seed7.csv")).unwrap();
    assert_eq!(trace.lines().count(), 1 + 9);

    let e = dir.path().join("eval");
    ok(&["evaluate", "--config", c, "--out", s(&e)]);
    let report: Value = serde_json::from_str(&fs::read_to_string(e.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["rows"].as_array().unwrap().len(), 7);
    assert_eq!(report["config"]["name"], "tiny");
    assert!(fs::read_to_string(e.join("table.txt")).unwrap().contains("RN-SDE SA"));

    let ab = dir.path().join("ablate");
    ok(&["ablate", "--config", c, "--sweep", "T=4,6,8", "--out", s(&ab)]);
    let report: Value = serde_json::from_str(&fs::read_to_string(ab.join("report.json")).unwrap()).unwrap();
    let rows = report["rows"].as_array().unwrap();
    assert_eq!(rows.len(), 3);
    for (row, t) in rows.iter().zip([4, 6, 8]) {
        assert_eq!(row["value"], t);
        for m in ["psnr", "ssim", "consistency"] {
            assert!(row[m]["mean"].is_number(), "{m}");
        }
    }
}
