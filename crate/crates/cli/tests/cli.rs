use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const SMALL: &str = "\
seed = 3

[synth]
users = 40
items = 30
aux_behaviors = 2
blocks = 2
density = 0.3, 0.3, 0.15
noise_rate = 0.1

[data]
min_target = 2
relation_top_k = 5
transitions = consecutive

[model]
dim = 8
layers = 1
keep_prob = 0.8

[stage1]
epochs = 3
batch_size = 64
learning_rate = 0.01
lambda_rec = 1.0
delta = 0.2

[stage2]
epochs = 2
batch_size = 64
learning_rate = 0.01

[stage3]
epochs = 2
batch_size = 64
learning_rate = 0.01
prompt_variant = add

[eval]
mode = full
k = 10
";

fn dpt(dir: &Path, args: &[&str]) -> Output {
    let config = dir.join("small.conf");
    if !config.exists() {
        fs::write(&config, SMALL).unwrap();
    }
    Command::new(env!("CARGO_BIN_EXE_dpt"))
        .arg("--config")
        .arg(&config)
        .arg("--out")
        .arg(dir.join("out"))
        .args(args)
        .output()
        .unwrap()
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = dpt(dir, args);
    assert!(
        out.status.success(),
        "dpt {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

#[test]
fn stage2_without_stage1_names_the_missing_artifact() {
    let dir = tempfile::tempdir().unwrap();
    ok(dir.path(), &["synth"]);
    ok(dir.path(), &["prepare"]);
    let out = dpt(dir.path(), &["stage2"]);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("stage1.ckpt"), "{err}");
}

#[test]
fn full_pipeline_writes_checkpoints_and_metrics() {
    let dir = tempfile::tempdir().unwrap();
    for cmd in ["synth", "prepare", "stage1", "stage2", "stage3"] {
        ok(dir.path(), &[cmd]);
    }
    let out = dir.path().join("out");
    for name in ["stage1.ckpt", "stage2.ckpt", "stage3-add.ckpt", "denoised.tsv"] {
        assert!(out.join(name).exists(), "{name} missing");
    }
    let mut records = Vec::new();
    for stage in ["1", "2", "3"] {
        let line = ok(dir.path(), &["evaluate", "--stage", stage]);
        let v: serde_json::Value = serde_json::from_str(line.trim()).unwrap();
        assert_eq!(v["stage"].to_string(), stage);
        let hr = v["HR"].as_f64().unwrap();
        assert!((0.0..=1.0).contains(&hr));
        records.push(v);
    }
    assert_eq!(records.len(), 3);
    assert_eq!(records[2]["prompt_variant"], "add");

    // Rerunning evaluation is byte-identical.
    let first = fs::read(out.join("metrics-stage2.jsonl")).unwrap();
    ok(dir.path(), &["evaluate", "--stage", "2"]);
    assert_eq!(first, fs::read(out.join("metrics-stage2.jsonl")).unwrap());

    let report = ok(dir.path(), &["denoise-report"]);
    let v: serde_json::Value = serde_json::from_str(report.trim()).unwrap();
    assert!(v["precision"].as_f64().is_some());
}

#[test]
fn changed_config_is_rejected_by_later_stages() {
    let dir = tempfile::tempdir().unwrap();
    for cmd in ["synth", "prepare", "stage1"] {
        ok(dir.path(), &[cmd]);
    }
    let out = dpt(dir.path(), &["stage2", "--seed", "99"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("config"));
}

#[test]
fn gradcheck_passes() {
    let dir = tempfile::tempdir().unwrap();
    assert!(ok(dir.path(), &["gradcheck"]).contains("PASS"));
}
