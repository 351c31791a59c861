use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn run(args: &[&str], out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_asymfusion"))
        .args(args)
        .env("ASYMFUSION_OUT", out)
        .output()
        .expect("binary runs")
}

fn stdout_json(o: &Output) -> Value {
    serde_json::from_slice(&o.stdout).expect("stdout is JSON")
}

fn error_kind(o: &Output) -> String {
    let text = String::from_utf8_lossy(&o.stderr);
    let line = text.lines().rev().find(|l| l.starts_with('{')).expect("error record");
    let v: Value = serde_json::from_str(line).unwrap();
    v["error"]["kind"].as_str().unwrap().to_string()
}

const TINY: &[&str] = &["--epochs", "1", "--train-size", "16", "--test-size", "8"];

#[test]
fn unknown_flag_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&["gradcheck", "--bogus"], dir.path());
    assert_eq!(o.status.code(), Some(2));
    assert_eq!(error_kind(&o), "usage");
    let o = run(&["train", "--not-a-key", "3"], dir.path());
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn invalid_config_exits_with_three() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&["count-params", "--net.classes", "9"], dir.path());
    assert_eq!(o.status.code(), Some(3));
    assert_eq!(error_kind(&o), "config");
    let cfg = dir.path().join("bad.json");
    std::fs::write(&cfg, r#"{"net": {"widths": 3}}"#).unwrap();
    let o = run(&["train", "--config", cfg.to_str().unwrap()], dir.path());
    assert_eq!(o.status.code(), Some(3));
}

#[test]
fn unknown_block_exits_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&["verify-symmetry", "--block", "nonsense"], dir.path());
    assert_eq!(o.status.code(), Some(2));
    assert_eq!(error_kind(&o), "unknown_block");
}

#[test]
fn preset_reports_the_per_modality_delta() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&["count-params", "--preset", "resnet101-shape"], dir.path());
    assert!(o.status.success());
    let v = stdout_json(&o);
    assert_eq!(v["extra_per_modality"], 105_344);
    assert_eq!(v["encoder_norm_channels"], 52_672);
}

#[test]
fn count_params_honours_overrides() {
    let dir = tempfile::tempdir().unwrap();
    let one = stdout_json(&run(&["count-params", "--modalities", "1"], dir.path()));
    let two = stdout_json(&run(&["count-params"], dir.path()));
    let per_set = two["encoder_norm_set"].as_u64().unwrap();
    assert_eq!(two["total"].as_u64().unwrap() - one["total"].as_u64().unwrap(), per_set + 1);
}

#[test]
fn train_then_eval_reproduces_the_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let mut args = vec!["train", "--out", out.to_str().unwrap()];
    args.extend_from_slice(TINY);
    let o = run(&args, dir.path());
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let first = std::fs::read(out.join("metrics.json")).unwrap();
    assert!(out.join("checkpoint.bin").exists());
    assert!(out.join("checkpoint.manifest.json").exists());

    let o = run(&args, dir.path());
    assert!(o.status.success());
    assert_eq!(first, std::fs::read(out.join("metrics.json")).unwrap());

    let ck = out.join("checkpoint.bin");
    let mut eval_args = vec!["eval", "--checkpoint", ck.to_str().unwrap(), "--out", out.to_str().unwrap()];
    eval_args.extend_from_slice(TINY);
    let o = run(&eval_args, dir.path());
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let trained: Value = serde_json::from_slice(&first).unwrap();
    let evaluated: Value = serde_json::from_str(&std::fs::read_to_string(out.join("eval.json")).unwrap()).unwrap();
    assert_eq!(trained["metrics"], evaluated["metrics"]);
}

#[test]
fn gen_data_uses_the_environment_output_dir() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&["gen-data", "--train-size", "8", "--test-size", "2"], dir.path());
    assert!(o.status.success());
    assert!(dir.path().join("train.afds").exists());
    assert!(dir.path().join("test.afds").exists());
    let v = stdout_json(&o);
    assert_eq!(v["train"]["samples"], 8);
    let again = stdout_json(&run(&["gen-data", "--train-size", "8", "--test-size", "2"], dir.path()));
    assert_eq!(v["train"]["checksum"], again["train"]["checksum"]);
}

#[test]
fn verify_symmetry_single_block() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&["verify-symmetry", "--block", "average", "--trials", "3"], dir.path());
    assert!(o.status.success());
    let v = stdout_json(&o);
    assert_eq!(v[0]["verdict"], "symmetric_constructive");
}
