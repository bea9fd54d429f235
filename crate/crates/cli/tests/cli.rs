use std::path::Path;
use std::process::{Command, Output};

fn egg(args: &[&str], root: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_egg-gae"))
        .args(args)
        .env("EGG_GAE_OUTPUT", root)
        .output()
        .expect("binary runs")
}

const SMALL: [&str; 12] = [
    "--dataset",
    "synthetic:60:3:1",
    "--max_epochs",
    "2",
    "--hidden",
    "8",
    "--batch_size",
    "30",
    "--ensemble",
    "2",
    "--set",
    "forest.n_trees=5",
];

fn step(cmd: &str, extra: &[&str], root: &Path) -> Output {
    let mut args = vec![cmd];
    args.extend_from_slice(&SMALL);
    args.extend_from_slice(extra);
    egg(&args, root)
}

#[test]
fn pipeline_steps_emit_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    for cmd in ["corrupt", "train", "impute", "evaluate"] {
        let out = step(cmd, &[], root);
        assert!(out.status.success(), "{cmd}: {}", String::from_utf8_lossy(&out.stderr));
    }
    let run = root.join("synthetic60x3c1s0/mcar/0.2/egg/0");
    for f in ["mask.csv", "split.json", "checkpoint.json", "history.json", "imputed.csv", "metrics.csv"] {
        assert!(run.join(f).exists(), "{f}");
    }
    let first = std::fs::read(run.join("metrics.csv")).unwrap();
    let out = step("evaluate", &[], root);
    assert!(out.status.success());
    let line = String::from_utf8(out.stdout).unwrap();
    assert!(line.contains("\"method\":\"egg\""));
    assert_eq!(std::fs::read(run.join("metrics.csv")).unwrap(), first);
}

#[test]
fn missing_artifact_gives_parseable_error_line() {
    let dir = tempfile::tempdir().unwrap();
    let out = step("impute", &[], dir.path());
    assert!(!out.status.success());
    let err = String::from_utf8(out.stderr).unwrap();
    let line = err.lines().last().unwrap();
    assert!(line.starts_with("error[missing_artifact]: "), "{line}");
    assert!(line.contains("mask.csv"));
}

#[test]
fn bad_flag_value_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = step("corrupt", &["--rate", "1.5"], dir.path());
    assert!(!out.status.success());
    let err = String::from_utf8(out.stderr).unwrap();
    assert!(err.lines().last().unwrap().starts_with("error[config]: "), "{err}");
}

#[test]
fn benchmark_then_report() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let out = step(
        "benchmark",
        &["--datasets", "synthetic:50:3,synthetic:70:3", "--methods", "mean,knn"],
        root,
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = std::fs::read_to_string(root.join("results.csv")).unwrap();
    assert_eq!(csv.lines().count(), 5);
    let out = egg(&["report"], root);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.contains("count of wins"));
    assert!(text.contains("unified average ranking"));
    assert!(root.join("summary.json").exists());
}

#[test]
fn config_file_with_flag_override() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.json");
    std::fs::write(&cfg, r#"{"dataset": "synthetic:40:3", "method": "mean", "rate": 0.1}"#).unwrap();
    let out = egg(&["run", "--config", cfg.to_str().unwrap(), "--rate", "0.3"], dir.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(dir.path().join("synthetic40x3c0s0/mcar/0.3/mean/0/metrics.csv").exists());
}
