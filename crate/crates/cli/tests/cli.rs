use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn tppo(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tppo"))
        .args(args)
        .env_remove("TPPO_OUT_DIR")
        .output()
        .expect("binary runs")
}

fn stdout_json(out: &Output) -> Value {
    assert!(
        out.status.success(),
        "exit {:?}: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    serde_json::from_slice(&out.stdout).expect("stdout is one JSON object")
}

fn single_error_line(out: &Output) -> String {
    let err = String::from_utf8(out.stderr.clone()).unwrap();
    assert_eq!(err.lines().count(), 1, "stderr: {err}");
    assert!(err.starts_with("error: "), "stderr: {err}");
    err
}

fn small_config(dir: &Path) -> String {
    let path = dir.join("small.json");
    std::fs::write(
        &path,
        r#"{"total_steps": 12, "eval_every": 6, "eval_tasks": 2, "eval_samples": 2,
            "checkpoint_every": 6, "hidden": 8, "K": 4}"#,
    )
    .unwrap();
    path.display().to_string()
}

#[test]
fn simulate_fixed_lengths_reports_three() {
    let out = tppo(&["simulate", "--dist", "fixed", "--steps", "50"]);
    let v = stdout_json(&out);
    assert_eq!(v["speedup"], 3.0);
}

#[test]
fn simulate_writes_csv() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("sim/out.csv");
    let out = tppo(&[
        "simulate",
        "--dist",
        "lognormal:0.6",
        "--steps",
        "20",
        "--out",
        csv.to_str().unwrap(),
    ]);
    let v = stdout_json(&out);
    assert!(v["speedup"].as_f64().unwrap() > 1.0);
    let text = std::fs::read_to_string(&csv).unwrap();
    assert_eq!(text.lines().count(), 21);
    assert!(text.starts_with("step,vanilla_walltime,windowed_walltime,cumulative_speedup"));
}

#[test]
fn window_longer_than_max_is_a_runtime_error() {
    let out = tppo(&["simulate", "--l", "100"]);
    assert_eq!(out.status.code(), Some(1));
    single_error_line(&out);
}

#[test]
fn usage_errors_exit_two() {
    for args in [&["frobnicate"][..], &["simulate", "--steps", "many"][..]] {
        let out = tppo(args);
        assert_eq!(out.status.code(), Some(2), "{args:?}");
        assert!(single_error_line(&out).starts_with("error: usage: "));
    }
}

#[test]
fn unknown_algorithm_and_config_keys_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let out = tppo(&["train", "--algo", "sarsa", "--out", dir.path().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    single_error_line(&out);

    let cfg = dir.path().join("bad.json");
    std::fs::write(&cfg, r#"{"learning_rate": 0.1}"#).unwrap();
    let out = tppo(&["train", "--config", cfg.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    assert!(single_error_line(&out).contains("learning_rate"));
}

#[test]
fn train_eval_export_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let run = dir.path().join("run");
    let out = tppo(&["train", "--config", &cfg, "--seed", "3", "--out", run.to_str().unwrap()]);
    let v = stdout_json(&out);
    assert_eq!(v["steps"], 12);
    assert_eq!(v["algorithm"], "tppo");

    for file in [
        "config.json",
        "metrics.jsonl",
        "metrics.csv",
        "events.jsonl",
        "trace.jsonl",
        "final.ckpt",
        "checkpoint_000006.ckpt",
        "checkpoint_000012.ckpt",
        "manifest.json",
    ] {
        assert!(run.join(file).is_file(), "missing {file}");
    }
    let jsonl = std::fs::read_to_string(run.join("metrics.jsonl")).unwrap();
    assert_eq!(jsonl.lines().count(), 12);
    let manifest: Value =
        serde_json::from_str(&std::fs::read_to_string(run.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["seed"], 3);
    assert!(manifest["files"].as_array().unwrap().iter().any(|f| f["path"] == "final.ckpt"));

    let ckpt = run.join("final.ckpt");
    let out = tppo(&["eval", "--checkpoint", ckpt.to_str().unwrap(), "--samples", "4"]);
    let v = stdout_json(&out);
    let success = v["success"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&success));
    assert_eq!(v["metric"], "avg@4");

    let csv = dir.path().join("exported.csv");
    let out = tppo(&[
        "export",
        "--input",
        run.join("metrics.jsonl").to_str().unwrap(),
        "--out",
        csv.to_str().unwrap(),
    ]);
    assert_eq!(stdout_json(&out)["rows"], 12);
    assert_eq!(
        std::fs::read(&csv).unwrap(),
        std::fs::read(run.join("metrics.csv")).unwrap()
    );
}

#[test]
fn same_seed_gives_identical_metrics_files() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let read = |name: &str| {
        let run = dir.path().join(name);
        stdout_json(&tppo(&["train", "--config", &cfg, "--out", run.to_str().unwrap()]));
        std::fs::read(run.join("metrics.jsonl")).unwrap()
    };
    assert_eq!(read("a"), read("b"));
}

#[test]
fn out_dir_from_environment() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let run = dir.path().join("from-env");
    let out = Command::new(env!("CARGO_BIN_EXE_tppo"))
        .args(["train", "--config", &cfg, "--algo", "ppo"])
        .env("TPPO_OUT_DIR", &run)
        .output()
        .unwrap();
    assert_eq!(stdout_json(&out)["algorithm"], "vanilla_ppo");
    assert!(run.join("metrics.jsonl").is_file());
}

#[test]
fn compare_writes_side_by_side_csv() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let run = dir.path().join("cmp");
    let v = stdout_json(&tppo(&["compare", "--config", &cfg, "--out", run.to_str().unwrap()]));
    assert_eq!(v["threshold"], 0.9);
    assert!(run.join("tppo/metrics.jsonl").is_file());
    assert!(run.join("vanilla_ppo/metrics.jsonl").is_file());
    let csv = std::fs::read_to_string(run.join("compare.csv")).unwrap();
    assert_eq!(csv.lines().count(), 13);
    assert!(csv.starts_with("step,tppo_walltime,ppo_walltime"));
}
