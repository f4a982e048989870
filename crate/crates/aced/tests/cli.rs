//! End-to-end checks of the `aced` binary: artifact layout and exit codes.

use std::fs;
use std::path::Path;
use std::process::Command;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_aced"))
}

fn short_config(dir: &Path, extra: &str) -> std::path::PathBuf {
    let path = dir.join("config.json");
    let blocks: Vec<String> = [(0, 0.0), (1, 0.2), (0, 0.4), (1, 0.2), (1, 0.4)]
        .iter()
        .map(|(o, e)| format!(r#"{{"objective": {o}, "epsilon": {e}, "length": 400}}"#))
        .collect();
    let text = format!(
        r#"{{
  "schedule": [{}],
  "total_steps": 2000,
  "warmup_steps": 200,
  "replay_capacity": 4000,
  "presample_size": 20,
  "batch_size": 4,
  "eval_episodes": 3,
  "log_stride": 100{}
}}"#,
        blocks.join(","),
        extra
    );
    fs::write(&path, text).unwrap();
    path
}

#[test]
fn run_eval_and_analyze_roundtrip() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = short_config(dir.path(), "");
    let out = dir.path().join("aced_run");
    let status = bin()
        .args(["run", "--config"])
        .arg(&cfg)
        .args(["--seed", "1", "--out"])
        .arg(&out)
        .status()
        .unwrap();
    assert!(status.success());
    for artifact in ["config.json", "metrics.csv", "evals.csv", "diagnostics.json"] {
        assert!(out.join(artifact).exists(), "missing {artifact}");
    }
    assert!(out.join("snapshot/models.bin").exists());
    assert!(out.join("snapshot/replay.bin").exists());
    assert!(out.join("snapshot/state.json").exists());

    let eval = bin()
        .args(["eval", "--snapshot"])
        .arg(&out)
        .args(["--episodes", "2"])
        .output()
        .unwrap();
    assert!(eval.status.success());
    let report: serde_json::Value = serde_json::from_slice(&eval.stdout).unwrap();
    assert_eq!(report["episodes"], 2);
    assert_eq!(report["returns"].as_array().unwrap().len(), 2);

    let cfg2 = short_config(dir.path(), r#", "mode": "uniform-weights""#);
    let out2 = dir.path().join("uniform_run");
    assert!(bin()
        .args(["run", "--config"])
        .arg(&cfg2)
        .args(["--seed", "1", "--out"])
        .arg(&out2)
        .status()
        .unwrap()
        .success());
    let winrate = bin()
        .args(["analyze", "winrate", "--inputs"])
        .arg(&out)
        .arg(&out2)
        .output()
        .unwrap();
    assert!(winrate.status.success());
    let table: serde_json::Value = serde_json::from_slice(&winrate.stdout).unwrap();
    let total: f64 = table
        .as_object()
        .unwrap()
        .values()
        .map(|v| v.as_f64().unwrap())
        .sum();
    assert!((total - 100.0).abs() < 1e-9, "win rates sum to {total}");
}

#[test]
fn config_errors_exit_with_code_two() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.json");
    fs::write(&bad, r#"{"mode": "bogus"}"#).unwrap();
    let output = bin()
        .args(["run", "--config"])
        .arg(&bad)
        .args(["--seed", "0", "--out"])
        .arg(dir.path().join("out"))
        .output()
        .unwrap();
    assert_eq!(output.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&output.stderr);
    assert!(stderr.contains("mode"), "stderr: {stderr}");

    let unknown_key = dir.path().join("unknown.json");
    fs::write(&unknown_key, r#"{"learning_rate": 0.1}"#).unwrap();
    let output = bin()
        .args(["run", "--config"])
        .arg(&unknown_key)
        .args(["--seed", "0", "--out"])
        .arg(dir.path().join("out2"))
        .output()
        .unwrap();
    assert_eq!(output.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&output.stderr).contains("learning_rate"));
}

#[test]
fn runtime_errors_exit_with_code_one() {
    // A missing snapshot directory is a runtime error, not a config error.
    let output = bin()
        .args(["eval", "--snapshot", "/nonexistent/run", "--episodes", "1"])
        .output()
        .unwrap();
    assert_eq!(output.status.code(), Some(1));
}

#[test]
fn oracle_value_iter_reports_fixed_point() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("vi.json");
    fs::write(&cfg, r#"{"fixture": "chain", "tol": 1e-10}"#).unwrap();
    let output = bin()
        .args(["oracle", "value-iter", "--config"])
        .arg(&cfg)
        .output()
        .unwrap();
    assert!(output.status.success());
    let report: serde_json::Value = serde_json::from_slice(&output.stdout).unwrap();
    let q = report["q_star"][0].as_f64().unwrap();
    assert!((q - 2.0).abs() < 1e-8, "q_star {q}");
}
