//! CLI contract tests: exit codes, output files, override flags.

use std::path::Path;
use std::process::Command;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_ringbalance"))
}

fn write_config(dir: &Path) -> std::path::PathBuf {
    let config = serde_json::json!({
        "workers": [
            {"rank": 0, "per_sample_cost_ns": 1_000_000},
            {"rank": 1, "per_sample_cost_ns": 2_000_000}
        ],
        "model": {"kind": "softmax", "input_dim": 4, "output_dim": 2},
        "dataset": {"synthetic": {"seed": 11, "size": 400, "separation": 3.0}},
        "mode": "adaptive",
        "minibatch": 1,
        "samples_per_aggregation": 20,
        "learning_rate": 0.01,
        "weight_decay": 0.0001,
        "epochs": 4,
        "seed": 7
    });
    let path = dir.join("config.json");
    std::fs::write(&path, serde_json::to_string_pretty(&config).unwrap()).unwrap();
    path
}

#[test]
fn run_writes_csv_and_json() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path());
    let out = dir.path().join("results");
    let status = bin()
        .args(["run", "--config"])
        .arg(&config)
        .args(["--mode", "adaptive", "--out"])
        .arg(&out)
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(0));
    assert!(out.join("run.csv").exists());
    assert!(out.join("run.json").exists());
    let text = std::fs::read_to_string(out.join("run.csv")).unwrap();
    assert!(text.starts_with("epoch,worker,w,t_s_ns,t_w_ns,t_c_ns,T_ns,loss"));
}

#[test]
fn seed_determines_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path());
    let mut outputs = Vec::new();
    for name in ["a", "b"] {
        let out = dir.path().join(name);
        let status = bin()
            .args(["run", "--config"])
            .arg(&config)
            .args(["--seed", "99", "--out"])
            .arg(&out)
            .status()
            .unwrap();
        assert_eq!(status.code(), Some(0));
        outputs.push(std::fs::read(out.join("run.json")).unwrap());
    }
    assert_eq!(outputs[0], outputs[1]);
}

#[test]
fn invalid_config_exits_1() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path());
    let mut doc: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&config).unwrap()).unwrap();
    doc["learning_rate"] = serde_json::json!(0.0);
    std::fs::write(&config, doc.to_string()).unwrap();
    let status = bin()
        .args(["run", "--config"])
        .arg(&config)
        .args(["--out"])
        .arg(dir.path().join("out"))
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(1));
}

#[test]
fn unknown_flag_exits_64() {
    let status = bin().args(["run", "--bogus"]).status().unwrap();
    assert_eq!(status.code(), Some(64));
}

#[test]
fn verify_allocator_passes() {
    let output = bin()
        .args(["verify-allocator", "--n", "2..5", "--trials", "100", "--seed", "7"])
        .output()
        .unwrap();
    assert_eq!(output.status.code(), Some(0), "{output:?}");
    let text = String::from_utf8(output.stdout).unwrap();
    assert!(text.contains("max relative residual"));
    assert!(text.contains("OK"));
}

#[test]
fn gradcheck_passes() {
    for model in ["linear_regression", "softmax", "mlp"] {
        let output = bin()
            .args(["gradcheck", "--model", model, "--trials", "25", "--seed", "7"])
            .output()
            .unwrap();
        assert_eq!(output.status.code(), Some(0), "{model}: {output:?}");
    }
}

#[test]
fn sweep_writes_summary() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path());
    let out = dir.path().join("sweep");
    let status = bin()
        .args(["sweep", "--config"])
        .arg(&config)
        .args(["--costs", "1ms,2ms", "--costs", "1ms,5ms", "--out"])
        .arg(&out)
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(0));
    assert!(out.join("run_0.csv").exists());
    assert!(out.join("run_1.json").exists());
    let summary = std::fs::read_to_string(out.join("summary.csv")).unwrap();
    assert_eq!(summary.lines().count(), 3);
    // Adaptive beats equal on both heterogeneous clusters.
    for line in summary.lines().skip(1) {
        let speedup: f64 = line.rsplit(',').next().unwrap().parse().unwrap();
        assert!(speedup > 1.0, "{line}");
    }
}
