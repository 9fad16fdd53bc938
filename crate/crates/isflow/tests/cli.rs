//! End-to-end checks of the command-line surface: artifact schemas, exit
//! codes, stage isolation, and run determinism.

use std::path::Path;
use std::process::Command;

use isflow::cli::{run_toy_ellipse, run_toy_rotation, ExperimentConfig};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_isflow"))
}

fn tiny_elliptic_config() -> String {
    r#"{
        "problem": {"kind": "elliptic", "l_c": 1.0, "truncation": 2,
                    "threshold": 0.8, "coarse_elements": 10},
        "flow": {"depth": 2, "hidden1": 8, "hidden2": 8,
                 "partition": {"kind": "odd_even"}},
        "weighting": {"theta": 0.85},
        "train": {"learning_rate": 0.001, "epochs": 2, "n_batches": 3, "seed": 5},
        "estimate": {"n_train_rom": 300, "n_sigma_w": 200, "n_mc": 400}
    }"#
    .to_string()
}

fn write(path: &Path, text: &str) {
    std::fs::write(path, text).unwrap();
}

#[test]
fn kl_command_writes_spectrum_csv() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("spectrum.csv");
    let status = bin()
        .args(["kl", "--lc", "1.0", "--modes", "16"])
        .arg("--out")
        .arg(&out)
        .status()
        .unwrap();
    assert!(status.success());
    let text = std::fs::read_to_string(&out).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next().unwrap(), "i,v_i,lambda_i");
    let rows: Vec<Vec<f64>> = lines
        .map(|l| l.split(',').map(|f| f.parse().unwrap()).collect())
        .collect();
    assert_eq!(rows.len(), 16);
    let ratio = rows[15][2] / rows[0][2];
    assert!(
        (ratio - 1.22e-3).abs() <= 0.02 * 1.22e-3,
        "lambda_16/lambda_1 = {ratio}"
    );

    // Single-mode spectrum.
    let out1 = dir.path().join("one.csv");
    let status = bin()
        .args(["kl", "--lc", "0.1", "--modes", "1"])
        .arg("--out")
        .arg(&out1)
        .status()
        .unwrap();
    assert!(status.success());
    assert_eq!(std::fs::read_to_string(&out1).unwrap().lines().count(), 2);
}

#[test]
fn config_errors_exit_with_code_2() {
    let dir = tempfile::tempdir().unwrap();
    let config_path = dir.path().join("bad.json");
    write(
        &config_path,
        &tiny_elliptic_config().replace("\"theta\": 0.85", "\"theta\": 0.85, \"typo\": 1"),
    );
    let status = bin()
        .arg("pipeline")
        .arg("--config")
        .arg(&config_path)
        .arg("--outdir")
        .arg(dir.path().join("out"))
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(2));

    // Missing file is also a configuration error.
    let status = bin()
        .arg("pipeline")
        .arg("--config")
        .arg(dir.path().join("missing.json"))
        .arg("--outdir")
        .arg(dir.path().join("out2"))
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(2));
}

#[test]
fn pipeline_is_reproducible_and_writes_all_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let config_path = dir.path().join("config.json");
    write(&config_path, &tiny_elliptic_config());

    for sub in ["a", "b"] {
        let status = bin()
            .arg("pipeline")
            .arg("--config")
            .arg(&config_path)
            .arg("--outdir")
            .arg(dir.path().join(sub))
            .status()
            .unwrap();
        assert!(status.success());
    }
    for name in [
        "dataset.csv",
        "weighted.csv",
        "weights.json",
        "model.json",
        "history.csv",
        "report.json",
        "artifacts.json",
    ] {
        assert!(
            dir.path().join("a").join(name).exists(),
            "missing artifact {name}"
        );
    }
    let a = std::fs::read(dir.path().join("a/report.json")).unwrap();
    let b = std::fs::read(dir.path().join("b/report.json")).unwrap();
    assert_eq!(a, b, "same config + seed must give a byte-identical report");

    // The model document is byte-identical too.
    let ma = std::fs::read(dir.path().join("a/model.json")).unwrap();
    let mb = std::fs::read(dir.path().join("b/model.json")).unwrap();
    assert_eq!(ma, mb);
}

#[test]
fn stages_run_standalone_from_prior_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let config_path = dir.path().join("config.json");
    write(&config_path, &tiny_elliptic_config());
    let data = dir.path().join("dataset.csv");
    let weighted = dir.path().join("weighted.csv");
    let meta = dir.path().join("weights.json");
    let model = dir.path().join("model.json");
    let history = dir.path().join("history.csv");
    let report = dir.path().join("report.json");
    let fidelity = dir.path().join("fidelity.json");

    let ok = |cmd: &mut Command| {
        let status = cmd.status().unwrap();
        assert!(status.success(), "stage failed");
    };

    ok(bin()
        .arg("sample-rom")
        .arg("--config")
        .arg(&config_path)
        .arg("--out")
        .arg(&data));
    ok(bin()
        .arg("fit-weights")
        .arg("--config")
        .arg(&config_path)
        .arg("--data")
        .arg(&data)
        .arg("--out")
        .arg(&weighted)
        .arg("--meta")
        .arg(&meta));
    ok(bin()
        .arg("train")
        .arg("--config")
        .arg(&config_path)
        .arg("--data")
        .arg(&weighted)
        .arg("--meta")
        .arg(&meta)
        .arg("--model-out")
        .arg(&model)
        .arg("--history-out")
        .arg(&history));
    ok(bin()
        .arg("estimate")
        .arg("--config")
        .arg(&config_path)
        .arg("--model")
        .arg(&model)
        .arg("--data")
        .arg(&data)
        .arg("--out")
        .arg(&report));
    ok(bin()
        .arg("fidelity")
        .arg("--config")
        .arg(&config_path)
        .arg("--data")
        .arg(&data)
        .arg("--out")
        .arg(&fidelity));

    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
    for key in ["mc", "is", "n_is_over_n_mc", "fidelity", "is_failed"] {
        assert!(report.get(key).is_some(), "report missing '{key}'");
    }
    let weights_meta: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&meta).unwrap()).unwrap();
    for key in ["theta", "c1", "c2", "sigma", "eps_max_neg"] {
        assert!(weights_meta.get(key).is_some(), "sidecar missing '{key}'");
    }
    let history_text = std::fs::read_to_string(&history).unwrap();
    assert!(history_text.starts_with("epoch,cross_entropy,penalty,wall_time_seconds"));
}

#[test]
fn toy_rotation_with_zero_learning_rate_has_flat_history() {
    let mut config = ExperimentConfig::default_rotation(9);
    config.train.learning_rate = 0.0;
    config.train.epochs = 3;
    config.estimate.n_train_rom = 500;
    let dir = tempfile::tempdir().unwrap();
    run_toy_rotation(&config, dir.path()).unwrap();
    let text = std::fs::read_to_string(dir.path().join("history.csv")).unwrap();
    let ce: Vec<&str> = text
        .lines()
        .skip(1)
        .map(|l| l.split(',').nth(1).unwrap())
        .collect();
    assert_eq!(ce.len(), 3);
    assert!(ce.iter().all(|&v| v == ce[0]), "history not flat: {ce:?}");
}

#[test]
fn ellipse_depth_sweep_writes_one_scatter_per_depth() {
    let mut config = ExperimentConfig::default_ellipse(3);
    config.train.epochs = 2;
    config.estimate.n_train_rom = 300;
    config.estimate.n_sigma_w = 200;
    config.estimate.n_mc = 200;
    config.flow.hidden1 = 8;
    config.flow.hidden2 = 8;
    let dir = tempfile::tempdir().unwrap();
    let reports = run_toy_ellipse(&config, dir.path(), &[2, 4]).unwrap();
    assert_eq!(reports.len(), 2);
    for depth in [2, 4] {
        assert!(dir.path().join(format!("samples_L{depth}.csv")).exists());
        assert!(dir.path().join(format!("history_L{depth}.csv")).exists());
        assert!(dir.path().join(format!("report_L{depth}.json")).exists());
    }
}
