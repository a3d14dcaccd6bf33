use std::path::Path;
use std::process::{Command, Output};

use pbf_rbdo::artifacts::{self, artifact};
use pbf_rbdo::optimize::OptimizeConfig;
use pbf_rbdo::pipeline::{run_all, run_simulations, PipelineConfig, TrainingData};
use pbf_rbdo::thermal::DesignPoint;
use tempfile::TempDir;

const BIN: &str = env!("CARGO_BIN_EXE_pbf-rbdo");

fn small_cfg(dir: &Path) -> PipelineConfig {
    PipelineConfig {
        runs: 44,
        n_val: 10,
        optimize: OptimizeConfig {
            n_mc: 300,
            max_iters: 80,
            restarts: 1,
            ..OptimizeConfig::default()
        },
        output_dir: dir.to_path_buf(),
        ..PipelineConfig::default()
    }
}

fn read(dir: &Path, name: &str) -> Vec<u8> {
    std::fs::read(artifact(dir, name)).unwrap_or_else(|e| panic!("{name}: {e}"))
}

fn cli(args: &[&str]) -> Output {
    Command::new(BIN).args(args).output().unwrap()
}

fn write_config(dir: &Path, cfg: &PipelineConfig) -> String {
    let path = dir.join("config.json");
    std::fs::write(&path, serde_json::to_string_pretty(cfg).unwrap()).unwrap();
    path.to_string_lossy().into_owned()
}

#[test]
fn training_data_round_trips_through_csv() {
    let dir = TempDir::new().unwrap();
    let cfg = PipelineConfig {
        synthetic: true,
        ..small_cfg(dir.path())
    };
    let data = run_simulations(&cfg).unwrap();
    data.save(dir.path()).unwrap();
    let back = TrainingData::load(dir.path()).unwrap();
    assert_eq!(back.doe, data.doe);
    assert_eq!(back.temps, data.temps);
    assert_eq!(back.stress, data.stress);
}

#[test]
fn bundle_round_trips_through_json() {
    let dir = TempDir::new().unwrap();
    let cfg = PipelineConfig {
        synthetic: true,
        ..small_cfg(dir.path())
    };
    let (bundle, _) = pbf_rbdo::pipeline::run_training(&cfg).unwrap();
    let back = artifacts::load_bundle(&artifact(dir.path(), artifacts::BUNDLE_FILE)).unwrap();
    assert_eq!(back, bundle);
    let text = String::from_utf8(read(dir.path(), artifacts::BUNDLE_FILE)).unwrap();
    let v: serde_json::Value = serde_json::from_str(&text).unwrap();
    assert_eq!(v["schema_version"], artifacts::SCHEMA_VERSION);
    assert!(v["kind"].is_string() && v["data"].is_object());
}

#[test]
fn pipeline_is_byte_for_byte_reproducible() {
    let (a, b) = (TempDir::new().unwrap(), TempDir::new().unwrap());
    let starts = [DesignPoint::new(500.0, 160.0)];
    run_all(&small_cfg(a.path()), &starts).unwrap();
    run_all(&small_cfg(b.path()), &starts).unwrap();
    for name in [
        artifacts::DOE_FILE,
        artifacts::TEMPERATURE_FILE,
        artifacts::STRESS_FILE,
        artifacts::BUNDLE_FILE,
        artifacts::TRAINING_REPORT_FILE,
        artifacts::OPTIMIZE_FILE,
    ] {
        assert_eq!(read(a.path(), name), read(b.path(), name), "{name} differs");
    }
}

#[test]
fn risk_subcommand_reports_every_measure() {
    let dir = TempDir::new().unwrap();
    let path = dir.path().join("samples.txt");
    let text: String = (1..=100).map(|i| format!("{i}\n")).collect();
    std::fs::write(&path, text).unwrap();
    let out = cli(&["risk", path.to_str().unwrap(), "--alpha", "0.9", "--tau", "90"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8(out.stdout).unwrap();
    let value = |key: &str| -> f64 {
        let line = stdout
            .lines()
            .find(|l| l.starts_with(key))
            .unwrap_or_else(|| panic!("no {key} in {stdout}"));
        line[key.len()..].trim().parse().unwrap()
    };
    assert_eq!(value("quantile:"), 91.0);
    assert!((value("superquantile:") - 95.5).abs() < 1e-9);
    assert!((value("pof:") - 0.1).abs() < 1e-12);
    // Top 21 values average exactly 90: minform bpof is 0.21 at zeta = 80.
    assert!((value("bpof:") - 0.21).abs() < 1e-12);
    assert_eq!(value("zeta:"), 80.0);
}

#[test]
fn train_without_simulate_exits_one() {
    let dir = TempDir::new().unwrap();
    let out = cli(&["train", "--output", dir.path().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("simulate"), "{stderr}");
}

#[test]
fn usage_errors_exit_two() {
    assert_eq!(cli(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(cli(&["optimize", "--d0", "fast"]).status.code(), Some(2));
    assert_eq!(cli(&["--help"]).status.code(), Some(0));
}

#[test]
fn malformed_config_exits_one() {
    let dir = TempDir::new().unwrap();
    let path = dir.path().join("bad.json");
    std::fs::write(&path, "{ runs: ").unwrap();
    let out = cli(&["simulate", "--config", path.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn cli_optimize_with_a_seed_is_reproducible() {
    let dir = TempDir::new().unwrap();
    let out_dir = dir.path().join("out");
    let cfg = PipelineConfig {
        synthetic: true,
        ..small_cfg(&out_dir)
    };
    let config = write_config(dir.path(), &cfg);
    let out_s = out_dir.to_str().unwrap();
    for args in [
        vec!["simulate", "--config", &config, "--output", out_s],
        vec!["train", "--config", &config, "--output", out_s, "--plot-data"],
    ] {
        let out = cli(&args);
        assert!(
            out.status.success(),
            "{args:?}: {}",
            String::from_utf8_lossy(&out.stderr)
        );
    }
    let header = String::from_utf8(read(&out_dir, "err_curve_T.csv")).unwrap();
    assert!(header.starts_with("k,err\n"));

    let optimize = || {
        let out = cli(&[
            "optimize", "--config", &config, "--output", out_s, "--seed", "7", "--d0", "500,160",
        ]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        read(&out_dir, artifacts::OPTIMIZE_FILE)
    };
    let first = optimize();
    assert_eq!(first, optimize());
    let v: serde_json::Value = serde_json::from_slice(&first).unwrap();
    assert_eq!(v["data"]["seed"], 7);
}
