mod common;

use std::fs;
use std::path::Path;
use std::process::Command;

use common::toy_config;
use regionqa::eval::QASample;
use regionqa::pipeline::{self, read_jsonl, write_jsonl, PipelineError, Prediction};

fn generated(dir: &Path, extra: &[&str]) -> regionqa::pipeline::PipelineConfig {
    let c = toy_config(dir, extra);
    pipeline::generate(&c, dir).unwrap();
    c
}

#[test]
fn rerun_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let base = &["syndata.n_samples=12", "optimizer.steps=20", "ensemble_seeds=[0,1]"];
    let a = generated(dir.path(), base);
    let mut b = a.clone();
    b.paths.output = dir.path().join("out2");
    pipeline::run_all(&a).unwrap();
    pipeline::run_all(&b).unwrap();
    for name in [
        "retrieval.jsonl",
        "model_seed0.rvck",
        "model_seed1.rvck",
        "loss_seed1.csv",
        "predictions.jsonl",
        "report.json",
        "report.csv",
        "train.manifest.json",
        "predict.manifest.json",
    ] {
        let x = fs::read(a.paths.output.join(name)).unwrap();
        assert_eq!(x, fs::read(b.paths.output.join(name)).unwrap(), "{name}");
    }
}

#[test]
fn manifests_record_config_and_inputs() {
    let dir = tempfile::tempdir().unwrap();
    let c = generated(dir.path(), &["syndata.n_samples=6", "optimizer.steps=2"]);
    pipeline::run_all(&c).unwrap();
    for stage in ["ingest", "retrieve", "train", "predict", "eval"] {
        let m = pipeline::Manifest::read(&c.paths.output, stage).unwrap();
        assert_eq!(m.config_hash, c.hash());
        assert_eq!(m.version, env!("CARGO_PKG_VERSION"));
    }
    let m = pipeline::Manifest::read(&c.paths.output, "retrieve").unwrap();
    assert_eq!(m.inputs["samples"], pipeline::file_sha256(&c.paths.samples).unwrap());
}

#[test]
fn missing_inputs_are_named() {
    let dir = tempfile::tempdir().unwrap();
    let c = toy_config(dir.path(), &[]);
    match pipeline::ingest(&c) {
        Err(PipelineError::Missing { artifact, path }) => {
            assert_eq!(artifact, "knowledge base");
            assert_eq!(path, dir.path().join("kb.jsonl"));
        }
        other => panic!("{other:?}"),
    }
    let c = generated(dir.path(), &["syndata.n_samples=4"]);
    let err = pipeline::train(&c).unwrap_err();
    assert_eq!(err.kind(), "missing_input");
    assert!(err.to_string().contains("retrieve"));
    fs::remove_file(&c.paths.cache).unwrap();
    assert!(matches!(pipeline::retrieve(&c), Err(PipelineError::Missing { .. })));
}

#[test]
fn eval_of_ground_truth_is_perfect() {
    let dir = tempfile::tempdir().unwrap();
    let c = generated(dir.path(), &["syndata.n_samples=10"]);
    let samples: Vec<QASample> = read_jsonl(&c.paths.samples, "samples").unwrap();
    let preds: Vec<Prediction> = samples
        .iter()
        .map(|s| Prediction { sample_id: s.sample_id.clone(), answer: s.training_target() })
        .collect();
    let path = dir.path().join("truth.jsonl");
    write_jsonl(&path, &preds).unwrap();
    let r = pipeline::eval(&c, Some(&path)).unwrap();
    assert_eq!((r.accuracy, r.samples, r.missing_predictions), (100.0, 10, 0));
    write_jsonl(&path, &preds[..5]).unwrap();
    let r = pipeline::eval(&c, Some(&path)).unwrap();
    assert_eq!((r.accuracy, r.missing_predictions), (50.0, 5));
}

#[test]
fn sweep_over_region_cap() {
    let dir = tempfile::tempdir().unwrap();
    let c = generated(dir.path(), &["syndata.n_samples=6", "optimizer.steps=2", "model.max_regions=50"]);
    let grid = vec![("model.max_regions".to_string(), ["5", "18", "36", "50"].map(String::from).to_vec())];
    let rows = pipeline::sweep(&c, &grid).unwrap();
    let settings: Vec<&str> = rows.iter().map(|r| r.setting.as_str()).collect();
    assert_eq!(settings, ["model.max_regions=5", "model.max_regions=18", "model.max_regions=36", "model.max_regions=50"]);
    assert!(rows.iter().all(|r| (0.0..=100.0).contains(&r.accuracy)));
    let csv = fs::read_to_string(c.paths.output.join("sweep.csv")).unwrap();
    assert_eq!(csv.lines().count(), 5);
    assert!(c.paths.output.join("sweep/003_model.max_regions=50/report.json").exists());
}

fn cli(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_regionqa")).args(args).output().unwrap()
}

#[test]
fn cli_generates_runs_and_reports_errors_as_json() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path().to_str().unwrap();
    let mut set: Vec<&str> = Vec::new();
    for o in common::TOY.iter().chain(&["syndata.n_samples=6", "optimizer.steps=3"]) {
        set.extend(["--set", o]);
    }
    let mut args = vec!["generate", "--out", d];
    args.extend(&set);
    assert!(cli(&args).status.success());
    let config = dir.path().join("config.toml");
    let cfg = config.to_str().unwrap();

    let out = cli(&["run", "--config", cfg]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["samples"], 6);

    let out = cli(&["eval", "--config", cfg, "--predictions", "/nonexistent/p.jsonl"]);
    assert!(!out.status.success());
    let err: serde_json::Value = serde_json::from_slice(&out.stderr).unwrap();
    assert_eq!(err["error"], "missing_input");
    assert_eq!(err["path"], "/nonexistent/p.jsonl");

    let out = cli(&["ingest", "--config", cfg, "--set", "retrieval.bogus=1"]);
    assert!(!out.status.success());
    let err: serde_json::Value = serde_json::from_slice(&out.stderr).unwrap();
    assert_eq!(err["error"], "config");
}

#[test]
fn ingest_rejects_region_width_mismatch() {
    let dir = tempfile::tempdir().unwrap();
    let c = generated(dir.path(), &["syndata.n_samples=4"]);
    let mut wide = c.clone();
    wide.model.region_dim = 512;
    let err = pipeline::ingest(&wide).unwrap_err();
    assert!(err.to_string().contains("model.region_dim is 512"), "{err}");
    pipeline::ingest(&c).unwrap();
}
