//! Accuracy as a function of the region cap `model.max_regions`.

use std::path::{Path, PathBuf};

use regionqa::pipeline::{self, PipelineConfig};

const TOY: &[&str] = &[
    "retrieval.k=2",
    "retrieval.u=3",
    "retrieval.p=3",
    "syndata.u=3",
    "syndata.cache_for_p=[3]",
    "syndata.dim=32",
    "model.model_dim=32",
    "model.heads=2",
    "model.encoder_layers=1",
    "model.visual_encoder_layers=1",
    "model.decoder_layers=2",
    "model.ffn_dim=64",
    "model.max_passage_tokens=24",
    "model.region_dim=32",
    "model.dropout=0.0",
    "optimizer.lr=3e-3",
    "optimizer.warmup_steps=50",
    "optimizer.weight_decay=0.0",
];

fn config(dir: &Path, extra: &[&str]) -> PipelineConfig {
    let overrides: Vec<String> = TOY.iter().chain(extra).map(|s| s.to_string()).collect();
    PipelineConfig::from_toml(None, &overrides, dir).unwrap()
}

fn workdir(name: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(name);
    let _ = std::fs::remove_dir_all(&dir);
    dir
}

fn main() {
    let dir = workdir("regionqa_sweep");
    let c = config(
        &dir,
        &["syndata.n_samples=64", "syndata.test_fraction=0.25", "eval.split=\"test\"", "optimizer.steps=150"],
    );
    pipeline::generate(&c, &dir).unwrap();
    let grid = vec![("model.max_regions".to_string(), ["1", "2", "5", "36"].map(String::from).to_vec())];
    for row in pipeline::sweep(&c, &grid).unwrap() {
        println!("{:<22} {:6.2}", row.setting, row.accuracy);
    }
    println!("table: {}", c.paths.output.join("sweep.csv").display());
}
