//! Full offline run: synthetic inputs, retrieval from the replay cache,
//! training, prediction and scoring, each stage leaving a manifest.

use std::path::{Path, PathBuf};

use regionqa::pipeline::{self, Manifest, PipelineConfig};

// Retrieval counts and model size shrunk so the run takes seconds.
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
    let dir = workdir("regionqa_pipeline");
    let c = config(&dir, &["syndata.n_samples=32", "optimizer.steps=300"]);
    pipeline::generate(&c, &dir).unwrap();

    let summary = pipeline::ingest(&c).unwrap();
    println!("ingest: {} kb entries, {} tags, {} images, {} samples", summary.kb_entries, summary.tags, summary.images, summary.samples);
    let records = pipeline::retrieve(&c).unwrap();
    let r = &records[0];
    println!("retrieve: {} records; first prompt: {}", records.len(), r.prompt_x);
    let ckpts = pipeline::train(&c).unwrap();
    println!("train: {}", ckpts[0].display());
    let preds = pipeline::predict(&c, None).unwrap();
    for p in preds.iter().take(4) {
        println!("  {} -> {}", p.sample_id, p.answer);
    }
    let report = pipeline::eval(&c, None).unwrap();
    println!("eval: accuracy {:.2} on {} samples", report.accuracy, report.samples);

    for stage in ["ingest", "retrieve", "train", "predict", "eval"] {
        let m = Manifest::read(&c.paths.output, stage).unwrap();
        println!("{stage:>8}.manifest.json  config {}  outputs {:?}", &m.config_hash[..12], m.outputs);
    }
}
