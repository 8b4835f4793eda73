#![allow(dead_code)]

use std::path::Path;

use rand::Rng;
use regionqa::pipeline::PipelineConfig;

/// Exhaustive max-over-queries scan: `(id, score)` sorted by score
/// descending, then id ascending.
pub fn brute_force_topk(items: &[Vec<f32>], ids: &[String], queries: &[Vec<f32>], k: usize) -> Vec<(String, f64)> {
    let mut scored: Vec<(String, f64)> = items
        .iter()
        .zip(ids)
        .map(|(item, id)| {
            let best = queries
                .iter()
                .map(|q| {
                    let mut s = 0.0f64;
                    for d in 0..q.len() {
                        s += f64::from(q[d]) * f64::from(item[d]);
                    }
                    s
                })
                .fold(f64::NEG_INFINITY, f64::max);
            (id.clone(), best)
        })
        .collect();
    scored.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    scored.truncate(k);
    scored
}

pub fn random_rows<R: Rng>(rng: &mut R, n: usize, dim: usize) -> Vec<Vec<f32>> {
    (0..n).map(|_| (0..dim).map(|_| rng.random_range(-1.0f32..1.0)).collect()).collect()
}

/// Small retrieval counts and a toy-sized model, so a full pipeline run
/// takes seconds on one core.
pub const TOY: &[&str] = &[
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
    "optimizer.batch_size=8",
    "optimizer.weight_decay=0.0",
];

pub fn toy_config(dir: &Path, extra: &[&str]) -> PipelineConfig {
    let overrides: Vec<String> = TOY.iter().chain(extra).map(|s| s.to_string()).collect();
    PipelineConfig::from_toml(None, &overrides, dir).expect("toy config")
}
