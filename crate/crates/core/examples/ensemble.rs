//! Majority vote over independently seeded models, compared with each member.

use std::path::{Path, PathBuf};

use regionqa::fusion::majority_vote;
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
    println!("vote(red, Blue, the red) = {:?}", majority_vote(&["red", "Blue", "the red"]));
    println!("vote(blue, red) = {:?} (tie goes to the first model)", majority_vote(&["blue", "red"]));

    let dir = workdir("regionqa_ensemble");
    let c = config(
        &dir,
        &[
            "syndata.n_samples=128",
            "syndata.test_fraction=0.25",
            "syndata.mix.explicit=0",
            "eval.split=\"test\"",
            "optimizer.steps=150",
            "ensemble_seeds=[0,1,2]",
        ],
    );
    pipeline::generate(&c, &dir).unwrap();
    pipeline::ingest(&c).unwrap();
    pipeline::retrieve(&c).unwrap();
    let ckpts = pipeline::train(&c).unwrap();
    for ck in &ckpts {
        pipeline::predict(&c, Some(std::slice::from_ref(ck))).unwrap();
        let r = pipeline::eval(&c, None).unwrap();
        println!("{:<20} {:6.2}", ck.file_name().unwrap().to_string_lossy(), r.accuracy);
    }
    pipeline::predict(&c, None).unwrap();
    println!("{:<20} {:6.2}", "ensemble", pipeline::eval(&c, None).unwrap().accuracy);
}
