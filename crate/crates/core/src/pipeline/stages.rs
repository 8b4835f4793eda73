//! Stage implementations behind the CLI subcommands.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::PipelineConfig;
use super::retrieval::{build_examples, build_fusion_input, build_vocab, load_artifacts, load_resources, load_samples, retrieve_sample, RetrievalRecord};
use super::{read_jsonl, require, write_file, write_jsonl, Manifest, PipelineError, Prediction};
use crate::eval::{score_dataset, EvalReport, QASample};
use crate::fusion::{checkpoint, ensemble, train::loss_curve_csv, FusionModel};
use crate::oracle::ReplayCache;
use crate::syndata::{self, SynPaths};

pub const RETRIEVAL_FILE: &str = "retrieval.jsonl";
pub const PREDICTIONS_FILE: &str = "predictions.jsonl";
pub const REPORT_FILE: &str = "report.json";
pub const REPORT_CSV: &str = "report.csv";
const PROMPT_FORMAT: &str = "context: {caption}. {tag_1}, ..., {tag_P}. question: {question}";

fn out(config: &PipelineConfig, name: &str) -> PathBuf {
    config.paths.output.join(name)
}

/// Writes a synthetic dataset into `dir` using `config.syndata`.
pub fn generate(config: &PipelineConfig, dir: &Path) -> Result<SynPaths, PipelineError> {
    let data = syndata::generate(&config.syndata)?;
    let paths = data.write(dir)?;
    let mut m = Manifest::new("generate", config);
    m.seed = config.syndata.seed;
    m.outputs = ["kb.jsonl", "kb.rvem", "tags.txt", "tags.rvem", "regions", "samples.jsonl", "labels.jsonl", "oracle_cache.jsonl"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    m.details = serde_json::to_value(&config.syndata).expect("syndata config serializes");
    m.write(dir)?;
    Ok(paths)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IngestSummary {
    pub kb_entries: usize,
    pub tags: usize,
    pub images: usize,
    pub regions: usize,
    pub images_without_regions: Vec<String>,
    pub embedding_dim: usize,
    pub region_norm: crate::regions::EmbeddingNorm,
    pub samples: usize,
}

/// Loads and validates every input and records a summary.
pub fn ingest(config: &PipelineConfig) -> Result<IngestSummary, PipelineError> {
    let res = load_resources(config)?;
    let dims: Vec<usize> = res.artifacts.values().map(|a| a.embedding_dim).collect();
    let embedding_dim = res.kb.index().dim();
    if let Some(d) = dims.iter().find(|&&d| d != embedding_dim) {
        return Err(PipelineError::Config(format!(
            "region embeddings have dimension {d}, knowledge base has {embedding_dim}"
        )));
    }
    if res.tags.index().dim() != embedding_dim {
        return Err(PipelineError::Config(format!(
            "tag embeddings have dimension {}, knowledge base has {embedding_dim}",
            res.tags.index().dim()
        )));
    }
    let has_regions = res.artifacts.values().any(|a| a.num_regions() > 0);
    if has_regions && embedding_dim != config.model.region_dim {
        return Err(PipelineError::Config(format!(
            "region embeddings have dimension {embedding_dim} but model.region_dim is {}",
            config.model.region_dim
        )));
    }
    let summary = IngestSummary {
        kb_entries: res.kb.len(),
        tags: res.tags.len(),
        images: res.artifacts.len(),
        regions: res.artifacts.values().map(|a| a.num_regions()).sum(),
        images_without_regions: res
            .artifacts
            .values()
            .filter(|a| a.num_regions() == 0)
            .map(|a| a.image_id.clone())
            .collect(),
        embedding_dim,
        region_norm: config.retrieval.region_norm,
        samples: res.samples.len(),
    };
    let p = &config.paths;
    let mut m = Manifest::new("ingest", config)
        .input("kb", &p.kb)?
        .input("kb_embeddings", &p.kb_embeddings)?
        .input("tags", &p.tags)?
        .input("tag_embeddings", &p.tag_embeddings)?
        .input("samples", &p.samples)?;
    m.outputs = vec!["ingest.json".into()];
    m.details = serde_json::json!({ "region_norm": config.retrieval.region_norm });
    write_file(&out(config, "ingest.json"), serde_json::to_string_pretty(&summary).expect("summary") + "\n")?;
    m.write(&config.paths.output)?;
    Ok(summary)
}

/// Retrieval for every sample, answered from the replay cache only.
pub fn retrieve(config: &PipelineConfig) -> Result<Vec<RetrievalRecord>, PipelineError> {
    let res = load_resources(config)?;
    require(&config.paths.cache, "oracle replay cache")?;
    let oracle = ReplayCache::open(&config.paths.cache, None)?;
    let records: Vec<RetrievalRecord> = res
        .samples
        .par_iter()
        .map(|s| retrieve_sample(config, &res, s, &oracle))
        .collect::<Result<_, _>>()?;
    write_jsonl(&out(config, RETRIEVAL_FILE), &records)?;
    let p = &config.paths;
    let mut m = Manifest::new("retrieve", config)
        .input("kb", &p.kb)?
        .input("tags", &p.tags)?
        .input("samples", &p.samples)?
        .input("cache", &p.cache)?;
    m.outputs = vec![RETRIEVAL_FILE.into()];
    m.details = serde_json::json!({
        "prompt_format": PROMPT_FORMAT,
        "u": config.retrieval.u,
        "k": config.retrieval.k,
        "p": config.retrieval.p,
        "cache_hits": oracle.hits(),
    });
    m.write(&config.paths.output)?;
    Ok(records)
}

fn load_records(config: &PipelineConfig) -> Result<BTreeMap<String, RetrievalRecord>, PipelineError> {
    let records: Vec<RetrievalRecord> = read_jsonl(&out(config, RETRIEVAL_FILE), "retrieval output (run `retrieve` first)")?;
    Ok(records.into_iter().map(|r| (r.sample_id.clone(), r)).collect())
}

fn record_for<'a>(
    records: &'a BTreeMap<String, RetrievalRecord>,
    sample: &QASample,
) -> Result<&'a RetrievalRecord, PipelineError> {
    records.get(&sample.sample_id).ok_or_else(|| PipelineError::Missing {
        artifact: format!("retrieval record for sample {} (rerun `retrieve`)", sample.sample_id),
        path: PathBuf::from(RETRIEVAL_FILE),
    })
}

pub fn checkpoint_name(seed: u64) -> String {
    format!("model_seed{seed}.rvck")
}

/// Trains one model per ensemble seed on the non-test samples.
pub fn train(config: &PipelineConfig) -> Result<Vec<PathBuf>, PipelineError> {
    let records = load_records(config)?;
    let samples = load_samples(&config.paths.samples)?;
    let artifacts = load_artifacts(config)?;
    let train_samples: Vec<&QASample> = samples.iter().filter(|s| !s.is_test()).collect();
    if train_samples.is_empty() {
        return Err(PipelineError::Config("no training samples (every sample is in the test split)".into()));
    }
    let pairs: Vec<(&QASample, &RetrievalRecord)> = train_samples
        .iter()
        .map(|s| Ok((*s, record_for(&records, s)?)))
        .collect::<Result<_, PipelineError>>()?;
    let all: Vec<RetrievalRecord> = records.values().cloned().collect();
    let targets: Vec<String> = train_samples.iter().map(|s| s.training_target()).collect();
    let vocab = build_vocab(&all, &targets);

    let seeds = config.seeds();
    let results: Vec<(u64, FusionModel, String)> = seeds
        .par_iter()
        .map(|&seed| {
            let mut model = FusionModel::new(config.model.clone(), vocab.clone(), seed)?;
            let examples = build_examples(&model, &pairs, &artifacts, &config.fusion)?;
            let curve = crate::fusion::train(&mut model, &examples, &config.optimizer, seed)?;
            Ok((seed, model, loss_curve_csv(&curve)))
        })
        .collect::<Result<_, PipelineError>>()?;

    let mut paths = Vec::new();
    let mut m = Manifest::new("train", config).input("retrieval", &out(config, RETRIEVAL_FILE))?;
    for (seed, model, csv) in &results {
        let ckpt = out(config, &checkpoint_name(*seed));
        write_file(&ckpt, checkpoint::to_bytes(model))?;
        let loss = format!("loss_seed{seed}.csv");
        write_file(&out(config, &loss), csv)?;
        m.outputs.push(checkpoint_name(*seed));
        m.outputs.push(loss);
        paths.push(ckpt);
    }
    m.details = serde_json::json!({
        "seeds": seeds,
        "train_samples": pairs.len(),
        "vocab_size": vocab.len(),
    });
    m.write(&config.paths.output)?;
    Ok(paths)
}

fn eval_samples(config: &PipelineConfig, samples: Vec<QASample>) -> Vec<QASample> {
    match &config.eval.split {
        Some(split) => samples
            .into_iter()
            .filter(|s| s.split.as_deref().unwrap_or("train") == split)
            .collect(),
        None => samples,
    }
}

/// Predicts every evaluated sample with the given checkpoints, or with the
/// checkpoints listed by the train manifest.
pub fn predict(config: &PipelineConfig, checkpoints: Option<&[PathBuf]>) -> Result<Vec<Prediction>, PipelineError> {
    let paths: Vec<PathBuf> = match checkpoints {
        Some(c) => c.to_vec(),
        None => Manifest::read(&config.paths.output, "train")?
            .outputs
            .iter()
            .filter(|o| o.ends_with(".rvck"))
            .map(|o| out(config, o))
            .collect(),
    };
    if paths.is_empty() {
        return Err(PipelineError::Config("no checkpoints to predict with".into()));
    }
    let mut models = Vec::with_capacity(paths.len());
    for p in &paths {
        require(p, "model checkpoint")?;
        models.push(checkpoint::load(p)?);
    }
    let records = load_records(config)?;
    let artifacts = load_artifacts(config)?;
    let samples = eval_samples(config, load_samples(&config.paths.samples)?);
    let predictions: Vec<Prediction> = samples
        .par_iter()
        .map(|s| {
            let r = record_for(&records, s)?;
            let input = build_fusion_input(r, artifacts.get(&r.image_id), &config.fusion)?;
            Ok(Prediction {
                sample_id: s.sample_id.clone(),
                answer: ensemble::predict(&models, &input)?,
            })
        })
        .collect::<Result<_, PipelineError>>()?;
    write_jsonl(&out(config, PREDICTIONS_FILE), &predictions)?;
    let mut m = Manifest::new("predict", config).input("retrieval", &out(config, RETRIEVAL_FILE))?;
    for p in &paths {
        let name = p.file_name().map_or_else(|| p.display().to_string(), |n| n.to_string_lossy().into_owned());
        m = m.input(&name, p)?;
    }
    m.outputs = vec![PREDICTIONS_FILE.into()];
    m.write(&config.paths.output)?;
    Ok(predictions)
}

/// Scores predictions against the evaluated samples.
pub fn eval(config: &PipelineConfig, predictions: Option<&Path>) -> Result<EvalReport, PipelineError> {
    let pred_path = predictions.map_or_else(|| out(config, PREDICTIONS_FILE), Path::to_path_buf);
    let preds: Vec<Prediction> = read_jsonl(&pred_path, "predictions (run `predict` first)")?;
    let by_id: BTreeMap<&str, &str> = preds.iter().map(|p| (p.sample_id.as_str(), p.answer.as_str())).collect();
    let mut samples = eval_samples(config, load_samples(&config.paths.samples)?);
    for s in &mut samples {
        s.prediction = by_id.get(s.sample_id.as_str()).map(|a| a.to_string());
    }
    let report = score_dataset(&samples, config.eval.soft_accuracy)?;
    let summary = serde_json::json!({
        "accuracy": report.accuracy,
        "samples": report.samples,
        "missing_predictions": report.missing_predictions,
        "soft_accuracy": config.eval.soft_accuracy,
        "split": config.eval.split,
    });
    write_file(&out(config, REPORT_FILE), serde_json::to_string_pretty(&summary).expect("report") + "\n")?;
    write_file(&out(config, REPORT_CSV), report.to_csv())?;
    let mut m = Manifest::new("eval", config)
        .input("predictions", &pred_path)?
        .input("samples", &config.paths.samples)?;
    m.outputs = vec![REPORT_FILE.into(), REPORT_CSV.into()];
    m.write(&config.paths.output)?;
    Ok(report)
}

/// `retrieve → train → predict → eval`, after validating inputs.
pub fn run_all(config: &PipelineConfig) -> Result<EvalReport, PipelineError> {
    ingest(config)?;
    retrieve(config)?;
    train(config)?;
    predict(config, None)?;
    eval(config, None)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub setting: String,
    pub accuracy: f64,
}

fn cartesian(grid: &[(String, Vec<String>)]) -> Vec<Vec<String>> {
    let mut out: Vec<Vec<String>> = vec![Vec::new()];
    for (key, values) in grid {
        out = out
            .iter()
            .flat_map(|prefix| {
                values.iter().map(move |v| {
                    let mut p = prefix.clone();
                    p.push(format!("{key}={v}"));
                    p
                })
            })
            .collect();
    }
    out
}

fn sanitize(s: &str) -> String {
    s.chars()
        .map(|c| if c.is_ascii_alphanumeric() || matches!(c, '.' | '=' | '-' | '_') { c } else { '_' })
        .collect()
}

/// Runs the full pipeline for every combination of grid values, each in its
/// own subdirectory of the output directory.
pub fn sweep(config: &PipelineConfig, grid: &[(String, Vec<String>)]) -> Result<Vec<SweepRow>, PipelineError> {
    if grid.is_empty() || grid.iter().any(|(_, v)| v.is_empty()) {
        return Err(PipelineError::Config("sweep grid needs at least one value per key".into()));
    }
    let base = toml::Value::try_from(config).map_err(|e| PipelineError::Config(e.to_string()))?;
    let mut rows = Vec::new();
    for (i, setting) in cartesian(grid).iter().enumerate() {
        let mut table = base.as_table().cloned().expect("config is a table");
        for o in setting {
            super::config::apply_override(&mut table, o)?;
        }
        let mut c: PipelineConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| PipelineError::Config(e.to_string()))?;
        c.validate()?;
        let label = setting.join(",");
        c.paths.output = config.paths.output.join("sweep").join(format!("{i:03}_{}", sanitize(&label)));
        log::info!("sweep {label}");
        let report = run_all(&c)?;
        rows.push(SweepRow {
            setting: label,
            accuracy: report.accuracy,
        });
    }
    let mut csv = String::from("setting,accuracy\n");
    for r in &rows {
        csv.push_str(&format!("\"{}\",{:.4}\n", r.setting, r.accuracy));
    }
    write_file(&out(config, "sweep.csv"), csv)?;
    write_file(&out(config, "sweep.json"), serde_json::to_string_pretty(&rows).expect("rows") + "\n")?;
    let mut m = Manifest::new("sweep", config);
    m.outputs = vec!["sweep.csv".into(), "sweep.json".into()];
    m.details = serde_json::to_value(grid).expect("grid");
    m.write(&config.paths.output)?;
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_product_order() {
        let g = vec![
            ("a".to_string(), vec!["1".to_string(), "2".to_string()]),
            ("b".to_string(), vec!["x".to_string()]),
        ];
        assert_eq!(cartesian(&g), vec![vec!["a=1", "b=x"], vec!["a=2", "b=x"]]);
        assert_eq!(sanitize("model.max_regions=5,a b"), "model.max_regions=5_a_b");
    }
}
