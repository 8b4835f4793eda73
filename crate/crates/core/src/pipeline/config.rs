//! Declarative pipeline configuration.
//!
//! A TOML file is parsed into a table, `key.path=value` overrides are applied
//! to that table, and the result is deserialized. Every section has defaults
//! and unknown keys are rejected. Relative paths resolve against the config
//! file's directory.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::PipelineError;
use crate::eval::SoftAccuracy;
use crate::fusion::{ModelConfig, OptimizerConfig};
use crate::kb::default_categories;
use crate::oracle::DEFAULT_CANDIDATES_U;
use crate::regions::{EmbeddingNorm, DEFAULT_EXPLICIT_K, DEFAULT_TAGS_P};
use crate::syndata::SynConfig;
use crate::vecindex::Aggregation;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub kb: PathBuf,
    pub kb_embeddings: PathBuf,
    pub tags: PathBuf,
    pub tag_embeddings: PathBuf,
    /// Directory of per-image region JSON files.
    pub regions: PathBuf,
    pub samples: PathBuf,
    pub cache: PathBuf,
    /// Stage outputs are written here.
    pub output: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            kb: "kb.jsonl".into(),
            kb_embeddings: "kb.rvem".into(),
            tags: "tags.txt".into(),
            tag_embeddings: "tags.rvem".into(),
            regions: "regions".into(),
            samples: "samples.jsonl".into(),
            cache: "oracle_cache.jsonl".into(),
            output: "out".into(),
        }
    }
}

impl Paths {
    fn resolve(&mut self, base: &Path) {
        for p in [
            &mut self.kb,
            &mut self.kb_embeddings,
            &mut self.tags,
            &mut self.tag_embeddings,
            &mut self.regions,
            &mut self.samples,
            &mut self.cache,
            &mut self.output,
        ] {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RetrievalConfig {
    /// Implicit candidates per sample.
    pub u: usize,
    /// Explicit knowledge entries per sample.
    pub k: usize,
    /// Tags per image in the context prompt.
    pub p: usize,
    pub categories: Vec<String>,
    pub aggregation: Aggregation,
    pub region_norm: EmbeddingNorm,
}

impl Default for RetrievalConfig {
    fn default() -> Self {
        Self {
            u: DEFAULT_CANDIDATES_U,
            k: DEFAULT_EXPLICIT_K,
            p: DEFAULT_TAGS_P,
            categories: default_categories(),
            aggregation: Aggregation::GlobalMax,
            region_norm: EmbeddingNorm::AsStored,
        }
    }
}

/// Text used as the question passage.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QuestionMode {
    /// The bare question.
    Plain,
    /// Caption and question, no tags.
    Context,
    /// Caption, retrieved tags and question.
    #[default]
    ContextTags,
}

/// Which sources reach the fusion model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FusionFlags {
    pub visual: bool,
    pub explicit: bool,
    pub implicit: bool,
    pub question: QuestionMode,
}

impl Default for FusionFlags {
    fn default() -> Self {
        Self {
            visual: true,
            explicit: true,
            implicit: true,
            question: QuestionMode::ContextTags,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub soft_accuracy: SoftAccuracy,
    /// Only samples of this split are predicted and scored; `None` means all.
    pub split: Option<String>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            soft_accuracy: SoftAccuracy::Simple,
            split: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: u64,
    /// Seeds of ensemble members; empty means `[seed]`.
    pub ensemble_seeds: Vec<u64>,
    pub paths: Paths,
    pub retrieval: RetrievalConfig,
    pub fusion: FusionFlags,
    pub model: ModelConfig,
    pub optimizer: OptimizerConfig,
    pub eval: EvalConfig,
    /// Used by the `generate` command only.
    pub syndata: SynConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            ensemble_seeds: Vec::new(),
            paths: Paths::default(),
            retrieval: RetrievalConfig::default(),
            fusion: FusionFlags::default(),
            model: ModelConfig {
                max_passage_tokens: 128,
                ..ModelConfig::default()
            },
            optimizer: OptimizerConfig::default(),
            eval: EvalConfig::default(),
            syndata: SynConfig::default(),
        }
    }
}

/// Parses an override value as a TOML literal, falling back to a bare string.
fn parse_value(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

/// Sets `a.b.c = value` in `table`, creating intermediate tables.
pub fn apply_override(table: &mut toml::Table, assignment: &str) -> Result<(), PipelineError> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| PipelineError::Config(format!("override `{assignment}` is not key=value")))?;
    let parts: Vec<&str> = key.trim().split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(PipelineError::Config(format!("bad override key `{key}`")));
    }
    let mut cur = table;
    for p in &parts[..parts.len() - 1] {
        let entry = cur
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| PipelineError::Config(format!("`{p}` in `{key}` is not a table")))?;
    }
    cur.insert(parts[parts.len() - 1].to_string(), parse_value(raw.trim()));
    Ok(())
}

impl PipelineConfig {
    /// Builds a config from an optional TOML text plus overrides; relative
    /// paths resolve against `base`.
    pub fn from_toml(text: Option<&str>, overrides: &[String], base: &Path) -> Result<Self, PipelineError> {
        let mut table: toml::Table = match text {
            Some(t) => toml::from_str(t).map_err(|e| PipelineError::Config(e.to_string()))?,
            None => toml::Table::new(),
        };
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let mut config: PipelineConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| PipelineError::Config(e.to_string()))?;
        config.paths.resolve(base);
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self, PipelineError> {
        let text = std::fs::read_to_string(path).map_err(|_| PipelineError::Missing {
            artifact: "config file".into(),
            path: path.to_path_buf(),
        })?;
        let base = path.parent().unwrap_or_else(|| Path::new("."));
        Self::from_toml(Some(&text), overrides, base)
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        let r = &self.retrieval;
        for (name, v) in [("retrieval.u", r.u), ("retrieval.k", r.k), ("retrieval.p", r.p)] {
            if v == 0 {
                return Err(PipelineError::Config(format!("{name} must be at least 1")));
            }
        }
        if self.model.max_regions == 0 {
            return Err(PipelineError::Config("model.max_regions must be at least 1".into()));
        }
        Ok(())
    }

    pub fn seeds(&self) -> Vec<u64> {
        if self.ensemble_seeds.is_empty() {
            vec![self.seed]
        } else {
            self.ensemble_seeds.clone()
        }
    }

    /// SHA-256 over every setting except file paths.
    pub fn hash(&self) -> String {
        let mut v = serde_json::to_value(self).expect("config serializes");
        if let Some(obj) = v.as_object_mut() {
            obj.remove("paths");
        }
        hex(&Sha256::digest(v.to_string().as_bytes()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_carry_published_hyperparameters() {
        let c = PipelineConfig::default();
        assert_eq!((c.retrieval.u, c.retrieval.k, c.retrieval.p, c.model.max_regions), (5, 40, 30, 36));
        assert_eq!(c.optimizer.lr, 8e-5);
        assert_eq!((c.optimizer.warmup_steps, c.optimizer.steps, c.optimizer.batch_size), (1000, 10000, 8));
        assert_eq!(c.model.visual_encoder_layers, 9);
    }

    #[test]
    fn overrides_and_paths() {
        let text = "seed = 3\n[model]\nmodel_dim = 32\n";
        let o = vec![
            "model.max_regions=18".to_string(),
            "fusion.question=plain".to_string(),
            "ensemble_seeds=[1, 2]".to_string(),
            "optimizer.lr=1e-3".to_string(),
        ];
        let c = PipelineConfig::from_toml(Some(text), &o, Path::new("/data")).unwrap();
        assert_eq!(c.seed, 3);
        assert_eq!(c.model.model_dim, 32);
        assert_eq!(c.model.max_regions, 18);
        assert_eq!(c.fusion.question, QuestionMode::Plain);
        assert_eq!(c.seeds(), vec![1, 2]);
        assert_eq!(c.optimizer.lr, 1e-3);
        assert_eq!(c.paths.kb, Path::new("/data/kb.jsonl"));
    }

    #[test]
    fn rejects_unknown_and_invalid() {
        let base = Path::new(".");
        assert!(PipelineConfig::from_toml(Some("sed = 1"), &[], base).is_err());
        assert!(PipelineConfig::from_toml(None, &["retrieval.k=0".into()], base).is_err());
        assert!(PipelineConfig::from_toml(None, &["nonsense".into()], base).is_err());
        assert!(PipelineConfig::from_toml(None, &["seed.x=1".into()], base).is_err());
    }

    #[test]
    fn hash_ignores_paths() {
        let a = PipelineConfig::from_toml(None, &[], Path::new("/a")).unwrap();
        let b = PipelineConfig::from_toml(None, &[], Path::new("/b")).unwrap();
        assert_eq!(a.hash(), b.hash());
        let c = PipelineConfig::from_toml(None, &["seed=1".into()], Path::new("/a")).unwrap();
        assert_ne!(a.hash(), c.hash());
        let round = PipelineConfig::from_toml(Some(&a.to_toml()), &[], Path::new("/")).unwrap();
        assert_eq!(round, a);
    }
}
