//! File-based pipeline stages: ingest, retrieve, train, predict, eval, sweep.
//!
//! Each stage reads the previous stage's files from the output directory and
//! writes its own, plus a `<stage>.manifest.json` carrying the config hash,
//! seed and crate version. Nothing time-dependent is written, so reruns with
//! the same inputs produce identical bytes.

pub mod config;
pub mod retrieval;
pub mod stages;

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub use config::{FusionFlags, PipelineConfig, QuestionMode};
pub use retrieval::{build_fusion_input, build_vocab, RetrievalRecord};
pub use stages::{eval, generate, ingest, predict, retrieve, run_all, sweep, train, SweepRow};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("missing {artifact}: {path} does not exist")]
    Missing { artifact: String, path: PathBuf },
    #[error("config: {0}")]
    Config(String),
    #[error("{path}: {msg}")]
    Format { path: PathBuf, msg: String },
    #[error("io {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Kb(#[from] crate::kb::KbError),
    #[error(transparent)]
    Region(#[from] crate::regions::RegionError),
    #[error(transparent)]
    Rvem(#[from] crate::rvem::RvemError),
    #[error(transparent)]
    Oracle(#[from] crate::oracle::OracleError),
    #[error("sample {sample_id}: {source}")]
    Implicit {
        sample_id: String,
        #[source]
        source: crate::oracle::ImplicitError,
    },
    #[error(transparent)]
    Prompt(#[from] crate::prompts::PromptError),
    #[error(transparent)]
    Fusion(#[from] crate::fusion::FusionError),
    #[error(transparent)]
    Train(#[from] crate::fusion::TrainError),
    #[error(transparent)]
    Checkpoint(#[from] crate::fusion::checkpoint::CheckpointError),
    #[error(transparent)]
    Eval(#[from] crate::eval::EvalError),
    #[error(transparent)]
    Syndata(#[from] crate::syndata::SynError),
}

impl PipelineError {
    /// Stable machine-readable error kind.
    pub fn kind(&self) -> &'static str {
        match self {
            PipelineError::Missing { .. } => "missing_input",
            PipelineError::Config(_) => "config",
            PipelineError::Format { .. } => "format",
            PipelineError::Io { .. } => "io",
            PipelineError::Kb(_) => "kb",
            PipelineError::Region(_) => "regions",
            PipelineError::Rvem(_) => "rvem",
            PipelineError::Oracle(_) | PipelineError::Implicit { .. } => "oracle",
            PipelineError::Prompt(_) => "prompt",
            PipelineError::Fusion(_) => "fusion",
            PipelineError::Train(_) => "train",
            PipelineError::Checkpoint(_) => "checkpoint",
            PipelineError::Eval(_) => "eval",
            PipelineError::Syndata(_) => "syndata",
        }
    }

    pub fn to_json(&self) -> serde_json::Value {
        let mut v = serde_json::json!({ "error": self.kind(), "message": self.to_string() });
        if let PipelineError::Missing { artifact, path } = self {
            v["artifact"] = artifact.clone().into();
            v["path"] = path.display().to_string().into();
        }
        v
    }
}

/// Provenance written next to every stage output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub stage: String,
    pub config_hash: String,
    pub seed: u64,
    pub version: String,
    /// SHA-256 of input files, by role.
    pub inputs: BTreeMap<String, String>,
    /// Output file names, relative to the output directory.
    pub outputs: Vec<String>,
    #[serde(default, skip_serializing_if = "serde_json::Value::is_null")]
    pub details: serde_json::Value,
}

impl Manifest {
    pub fn new(stage: &str, config: &PipelineConfig) -> Self {
        Self {
            stage: stage.to_string(),
            config_hash: config.hash(),
            seed: config.seed,
            version: env!("CARGO_PKG_VERSION").to_string(),
            inputs: BTreeMap::new(),
            outputs: Vec::new(),
            details: serde_json::Value::Null,
        }
    }

    pub fn input(mut self, role: &str, path: &Path) -> Result<Self, PipelineError> {
        self.inputs.insert(role.to_string(), file_sha256(path)?);
        Ok(self)
    }

    pub fn write(&self, dir: &Path) -> Result<PathBuf, PipelineError> {
        let path = dir.join(format!("{}.manifest.json", self.stage));
        write_file(&path, serde_json::to_string_pretty(self).expect("manifest serializes") + "\n")?;
        Ok(path)
    }

    pub fn read(dir: &Path, stage: &str) -> Result<Self, PipelineError> {
        let path = dir.join(format!("{stage}.manifest.json"));
        let text = read_file(&path, &format!("{stage} manifest (run `{stage}` first)"))?;
        serde_json::from_str(&text).map_err(|e| PipelineError::Format {
            path,
            msg: e.to_string(),
        })
    }
}

pub fn file_sha256(path: &Path) -> Result<String, PipelineError> {
    let bytes = fs::read(path).map_err(|source| PipelineError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    Ok(config::hex(&Sha256::digest(&bytes)))
}

pub(crate) fn require(path: &Path, artifact: &str) -> Result<(), PipelineError> {
    if path.exists() {
        Ok(())
    } else {
        Err(PipelineError::Missing {
            artifact: artifact.to_string(),
            path: path.to_path_buf(),
        })
    }
}

pub(crate) fn read_file(path: &Path, artifact: &str) -> Result<String, PipelineError> {
    require(path, artifact)?;
    fs::read_to_string(path).map_err(|source| PipelineError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub(crate) fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<(), PipelineError> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|source| PipelineError::Io {
            path: parent.to_path_buf(),
            source,
        })?;
    }
    fs::write(path, contents).map_err(|source| PipelineError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Reads JSONL, skipping blank lines.
pub fn read_jsonl<T: DeserializeOwned>(path: &Path, artifact: &str) -> Result<Vec<T>, PipelineError> {
    require(path, artifact)?;
    let file = fs::File::open(path).map_err(|source| PipelineError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut out = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|source| PipelineError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| PipelineError::Format {
            path: path.to_path_buf(),
            msg: format!("line {}: {e}", n + 1),
        })?);
    }
    Ok(out)
}

pub fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<(), PipelineError> {
    write_file(path, crate::syndata::jsonl(items))
}

/// One line of a predictions file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Prediction {
    pub sample_id: String,
    pub answer: String,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn error_json_names_missing_artifact() {
        let e = require(Path::new("/nonexistent/kb.jsonl"), "knowledge base").unwrap_err();
        let v = e.to_json();
        assert_eq!(v["error"], "missing_input");
        assert_eq!(v["artifact"], "knowledge base");
        assert_eq!(v["path"], "/nonexistent/kb.jsonl");
    }

    #[test]
    fn jsonl_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.jsonl");
        let items = vec![
            Prediction {
                sample_id: "a".into(),
                answer: "dog".into(),
            },
            Prediction {
                sample_id: "b".into(),
                answer: "".into(),
            },
        ];
        write_jsonl(&p, &items).unwrap();
        assert_eq!(read_jsonl::<Prediction>(&p, "predictions").unwrap(), items);
        fs::write(&p, "{\"sample_id\": 1}\n").unwrap();
        assert!(matches!(read_jsonl::<Prediction>(&p, "predictions"), Err(PipelineError::Format { .. })));
    }
}
