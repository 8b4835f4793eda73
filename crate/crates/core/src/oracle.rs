//! Implicit-knowledge oracle: answer candidates and explanations from a
//! language model, behind a trait so runs can be fully offline.
//!
//! [`ReplayCache`] records completions keyed by `(prompt, n)` and replays
//! them on later runs. [`MockOracle`] is a fixed prompt table with an optional
//! hash-derived fallback.

use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Mutex, RwLock};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::prompts::{build_explanation_prompt, PromptError};

pub const DEFAULT_CANDIDATES_U: usize = 5;

#[derive(Debug, Error)]
pub enum OracleError {
    #[error("no completion for prompt {prompt:?} (n={n}) and no inner oracle")]
    Miss { prompt: String, n: usize },
    #[error("oracle returned {got} completions, expected {expected}")]
    WrongCount { expected: usize, got: usize },
    #[error("oracle returned an empty answer candidate")]
    EmptyAnswer,
    #[error("oracle unavailable: {0}")]
    Unavailable(String),
    #[error("cache {path}:{line}: {msg}")]
    CacheFormat {
        path: PathBuf,
        line: usize,
        msg: String,
    },
    #[error("cache {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error(transparent)]
    Prompt(#[from] PromptError),
}

/// Failure of [`retrieve_implicit`] after `completed` candidates were done.
#[derive(Debug, Error)]
#[error("implicit retrieval failed after {completed} of {requested} candidates: {source}")]
pub struct ImplicitError {
    pub completed: usize,
    pub requested: usize,
    #[source]
    pub source: OracleError,
}

/// A text-completion source.
pub trait Oracle: Send + Sync {
    /// Returns `n` completions for `prompt`. May return fewer for explanation
    /// prompts; callers check counts where it matters.
    fn complete(&self, prompt: &str, n: usize) -> Result<Vec<String>, OracleError>;

    /// Completions a single call can return. Callers loop when this is below `n`.
    fn max_completions_per_call(&self) -> usize {
        usize::MAX
    }
}

impl<O: Oracle + ?Sized> Oracle for &O {
    fn complete(&self, prompt: &str, n: usize) -> Result<Vec<String>, OracleError> {
        (**self).complete(prompt, n)
    }
    fn max_completions_per_call(&self) -> usize {
        (**self).max_completions_per_call()
    }
}

impl<O: Oracle + ?Sized> Oracle for Box<O> {
    fn complete(&self, prompt: &str, n: usize) -> Result<Vec<String>, OracleError> {
        (**self).complete(prompt, n)
    }
    fn max_completions_per_call(&self) -> usize {
        (**self).max_completions_per_call()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImplicitCandidate {
    pub answer: String,
    pub explanation: String,
}

fn request_completions(oracle: &dyn Oracle, prompt: &str, n: usize) -> Result<Vec<String>, OracleError> {
    let per_call = oracle.max_completions_per_call().max(1);
    if per_call >= n {
        return oracle.complete(prompt, n);
    }
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let want = per_call.min(n - out.len());
        let got = oracle.complete(prompt, want)?;
        if got.is_empty() {
            break;
        }
        out.extend(got);
    }
    Ok(out)
}

/// Asks for `u` answer candidates to `prompt_x`, then one explanation per
/// candidate. Candidates are returned in oracle order and never deduplicated.
pub fn retrieve_implicit(
    oracle: &dyn Oracle,
    prompt_x: &str,
    question: &str,
    u: usize,
) -> Result<Vec<ImplicitCandidate>, ImplicitError> {
    let fail = |completed: usize, source: OracleError| ImplicitError {
        completed,
        requested: u,
        source,
    };
    let answers = request_completions(oracle, prompt_x, u).map_err(|e| fail(0, e))?;
    if answers.len() != u {
        return Err(fail(
            0,
            OracleError::WrongCount {
                expected: u,
                got: answers.len(),
            },
        ));
    }
    let mut out = Vec::with_capacity(u);
    for answer in answers {
        if answer.is_empty() {
            return Err(fail(out.len(), OracleError::EmptyAnswer));
        }
        let prompt = build_explanation_prompt(question, &answer).map_err(|e| fail(out.len(), e.into()))?;
        let explanation = oracle
            .complete(&prompt, 1)
            .map_err(|e| fail(out.len(), e))?
            .into_iter()
            .next()
            .unwrap_or_default();
        out.push(ImplicitCandidate { answer, explanation });
    }
    Ok(out)
}

/// Fixed prompt table. Unknown prompts either fail or get hash-derived filler.
#[derive(Debug, Default, Clone)]
pub struct MockOracle {
    table: HashMap<String, Vec<String>>,
    hash_fallback: bool,
    calls: std::sync::Arc<AtomicUsize>,
}

impl MockOracle {
    pub fn new() -> Self {
        Self::default()
    }

    /// Unknown prompts get deterministic pseudo-words instead of an error.
    pub fn with_hash_fallback(mut self) -> Self {
        self.hash_fallback = true;
        self
    }

    pub fn insert(&mut self, prompt: impl Into<String>, completions: Vec<String>) {
        self.table.insert(prompt.into(), completions);
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }
}

const FILLER: [&str; 16] = [
    "red", "blue", "wood", "metal", "summer", "winter", "water", "food", "sport", "city", "farm", "music",
    "travel", "safety", "school", "night",
];

fn hash_word(prompt: &str, i: usize) -> String {
    let digest = Sha256::new()
        .chain_update(prompt.as_bytes())
        .chain_update((i as u64).to_le_bytes())
        .finalize();
    FILLER[(digest[0] as usize) % FILLER.len()].to_string()
}

impl Oracle for MockOracle {
    fn complete(&self, prompt: &str, n: usize) -> Result<Vec<String>, OracleError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        if let Some(c) = self.table.get(prompt) {
            return Ok(c.iter().take(n).cloned().collect());
        }
        if self.hash_fallback {
            return Ok((0..n).map(|i| hash_word(prompt, i)).collect());
        }
        Err(OracleError::Miss {
            prompt: prompt.to_string(),
            n,
        })
    }
}

/// One line of the cache file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CacheRecord {
    pub prompt: String,
    pub n: usize,
    pub completions: Vec<String>,
}

/// Record/replay wrapper keyed by exact `(prompt, n)`.
///
/// Reads are served concurrently; misses forwarded to the inner oracle are
/// appended to the backing file under a lock.
pub struct ReplayCache {
    entries: RwLock<HashMap<(String, usize), Vec<String>>>,
    inner: Option<Box<dyn Oracle>>,
    writer: Option<Mutex<BufWriter<File>>>,
    path: Option<PathBuf>,
    hits: AtomicUsize,
    misses: AtomicUsize,
}

impl std::fmt::Debug for ReplayCache {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ReplayCache")
            .field("path", &self.path)
            .field("entries", &self.len())
            .field("has_inner", &self.inner.is_some())
            .finish()
    }
}

pub fn read_cache_records(path: &Path) -> Result<Vec<CacheRecord>, OracleError> {
    let file = File::open(path).map_err(|source| OracleError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut out = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|source| OracleError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: CacheRecord = serde_json::from_str(&line).map_err(|e| OracleError::CacheFormat {
            path: path.to_path_buf(),
            line: n + 1,
            msg: e.to_string(),
        })?;
        out.push(rec);
    }
    Ok(out)
}

pub fn write_cache_records(path: &Path, records: &[CacheRecord]) -> Result<(), OracleError> {
    let io_err = |source| OracleError::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut w = BufWriter::new(File::create(path).map_err(io_err)?);
    for r in records {
        writeln!(w, "{}", serde_json::to_string(r).expect("record serializes")).map_err(io_err)?;
    }
    w.flush().map_err(io_err)
}

impl ReplayCache {
    /// In-memory cache with no backing file.
    pub fn in_memory(records: Vec<CacheRecord>, inner: Option<Box<dyn Oracle>>) -> Self {
        let entries = records
            .into_iter()
            .map(|r| ((r.prompt, r.n), r.completions))
            .collect();
        Self {
            entries: RwLock::new(entries),
            inner,
            writer: None,
            path: None,
            hits: AtomicUsize::new(0),
            misses: AtomicUsize::new(0),
        }
    }

    /// Opens (or creates, when an inner oracle is given) a JSONL cache file.
    /// Later lines override earlier ones for the same key.
    pub fn open(path: &Path, inner: Option<Box<dyn Oracle>>) -> Result<Self, OracleError> {
        let records = if path.exists() {
            read_cache_records(path)?
        } else if inner.is_some() {
            Vec::new()
        } else {
            return Err(OracleError::Io {
                path: path.to_path_buf(),
                source: io::Error::new(io::ErrorKind::NotFound, "cache file not found"),
            });
        };
        let writer = if inner.is_some() {
            let file = OpenOptions::new()
                .create(true)
                .append(true)
                .open(path)
                .map_err(|source| OracleError::Io {
                    path: path.to_path_buf(),
                    source,
                })?;
            Some(Mutex::new(BufWriter::new(file)))
        } else {
            None
        };
        let mut cache = Self::in_memory(records, inner);
        cache.writer = writer;
        cache.path = Some(path.to_path_buf());
        Ok(cache)
    }

    pub fn hits(&self) -> usize {
        self.hits.load(Ordering::SeqCst)
    }

    /// Lookups that went to the inner oracle (or failed for lack of one).
    pub fn misses(&self) -> usize {
        self.misses.load(Ordering::SeqCst)
    }

    pub fn len(&self) -> usize {
        self.entries.read().expect("cache lock").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// All entries sorted by key.
    pub fn records(&self) -> Vec<CacheRecord> {
        let mut out: Vec<CacheRecord> = self
            .entries
            .read()
            .expect("cache lock")
            .iter()
            .map(|((prompt, n), c)| CacheRecord {
                prompt: prompt.clone(),
                n: *n,
                completions: c.clone(),
            })
            .collect();
        out.sort_by(|a, b| (&a.prompt, a.n).cmp(&(&b.prompt, b.n)));
        out
    }
}

impl Oracle for ReplayCache {
    fn complete(&self, prompt: &str, n: usize) -> Result<Vec<String>, OracleError> {
        let key = (prompt.to_string(), n);
        if let Some(c) = self.entries.read().expect("cache lock").get(&key) {
            self.hits.fetch_add(1, Ordering::SeqCst);
            return Ok(c.clone());
        }
        self.misses.fetch_add(1, Ordering::SeqCst);
        let Some(inner) = &self.inner else {
            return Err(OracleError::Miss {
                prompt: prompt.to_string(),
                n,
            });
        };
        let completions = inner.complete(prompt, n)?;
        let mut entries = self.entries.write().expect("cache lock");
        // another thread may have recorded it meanwhile; first write wins
        if let Some(c) = entries.get(&key) {
            return Ok(c.clone());
        }
        if let Some(writer) = &self.writer {
            let rec = CacheRecord {
                prompt: prompt.to_string(),
                n,
                completions: completions.clone(),
            };
            let mut w = writer.lock().expect("writer lock");
            let io_err = |source| OracleError::Io {
                path: self.path.clone().unwrap_or_default(),
                source,
            };
            writeln!(w, "{}", serde_json::to_string(&rec).expect("record serializes")).map_err(io_err)?;
            w.flush().map_err(io_err)?;
        }
        entries.insert(key, completions.clone());
        Ok(completions)
    }

    fn max_completions_per_call(&self) -> usize {
        usize::MAX
    }
}

/// Connection settings for a hosted completion service. The client itself is
/// supplied by the caller; this only carries the declared configuration.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LiveOracleConfig {
    pub endpoint: Option<String>,
    /// Name of the environment variable holding the auth token.
    pub auth_token_env: Option<String>,
    /// Decoding parameters passed through untouched.
    #[serde(default)]
    pub params: serde_json::Map<String, serde_json::Value>,
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mock() -> MockOracle {
        let mut m = MockOracle::new();
        m.insert("X", vec!["rain".into(), "river".into(), "rain".into()]);
        m.insert("q? rain. This is because", vec!["it is raining".into()]);
        m.insert("q? river. This is because", vec!["dogs swim".into()]);
        m
    }

    #[test]
    fn mock_round_trip() {
        let m = mock();
        let c = retrieve_implicit(&m, "X", "q?", 3).unwrap();
        assert_eq!(
            c,
            vec![
                ImplicitCandidate {
                    answer: "rain".into(),
                    explanation: "it is raining".into()
                },
                ImplicitCandidate {
                    answer: "river".into(),
                    explanation: "dogs swim".into()
                },
                ImplicitCandidate {
                    answer: "rain".into(),
                    explanation: "it is raining".into()
                },
            ]
        );
        assert_eq!(m.calls(), 4);
    }

    #[test]
    fn short_answer_list_errors() {
        let err = retrieve_implicit(&mock(), "X", "q?", 5).unwrap_err();
        assert!(matches!(err.source, OracleError::WrongCount { expected: 5, got: 3 }));
        assert_eq!(err.completed, 0);
    }

    #[test]
    fn missing_explanation_reports_partial_count() {
        let mut m = mock();
        m.insert("Y", vec!["rain".into(), "snow".into()]);
        let err = retrieve_implicit(&m, "Y", "q?", 2).unwrap_err();
        assert_eq!(err.completed, 1);
        assert!(matches!(err.source, OracleError::Miss { .. }));
    }

    #[test]
    fn empty_explanation_kept() {
        let mut m = MockOracle::new();
        m.insert("Z", vec!["a".into()]);
        m.insert("q a. This is because", vec![]);
        let c = retrieve_implicit(&m, "Z", "q", 1).unwrap();
        assert_eq!(c[0].explanation, "");
    }

    struct OneAtATime(MockOracle);
    impl Oracle for OneAtATime {
        fn complete(&self, prompt: &str, n: usize) -> Result<Vec<String>, OracleError> {
            assert_eq!(n, 1);
            self.0.complete(prompt, n)
        }
        fn max_completions_per_call(&self) -> usize {
            1
        }
    }

    #[test]
    fn single_completion_oracles_are_looped() {
        let o = OneAtATime(MockOracle::new().with_hash_fallback());
        let c = retrieve_implicit(&o, "P", "q", 3).unwrap();
        assert_eq!(c.len(), 3);
        assert_eq!(o.0.calls(), 6);
    }

    #[test]
    fn replay_records_then_replays() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cache.jsonl");
        let first = {
            let cache = ReplayCache::open(&path, Some(Box::new(mock()))).unwrap();
            let c = retrieve_implicit(&cache, "X", "q?", 3).unwrap();
            assert_eq!((cache.misses(), cache.hits()), (3, 1));
            c
        };
        let replay = ReplayCache::open(&path, None).unwrap();
        let second = retrieve_implicit(&replay, "X", "q?", 3).unwrap();
        assert_eq!(first, second);
        assert_eq!(replay.misses(), 0);
        assert_eq!(replay.hits(), 4);
        assert_eq!(replay.len(), 3);
    }

    #[test]
    fn replay_without_inner_errors_on_miss() {
        let cache = ReplayCache::in_memory(vec![], None);
        assert!(matches!(cache.complete("nope", 1), Err(OracleError::Miss { .. })));
        let dir = tempfile::tempdir().unwrap();
        assert!(ReplayCache::open(&dir.path().join("absent.jsonl"), None).is_err());
    }

    #[test]
    fn key_includes_n() {
        let cache = ReplayCache::in_memory(
            vec![CacheRecord {
                prompt: "p".into(),
                n: 2,
                completions: vec!["a".into(), "b".into()],
            }],
            None,
        );
        assert!(cache.complete("p", 2).is_ok());
        assert!(cache.complete("p", 1).is_err());
    }

    #[test]
    fn malformed_cache_line() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.jsonl");
        std::fs::write(&path, "{\"prompt\":\"p\",\"n\":1,\"completions\":[\"a\"]}\nnot json\n").unwrap();
        assert!(matches!(
            ReplayCache::open(&path, None),
            Err(OracleError::CacheFormat { line: 2, .. })
        ));
    }

    #[test]
    fn concurrent_readers_and_writers() {
        let cache = ReplayCache::in_memory(vec![], Some(Box::new(MockOracle::new().with_hash_fallback())));
        std::thread::scope(|s| {
            for t in 0..8 {
                let cache = &cache;
                s.spawn(move || {
                    for i in 0..50 {
                        let p = format!("prompt {}", (i + t) % 20);
                        cache.complete(&p, 2).unwrap();
                    }
                });
            }
        });
        assert_eq!(cache.len(), 20);
        let again: Vec<_> = (0..20).map(|i| cache.complete(&format!("prompt {i}"), 2).unwrap()).collect();
        let fresh = MockOracle::new().with_hash_fallback();
        for (i, c) in again.iter().enumerate() {
            assert_eq!(c, &fresh.complete(&format!("prompt {i}"), 2).unwrap());
        }
    }
}
