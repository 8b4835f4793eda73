//! Explicit knowledge base and tag vocabulary ingestion.

use std::collections::HashSet;
use std::fs::File;
use std::io::{self, BufRead, BufReader};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::vecindex::EmbeddingMatrix;

/// Categories kept from the knowledge base unless configured otherwise.
pub const DEFAULT_CATEGORIES: [&str; 8] = [
    "Role",
    "Point of interest",
    "Tool",
    "Vehicle",
    "Animal",
    "Clothing",
    "Company",
    "Sport",
];

pub fn default_categories() -> Vec<String> {
    DEFAULT_CATEGORIES.iter().map(|s| s.to_string()).collect()
}

#[derive(Debug, Error)]
pub enum KbError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("{path}:{line}: {msg}")]
    Malformed {
        path: PathBuf,
        line: usize,
        msg: String,
    },
    #[error("{path}:{line}: duplicate tag {tag:?}")]
    DuplicateTag {
        path: PathBuf,
        line: usize,
        tag: String,
    },
    #[error("{entries} entries but {rows} embedding rows")]
    CountMismatch { entries: usize, rows: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KnowledgeEntry {
    pub entity: String,
    pub description: String,
    pub category: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub embedding: Option<Vec<f32>>,
}

impl KnowledgeEntry {
    pub fn new(entity: impl Into<String>, description: impl Into<String>, category: impl Into<String>) -> Self {
        Self {
            entity: entity.into(),
            description: description.into(),
            category: category.into(),
            embedding: None,
        }
    }

    /// Retrieval text: `{entity} is a {description}`.
    pub fn reformat(&self) -> String {
        reformat_entry(self)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TagEntry {
    pub tag: String,
    pub embedding: Option<Vec<f32>>,
}

/// `{entity} is a {description}`
pub fn reformat_entry(entry: &KnowledgeEntry) -> String {
    format!("{} is a {}", entry.entity, entry.description)
}

#[derive(Deserialize)]
struct RawEntry {
    entity: String,
    description: String,
    category: String,
}

/// Reads a JSONL knowledge base and keeps entries whose category is listed.
///
/// Blank lines are skipped. Returns the kept entries together with their line
/// order index in the source file (0-based over non-blank lines), which is the
/// row order of an accompanying embedding file.
pub fn load_kb_indexed(path: &Path, categories: &[String]) -> Result<Vec<(usize, KnowledgeEntry)>, KbError> {
    let file = File::open(path).map_err(|source| KbError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let allowed: HashSet<&str> = categories.iter().map(String::as_str).collect();
    let mut out = Vec::new();
    let mut record = 0usize;
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|source| KbError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let malformed = |msg: String| KbError::Malformed {
            path: path.to_path_buf(),
            line: n + 1,
            msg,
        };
        let raw: RawEntry = serde_json::from_str(&line).map_err(|e| malformed(e.to_string()))?;
        if raw.entity.is_empty() || raw.description.is_empty() {
            return Err(malformed("entity and description must be non-empty".into()));
        }
        if allowed.contains(raw.category.as_str()) {
            out.push((
                record,
                KnowledgeEntry {
                    entity: raw.entity,
                    description: raw.description,
                    category: raw.category,
                    embedding: None,
                },
            ));
        }
        record += 1;
    }
    if out.is_empty() {
        log::warn!("{}: no entries in categories {:?}", path.display(), categories);
    }
    Ok(out)
}

pub fn load_kb(path: &Path, categories: &[String]) -> Result<Vec<KnowledgeEntry>, KbError> {
    Ok(load_kb_indexed(path, categories)?
        .into_iter()
        .map(|(_, e)| e)
        .collect())
}

/// In-memory category filter, order preserving.
pub fn filter_categories(entries: &[KnowledgeEntry], categories: &[String]) -> Vec<KnowledgeEntry> {
    entries
        .iter()
        .filter(|e| categories.iter().any(|c| c == &e.category))
        .cloned()
        .collect()
}

/// One tag per line, UTF-8. Blank lines are skipped; surrounding whitespace trimmed.
pub fn load_tags(path: &Path) -> Result<Vec<TagEntry>, KbError> {
    let file = File::open(path).map_err(|source| KbError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut seen = HashSet::new();
    let mut tags = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|source| KbError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let tag = line.trim();
        if tag.is_empty() {
            continue;
        }
        if !seen.insert(tag.to_string()) {
            return Err(KbError::DuplicateTag {
                path: path.to_path_buf(),
                line: n + 1,
                tag: tag.to_string(),
            });
        }
        tags.push(TagEntry {
            tag: tag.to_string(),
            embedding: None,
        });
    }
    Ok(tags)
}

/// Joins embeddings to entries by row order.
pub fn attach_embeddings(
    entries: Vec<KnowledgeEntry>,
    matrix: &EmbeddingMatrix,
) -> Result<Vec<KnowledgeEntry>, KbError> {
    if entries.len() != matrix.len() {
        return Err(KbError::CountMismatch {
            entries: entries.len(),
            rows: matrix.len(),
        });
    }
    Ok(entries
        .into_iter()
        .zip(matrix.rows())
        .map(|(mut e, row)| {
            e.embedding = Some(row.to_vec());
            e
        })
        .collect())
}

pub fn attach_tag_embeddings(tags: Vec<TagEntry>, matrix: &EmbeddingMatrix) -> Result<Vec<TagEntry>, KbError> {
    if tags.len() != matrix.len() {
        return Err(KbError::CountMismatch {
            entries: tags.len(),
            rows: matrix.len(),
        });
    }
    Ok(tags
        .into_iter()
        .zip(matrix.rows())
        .map(|(mut t, row)| {
            t.embedding = Some(row.to_vec());
            t
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::io::Write;

    fn write_lines(lines: &[String]) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        for l in lines {
            writeln!(f, "{l}").unwrap();
        }
        f
    }

    fn line(entity: &str, desc: &str, cat: &str) -> String {
        serde_json::json!({"entity": entity, "description": desc, "category": cat}).to_string()
    }

    #[test]
    fn default_filter() {
        let f = write_lines(&[
            line(
                "pegboard",
                "board wall covering with regularly-spaced holes for insertion of pegs or hooks",
                "Tool",
            ),
            line("pizza", "dish of Italian origin", "Food"),
        ]);
        let kb = load_kb(f.path(), &default_categories()).unwrap();
        assert_eq!(kb.len(), 1);
        assert_eq!(kb[0].entity, "pegboard");
    }

    #[test]
    fn malformed_line_reports_number() {
        let f = write_lines(&[line("a", "b", "Tool"), "{not json".into()]);
        match load_kb(f.path(), &default_categories()) {
            Err(KbError::Malformed { line, .. }) => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn empty_result_is_ok() {
        let f = write_lines(&[line("a", "b", "Food")]);
        assert!(load_kb(f.path(), &default_categories()).unwrap().is_empty());
    }

    #[test]
    fn filter_matches_line_oracle() {
        let cats = ["Animal", "Tool", "Food", "Sport"];
        let lines: Vec<String> = (0..100)
            .map(|i| line(&format!("e{i}"), &format!("d{i}"), cats[(i * 7 + i / 3) % 4]))
            .collect();
        let f = write_lines(&lines);
        let got = load_kb(f.path(), &["Animal".to_string()]).unwrap();
        // oracle: scan the raw lines
        let expected: Vec<String> = lines
            .iter()
            .filter(|l| l.contains("\"category\":\"Animal\""))
            .map(|l| serde_json::from_str::<serde_json::Value>(l).unwrap()["entity"].as_str().unwrap().to_string())
            .collect();
        let got: Vec<String> = got.into_iter().map(|e| e.entity).collect();
        assert!(!expected.is_empty());
        assert_eq!(got, expected);
    }

    #[test]
    fn reformat_template() {
        let e = KnowledgeEntry::new(
            "pegboard",
            "board wall covering with regularly-spaced holes for insertion of pegs or hooks",
            "Tool",
        );
        assert_eq!(
            reformat_entry(&e),
            "pegboard is a board wall covering with regularly-spaced holes for insertion of pegs or hooks"
        );
        assert_eq!(reformat_entry(&KnowledgeEntry::new("x", "y", "Tool")), "x is a y");
    }

    #[test]
    fn tags_reject_duplicates() {
        let f = write_lines(&["dog".into(), "".into(), "cat".into(), "dog".into()]);
        assert!(matches!(load_tags(f.path()), Err(KbError::DuplicateTag { line: 4, .. })));
    }

    #[test]
    fn attach_checks_count() {
        let m = EmbeddingMatrix::with_row_ids(2, vec![vec![1.0, 0.0]]).unwrap();
        let entries = vec![KnowledgeEntry::new("a", "b", "Tool"), KnowledgeEntry::new("c", "d", "Tool")];
        assert!(matches!(
            attach_embeddings(entries.clone(), &m),
            Err(KbError::CountMismatch { entries: 2, rows: 1 })
        ));
        let out = attach_embeddings(entries[..1].to_vec(), &m).unwrap();
        assert_eq!(out[0].embedding.as_deref(), Some(&[1.0f32, 0.0][..]));
    }

    proptest! {
        #[test]
        fn reformat_contains_fields(entity in "[a-z]{1,12}", desc in "[ -~]{1,40}") {
            let e = KnowledgeEntry::new(entity.clone(), desc.clone(), "Tool");
            let s = reformat_entry(&e);
            prop_assert!(s.starts_with(&entity));
            prop_assert!(s.contains(&desc));
        }

        #[test]
        fn filter_idempotent(cats in proptest::collection::vec(0usize..4, 0..30), keep in proptest::collection::vec(0usize..4, 0..3)) {
            let names = ["Animal", "Tool", "Food", "Sport"];
            let entries: Vec<_> = cats.iter().enumerate().map(|(i, c)| KnowledgeEntry::new(format!("e{i}"), "d", names[*c])).collect();
            let keep: Vec<String> = keep.iter().map(|k| names[*k].to_string()).collect();
            let once = filter_categories(&entries, &keep);
            prop_assert_eq!(filter_categories(&once, &keep), once);
        }
    }
}
