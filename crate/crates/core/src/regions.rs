//! Per-image region artifacts and region-driven retrieval.
//!
//! An artifact carries what the detector, region encoder and captioner
//! produced for one image: boxes in absolute pixels, one embedding per box,
//! and a caption. Tags and knowledge entries are retrieved by scoring every
//! region embedding against the text embeddings and keeping the best items
//! across all regions.

use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::kb::{KnowledgeEntry, TagEntry};
use crate::rvem::{self, RvemError};
use crate::vecindex::{Aggregation, EmbeddingMatrix, Index, IndexError};

pub const DEFAULT_TAGS_P: usize = 30;
pub const DEFAULT_EXPLICIT_K: usize = 40;
pub const DEFAULT_MAX_REGIONS: usize = 36;

#[derive(Debug, Error)]
pub enum RegionError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("{path}: {msg}")]
    Json { path: PathBuf, msg: String },
    #[error("image {image_id}: {msg}")]
    Invalid { image_id: String, msg: String },
    #[error("image {image_id}: embedding file: {source}")]
    Embeddings {
        image_id: String,
        #[source]
        source: RvemError,
    },
    #[error("degenerate box {0:?}")]
    DegenerateBox([f64; 4]),
    #[error("box {bbox:?} outside image {width}x{height}")]
    OutOfBounds { bbox: [f64; 4], width: f64, height: f64 },
    #[error(transparent)]
    Index(#[from] IndexError),
    #[error("{items} items but index has {rows} rows")]
    StoreMismatch { items: usize, rows: usize },
}

/// Box as fractions of image width/height.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormalizedBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl NormalizedBox {
    pub const FULL: NormalizedBox = NormalizedBox {
        x1: 0.0,
        y1: 0.0,
        x2: 1.0,
        y2: 1.0,
    };

    pub fn to_array(self) -> [f64; 4] {
        [self.x1, self.y1, self.x2, self.y2]
    }

    pub fn denormalize(self, width: f64, height: f64) -> [f64; 4] {
        [self.x1 * width, self.y1 * height, self.x2 * width, self.y2 * height]
    }

    pub fn center(self) -> (f64, f64) {
        ((self.x1 + self.x2) / 2.0, (self.y1 + self.y2) / 2.0)
    }
}

/// Divides pixel coordinates by the image size.
pub fn normalize_box(bbox: [f64; 4], image_size: (f64, f64)) -> Result<NormalizedBox, RegionError> {
    let [x1, y1, x2, y2] = bbox;
    let (w, h) = image_size;
    if !(x1 < x2 && y1 < y2) {
        return Err(RegionError::DegenerateBox(bbox));
    }
    if x1 < 0.0 || y1 < 0.0 || x2 > w || y2 > h {
        return Err(RegionError::OutOfBounds {
            bbox,
            width: w,
            height: h,
        });
    }
    Ok(NormalizedBox {
        x1: x1 / w,
        y1: y1 / h,
        x2: x2 / w,
        y2: y2 / h,
    })
}

/// Per-image JSON record as stored on disk.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionRecord {
    pub image_id: String,
    pub width: u32,
    pub height: u32,
    pub caption: String,
    pub boxes: Vec<[f64; 4]>,
    /// Relative to the JSON file's directory.
    pub embedding_file: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RegionArtifact {
    pub image_id: String,
    pub boxes: Vec<[f64; 4]>,
    pub image_size: (u32, u32),
    pub embedding_dim: usize,
    /// One row per box.
    pub region_embeddings: Vec<Vec<f32>>,
    pub caption: String,
}

/// How region embeddings are treated on load.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmbeddingNorm {
    /// Use the stored vectors unchanged.
    #[default]
    AsStored,
    /// L2-normalize each region embedding.
    L2,
}

impl RegionArtifact {
    pub fn num_regions(&self) -> usize {
        self.boxes.len()
    }

    pub fn validate(&self) -> Result<(), RegionError> {
        let invalid = |msg: String| RegionError::Invalid {
            image_id: self.image_id.clone(),
            msg,
        };
        if self.caption.trim().is_empty() {
            return Err(invalid("caption is empty".into()));
        }
        if self.boxes.len() != self.region_embeddings.len() {
            return Err(invalid(format!(
                "{} boxes but {} embedding rows",
                self.boxes.len(),
                self.region_embeddings.len()
            )));
        }
        if let Some(r) = self.region_embeddings.iter().position(|r| r.len() != self.embedding_dim) {
            return Err(invalid(format!("embedding row {r} has wrong dimension")));
        }
        let size = (f64::from(self.image_size.0), f64::from(self.image_size.1));
        for b in &self.boxes {
            normalize_box(*b, size).map_err(|e| invalid(e.to_string()))?;
        }
        Ok(())
    }

    pub fn normalized_boxes(&self) -> Vec<NormalizedBox> {
        let size = (f64::from(self.image_size.0), f64::from(self.image_size.1));
        self.boxes
            .iter()
            .map(|b| normalize_box(*b, size).expect("artifact validated"))
            .collect()
    }

    /// Region embeddings as a query matrix; `None` when there are no regions.
    pub fn query_matrix(&self) -> Option<EmbeddingMatrix> {
        if self.region_embeddings.is_empty() {
            return None;
        }
        EmbeddingMatrix::with_row_ids(self.embedding_dim, self.region_embeddings.clone()).ok()
    }

    /// First `m` regions in stored order.
    pub fn truncated(&self, m: usize) -> RegionArtifact {
        let mut out = self.clone();
        out.boxes.truncate(m);
        out.region_embeddings.truncate(m);
        out
    }
}

fn read_record(path: &Path) -> Result<RegionRecord, RegionError> {
    let text = fs::read_to_string(path).map_err(|source| RegionError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    serde_json::from_str(&text).map_err(|e| RegionError::Json {
        path: path.to_path_buf(),
        msg: e.to_string(),
    })
}

/// Loads one per-image JSON file and its embeddings.
pub fn load_region_artifact(path: &Path, norm: EmbeddingNorm) -> Result<RegionArtifact, RegionError> {
    let record = read_record(path)?;
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    let emb_path = base.join(&record.embedding_file);
    let raw = rvem::read_raw(&emb_path).map_err(|source| RegionError::Embeddings {
        image_id: record.image_id.clone(),
        source,
    })?;
    let mut rows: Vec<Vec<f32>> = (0..raw.count()).map(|i| raw.row(i).to_vec()).collect();
    if norm == EmbeddingNorm::L2 {
        for row in &mut rows {
            l2_normalize(row);
        }
    }
    let artifact = RegionArtifact {
        image_id: record.image_id,
        boxes: record.boxes,
        image_size: (record.width, record.height),
        embedding_dim: raw.dim,
        region_embeddings: rows,
        caption: record.caption,
    };
    artifact.validate()?;
    Ok(artifact)
}

/// Loads every `*.json` in `dir`, sorted by file name.
pub fn load_region_artifacts(dir: &Path, norm: EmbeddingNorm) -> Result<Vec<RegionArtifact>, RegionError> {
    let entries = fs::read_dir(dir).map_err(|source| RegionError::Io {
        path: dir.to_path_buf(),
        source,
    })?;
    let mut paths = Vec::new();
    for entry in entries {
        let entry = entry.map_err(|source| RegionError::Io {
            path: dir.to_path_buf(),
            source,
        })?;
        let p = entry.path();
        if p.extension().is_some_and(|e| e == "json") {
            paths.push(p);
        }
    }
    paths.sort();
    paths.iter().map(|p| load_region_artifact(p, norm)).collect()
}

/// Writes an artifact as `<dir>/<image_id>.json` plus `<dir>/<image_id>.rvem`.
pub fn write_region_artifact(dir: &Path, artifact: &RegionArtifact) -> Result<PathBuf, RegionError> {
    let emb_name = format!("{}.rvem", artifact.image_id);
    let flat: Vec<f32> = artifact.region_embeddings.iter().flatten().copied().collect();
    rvem::write_raw(&dir.join(&emb_name), artifact.embedding_dim, &flat, None).map_err(|source| {
        RegionError::Embeddings {
            image_id: artifact.image_id.clone(),
            source,
        }
    })?;
    let record = RegionRecord {
        image_id: artifact.image_id.clone(),
        width: artifact.image_size.0,
        height: artifact.image_size.1,
        caption: artifact.caption.clone(),
        boxes: artifact.boxes.clone(),
        embedding_file: emb_name,
    };
    let path = dir.join(format!("{}.json", artifact.image_id));
    let text = serde_json::to_string_pretty(&record).expect("record serializes");
    fs::write(&path, text).map_err(|source| RegionError::Io {
        path: path.clone(),
        source,
    })?;
    Ok(path)
}

pub fn l2_normalize(v: &mut [f32]) {
    let norm = v.iter().map(|x| f64::from(*x) * f64::from(*x)).sum::<f64>().sqrt();
    if norm > 0.0 {
        for x in v.iter_mut() {
            *x = (f64::from(*x) / norm) as f32;
        }
    }
}

/// Deterministic unit vector for a string.
///
/// Components are uniform in [-1, 1) drawn from a SHA-256 counter stream over
/// the input, then L2-normalized. Only integer ops, division and `sqrt` are
/// involved, so the output is identical on every IEEE-754 platform.
pub fn stub_embed(text: &str, dim: usize) -> Vec<f32> {
    assert!(dim >= 1, "stub_embed needs dim >= 1");
    let mut raw = Vec::with_capacity(dim);
    let mut counter = 0u64;
    while raw.len() < dim {
        let mut h = Sha256::new();
        h.update(b"regionqa-stub-v1");
        h.update((text.len() as u64).to_le_bytes());
        h.update(text.as_bytes());
        h.update(counter.to_le_bytes());
        let digest = h.finalize();
        for chunk in digest.chunks_exact(8) {
            if raw.len() == dim {
                break;
            }
            let bits = u64::from_le_bytes(chunk.try_into().unwrap()) >> 11;
            raw.push(bits as f64 / (1u64 << 53) as f64 * 2.0 - 1.0);
        }
        counter += 1;
    }
    let norm = raw.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm == 0.0 {
        let mut v = vec![0.0f32; dim];
        v[0] = 1.0;
        return v;
    }
    raw.into_iter().map(|x| (x / norm) as f32).collect()
}

/// Tag vocabulary with its index; item ids are the tag strings.
#[derive(Debug, Clone)]
pub struct TagStore {
    tags: Vec<String>,
    index: Index,
}

impl TagStore {
    pub fn new(tags: &[TagEntry], embeddings: EmbeddingMatrix) -> Result<Self, RegionError> {
        if tags.len() != embeddings.len() {
            return Err(RegionError::StoreMismatch {
                items: tags.len(),
                rows: embeddings.len(),
            });
        }
        let names: Vec<String> = tags.iter().map(|t| t.tag.clone()).collect();
        let matrix = EmbeddingMatrix::from_flat(embeddings.dim(), embeddings.as_flat().to_vec(), names.clone())?;
        Ok(Self {
            tags: names,
            index: Index::build(matrix),
        })
    }

    pub fn index(&self) -> &Index {
        &self.index
    }

    pub fn len(&self) -> usize {
        self.tags.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tags.is_empty()
    }
}

/// Knowledge entries with their index; hits map back through the row.
#[derive(Debug, Clone)]
pub struct KnowledgeStore {
    entries: Vec<KnowledgeEntry>,
    index: Index,
}

impl KnowledgeStore {
    pub fn new(entries: Vec<KnowledgeEntry>, embeddings: EmbeddingMatrix) -> Result<Self, RegionError> {
        if entries.len() != embeddings.len() {
            return Err(RegionError::StoreMismatch {
                items: entries.len(),
                rows: embeddings.len(),
            });
        }
        Ok(Self {
            entries,
            index: Index::build(embeddings),
        })
    }

    pub fn index(&self) -> &Index {
        &self.index
    }

    pub fn entries(&self) -> &[KnowledgeEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Top-`p` tags over all regions of the image.
pub fn retrieve_tags(
    artifact: &RegionArtifact,
    store: &TagStore,
    p: usize,
    aggregation: Aggregation,
) -> Result<Vec<(String, f64)>, RegionError> {
    let Some(queries) = artifact.query_matrix() else {
        return Ok(Vec::new());
    };
    let hits = store.index.multi_query_topk_with(&queries, p, aggregation)?;
    Ok(hits
        .into_iter()
        .map(|h| (store.tags[h.row].clone(), h.score))
        .collect())
}

/// Top-`k` knowledge entries over all regions of the image.
pub fn retrieve_explicit(
    artifact: &RegionArtifact,
    store: &KnowledgeStore,
    k: usize,
    aggregation: Aggregation,
) -> Result<Vec<(KnowledgeEntry, f64)>, RegionError> {
    let Some(queries) = artifact.query_matrix() else {
        return Ok(Vec::new());
    };
    let hits = store.index.multi_query_topk_with(&queries, k, aggregation)?;
    Ok(hits
        .into_iter()
        .map(|h| {
            let mut e = store.entries[h.row].clone();
            e.embedding = None;
            (e, h.score)
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn full_image_box() {
        let b = normalize_box([0.0, 0.0, 640.0, 480.0], (640.0, 480.0)).unwrap();
        assert_eq!(b, NormalizedBox::FULL);
    }

    #[test]
    fn direct_division() {
        let b = normalize_box([10.0, 20.0, 30.0, 40.0], (100.0, 200.0)).unwrap();
        assert_eq!(b.to_array(), [0.1, 0.1, 0.3, 0.2]);
    }

    #[test]
    fn degenerate_and_out_of_bounds() {
        assert!(matches!(
            normalize_box([5.0, 5.0, 5.0, 9.0], (10.0, 10.0)),
            Err(RegionError::DegenerateBox(_))
        ));
        assert!(matches!(
            normalize_box([0.0, 0.0, 11.0, 9.0], (10.0, 10.0)),
            Err(RegionError::OutOfBounds { .. })
        ));
    }

    #[test]
    fn stub_embed_is_deterministic_unit() {
        let a = stub_embed("dog", 64);
        let b = stub_embed("dog", 64);
        assert_eq!(a, b);
        assert_ne!(a, stub_embed("cat", 64));
        let norm: f64 = a.iter().map(|x| f64::from(*x).powi(2)).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() < 1e-6);
        assert_eq!(stub_embed("x", 1).len(), 1);
        assert_eq!(stub_embed("x", 1)[0].abs(), 1.0);
    }

    #[test]
    fn stub_embed_pinned_bits() {
        // reference bits from an independent SHA-256 implementation of the same stream
        let bits = |dim| stub_embed("pegboard", dim).iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(4), [0xbefbd411, 0xbebc4321, 0xbf39e63b, 0x3e9e453f]);
        assert_eq!(bits(6), [0xbef90cb7, 0xbeba2f56, 0xbf37d91c, 0x3e9c862c, 0x3e176ed0, 0xbc0fcb82]);
    }

    fn artifact(rows: Vec<Vec<f32>>) -> RegionArtifact {
        let n = rows.len();
        RegionArtifact {
            image_id: "img".into(),
            boxes: vec![[0.0, 0.0, 10.0, 10.0]; n],
            image_size: (10, 10),
            embedding_dim: rows.first().map_or(4, Vec::len),
            region_embeddings: rows,
            caption: "a caption".into(),
        }
    }

    fn tag_store(names: &[&str], dim: usize) -> TagStore {
        let tags: Vec<TagEntry> = names
            .iter()
            .map(|t| TagEntry {
                tag: t.to_string(),
                embedding: None,
            })
            .collect();
        let rows = names.iter().map(|t| stub_embed(t, dim)).collect();
        TagStore::new(&tags, EmbeddingMatrix::with_row_ids(dim, rows).unwrap()).unwrap()
    }

    #[test]
    fn self_match_scores_squared_norm() {
        let store = tag_store(&["dog", "cat", "frisbee", "grass"], 16);
        let mut v = stub_embed("frisbee", 16);
        for x in &mut v {
            *x *= 2.0;
        }
        let expected: f64 = v.iter().zip(stub_embed("frisbee", 16)).map(|(a, b)| f64::from(*a) * f64::from(b)).sum();
        let hits = retrieve_tags(&artifact(vec![v.clone()]), &store, 1, Aggregation::GlobalMax).unwrap();
        assert_eq!(hits[0].0, "frisbee");
        let sq: f64 = v.iter().map(|x| f64::from(*x).powi(2)).sum::<f64>() / 2.0;
        assert_eq!(hits[0].1, expected);
        assert!((hits[0].1 - sq).abs() < 1e-6);
    }

    #[test]
    fn no_regions_retrieves_nothing() {
        let store = tag_store(&["dog"], 4);
        let a = artifact(vec![]);
        assert!(retrieve_tags(&a, &store, 3, Aggregation::GlobalMax).unwrap().is_empty());
    }

    #[test]
    fn artifact_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let a = RegionArtifact {
            image_id: "0001".into(),
            boxes: vec![[1.0, 2.0, 30.0, 40.0], [0.0, 0.0, 64.0, 48.0]],
            image_size: (64, 48),
            embedding_dim: 3,
            region_embeddings: vec![vec![1.0, 2.0, 3.0], vec![0.0, 0.5, -1.0]],
            caption: "two things".into(),
        };
        let path = write_region_artifact(dir.path(), &a).unwrap();
        assert_eq!(load_region_artifact(&path, EmbeddingNorm::AsStored).unwrap(), a);
        let l2 = load_region_artifact(&path, EmbeddingNorm::L2).unwrap();
        let n: f64 = l2.region_embeddings[0].iter().map(|x| f64::from(*x).powi(2)).sum();
        assert!((n - 1.0).abs() < 1e-6);
        assert_eq!(load_region_artifacts(dir.path(), EmbeddingNorm::AsStored).unwrap().len(), 1);
    }

    #[test]
    fn count_mismatch_names_image() {
        let dir = tempfile::tempdir().unwrap();
        let mut a = artifact(vec![vec![1.0, 0.0, 0.0, 0.0]]);
        a.image_id = "broken".into();
        write_region_artifact(dir.path(), &a).unwrap();
        let json = dir.path().join("broken.json");
        let mut rec: RegionRecord = serde_json::from_str(&fs::read_to_string(&json).unwrap()).unwrap();
        rec.boxes.push([0.0, 0.0, 5.0, 5.0]);
        fs::write(&json, serde_json::to_string(&rec).unwrap()).unwrap();
        let err = load_region_artifact(&json, EmbeddingNorm::AsStored).unwrap_err();
        assert!(err.to_string().contains("broken"), "{err}");

        fs::remove_file(dir.path().join("broken.rvem")).unwrap();
        let err = load_region_artifact(&json, EmbeddingNorm::AsStored).unwrap_err();
        assert!(matches!(err, RegionError::Embeddings { ref image_id, .. } if image_id == "broken"));
    }

    proptest! {
        #[test]
        fn denormalize_round_trip(w in 1u32..4000, h in 1u32..4000, a in 0.0f64..1.0, b in 0.0f64..1.0, c in 0.0f64..1.0, d in 0.0f64..1.0) {
            let (w, h) = (f64::from(w), f64::from(h));
            let (x1, x2) = if a < b { (a * w, b * w) } else { (b * w, a * w) };
            let (y1, y2) = if c < d { (c * h, d * h) } else { (d * h, c * h) };
            prop_assume!(x1 < x2 && y1 < y2);
            let n = normalize_box([x1, y1, x2, y2], (w, h)).unwrap();
            let back = n.denormalize(w, h);
            for (u, v) in back.iter().zip([x1, y1, x2, y2]) {
                prop_assert!((u - v).abs() < 1e-9);
            }
        }

        #[test]
        fn stub_embed_unit_norm(s in ".{0,40}", dim in 1usize..300) {
            let v = stub_embed(&s, dim);
            prop_assert_eq!(v.len(), dim);
            let n: f64 = v.iter().map(|x| f64::from(*x).powi(2)).sum::<f64>().sqrt();
            prop_assert!((n - 1.0).abs() < 1e-6);
        }
    }
}
