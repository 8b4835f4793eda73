//! Exact inner-product top-K search over a flat embedding matrix.
//!
//! Scores are accumulated in `f64` regardless of the `f32` storage, one row at
//! a time in dimension order, so a naive scan in the same order reproduces them
//! bit for bit. Ties on score are broken by ascending item id.

use std::cmp::Ordering;
use std::collections::HashSet;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Row count above which scoring fans out over the rayon pool.
const PARALLEL_ROWS: usize = 16_384;

#[derive(Debug, Error, PartialEq)]
pub enum IndexError {
    #[error("embedding matrix is empty")]
    Empty,
    #[error("embedding dimension must be positive")]
    ZeroDim,
    #[error("row {row} has length {found}, expected {expected}")]
    RowLength {
        row: usize,
        expected: usize,
        found: usize,
    },
    #[error("{ids} ids for {rows} rows")]
    IdCount { ids: usize, rows: usize },
    #[error("duplicate item id {0:?}")]
    DuplicateId(String),
    #[error("non-finite value in row {0}")]
    NonFinite(usize),
    #[error("query dimension {found} does not match index dimension {expected}")]
    QueryDim { expected: usize, found: usize },
    #[error("k must be at least 1")]
    ZeroK,
}

/// Dense row-major matrix of embeddings with one opaque id per row.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix {
    dim: usize,
    data: Vec<f32>,
    ids: Vec<String>,
}

impl EmbeddingMatrix {
    /// Builds a matrix from explicit rows and ids.
    pub fn new(dim: usize, rows: Vec<Vec<f32>>, ids: Vec<String>) -> Result<Self, IndexError> {
        if dim == 0 {
            return Err(IndexError::ZeroDim);
        }
        if rows.is_empty() {
            return Err(IndexError::Empty);
        }
        if ids.len() != rows.len() {
            return Err(IndexError::IdCount {
                ids: ids.len(),
                rows: rows.len(),
            });
        }
        let mut data = Vec::with_capacity(dim * rows.len());
        for (row, values) in rows.iter().enumerate() {
            if values.len() != dim {
                return Err(IndexError::RowLength {
                    row,
                    expected: dim,
                    found: values.len(),
                });
            }
            data.extend_from_slice(values);
        }
        Self::from_flat(dim, data, ids)
    }

    /// Builds a matrix whose ids are the row indices ("0", "1", ...).
    pub fn with_row_ids(dim: usize, rows: Vec<Vec<f32>>) -> Result<Self, IndexError> {
        let ids = (0..rows.len()).map(|i| i.to_string()).collect();
        Self::new(dim, rows, ids)
    }

    /// Builds a matrix from a flat row-major buffer.
    pub fn from_flat(dim: usize, data: Vec<f32>, ids: Vec<String>) -> Result<Self, IndexError> {
        if dim == 0 {
            return Err(IndexError::ZeroDim);
        }
        if data.is_empty() {
            return Err(IndexError::Empty);
        }
        if !data.len().is_multiple_of(dim) {
            return Err(IndexError::RowLength {
                row: data.len() / dim,
                expected: dim,
                found: data.len() % dim,
            });
        }
        let rows = data.len() / dim;
        if ids.len() != rows {
            return Err(IndexError::IdCount {
                ids: ids.len(),
                rows,
            });
        }
        let mut seen = HashSet::with_capacity(rows);
        for id in &ids {
            if !seen.insert(id.as_str()) {
                return Err(IndexError::DuplicateId(id.clone()));
            }
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(IndexError::NonFinite(pos / dim));
        }
        Ok(Self { dim, data, ids })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f32]> {
        self.data.chunks_exact(self.dim)
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn as_flat(&self) -> &[f32] {
        &self.data
    }

    /// Keeps only the listed rows, in the given order.
    pub fn select_rows(&self, rows: &[usize]) -> Result<Self, IndexError> {
        let mut data = Vec::with_capacity(rows.len() * self.dim);
        let mut ids = Vec::with_capacity(rows.len());
        for &r in rows {
            data.extend_from_slice(self.row(r));
            ids.push(self.ids[r].clone());
        }
        Self::from_flat(self.dim, data, ids)
    }
}

/// One retrieved item.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredHit {
    pub item_id: String,
    /// Row of the item inside the index.
    pub row: usize,
    pub score: f64,
    /// Which query produced the item's best score (0 for single-query search).
    pub query_index: usize,
}

/// How multi-query results are aggregated.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    /// Each item scores the max over all queries; one global top-k.
    #[default]
    GlobalMax,
    /// Per-query top-k lists merged round-robin in query order, deduplicated.
    PerQuery,
}

/// Immutable flat index.
#[derive(Debug, Clone)]
pub struct Index {
    matrix: EmbeddingMatrix,
    /// Position of each row in ascending-id order, for tie-breaking.
    id_rank: Vec<u32>,
}

/// Inner product with `f64` accumulation in dimension order.
#[inline]
pub fn dot_f64(a: &[f32], b: &[f32]) -> f64 {
    let mut acc = 0.0f64;
    for (x, y) in a.iter().zip(b) {
        acc += f64::from(*x) * f64::from(*y);
    }
    acc
}

impl Index {
    pub fn build(matrix: EmbeddingMatrix) -> Self {
        let mut order: Vec<usize> = (0..matrix.len()).collect();
        order.sort_by(|&a, &b| matrix.ids[a].cmp(&matrix.ids[b]));
        let mut id_rank = vec![0u32; matrix.len()];
        for (rank, &row) in order.iter().enumerate() {
            id_rank[row] = rank as u32;
        }
        Self { matrix, id_rank }
    }

    pub fn dim(&self) -> usize {
        self.matrix.dim
    }

    pub fn len(&self) -> usize {
        self.matrix.len()
    }

    pub fn is_empty(&self) -> bool {
        self.matrix.is_empty()
    }

    pub fn matrix(&self) -> &EmbeddingMatrix {
        &self.matrix
    }

    pub fn id(&self, row: usize) -> &str {
        &self.matrix.ids[row]
    }

    fn check_query(&self, query: &[f32]) -> Result<(), IndexError> {
        if query.len() != self.dim() {
            return Err(IndexError::QueryDim {
                expected: self.dim(),
                found: query.len(),
            });
        }
        if query.iter().any(|v| !v.is_finite()) {
            return Err(IndexError::NonFinite(0));
        }
        Ok(())
    }

    fn scores(&self, query: &[f32]) -> Vec<f64> {
        if self.len() >= PARALLEL_ROWS {
            self.matrix
                .data
                .par_chunks_exact(self.dim())
                .map(|row| dot_f64(row, query))
                .collect()
        } else {
            self.matrix.rows().map(|row| dot_f64(row, query)).collect()
        }
    }

    /// Descending score, then ascending id.
    fn rank_cmp(&self, a: (usize, f64), b: (usize, f64)) -> Ordering {
        b.1.total_cmp(&a.1)
            .then_with(|| self.id_rank[a.0].cmp(&self.id_rank[b.0]))
    }

    fn select(&self, scored: Vec<(usize, f64, usize)>, k: usize) -> Vec<ScoredHit> {
        let mut scored = scored;
        let k = k.min(scored.len());
        if k < scored.len() {
            scored.select_nth_unstable_by(k - 1, |a, b| self.rank_cmp((a.0, a.1), (b.0, b.1)));
            scored.truncate(k);
        }
        scored.sort_by(|a, b| self.rank_cmp((a.0, a.1), (b.0, b.1)));
        scored
            .into_iter()
            .map(|(row, score, query_index)| ScoredHit {
                item_id: self.matrix.ids[row].clone(),
                row,
                score,
                query_index,
            })
            .collect()
    }

    /// Exact top-k by inner product with a single query.
    pub fn topk(&self, query: &[f32], k: usize) -> Result<Vec<ScoredHit>, IndexError> {
        if k == 0 {
            return Err(IndexError::ZeroK);
        }
        self.check_query(query)?;
        let scored = self
            .scores(query)
            .into_iter()
            .enumerate()
            .map(|(row, s)| (row, s, 0))
            .collect();
        Ok(self.select(scored, k))
    }

    /// Top-k distinct items where each item's score is its max over `queries`.
    pub fn multi_query_topk(
        &self,
        queries: &EmbeddingMatrix,
        k: usize,
    ) -> Result<Vec<ScoredHit>, IndexError> {
        if k == 0 {
            return Err(IndexError::ZeroK);
        }
        if queries.dim() != self.dim() {
            return Err(IndexError::QueryDim {
                expected: self.dim(),
                found: queries.dim(),
            });
        }
        let mut best: Vec<(usize, f64, usize)> = Vec::new();
        for (qi, query) in queries.rows().enumerate() {
            let scores = self.scores(query);
            if qi == 0 {
                best = scores.into_iter().enumerate().map(|(r, s)| (r, s, 0)).collect();
            } else {
                for (slot, s) in best.iter_mut().zip(scores) {
                    // strict: the lowest query index wins ties
                    if s > slot.1 {
                        slot.1 = s;
                        slot.2 = qi;
                    }
                }
            }
        }
        Ok(self.select(best, k))
    }

    /// Multi-query search with a selectable aggregation mode.
    pub fn multi_query_topk_with(
        &self,
        queries: &EmbeddingMatrix,
        k: usize,
        aggregation: Aggregation,
    ) -> Result<Vec<ScoredHit>, IndexError> {
        match aggregation {
            Aggregation::GlobalMax => self.multi_query_topk(queries, k),
            Aggregation::PerQuery => {
                if queries.dim() != self.dim() {
                    return Err(IndexError::QueryDim {
                        expected: self.dim(),
                        found: queries.dim(),
                    });
                }
                let mut lists = Vec::with_capacity(queries.len());
                for (qi, q) in queries.rows().enumerate() {
                    let mut hits = self.topk(q, k)?;
                    for h in &mut hits {
                        h.query_index = qi;
                    }
                    lists.push(hits);
                }
                let mut seen = HashSet::new();
                let mut out = Vec::with_capacity(k);
                let depth = lists.iter().map(Vec::len).max().unwrap_or(0);
                'outer: for rank in 0..depth {
                    for list in &lists {
                        if let Some(hit) = list.get(rank) {
                            if seen.insert(hit.row) {
                                out.push(hit.clone());
                                if out.len() == k {
                                    break 'outer;
                                }
                            }
                        }
                    }
                }
                Ok(out)
            }
        }
    }
}
