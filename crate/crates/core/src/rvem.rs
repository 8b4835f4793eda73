//! `RVEM` embedding files.
//!
//! Layout (all little-endian):
//!
//! ```text
//! b"RVEM" | version: u16 | dim: u32 | count: u64 | count * dim * f32 (row-major)
//! ```
//!
//! Item ids live in an optional sidecar next to the file (`<stem>.ids.jsonl`),
//! one `{"row": n, "id": "..."}` object per line. Without a sidecar the row
//! index is the id.

use std::fs::File;
use std::io::{self, BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::vecindex::{EmbeddingMatrix, IndexError};

pub const MAGIC: &[u8; 4] = b"RVEM";
pub const VERSION: u16 = 1;

#[derive(Debug, Error)]
pub enum RvemError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("{0}: bad magic, not an RVEM file")]
    BadMagic(PathBuf),
    #[error("{path}: unsupported RVEM version {version}")]
    Version { path: PathBuf, version: u16 },
    #[error("{path}: expected {expected} bytes of float data, found {found}")]
    Truncated {
        path: PathBuf,
        expected: u64,
        found: u64,
    },
    #[error("{path}:{line}: {msg}")]
    Sidecar {
        path: PathBuf,
        line: usize,
        msg: String,
    },
    #[error(transparent)]
    Index(#[from] IndexError),
}

/// Raw contents of an RVEM file. `count` may be zero.
#[derive(Debug, Clone, PartialEq)]
pub struct RawEmbeddings {
    pub dim: usize,
    pub data: Vec<f32>,
    pub ids: Option<Vec<String>>,
}

impl RawEmbeddings {
    pub fn count(&self) -> usize {
        self.data.len().checked_div(self.dim).unwrap_or(0)
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn into_matrix(self) -> Result<EmbeddingMatrix, IndexError> {
        let ids = match self.ids {
            Some(ids) => ids,
            None => (0..self.count()).map(|i| i.to_string()).collect(),
        };
        EmbeddingMatrix::from_flat(self.dim, self.data, ids)
    }
}

#[derive(Serialize, Deserialize)]
struct SidecarLine {
    row: usize,
    id: String,
}

/// Path of the id sidecar for an RVEM file.
pub fn sidecar_path(path: &Path) -> PathBuf {
    path.with_extension("ids.jsonl")
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> RvemError + '_ {
    move |source| RvemError::Io {
        path: path.to_path_buf(),
        source,
    }
}

pub fn write_raw(path: &Path, dim: usize, data: &[f32], ids: Option<&[String]>) -> Result<(), RvemError> {
    let count = data.len().checked_div(dim).unwrap_or(0);
    let file = File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(file);
    let mut header = Vec::with_capacity(18);
    header.extend_from_slice(MAGIC);
    header.extend_from_slice(&VERSION.to_le_bytes());
    header.extend_from_slice(&(dim as u32).to_le_bytes());
    header.extend_from_slice(&(count as u64).to_le_bytes());
    w.write_all(&header).map_err(io_err(path))?;
    for v in data {
        w.write_all(&v.to_le_bytes()).map_err(io_err(path))?;
    }
    w.flush().map_err(io_err(path))?;

    let side = sidecar_path(path);
    match ids {
        Some(ids) => {
            let file = File::create(&side).map_err(io_err(&side))?;
            let mut w = BufWriter::new(file);
            for (row, id) in ids.iter().enumerate() {
                let line = serde_json::to_string(&SidecarLine {
                    row,
                    id: id.clone(),
                })
                .expect("sidecar line serializes");
                writeln!(w, "{line}").map_err(io_err(&side))?;
            }
            w.flush().map_err(io_err(&side))?;
        }
        None => {
            if side.exists() {
                std::fs::remove_file(&side).map_err(io_err(&side))?;
            }
        }
    }
    Ok(())
}

/// Writes a matrix with its ids in a sidecar.
pub fn write_matrix(path: &Path, matrix: &EmbeddingMatrix) -> Result<(), RvemError> {
    write_raw(path, matrix.dim(), matrix.as_flat(), Some(matrix.ids()))
}

pub fn read_raw(path: &Path) -> Result<RawEmbeddings, RvemError> {
    let file = File::open(path).map_err(io_err(path))?;
    let mut r = BufReader::new(file);
    let mut header = [0u8; 18];
    r.read_exact(&mut header).map_err(|e| {
        if e.kind() == io::ErrorKind::UnexpectedEof {
            RvemError::BadMagic(path.to_path_buf())
        } else {
            io_err(path)(e)
        }
    })?;
    if &header[0..4] != MAGIC {
        return Err(RvemError::BadMagic(path.to_path_buf()));
    }
    let version = u16::from_le_bytes([header[4], header[5]]);
    if version != VERSION {
        return Err(RvemError::Version {
            path: path.to_path_buf(),
            version,
        });
    }
    let dim = u32::from_le_bytes(header[6..10].try_into().unwrap()) as usize;
    let count = u64::from_le_bytes(header[10..18].try_into().unwrap());
    let expected = count * dim as u64 * 4;
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes).map_err(io_err(path))?;
    if bytes.len() as u64 != expected {
        return Err(RvemError::Truncated {
            path: path.to_path_buf(),
            expected,
            found: bytes.len() as u64,
        });
    }
    let data = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();

    let side = sidecar_path(path);
    let ids = if side.exists() {
        Some(read_sidecar(&side, count as usize)?)
    } else {
        None
    };
    Ok(RawEmbeddings { dim, data, ids })
}

fn read_sidecar(path: &Path, count: usize) -> Result<Vec<String>, RvemError> {
    let file = File::open(path).map_err(io_err(path))?;
    let mut ids: Vec<Option<String>> = vec![None; count];
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        let sidecar = |msg: String| RvemError::Sidecar {
            path: path.to_path_buf(),
            line: n + 1,
            msg,
        };
        let entry: SidecarLine = serde_json::from_str(&line).map_err(|e| sidecar(e.to_string()))?;
        let slot = ids
            .get_mut(entry.row)
            .ok_or_else(|| sidecar(format!("row {} out of range ({count} rows)", entry.row)))?;
        if slot.is_some() {
            return Err(sidecar(format!("row {} listed twice", entry.row)));
        }
        *slot = Some(entry.id);
    }
    ids.into_iter()
        .enumerate()
        .map(|(row, id)| {
            id.ok_or_else(|| RvemError::Sidecar {
                path: path.to_path_buf(),
                line: 0,
                msg: format!("no id for row {row}"),
            })
        })
        .collect()
}

pub fn read_matrix(path: &Path) -> Result<EmbeddingMatrix, RvemError> {
    Ok(read_raw(path)?.into_matrix()?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_layout() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("e.rvem");
        write_raw(&path, 2, &[1.0, 2.0, 3.0, 4.0], None).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        assert_eq!(&bytes[0..4], b"RVEM");
        assert_eq!(u16::from_le_bytes([bytes[4], bytes[5]]), 1);
        assert_eq!(u32::from_le_bytes(bytes[6..10].try_into().unwrap()), 2);
        assert_eq!(u64::from_le_bytes(bytes[10..18].try_into().unwrap()), 2);
        assert_eq!(bytes.len(), 18 + 16);
        assert_eq!(f32::from_le_bytes(bytes[18..22].try_into().unwrap()), 1.0);
    }

    #[test]
    fn implicit_ids_without_sidecar() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("e.rvem");
        write_raw(&path, 1, &[0.5, 0.25], None).unwrap();
        let m = read_matrix(&path).unwrap();
        assert_eq!(m.ids(), ["0", "1"]);
    }

    #[test]
    fn truncated_file_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("e.rvem");
        write_raw(&path, 2, &[1.0, 2.0], None).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes.pop();
        std::fs::write(&path, bytes).unwrap();
        assert!(matches!(read_raw(&path), Err(RvemError::Truncated { .. })));
        std::fs::write(&path, b"NOPE").unwrap();
        assert!(matches!(read_raw(&path), Err(RvemError::BadMagic(_))));
    }

    #[test]
    fn empty_file_allowed_raw() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("e.rvem");
        write_raw(&path, 8, &[], None).unwrap();
        let raw = read_raw(&path).unwrap();
        assert_eq!(raw.count(), 0);
        assert_eq!(raw.dim, 8);
    }

    proptest! {
        #[test]
        fn floats_survive_bit_identical(
            dim in 1usize..6,
            rows in proptest::collection::vec(proptest::collection::vec(any::<f32>().prop_filter("finite", |v| v.is_finite()), 6), 1..8),
        ) {
            let dir = tempfile::tempdir().unwrap();
            let path = dir.path().join("p.rvem");
            let data: Vec<f32> = rows.iter().flat_map(|r| r[..dim].to_vec()).collect();
            let ids: Vec<String> = (0..rows.len()).map(|i| format!("item-{i}")).collect();
            write_raw(&path, dim, &data, Some(&ids)).unwrap();
            let back = read_raw(&path).unwrap();
            prop_assert_eq!(back.dim, dim);
            prop_assert_eq!(back.ids.as_deref(), Some(&ids[..]));
            let a: Vec<u32> = data.iter().map(|v| v.to_bits()).collect();
            let b: Vec<u32> = back.data.iter().map(|v| v.to_bits()).collect();
            prop_assert_eq!(a, b);
        }
    }
}
