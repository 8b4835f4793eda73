//! RVCK checkpoint format.
//!
//! ```text
//! "RVCK" | u16 version | u64 header_len | header JSON {config, vocab}
//! u32 tensor_count
//! per tensor: u32 name_len | name | u32 rows | u32 cols | rows*cols f32
//! ```
//! All integers and floats are little-endian. Parameters are stored as `f32`
//! and widened to `f64` on load.

use std::fs;
use std::io::{self, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::model::{FusionError, FusionModel, ModelConfig};
use super::tensor::Tensor;
use super::tokenizer::Vocab;

pub const MAGIC: &[u8; 4] = b"RVCK";
pub const VERSION: u16 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io: {0}")]
    Io(#[from] io::Error),
    #[error("bad magic, not an RVCK checkpoint")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    Version(u16),
    #[error("header: {0}")]
    Header(#[from] serde_json::Error),
    #[error("tensor {name}: {reason}")]
    Tensor { name: String, reason: String },
    #[error(transparent)]
    Model(#[from] FusionError),
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    vocab: Vocab,
}

pub fn to_bytes(model: &FusionModel) -> Vec<u8> {
    let header = serde_json::to_vec(&Header {
        config: model.config().clone(),
        vocab: model.vocab().clone(),
    })
    .expect("header serializes");
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(&(model.params().len() as u32).to_le_bytes());
    for (name, t) in model.param_names().iter().zip(model.params()) {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.rows as u32).to_le_bytes());
        out.extend_from_slice(&(t.cols as u32).to_le_bytes());
        for v in &t.data {
            out.extend_from_slice(&(*v as f32).to_le_bytes());
        }
    }
    out
}

fn read_exact<const N: usize>(r: &mut impl Read) -> io::Result<[u8; N]> {
    let mut b = [0u8; N];
    r.read_exact(&mut b)?;
    Ok(b)
}

pub fn from_bytes(mut r: impl Read) -> Result<FusionModel, CheckpointError> {
    if &read_exact::<4>(&mut r)? != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = u16::from_le_bytes(read_exact(&mut r)?);
    if version != VERSION {
        return Err(CheckpointError::Version(version));
    }
    let header_len = u64::from_le_bytes(read_exact(&mut r)?) as usize;
    let mut header = vec![0u8; header_len];
    r.read_exact(&mut header)?;
    let header: Header = serde_json::from_slice(&header)?;
    let count = u32::from_le_bytes(read_exact(&mut r)?) as usize;
    let expected = FusionModel::new(header.config.clone(), header.vocab.clone(), 0)?;
    if count != expected.params().len() {
        return Err(CheckpointError::Tensor {
            name: "<count>".into(),
            reason: format!("{count} tensors, config implies {}", expected.params().len()),
        });
    }
    let mut params = Vec::with_capacity(count);
    for want in expected.param_names() {
        let name_len = u32::from_le_bytes(read_exact(&mut r)?) as usize;
        let mut name = vec![0u8; name_len];
        r.read_exact(&mut name)?;
        let name = String::from_utf8_lossy(&name).into_owned();
        if &name != want {
            return Err(CheckpointError::Tensor {
                name,
                reason: format!("expected {want}"),
            });
        }
        let rows = u32::from_le_bytes(read_exact(&mut r)?) as usize;
        let cols = u32::from_le_bytes(read_exact(&mut r)?) as usize;
        let mut raw = vec![0u8; rows * cols * 4];
        r.read_exact(&mut raw)?;
        let data: Vec<f64> = raw
            .chunks_exact(4)
            .map(|c| f64::from(f32::from_le_bytes([c[0], c[1], c[2], c[3]])))
            .collect();
        if data.iter().any(|v| !v.is_finite()) {
            return Err(CheckpointError::Tensor {
                name,
                reason: "non-finite value".into(),
            });
        }
        params.push(Tensor::from_vec(rows, cols, data));
    }
    Ok(FusionModel::from_parts(header.config, header.vocab, params)?)
}

pub fn save(model: &FusionModel, path: &Path) -> Result<(), CheckpointError> {
    let mut f = fs::File::create(path)?;
    f.write_all(&to_bytes(model))?;
    Ok(())
}

pub fn load(path: &Path) -> Result<FusionModel, CheckpointError> {
    from_bytes(io::BufReader::new(fs::File::open(path)?))
}

/// Rounds every parameter to `f32`, so the in-memory model equals a
/// save/load round trip.
pub fn round_to_f32(model: &mut FusionModel) {
    for p in model.params_mut() {
        for v in &mut p.data {
            *v = f64::from(*v as f32);
        }
    }
}
