//! Binary checkpoint format.
//!
//! Layout: the 8-byte magic `LYRDIT01`, a little-endian `u64` header length,
//! a JSON header (format tag, model config, tensor names and shapes), then
//! every tensor's entries as little-endian `f64` in header order.

use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::config::ToyModelConfig;
use crate::error::{DitError, Result};
use crate::model::ToyDit;

pub const MAGIC: &[u8; 8] = b"LYRDIT01";
pub const FORMAT: &str = "layered-dit/1";

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    rows: usize,
    cols: usize,
}

#[derive(Serialize, Deserialize)]
struct Header {
    format: String,
    config: ToyModelConfig,
    tensors: Vec<TensorEntry>,
}

pub fn to_bytes(model: &ToyDit) -> Vec<u8> {
    let p = model.params();
    let header = Header {
        format: FORMAT.to_string(),
        config: model.config().clone(),
        tensors: p
            .names()
            .iter()
            .zip(p.values())
            .map(|(n, v)| TensorEntry { name: n.clone(), rows: v.nrows(), cols: v.ncols() })
            .collect(),
    };
    let json = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::with_capacity(16 + json.len() + p.count() * 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for v in p.values() {
        for x in v.iter() {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    out
}

pub fn from_bytes(bytes: &[u8]) -> Result<ToyDit> {
    let bad = |m: &str| DitError::Checkpoint(m.to_string());
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(bad("not a layered-dit checkpoint (bad magic)"));
    }
    let hlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let body = bytes.get(16..16 + hlen).ok_or_else(|| bad("truncated header"))?;
    let header: Header = serde_json::from_slice(body).map_err(|e| DitError::Checkpoint(format!("header: {e}")))?;
    if header.format != FORMAT {
        return Err(DitError::Checkpoint(format!("unsupported format {}", header.format)));
    }
    let mut offset = 16 + hlen;
    let mut tensors = Vec::with_capacity(header.tensors.len());
    for t in header.tensors {
        let n = t.rows * t.cols;
        let raw = bytes.get(offset..offset + n * 8).ok_or_else(|| bad("truncated tensor data"))?;
        let data: Vec<f64> = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        offset += n * 8;
        let arr = Array2::from_shape_vec((t.rows, t.cols), data).map_err(|e| DitError::Checkpoint(e.to_string()))?;
        tensors.push((t.name, arr));
    }
    if offset != bytes.len() {
        return Err(bad("trailing bytes after tensor data"));
    }
    ToyDit::from_tensors(header.config, tensors)
}

pub fn save(model: &ToyDit, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, to_bytes(model))?;
    Ok(())
}

pub fn load(path: impl AsRef<Path>) -> Result<ToyDit> {
    from_bytes(&std::fs::read(path)?)
}
