//! Binary checkpoints: `RWCK`, format version (u32 LE), JSON header length
//! (u64 LE), JSON header with the spec and tensor names and shapes, then
//! every tensor as f32 LE in header order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Model, ModelError, ModelSpec, Result};
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"RWCK";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    spec: ModelSpec,
    tensors: Vec<TensorEntry>,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

pub fn write_checkpoint(model: &Model<f32>) -> Vec<u8> {
    let header = Header {
        spec: model.spec().clone(),
        tensors: model
            .param_names()
            .iter()
            .zip(model.params())
            .map(|(name, p)| TensorEntry { name: name.clone(), shape: p.shape().to_vec() })
            .collect(),
    };
    let json = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::with_capacity(16 + json.len() + 4 * model.num_params());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for p in model.params() {
        for v in p.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

/// Parses a checkpoint; with `expected`, refuses any other spec.
pub fn read_checkpoint(bytes: &[u8], origin: &str, expected: Option<&ModelSpec>) -> Result<Model<f32>> {
    let bad = |detail: String| ModelError::Checkpoint { path: origin.to_string(), detail };
    if bytes.len() < 16 || &bytes[..4] != MAGIC {
        return Err(bad("not a model checkpoint".into()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != CHECKPOINT_VERSION {
        return Err(bad(format!("unsupported checkpoint version {version}")));
    }
    let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let body = bytes.get(16..16usize.saturating_add(len)).ok_or_else(|| bad("truncated header".into()))?;
    let header: Header = serde_json::from_slice(body).map_err(|e| bad(format!("bad header: {e}")))?;
    if let Some(expected) = expected {
        if expected != &header.spec {
            return Err(ModelError::SpecMismatch {
                expected: serde_json::to_string(expected).expect("spec serializes"),
                found: serde_json::to_string(&header.spec).expect("spec serializes"),
            });
        }
    }
    let mut model = Model::<f32>::new(header.spec)?;
    if header.tensors.len() != model.params().len() {
        return Err(bad(format!("{} tensors for {} parameters", header.tensors.len(), model.params().len())));
    }
    let mut data = &bytes[16 + len..];
    let mut params = Vec::with_capacity(header.tensors.len());
    for (entry, (name, fresh)) in header.tensors.iter().zip(model.param_names().iter().zip(model.params())) {
        if &entry.name != name || entry.shape != fresh.shape() {
            return Err(bad(format!("tensor {} {:?} does not fit {name} {:?}", entry.name, entry.shape, fresh.shape())));
        }
        let n = fresh.numel() * 4;
        if data.len() < n {
            return Err(bad(format!("truncated data for {name}")));
        }
        let values = data[..n].chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
        params.push(Tensor::new(entry.shape.clone(), values)?);
        data = &data[n..];
    }
    if !data.is_empty() {
        return Err(bad(format!("{} trailing bytes", data.len())));
    }
    model.set_params(params)?;
    Ok(model)
}

pub fn save_checkpoint(model: &Model<f32>, path: &Path) -> Result<()> {
    fs::write(path, write_checkpoint(model))
        .map_err(|e| ModelError::Checkpoint { path: path.display().to_string(), detail: e.to_string() })
}

pub fn load_checkpoint(path: &Path, expected: Option<&ModelSpec>) -> Result<Model<f32>> {
    let bytes = fs::read(path)
        .map_err(|e| ModelError::Checkpoint { path: path.display().to_string(), detail: e.to_string() })?;
    read_checkpoint(&bytes, &path.display().to_string(), expected)
}
