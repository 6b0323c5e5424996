//! Binary checkpoint format.
//!
//! Layout: magic `MHCK`, `u32` LE format version, `u64` LE header length, a
//! JSON header holding the model config and a tensor table, then each tensor's
//! values as little-endian `f32` at the recorded byte offset (relative to the
//! start of the payload).

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Model, ModelConfig, ParamStore};
use crate::error::{Error, Result};
use crate::numerics::Tensor;

const MAGIC: &[u8; 4] = b"MHCK";
const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct TensorRecord {
    name: String,
    shape: Vec<usize>,
    offset: u64,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    tensors: Vec<TensorRecord>,
}

pub fn to_bytes(model: &Model) -> Result<Vec<u8>> {
    let mut offset = 0u64;
    let mut tensors = Vec::new();
    for e in model.params().entries() {
        tensors.push(TensorRecord {
            name: e.name.clone(),
            shape: e.tensor.shape().to_vec(),
            offset,
        });
        offset += 4 * e.tensor.len() as u64;
    }
    let header = serde_json::to_vec(&Header {
        config: model.config().clone(),
        tensors,
    })
    .map_err(|e| Error::Format(e.to_string()))?;

    let mut out = Vec::with_capacity(16 + header.len() + offset as usize);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    for e in model.params().entries() {
        for v in e.tensor.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn from_bytes(bytes: &[u8]) -> Result<Model> {
    let bad = |msg: &str| Error::Format(msg.to_string());
    if bytes.len() < 16 || &bytes[..4] != MAGIC {
        return Err(bad("not a checkpoint (bad magic)"));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(Error::Format(format!(
            "unsupported checkpoint version {version}"
        )));
    }
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let payload_start = 16usize
        .checked_add(header_len)
        .filter(|&end| end <= bytes.len())
        .ok_or_else(|| bad("truncated header"))?;
    let header: Header = serde_json::from_slice(&bytes[16..payload_start])
        .map_err(|e| Error::Format(e.to_string()))?;
    let payload = &bytes[payload_start..];

    let mut store = ParamStore::default();
    for rec in header.tensors {
        let count: usize = rec.shape.iter().product();
        let start = rec.offset as usize;
        let end = start
            .checked_add(4 * count)
            .filter(|&end| end <= payload.len())
            .ok_or_else(|| Error::Format(format!("tensor {} runs past end of file", rec.name)))?;
        let data = payload[start..end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        // Flags are reassigned from the layout by `Model::from_parts`.
        store.push(rec.name, Tensor::new(&rec.shape, data)?, true, false);
    }
    Model::from_parts(header.config, store)
}

pub fn save(model: &Model, path: &Path) -> Result<()> {
    fs::write(path, to_bytes(model)?).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<Model> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes)
}
