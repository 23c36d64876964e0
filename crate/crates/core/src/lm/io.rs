//! Checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! b"MPOCKPT\0"        8-byte magic
//! u32                 format version
//! u64                 header length in bytes
//! header              JSON: version, arch, step, seed lineage, [{name, shape}]
//! f64 * n             parameter data in header order
//! ```

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lm::model::{ArchConfig, NamedParam, PolicyCheckpoint};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"MPOCKPT\0";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    format_version: u32,
    arch: ArchConfig,
    step: u64,
    seed_lineage: Vec<String>,
    arrays: Vec<ArrayHeader>,
}

#[derive(Serialize, Deserialize)]
struct ArrayHeader {
    name: String,
    shape: Vec<usize>,
}

pub fn encode_checkpoint(ckpt: &PolicyCheckpoint) -> Vec<u8> {
    let header = Header {
        format_version: CHECKPOINT_VERSION,
        arch: ckpt.arch.clone(),
        step: ckpt.step,
        seed_lineage: ckpt.seed_lineage.clone(),
        arrays: ckpt
            .params
            .iter()
            .map(|p| ArrayHeader {
                name: p.name.clone(),
                shape: p.value.shape().to_vec(),
            })
            .collect(),
    };
    let json = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::with_capacity(20 + json.len() + 8 * ckpt.param_count());
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for p in &ckpt.params {
        for v in p.value.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn decode_checkpoint(bytes: &[u8], path: &Path) -> Result<PolicyCheckpoint> {
    let bad = |reason: &str| Error::format(path, reason);
    if bytes.len() < 20 || &bytes[..8] != CHECKPOINT_MAGIC {
        return Err(bad("not a checkpoint (bad magic)"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != CHECKPOINT_VERSION {
        return Err(bad(&format!("unsupported checkpoint version {version}")));
    }
    let hlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
    let body = bytes.get(20..20 + hlen).ok_or_else(|| bad("truncated header"))?;
    let header: Header =
        serde_json::from_slice(body).map_err(|e| bad(&format!("header: {e}")))?;
    header
        .arch
        .validate()
        .map_err(|e| bad(&format!("arch: {e}")))?;
    let expected = header.arch.param_specs();
    if expected.len() != header.arrays.len()
        || expected
            .iter()
            .zip(&header.arrays)
            .any(|((n, s), a)| *n != a.name || *s != a.shape)
    {
        return Err(bad("parameter shapes do not match the architecture"));
    }
    let mut cursor = 20 + hlen;
    let mut params = Vec::with_capacity(header.arrays.len());
    for a in header.arrays {
        let n: usize = a.shape.iter().product();
        let raw = bytes
            .get(cursor..cursor + 8 * n)
            .ok_or_else(|| bad("truncated parameter data"))?;
        cursor += 8 * n;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let value = Tensor::new(a.shape, data).map_err(|e| bad(&e.to_string()))?;
        if !value.is_finite() {
            return Err(bad(&format!("non-finite values in {}", a.name)));
        }
        params.push(NamedParam { name: a.name, value });
    }
    if cursor != bytes.len() {
        return Err(bad("trailing bytes after parameter data"));
    }
    Ok(PolicyCheckpoint {
        arch: header.arch,
        params,
        step: header.step,
        seed_lineage: header.seed_lineage,
    })
}

pub fn save_checkpoint(ckpt: &PolicyCheckpoint, path: &Path) -> Result<()> {
    fs::write(path, encode_checkpoint(ckpt)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<PolicyCheckpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes, path)
}
