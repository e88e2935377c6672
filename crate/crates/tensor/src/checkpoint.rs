//! Flat tensor checkpoint files.
//!
//! Layout: an 8-byte little-endian header length `n`, then `n` bytes of UTF-8
//! JSON mapping each tensor name to `{"shape": [...], "offset": bytes}`, then
//! the raw little-endian `f32` payload. Offsets are relative to the payload.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Result, TensorError};
use crate::tensor::{numel, Tensor};

#[derive(Debug, Serialize, Deserialize)]
struct Entry {
    shape: Vec<usize>,
    offset: u64,
}

pub fn encode(tensors: &BTreeMap<String, Tensor>) -> Vec<u8> {
    let mut header = BTreeMap::new();
    let mut offset = 0u64;
    for (name, t) in tensors {
        header.insert(
            name.clone(),
            Entry {
                shape: t.shape().to_vec(),
                offset,
            },
        );
        offset += 4 * t.numel() as u64;
    }
    let json = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::with_capacity(8 + json.len() + offset as usize);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for t in tensors.values() {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn decode(bytes: &[u8], path: &Path) -> Result<BTreeMap<String, Tensor>> {
    let bad = |detail: String| TensorError::Checkpoint {
        path: path.to_path_buf(),
        detail,
    };
    if bytes.len() < 8 {
        return Err(bad("truncated header length".into()));
    }
    let header_len = u64::from_le_bytes(bytes[..8].try_into().expect("8 bytes")) as usize;
    let payload_start = 8usize
        .checked_add(header_len)
        .filter(|&end| end <= bytes.len())
        .ok_or_else(|| bad(format!("header length {header_len} exceeds file size")))?;
    let header: BTreeMap<String, Entry> =
        serde_json::from_slice(&bytes[8..payload_start]).map_err(|e| bad(format!("header: {e}")))?;
    let payload = &bytes[payload_start..];
    let mut out = BTreeMap::new();
    for (name, entry) in header {
        let start = entry.offset as usize;
        let len = 4 * numel(&entry.shape);
        let raw = payload
            .get(start..start + len)
            .ok_or_else(|| bad(format!("tensor `{name}` overruns payload")))?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        out.insert(name, Tensor::new(&entry.shape, data)?);
    }
    Ok(out)
}

/// Writes atomically: temp file in the same directory, then rename.
pub fn save(path: &Path, tensors: &BTreeMap<String, Tensor>) -> Result<()> {
    write_atomic(path, &encode(tensors))
}

pub fn load(path: &Path) -> Result<BTreeMap<String, Tensor>> {
    let bytes = fs::read(path).map_err(|source| TensorError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    decode(&bytes, path)
}

pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let io = |source| TensorError::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = std::path::PathBuf::from(tmp);
    {
        let mut f = fs::File::create(&tmp).map_err(io)?;
        f.write_all(bytes).map_err(io)?;
        f.sync_all().map_err(io)?;
    }
    fs::rename(&tmp, path).map_err(io)
}
