//! `AFTN` tensor files: `b"AFTN"`, version byte, dtype byte (1 = f64 LE),
//! u32 rank, u32 dims, then the raw little-endian values. An optional JSON
//! sidecar `<stem>.json` carries free-form metadata.

use std::fs;
use std::path::{Path, PathBuf};

use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub const MAGIC: &[u8; 4] = b"AFTN";
pub const VERSION: u8 = 1;
pub const DTYPE_F64: u8 = 1;

pub fn encode<S: Scalar>(t: &Tensor<S>) -> Vec<u8> {
    let mut out = Vec::with_capacity(10 + 4 * t.rank() + 8 * t.len());
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    out.push(DTYPE_F64);
    out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
    for &d in t.shape() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for v in t.data() {
        out.extend_from_slice(&v.as_f64().to_le_bytes());
    }
    out
}

pub fn decode<S: Scalar>(bytes: &[u8]) -> std::result::Result<Tensor<S>, String> {
    if bytes.len() < 10 || &bytes[..4] != MAGIC {
        return Err("missing AFTN magic".into());
    }
    if bytes[4] != VERSION {
        return Err(format!("unsupported version {}", bytes[4]));
    }
    if bytes[5] != DTYPE_F64 {
        return Err(format!("unsupported dtype {}", bytes[5]));
    }
    let u32_at = |p: usize| -> std::result::Result<u32, String> {
        bytes
            .get(p..p + 4)
            .map(|b| u32::from_le_bytes(b.try_into().unwrap()))
            .ok_or_else(|| "truncated header".to_string())
    };
    let rank = u32_at(6)? as usize;
    if rank == 0 || rank > 16 {
        return Err(format!("implausible rank {rank}"));
    }
    let mut shape = Vec::with_capacity(rank);
    for i in 0..rank {
        shape.push(u32_at(10 + 4 * i)? as usize);
    }
    let start = 10 + 4 * rank;
    let count: usize = shape.iter().product();
    let payload = &bytes[start..];
    if payload.len() != 8 * count {
        return Err(format!(
            "payload has {} bytes, shape {shape:?} needs {}",
            payload.len(),
            8 * count
        ));
    }
    let data: Vec<S> = payload
        .chunks_exact(8)
        .map(|c| S::of(f64::from_le_bytes(c.try_into().unwrap())))
        .collect();
    Tensor::new(shape, data).map_err(|e| e.to_string())
}

pub fn write<S: Scalar>(path: &Path, t: &Tensor<S>) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir)?;
        }
    }
    fs::write(path, encode(t))?;
    Ok(())
}

pub fn read<S: Scalar>(path: &Path) -> Result<Tensor<S>> {
    let bytes = fs::read(path)?;
    decode(&bytes).map_err(|detail| Error::Ingest {
        file: path.to_path_buf(),
        detail,
    })
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    path.with_extension("json")
}

/// Writes `<stem>.json` next to the tensor file.
pub fn write_sidecar(path: &Path, meta: &serde_json::Value) -> Result<()> {
    fs::write(sidecar_path(path), serde_json::to_string_pretty(meta)?)?;
    Ok(())
}

pub fn read_sidecar(path: &Path) -> Result<Option<serde_json::Value>> {
    let p = sidecar_path(path);
    if !p.exists() {
        return Ok(None);
    }
    Ok(Some(serde_json::from_slice(&fs::read(p)?)?))
}
