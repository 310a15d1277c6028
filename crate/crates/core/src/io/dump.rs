use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{read_bytes, read_string, write_atomic};
use crate::error::{Error, Result};
use crate::model::AttentionMaps;
use crate::tensor::Tensor;

pub const ATTENTION_MAGIC: &[u8; 6] = b"ATND1\0";
pub const HIDDEN_MAGIC: &[u8; 6] = b"HIDN1\0";
/// Magic, three `u32` dimensions, zero padding.
pub const HEADER_LEN: usize = 24;
pub const ROW_TOLERANCE: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DumpMeta {
    pub prompt_id: String,
    pub step: u64,
    pub tokenizer_hash: String,
}

fn sidecar(path: &Path) -> PathBuf {
    path.with_extension("toml")
}

fn encode(magic: &[u8; 6], dims: [usize; 3], values: impl Iterator<Item = f64>) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(HEADER_LEN);
    out.extend_from_slice(magic);
    for d in dims {
        let d = u32::try_from(d).map_err(|_| Error::invalid(format!("dimension {d} exceeds u32")))?;
        out.extend_from_slice(&d.to_le_bytes());
    }
    out.resize(HEADER_LEN, 0);
    for v in values {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    Ok(out)
}

fn decode(path: &Path, magic: &'static [u8; 6], bytes: &[u8]) -> Result<([usize; 3], Vec<f64>)> {
    let name = std::str::from_utf8(&magic[..5]).expect("ascii magic");
    if bytes.len() < HEADER_LEN || &bytes[..6] != magic {
        return Err(Error::BadMagic { path: path.to_path_buf(), expected: name });
    }
    let dim = |i: usize| u32::from_le_bytes(bytes[6 + 4 * i..10 + 4 * i].try_into().expect("4 bytes")) as usize;
    let dims = [dim(0), dim(1), dim(2)];
    let count =
        dims.iter().map(|&d| d as u64).product::<u64>() * if magic == ATTENTION_MAGIC { dims[2] as u64 } else { 1 };
    let expected = HEADER_LEN as u64 + 4 * count;
    if bytes.len() as u64 != expected {
        return Err(Error::SizeMismatch { path: path.to_path_buf(), expected, found: bytes.len() as u64 });
    }
    let values = bytes[HEADER_LEN..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
        .collect();
    Ok((dims, values))
}

/// Writes `[L, H, T, T]` attention as little-endian `f32` plus a TOML sidecar.
pub fn save_dump(path: &Path, maps: &AttentionMaps, meta: &DumpMeta) -> Result<()> {
    let bytes = encode(ATTENTION_MAGIC, [maps.n_layers, maps.n_heads, maps.seq_len], maps.data.iter().copied())?;
    write_atomic(path, &bytes)?;
    let text = toml::to_string(meta).map_err(|e| Error::parse(path, e))?;
    write_atomic(&sidecar(path), text.as_bytes())
}

/// Reads an attention dump and checks every query row sums to 1.
pub fn load_dump(path: &Path) -> Result<AttentionMaps> {
    let bytes = read_bytes(path)?;
    let ([l, h, t], data) = decode(path, ATTENTION_MAGIC, &bytes)?;
    for (r, row) in data.chunks_exact(t.max(1)).enumerate() {
        let sum: f64 = row.iter().sum();
        if !((sum - 1.0).abs() <= ROW_TOLERANCE) {
            return Err(Error::NotStochastic { path: path.to_path_buf(), row: r, sum });
        }
    }
    Ok(AttentionMaps { n_layers: l, n_heads: h, seq_len: t, data })
}

pub fn load_dump_meta(path: &Path) -> Result<DumpMeta> {
    let p = sidecar(path);
    toml::from_str(&read_string(&p)?).map_err(|e| Error::parse(&p, e))
}

/// Writes per-layer residual states `[L, T, D]` as little-endian `f32`.
pub fn save_hidden(path: &Path, states: &[Tensor], meta: &DumpMeta) -> Result<()> {
    let (t, d) = match states.first() {
        Some(s) => s.dims2("save_hidden")?,
        None => (0, 0),
    };
    for s in states {
        if s.dims2("save_hidden")? != (t, d) {
            return Err(Error::shape("save_hidden", "layers disagree on [T, D]"));
        }
    }
    let bytes = encode(HIDDEN_MAGIC, [states.len(), t, d], states.iter().flat_map(|s| s.data().iter().copied()))?;
    write_atomic(path, &bytes)?;
    let text = toml::to_string(meta).map_err(|e| Error::parse(path, e))?;
    write_atomic(&sidecar(path), text.as_bytes())
}

pub fn load_hidden(path: &Path) -> Result<Vec<Tensor>> {
    let bytes = read_bytes(path)?;
    let ([l, t, d], data) = decode(path, HIDDEN_MAGIC, &bytes)?;
    Ok((0..l)
        .map(|i| Tensor::new(vec![t, d], data[i * t * d..(i + 1) * t * d].to_vec()).expect("sized slice"))
        .collect())
}
