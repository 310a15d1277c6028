use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{read_bytes, read_string, write_atomic};
use crate::corpus::Stage;
use crate::error::{Error, Result};
use crate::model::{init_params, ModelConfig, ModelParams};
use crate::rng::streams;
use crate::trainer::{OptimState, RunMode};

const PARAMS_MAGIC: &[u8; 8] = b"PARM1\0\0\0";
const OPTIM_MAGIC: &[u8; 8] = b"OPTM1\0\0\0";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

/// Batch order is fixed by the seed, so the stream position is the number of
/// updates already drawn.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RngState {
    pub seed: u64,
    pub stream: u64,
    pub updates_drawn: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointManifest {
    pub step: u64,
    pub mode: RunMode,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stage: Option<Stage>,
    pub stage_end: bool,
    pub optim_step: u64,
    pub rng: RngState,
    pub model: ModelConfig,
    pub tensors: Vec<TensorEntry>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub manifest: CheckpointManifest,
    pub params: ModelParams,
    pub state: OptimState,
}

fn push_f64s(out: &mut Vec<u8>, xs: &[f64]) {
    for x in xs {
        out.extend_from_slice(&x.to_le_bytes());
    }
}

/// Where in a run a checkpoint was taken.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CheckpointInfo {
    pub step: u64,
    pub mode: RunMode,
    pub stage: Option<Stage>,
    pub stage_end: bool,
    pub seed: u64,
}

/// Writes `manifest.toml`, `params.bin` and `optim.bin` into `dir`.
pub fn save_checkpoint(
    dir: &Path,
    params: &ModelParams,
    state: &OptimState,
    info: CheckpointInfo,
) -> Result<CheckpointManifest> {
    let named = params.named_tensors();
    let manifest = CheckpointManifest {
        step: info.step,
        mode: info.mode,
        stage: info.stage,
        stage_end: info.stage_end,
        optim_step: state.t,
        rng: RngState { seed: info.seed, stream: streams::BATCHES, updates_drawn: info.step },
        model: params.config.clone(),
        tensors: named.iter().map(|(n, t)| TensorEntry { name: n.clone(), shape: t.shape().to_vec() }).collect(),
    };
    let mut pbytes = PARAMS_MAGIC.to_vec();
    for (_, t) in &named {
        push_f64s(&mut pbytes, t.data());
    }
    let mut obytes = OPTIM_MAGIC.to_vec();
    obytes.extend_from_slice(&state.t.to_le_bytes());
    obytes.extend_from_slice(&(state.m.len() as u64).to_le_bytes());
    for buf in state.m.iter().chain(&state.v) {
        obytes.extend_from_slice(&(buf.len() as u64).to_le_bytes());
        push_f64s(&mut obytes, buf);
    }
    write_atomic(&dir.join("params.bin"), &pbytes)?;
    write_atomic(&dir.join("optim.bin"), &obytes)?;
    let text = toml::to_string(&manifest).map_err(|e| Error::parse(dir, e))?;
    write_atomic(&dir.join("manifest.toml"), text.as_bytes())?;
    Ok(manifest)
}

struct Reader<'a> {
    path: &'a Path,
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::SizeMismatch {
                path: self.path.to_path_buf(),
                expected: (self.pos + n) as u64,
                found: self.bytes.len() as u64,
            });
        }
        self.pos += n;
        Ok(&self.bytes[self.pos - n..self.pos])
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64s(&mut self, out: &mut [f64]) -> Result<()> {
        let raw = self.take(8 * out.len())?;
        for (x, c) in out.iter_mut().zip(raw.chunks_exact(8)) {
            *x = f64::from_le_bytes(c.try_into().expect("8 bytes"));
        }
        Ok(())
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(Error::SizeMismatch {
                path: self.path.to_path_buf(),
                expected: self.pos as u64,
                found: self.bytes.len() as u64,
            });
        }
        Ok(())
    }
}

fn check_magic(path: &Path, bytes: &[u8], magic: &[u8; 8], name: &'static str) -> Result<()> {
    if bytes.len() < 8 || &bytes[..8] != magic {
        return Err(Error::BadMagic { path: path.to_path_buf(), expected: name });
    }
    Ok(())
}

pub fn load_checkpoint(dir: &Path) -> Result<Checkpoint> {
    let mpath = dir.join("manifest.toml");
    let manifest: CheckpointManifest = toml::from_str(&read_string(&mpath)?).map_err(|e| Error::parse(&mpath, e))?;
    let mut params = init_params(&manifest.model)?;

    let ppath = dir.join("params.bin");
    let pbytes = read_bytes(&ppath)?;
    check_magic(&ppath, &pbytes, PARAMS_MAGIC, "PARM1")?;
    let mut r = Reader { path: &ppath, bytes: &pbytes, pos: 8 };
    let mut named = params.named_tensors_mut();
    if named.len() != manifest.tensors.len() {
        return Err(Error::parse(&mpath, "tensor list does not match the model config"));
    }
    for ((name, t), entry) in named.iter_mut().zip(&manifest.tensors) {
        if *name != entry.name || t.shape() != entry.shape.as_slice() {
            return Err(Error::parse(&mpath, format!("unexpected tensor {} {:?}", entry.name, entry.shape)));
        }
        r.f64s(t.data_mut())?;
    }
    r.finish()?;

    let opath = dir.join("optim.bin");
    let obytes = read_bytes(&opath)?;
    check_magic(&opath, &obytes, OPTIM_MAGIC, "OPTM1")?;
    let mut r = Reader { path: &opath, bytes: &obytes, pos: 8 };
    let t = r.u64()?;
    let n = r.u64()? as usize;
    let mut bufs = Vec::with_capacity(2 * n);
    for _ in 0..2 * n {
        let len = r.u64()? as usize;
        let mut buf = vec![0.0; len.min(obytes.len() / 8)];
        if buf.len() != len {
            return Err(Error::parse(&opath, "moment length exceeds file"));
        }
        r.f64s(&mut buf)?;
        bufs.push(buf);
    }
    r.finish()?;
    let v = bufs.split_off(n);
    Ok(Checkpoint { manifest, params, state: OptimState { m: bufs, v, t } })
}
