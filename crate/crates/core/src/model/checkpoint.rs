//! Checkpoint file: `R2U3DCKP` magic, `u32` format version, `u64` manifest
//! length, a JSON manifest, then every parameter as little-endian `f32`
//! in manifest order. All integers are little-endian.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Architecture, Model, ModelConfig};
use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::tensor::{Shape, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"R2U3DCKP";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    format_version: u32,
    config: ModelConfig,
    tensors: Vec<Entry>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Entry {
    name: String,
    shape: [usize; 5],
    /// Offset into the payload, in elements.
    offset: usize,
}

pub fn encode(model: &Model<f32>) -> Result<Vec<u8>> {
    let mut offset = 0;
    let tensors = model
        .params
        .iter()
        .map(|(name, t)| {
            let e = Entry { name: name.to_string(), shape: t.shape().0, offset };
            offset += t.numel();
            e
        })
        .collect();
    let manifest = Manifest { format_version: CHECKPOINT_VERSION, config: model.config().clone(), tensors };
    let json = serde_json::to_vec(&manifest).map_err(|e| Error::Config(e.to_string()))?;
    let mut out = Vec::with_capacity(20 + json.len() + offset * 4);
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for (_, t) in model.params.iter() {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode(bytes: &[u8], path: &Path) -> Result<Model<f32>> {
    let bad = |detail: &str| Error::format(path, detail);
    if bytes.len() < 20 || &bytes[..8] != CHECKPOINT_MAGIC {
        return Err(bad("not a checkpoint (bad magic)"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(bad(&format!("unsupported checkpoint version {version}")));
    }
    let mlen = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
    let body = &bytes[20..];
    if body.len() < mlen {
        return Err(bad("truncated manifest"));
    }
    let manifest: Manifest =
        serde_json::from_slice(&body[..mlen]).map_err(|e| bad(&format!("invalid manifest: {e}")))?;
    let payload = &body[mlen..];
    if payload.len() % 4 != 0 {
        return Err(bad("payload length is not a multiple of 4"));
    }
    let floats: Vec<f32> = payload.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();

    let mut params = ParamStore::new();
    let mut expected = 0;
    for e in &manifest.tensors {
        let shape = Shape(e.shape);
        if e.offset != expected || e.offset + shape.numel() > floats.len() {
            return Err(bad(&format!("tensor `{}` lies outside the payload", e.name)));
        }
        let data = floats[e.offset..e.offset + shape.numel()].to_vec();
        params.insert(e.name.clone(), Tensor::from_vec(shape, data)?)?;
        expected += shape.numel();
    }
    if expected != floats.len() {
        return Err(bad("payload holds trailing data"));
    }
    let arch = Architecture::new(&manifest.config)?;
    Model::from_parts(arch, params)
}

pub fn write_checkpoint(model: &Model<f32>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode(model)?).map_err(|e| Error::io(path, e))
}

pub fn read_checkpoint(path: impl AsRef<Path>) -> Result<Model<f32>> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, path)
}
