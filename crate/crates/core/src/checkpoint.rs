// SPDX-License-Identifier: Apache-2.0

//! Versioned checkpoint container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic    8 bytes  "EVFCKPT\0"
//! version  u32      FORMAT_VERSION
//! length   u64      byte length of the JSON manifest
//! manifest JSON     Manifest
//! payload  f64 LE   tensors concatenated in manifest order
//! ```
//!
//! Loading rebuilds the model skeleton from the stored config and stage,
//! then overwrites every tensor by name, so a round trip is bit-exact.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::micro_model::{MicroModel, ModelConfig, Stage};
use crate::param::ParamGroup;

pub const MAGIC: &[u8; 8] = b"EVFCKPT\0";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub group: ParamGroup,
    pub shape: Vec<usize>,
    pub trainable: bool,
    /// Offset into the payload, in `f64` elements.
    pub offset: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub stage: Stage,
    pub config: ModelConfig,
    pub tensors: Vec<TensorEntry>,
}

pub fn to_bytes(model: &MicroModel) -> Result<Vec<u8>> {
    let mut tensors = Vec::with_capacity(model.store.len());
    let mut payload = Vec::new();
    let mut offset = 0;
    for (_, p) in model.store.iter() {
        tensors.push(TensorEntry {
            name: p.name.clone(),
            group: p.group,
            shape: p.value.shape().to_vec(),
            trainable: p.trainable,
            offset,
        });
        offset += p.value.numel();
        for v in p.value.data() {
            payload.extend_from_slice(&v.to_le_bytes());
        }
    }
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        stage: model.stage,
        config: model.cfg.clone(),
        tensors,
    };
    let json = serde_json::to_vec(&manifest)?;
    let mut out = Vec::with_capacity(20 + json.len() + payload.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&payload);
    Ok(out)
}

pub fn read_manifest(bytes: &[u8]) -> Result<(Manifest, &[u8])> {
    if bytes.len() < 20 || &bytes[..8] != MAGIC {
        return Err(Error::Checkpoint("missing EVFCKPT header".into()));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported format version {version}")));
    }
    let len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
    let body = &bytes[20..];
    if body.len() < len {
        return Err(Error::Checkpoint("truncated manifest".into()));
    }
    let manifest: Manifest = serde_json::from_slice(&body[..len])?;
    Ok((manifest, &body[len..]))
}

pub fn from_bytes(bytes: &[u8]) -> Result<MicroModel> {
    let (manifest, payload) = read_manifest(bytes)?;
    let mut model = MicroModel::build(manifest.config.clone())?;
    model.set_stage(manifest.stage)?;
    if model.store.len() != manifest.tensors.len() {
        return Err(Error::Checkpoint(format!(
            "manifest lists {} tensors, model has {}",
            manifest.tensors.len(),
            model.store.len()
        )));
    }
    for entry in &manifest.tensors {
        let id = model
            .store
            .find(&entry.name)
            .ok_or_else(|| Error::Checkpoint(format!("unknown tensor `{}`", entry.name)))?;
        let p = model.store.get_mut(id);
        if p.value.shape() != entry.shape.as_slice() {
            return Err(Error::Checkpoint(format!("shape mismatch for `{}`", entry.name)));
        }
        let start = entry.offset * 8;
        let end = start + p.value.numel() * 8;
        let raw = payload
            .get(start..end)
            .ok_or_else(|| Error::Checkpoint(format!("payload too short for `{}`", entry.name)))?;
        for (v, chunk) in p.value.data_mut().iter_mut().zip(raw.chunks_exact(8)) {
            *v = f64::from_le_bytes(chunk.try_into().expect("8 bytes"));
        }
        p.trainable = entry.trainable;
    }
    Ok(model)
}

pub fn save(model: &MicroModel, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, to_bytes(model)?)?;
    Ok(())
}

pub fn load(path: impl AsRef<Path>) -> Result<MicroModel> {
    from_bytes(&fs::read(path)?)
}
