//! Single-file model checkpoints.
//!
//! Layout (little-endian):
//!
//! ```text
//! "SCKP" | u16 version | u32 manifest_len | manifest JSON | f32 blob
//! ```
//!
//! The manifest records the architecture, the initialisation recipe, a
//! tensor table (name, shape, byte offset into the blob, trainable flag)
//! and free-form metadata.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::unet::{Unet, UnetSpec};
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"SCKP";
pub const CHECKPOINT_VERSION: u16 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InitRecipe {
    pub scheme: String,
    pub std: f64,
    pub seed: u64,
    pub bias: f64,
    pub bn_scale: f64,
    pub bn_shift: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset into the blob.
    pub offset: usize,
    pub trainable: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub spec: UnetSpec,
    pub init: InitRecipe,
    pub tensors: Vec<TensorEntry>,
    #[serde(default)]
    pub metadata: serde_json::Value,
}

impl CheckpointManifest {
    /// Trainable parameter count computed from the shape table.
    pub fn parameter_count(&self) -> usize {
        self.tensors
            .iter()
            .filter(|t| t.trainable)
            .map(|t| t.shape.iter().product::<usize>())
            .sum()
    }
}

/// A loaded checkpoint.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub manifest: CheckpointManifest,
    pub model: Unet<f32>,
}

pub fn encode_checkpoint(model: &Unet<f32>, metadata: serde_json::Value) -> Result<Vec<u8>> {
    let spec = model.spec().clone();
    let mut tensors = Vec::new();
    let mut offset = 0;
    for p in model.params() {
        tensors.push(TensorEntry {
            name: p.name.clone(),
            shape: p.shape.clone(),
            offset,
            trainable: p.trainable,
        });
        offset += p.value.len() * 4;
    }
    let manifest = CheckpointManifest {
        init: InitRecipe {
            scheme: "normal".into(),
            std: spec.init_std,
            seed: model.init_seed(),
            bias: 0.0,
            bn_scale: 1.0,
            bn_shift: 0.0,
        },
        spec,
        tensors,
        metadata,
    };
    let json = serde_json::to_vec(&manifest)?;
    let mut out = Vec::with_capacity(10 + json.len() + offset);
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    for p in model.params() {
        for v in &p.value {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

fn take<'a>(bytes: &'a [u8], at: usize, len: usize) -> Result<&'a [u8]> {
    bytes.get(at..at + len).ok_or(Error::Truncated {
        expected: at + len,
        found: bytes.len(),
    })
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let magic = take(bytes, 0, 4)?;
    if magic != CHECKPOINT_MAGIC {
        return Err(Error::BadMagic {
            expected: *CHECKPOINT_MAGIC,
            found: magic.try_into().unwrap(),
        });
    }
    let version = u16::from_le_bytes(take(bytes, 4, 2)?.try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(Error::Version {
            expected: CHECKPOINT_VERSION,
            found: version,
        });
    }
    let json_len = u32::from_le_bytes(take(bytes, 6, 4)?.try_into().unwrap()) as usize;
    let manifest: CheckpointManifest = serde_json::from_slice(take(bytes, 10, json_len)?)?;
    let blob = &bytes[10 + json_len..];
    let mut tensors = Vec::with_capacity(manifest.tensors.len());
    for t in &manifest.tensors {
        let len: usize = t.shape.iter().product();
        let raw = take(blob, t.offset, len * 4).map_err(|_| Error::Truncated {
            expected: 10 + json_len + t.offset + len * 4,
            found: bytes.len(),
        })?;
        let values: Vec<f32> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { index: i });
        }
        tensors.push((t.name.clone(), t.shape.clone(), values));
    }
    let model = Unet::from_tensors(manifest.spec.clone(), manifest.init.seed, tensors)?;
    Ok(Checkpoint { manifest, model })
}

pub fn save_checkpoint(model: &Unet<f32>, metadata: serde_json::Value, path: &Path) -> Result<()> {
    let bytes = encode_checkpoint(model, metadata)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}
