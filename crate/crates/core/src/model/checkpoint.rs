//! Checkpoint directory: `manifest.json` plus `weights.bin`, the tensors as
//! concatenated little-endian `f32` in manifest order.

use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::fsinr::{FsSinr, FsSinrConfig};
use super::sinr::{SinrConfig, SinrModel};
use super::ModelError;
use crate::diffcore::{ParamStore, Tensor};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const PAYLOAD_FILE: &str = "weights.bin";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset into the payload.
    pub offset: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub kind: String,
    pub config: serde_json::Value,
    pub seed: u64,
    pub epoch: u64,
    pub tensors: Vec<TensorEntry>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub seed: u64,
    pub epoch: u64,
}

/// A model that can be written to and rebuilt from a checkpoint.
pub trait Checkpointable: Sized {
    const KIND: &'static str;
    type Config: Serialize + DeserializeOwned + PartialEq + Copy;

    fn config(&self) -> Self::Config;
    fn store(&self) -> &ParamStore<f32>;
    fn store_mut(&mut self) -> &mut ParamStore<f32>;
    fn build(config: Self::Config) -> Result<Self, ModelError>;
}

impl Checkpointable for FsSinr<f32> {
    const KIND: &'static str = "fs_sinr";
    type Config = FsSinrConfig;

    fn config(&self) -> FsSinrConfig {
        self.config
    }
    fn store(&self) -> &ParamStore<f32> {
        &self.store
    }
    fn store_mut(&mut self) -> &mut ParamStore<f32> {
        &mut self.store
    }
    fn build(config: FsSinrConfig) -> Result<Self, ModelError> {
        FsSinr::new(config, 0)
    }
}

impl Checkpointable for SinrModel<f32> {
    const KIND: &'static str = "sinr";
    type Config = SinrConfig;

    fn config(&self) -> SinrConfig {
        self.config
    }
    fn store(&self) -> &ParamStore<f32> {
        &self.store
    }
    fn store_mut(&mut self) -> &mut ParamStore<f32> {
        &mut self.store
    }
    fn build(config: SinrConfig) -> Result<Self, ModelError> {
        Ok(SinrModel::new(config, 0))
    }
}

pub fn payload_bytes(store: &ParamStore<f32>) -> Vec<u8> {
    let mut out = Vec::with_capacity(store.total() * 4);
    for (_, _, t) in store.iter() {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

/// Hex SHA-256 of the serialized weights.
pub fn store_checksum(store: &ParamStore<f32>) -> String {
    Sha256::digest(payload_bytes(store)).iter().map(|b| format!("{b:02x}")).collect()
}

pub fn save_checkpoint<M: Checkpointable>(model: &M, dir: &Path, meta: CheckpointMeta) -> Result<(), ModelError> {
    let store = model.store();
    let mut offset = 0;
    let tensors = store
        .iter()
        .map(|(_, name, t)| {
            let entry = TensorEntry { name: name.to_string(), shape: t.shape().to_vec(), offset };
            offset += t.len() * 4;
            entry
        })
        .collect();
    let manifest = Manifest {
        kind: M::KIND.to_string(),
        config: serde_json::to_value(model.config()).map_err(|e| ModelError::CorruptManifest(e.to_string()))?,
        seed: meta.seed,
        epoch: meta.epoch,
        tensors,
    };
    fs::create_dir_all(dir)?;
    let json = serde_json::to_vec_pretty(&manifest).map_err(|e| ModelError::CorruptManifest(e.to_string()))?;
    fs::write(dir.join(MANIFEST_FILE), json)?;
    fs::write(dir.join(PAYLOAD_FILE), payload_bytes(store))?;
    Ok(())
}

pub fn read_manifest(dir: &Path) -> Result<Manifest, ModelError> {
    let bytes = fs::read(dir.join(MANIFEST_FILE))?;
    serde_json::from_slice(&bytes).map_err(|e| ModelError::CorruptManifest(e.to_string()))
}

/// Rebuilds a model from the configuration recorded in the manifest.
pub fn load_checkpoint<M: Checkpointable>(dir: &Path) -> Result<(M, CheckpointMeta), ModelError> {
    let manifest = read_manifest(dir)?;
    check_kind::<M>(&manifest)?;
    let config: M::Config = serde_json::from_value(manifest.config.clone())
        .map_err(|e| ModelError::ConfigMismatch(format!("manifest config does not describe a {}: {e}", M::KIND)))?;
    let mut model = M::build(config)?;
    fill(&mut model, dir, &manifest)?;
    Ok((model, CheckpointMeta { seed: manifest.seed, epoch: manifest.epoch }))
}

/// Loads weights into an existing model, which must have the same configuration.
pub fn load_into<M: Checkpointable>(model: &mut M, dir: &Path) -> Result<CheckpointMeta, ModelError> {
    let manifest = read_manifest(dir)?;
    check_kind::<M>(&manifest)?;
    let expected = serde_json::to_value(model.config()).map_err(|e| ModelError::CorruptManifest(e.to_string()))?;
    if expected != manifest.config {
        return Err(ModelError::ConfigMismatch(format!("checkpoint config {} != model config {}", manifest.config, expected)));
    }
    fill(model, dir, &manifest)?;
    Ok(CheckpointMeta { seed: manifest.seed, epoch: manifest.epoch })
}

fn check_kind<M: Checkpointable>(manifest: &Manifest) -> Result<(), ModelError> {
    if manifest.kind != M::KIND {
        return Err(ModelError::ConfigMismatch(format!("checkpoint holds a {} model, expected {}", manifest.kind, M::KIND)));
    }
    Ok(())
}

fn fill<M: Checkpointable>(model: &mut M, dir: &Path, manifest: &Manifest) -> Result<(), ModelError> {
    let payload = fs::read(dir.join(PAYLOAD_FILE))?;
    let expected_len: usize = manifest.tensors.iter().map(|t| t.shape.iter().product::<usize>() * 4).sum();
    if payload.len() != expected_len {
        return Err(ModelError::PayloadLengthMismatch { expected: expected_len, actual: payload.len() });
    }
    let store = model.store_mut();
    if manifest.tensors.len() != store.len() {
        return Err(ModelError::ConfigMismatch(format!("{} tensors in checkpoint, model has {}", manifest.tensors.len(), store.len())));
    }
    let mut cursor = 0;
    for entry in &manifest.tensors {
        if entry.offset != cursor {
            return Err(ModelError::CorruptManifest(format!("tensor {} at offset {}, expected {cursor}", entry.name, entry.offset)));
        }
        let id = store.find(&entry.name).ok_or_else(|| ModelError::ConfigMismatch(format!("unknown tensor {}", entry.name)))?;
        if store.value(id).shape() != entry.shape.as_slice() {
            return Err(ModelError::ConfigMismatch(format!(
                "tensor {} has shape {:?}, model expects {:?}",
                entry.name,
                entry.shape,
                store.value(id).shape()
            )));
        }
        let n: usize = entry.shape.iter().product();
        let data = payload[cursor..cursor + n * 4]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        *store.value_mut(id) = Tensor::new(&entry.shape, data)?;
        cursor += n * 4;
    }
    Ok(())
}
