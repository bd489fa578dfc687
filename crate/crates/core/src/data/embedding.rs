use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::DataError;

pub const TEXT_EMBEDDING_DIM: usize = 4096;
pub const IMAGE_EMBEDDING_DIM: usize = 1024;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProviderKind {
    Stub,
    FileBacked,
}

/// Source of per-species text or image vectors.
pub trait EmbeddingProvider: Send + Sync {
    fn kind(&self) -> ProviderKind;
    fn dim(&self) -> usize;
    fn embedding(&self, species_id: u32) -> Option<Vec<f32>>;
}

/// 64-bit FNV-1a. Fixed so stub vectors agree across platforms and runs.
fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Hashed bag of words: each lowercased whitespace token adds ±1 to one of
/// `dim` buckets, then the vector is L2-normalized. Empty text gives zeros.
pub fn hashed_bag_of_words(text: &str, dim: usize) -> Vec<f32> {
    let mut v = vec![0f64; dim];
    for token in text.split_whitespace() {
        let h = fnv1a(token.to_lowercase().as_bytes());
        let sign = if h >> 63 == 1 { -1.0 } else { 1.0 };
        v[(h % dim as u64) as usize] += sign;
    }
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        v.iter().map(|x| (x / norm) as f32).collect()
    } else {
        vec![0.0; dim]
    }
}

pub fn stub_text_embedding(text: &str) -> Vec<f32> {
    hashed_bag_of_words(text, TEXT_EMBEDDING_DIM)
}

/// Deterministic text provider over a species → description table.
#[derive(Debug, Clone, Default)]
pub struct StubTextProvider {
    pub texts: BTreeMap<u32, String>,
    pub dim: usize,
}

impl StubTextProvider {
    pub fn new(texts: BTreeMap<u32, String>) -> Self {
        Self { texts, dim: TEXT_EMBEDDING_DIM }
    }
}

impl EmbeddingProvider for StubTextProvider {
    fn kind(&self) -> ProviderKind {
        ProviderKind::Stub
    }
    fn dim(&self) -> usize {
        self.dim
    }
    fn embedding(&self, species_id: u32) -> Option<Vec<f32>> {
        self.texts.get(&species_id).map(|t| hashed_bag_of_words(t, self.dim))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingManifest {
    pub dim: usize,
    /// Payload file name, relative to the manifest.
    pub payload: String,
    /// Byte offset of each species' vector.
    pub species: BTreeMap<u32, usize>,
}

/// Externally computed vectors: a JSON manifest plus a raw `f32` LE payload.
#[derive(Debug, Clone)]
pub struct FileEmbeddingProvider {
    dim: usize,
    offsets: HashMap<u32, usize>,
    payload: Vec<f32>,
}

impl EmbeddingProvider for FileEmbeddingProvider {
    fn kind(&self) -> ProviderKind {
        ProviderKind::FileBacked
    }
    fn dim(&self) -> usize {
        self.dim
    }
    fn embedding(&self, species_id: u32) -> Option<Vec<f32>> {
        let start = *self.offsets.get(&species_id)? / 4;
        Some(self.payload[start..start + self.dim].to_vec())
    }
}

pub fn file_embedding_provider(manifest_path: &Path) -> Result<FileEmbeddingProvider, DataError> {
    let bytes = fs::read(manifest_path)?;
    let manifest: EmbeddingManifest = serde_json::from_slice(&bytes).map_err(|e| DataError::CorruptManifest(e.to_string()))?;
    if manifest.dim == 0 {
        return Err(DataError::CorruptManifest("dim must be positive".into()));
    }
    let payload_path = manifest_path.parent().unwrap_or(Path::new(".")).join(&manifest.payload);
    let raw = fs::read(payload_path)?;
    let stride = manifest.dim * 4;
    let expected = manifest.species.len() * stride;
    if raw.len() != expected {
        return Err(DataError::PayloadLengthMismatch { expected, actual: raw.len() });
    }
    for (id, &offset) in &manifest.species {
        if offset % stride != 0 || offset + stride > raw.len() {
            return Err(DataError::CorruptManifest(format!("species {id}: offset {offset} is not a vector boundary")));
        }
    }
    let payload = raw.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
    Ok(FileEmbeddingProvider { dim: manifest.dim, offsets: manifest.species.into_iter().collect(), payload })
}

/// Writes `<stem>.json` and `<stem>.bin`; returns the manifest path.
pub fn write_embedding_file(stem: &Path, dim: usize, vectors: &BTreeMap<u32, Vec<f32>>) -> Result<PathBuf, DataError> {
    let manifest_path = stem.with_extension("json");
    let payload_path = stem.with_extension("bin");
    let mut payload = Vec::with_capacity(vectors.len() * dim * 4);
    let mut species = BTreeMap::new();
    for (&id, v) in vectors {
        if v.len() != dim {
            return Err(DataError::InvalidConfig(format!("species {id} vector has length {}, expected {dim}", v.len())));
        }
        species.insert(id, payload.len());
        for x in v {
            payload.extend_from_slice(&x.to_le_bytes());
        }
    }
    let manifest = EmbeddingManifest {
        dim,
        payload: payload_path.file_name().and_then(|n| n.to_str()).unwrap_or_default().to_string(),
        species,
    };
    fs::write(&payload_path, payload)?;
    fs::write(&manifest_path, serde_json::to_vec_pretty(&manifest).map_err(|e| DataError::CorruptManifest(e.to_string()))?)?;
    Ok(manifest_path)
}

/// Materialized text/image vectors for the species a run touches.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct EmbeddingTable {
    pub text: BTreeMap<u32, Vec<f32>>,
    pub image: BTreeMap<u32, Vec<f32>>,
}

impl EmbeddingTable {
    pub fn from_providers(
        species: impl IntoIterator<Item = u32>,
        text: Option<&dyn EmbeddingProvider>,
        image: Option<&dyn EmbeddingProvider>,
    ) -> Self {
        let mut table = Self::default();
        for id in species {
            if let Some(v) = text.and_then(|p| p.embedding(id)) {
                table.text.insert(id, v);
            }
            if let Some(v) = image.and_then(|p| p.embedding(id)) {
                table.image.insert(id, v);
            }
        }
        table
    }

    pub fn text(&self, id: u32) -> Option<&[f32]> {
        self.text.get(&id).map(Vec::as_slice)
    }

    pub fn image(&self, id: u32) -> Option<&[f32]> {
        self.image.get(&id).map(Vec::as_slice)
    }
}
