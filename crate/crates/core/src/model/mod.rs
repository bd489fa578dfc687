//! Location encoder, classifier head, and the few-shot set-transformer model.

mod checkpoint;
mod encoder;
mod fsinr;
mod sinr;

use thiserror::Error;

pub use checkpoint::{
    load_checkpoint, load_into, payload_bytes, read_manifest, save_checkpoint, store_checksum, CheckpointMeta,
    Checkpointable, Manifest, TensorEntry, MANIFEST_FILE, PAYLOAD_FILE,
};
pub use encoder::{encode_points, ClassifierHead, LocationEncoder, LocationEncoderConfig, LOCATION_INPUT_DIM};
pub use fsinr::{
    presence_probability, Component, ContextSet, FsSinr, FsSinrConfig, FsSinrHead, TokenAdapter, TokenKind,
    MAX_CONTEXT_LOCATIONS, TOKEN_TYPES,
};
pub use sinr::{SinrConfig, SinrModel};

use crate::diffcore::DiffError;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Diff(#[from] DiffError),
    #[error("{kind:?} embedding has length {actual}, expected {expected}")]
    EmbeddingDimMismatch { kind: TokenKind, expected: usize, actual: usize },
    #[error("corrupt manifest: {0}")]
    CorruptManifest(String),
    #[error("payload has {actual} bytes, manifest requires {expected}")]
    PayloadLengthMismatch { expected: usize, actual: usize },
    #[error("config mismatch: {0}")]
    ConfigMismatch(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[cfg(test)]
mod tests;
