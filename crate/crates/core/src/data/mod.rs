//! Observation ingestion, embedding providers and the synthetic world.

mod embedding;
mod observations;
mod synthetic;

use std::collections::BTreeSet;

use thiserror::Error;

pub use embedding::{
    file_embedding_provider, hashed_bag_of_words, stub_text_embedding, write_embedding_file, EmbeddingManifest,
    EmbeddingProvider, EmbeddingTable, FileEmbeddingProvider, ProviderKind, StubTextProvider, IMAGE_EMBEDDING_DIM,
    TEXT_EMBEDDING_DIM,
};
pub use observations::{load_observations, Observation, ObservationStore};
pub use synthetic::{
    generate_synthetic_world, EnvBump, EnvironmentField, SpeciesNiche, SyntheticConfig, SyntheticWorld, MASK_DIR,
    OBSERVATIONS_FILE, TEXTS_FILE, WORLD_FILE,
};

use crate::geo::GeoError;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("line {line}: coordinate out of range")]
    OutOfRangeCoordinate { line: usize },
    #[error("corrupt manifest: {0}")]
    CorruptManifest(String),
    #[error("payload has {actual} bytes, manifest requires {expected}")]
    PayloadLengthMismatch { expected: usize, actual: usize },
    #[error("species {0}: could not place a range with 2-20% coverage")]
    DegenerateSpecies(u32),
    #[error("held-out species present in training data: {0:?}")]
    HoldoutLeak(Vec<u32>),
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Geo(#[from] GeoError),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Fails if any held-out id appears among the training ids.
pub fn audit_holdout(train: &BTreeSet<u32>, holdout: &BTreeSet<u32>) -> Result<(), DataError> {
    let leaked: Vec<u32> = train.intersection(holdout).copied().collect();
    if leaked.is_empty() {
        Ok(())
    } else {
        Err(DataError::HoldoutLeak(leaked))
    }
}
