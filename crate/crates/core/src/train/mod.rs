//! Presence-only losses, Adam, context assembly and the two training stages.

mod adam;
mod loss;
mod pipeline;

use thiserror::Error;

pub use adam::{adam_step, AdamState};
pub use loss::{loss_an_full, loss_an_full_batch, loss_an_full_classifier};
pub use pipeline::{
    assemble_context, capped_examples, fsinr_batch_loss, lr_at_epoch, pretrain_sinr, sinr_batch_loss, train_fsinr,
    FsSinrTraining, SinrTraining, TrainConfig, TrainingExample,
};

use crate::data::DataError;
use crate::diffcore::DiffError;
use crate::model::ModelError;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("probability {0} outside [0, 1]")]
    DomainError(f64),
    #[error("empty batch")]
    EmptyBatch,
    #[error("invalid batch: {0}")]
    InvalidBatch(String),
    #[error("no training data")]
    NoTrainingData,
    #[error("few-shot training needs a pretrained location encoder")]
    MissingEncoder,
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Diff(#[from] DiffError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Data(#[from] DataError),
}
