//! Dense tensors, reverse-mode differentiation and the neural layers used by
//! the range models.

mod gradcheck;
mod layers;
mod params;
mod tape;
mod tensor;

use thiserror::Error;

pub use gradcheck::{finite_difference_check, relative_error, GradCheckReport, GRADCHECK_FLOOR};
pub use layers::{
    multi_head_self_attention, transformer_encoder_layer, AttentionConfig, EncoderLayer, LayerNorm, Linear,
    MultiHeadAttention, ResidualBlock,
};
pub use params::{ParamId, ParamStore};
pub use tape::{sigmoid, sigmoid_f64, Gradients, Tape, Var, PROB_CLAMP};
pub use tensor::{Scalar, Tensor};

#[allow(unused_imports)]
pub(crate) use tape::dot;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DiffError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("expected a scalar, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("variable does not belong to this tape")]
    DetachedGraph,
    #[error("rank {0} tensors are not supported")]
    UnsupportedRank(usize),
}
