//! Parameterized building blocks recorded onto a [`Tape`].

use std::ops::Range;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::params::{ParamId, ParamStore};
use super::tape::{Tape, Var};
use super::tensor::{Scalar, Tensor};
use super::DiffError;

/// `y = x·W + b` with `W` stored as `in × out`.
#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<T: Scalar, R: Rng + ?Sized>(store: &mut ParamStore<T>, name: &str, in_dim: usize, out_dim: usize, rng: &mut R) -> Self {
        let weight = store.add_uniform(format!("{name}.weight"), &[in_dim, out_dim], in_dim, rng);
        let bias = store.add_uniform(format!("{name}.bias"), &[1, out_dim], in_dim, rng);
        Self { weight, bias, in_dim, out_dim }
    }

    pub fn params(&self) -> [ParamId; 2] {
        [self.weight, self.bias]
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var, DiffError> {
        let w = tape.param(store, self.weight);
        let b = tape.param(store, self.bias);
        let y = tape.matmul(x, w)?;
        tape.add_bias(y, b)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, dim: usize, eps: f64) -> Self {
        let gamma = store.add(format!("{name}.gamma"), Tensor::filled(&[1, dim], T::one()));
        let beta = store.add(format!("{name}.beta"), Tensor::zeros(&[1, dim]));
        Self { gamma, beta, eps }
    }

    pub fn params(&self) -> [ParamId; 2] {
        [self.gamma, self.beta]
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var, DiffError> {
        let g = tape.param(store, self.gamma);
        let b = tape.param(store, self.beta);
        tape.layer_norm(x, g, b, self.eps)
    }
}

/// `y = x + dropout(ReLU(L₂(ReLU(L₁(x)))))`
#[derive(Debug, Clone, Copy)]
pub struct ResidualBlock {
    pub first: Linear,
    pub second: Linear,
}

impl ResidualBlock {
    pub fn new<T: Scalar, R: Rng + ?Sized>(store: &mut ParamStore<T>, name: &str, dim: usize, rng: &mut R) -> Self {
        Self {
            first: Linear::new(store, &format!("{name}.0"), dim, dim, rng),
            second: Linear::new(store, &format!("{name}.1"), dim, dim, rng),
        }
    }

    pub fn params(&self) -> Vec<ParamId> {
        [self.first.params(), self.second.params()].concat()
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var, dropout: f64) -> Result<Var, DiffError> {
        let h = self.first.forward(tape, store, x)?;
        let h = tape.relu(h)?;
        let h = self.second.forward(tape, store, h)?;
        let h = tape.relu(h)?;
        let h = tape.dropout(h, dropout)?;
        tape.add(x, h)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttentionConfig {
    pub model_dim: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub layer_norm_eps: f64,
}

impl Default for AttentionConfig {
    fn default() -> Self {
        Self { model_dim: 256, heads: 2, ffn_dim: 512, layer_norm_eps: 1e-5 }
    }
}

impl AttentionConfig {
    pub fn head_dim(&self) -> usize {
        self.model_dim / self.heads
    }

    pub fn validate(&self) -> Result<(), DiffError> {
        if self.heads == 0 || self.model_dim % self.heads != 0 {
            return Err(DiffError::ShapeMismatch(format!(
                "model_dim {} not divisible by {} heads",
                self.model_dim, self.heads
            )));
        }
        Ok(())
    }
}

/// Packed query/key/value projection, scaled dot-product attention per
/// head, then an output projection.
#[derive(Debug, Clone, Copy)]
pub struct MultiHeadAttention {
    pub in_proj: Linear,
    pub out_proj: Linear,
    pub heads: usize,
}

impl MultiHeadAttention {
    pub fn new<T: Scalar, R: Rng + ?Sized>(store: &mut ParamStore<T>, name: &str, cfg: &AttentionConfig, rng: &mut R) -> Self {
        let d = cfg.model_dim;
        Self {
            in_proj: Linear::new(store, &format!("{name}.in_proj"), d, 3 * d, rng),
            out_proj: Linear::new(store, &format!("{name}.out_proj"), d, d, rng),
            heads: cfg.heads,
        }
    }

    pub fn params(&self) -> Vec<ParamId> {
        [self.in_proj.params(), self.out_proj.params()].concat()
    }

    /// Self-attention within each segment of rows of `x`.
    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var, segments: &[Range<usize>]) -> Result<Var, DiffError> {
        let qkv = self.in_proj.forward(tape, store, x)?;
        let heads = tape.attention(qkv, segments, self.heads)?;
        self.out_proj.forward(tape, store, heads)
    }
}

/// Post-norm encoder layer: `y = LN(x + Attn(x))`, `z = LN(y + FFN(y))`.
#[derive(Debug, Clone, Copy)]
pub struct EncoderLayer {
    pub attention: MultiHeadAttention,
    pub norm1: LayerNorm,
    pub ff1: Linear,
    pub ff2: Linear,
    pub norm2: LayerNorm,
}

impl EncoderLayer {
    pub fn new<T: Scalar, R: Rng + ?Sized>(store: &mut ParamStore<T>, name: &str, cfg: &AttentionConfig, rng: &mut R) -> Self {
        let d = cfg.model_dim;
        Self {
            attention: MultiHeadAttention::new(store, &format!("{name}.self_attn"), cfg, rng),
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), d, cfg.layer_norm_eps),
            ff1: Linear::new(store, &format!("{name}.linear1"), d, cfg.ffn_dim, rng),
            ff2: Linear::new(store, &format!("{name}.linear2"), cfg.ffn_dim, d, rng),
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), d, cfg.layer_norm_eps),
        }
    }

    pub fn params(&self) -> Vec<ParamId> {
        [
            self.attention.params(),
            self.norm1.params().to_vec(),
            self.ff1.params().to_vec(),
            self.ff2.params().to_vec(),
            self.norm2.params().to_vec(),
        ]
        .concat()
    }

    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        x: Var,
        segments: &[Range<usize>],
        dropout: f64,
    ) -> Result<Var, DiffError> {
        let a = self.attention.forward(tape, store, x, segments)?;
        let a = tape.dropout(a, dropout)?;
        let y = tape.add(x, a)?;
        let y = self.norm1.forward(tape, store, y)?;
        let f = self.ff1.forward(tape, store, y)?;
        let f = tape.relu(f)?;
        let f = tape.dropout(f, dropout)?;
        let f = self.ff2.forward(tape, store, f)?;
        let f = tape.dropout(f, dropout)?;
        let z = tape.add(y, f)?;
        self.norm2.forward(tape, store, z)
    }
}

/// Runs one attention block over a single token set (`n × d`).
pub fn multi_head_self_attention<T: Scalar>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    attention: &MultiHeadAttention,
    tokens: Var,
) -> Result<Var, DiffError> {
    let n = tape.value(tokens).rows();
    attention.forward(tape, store, tokens, &[0..n])
}

/// Runs one encoder layer over a single token set (`n × d`), dropout off.
pub fn transformer_encoder_layer<T: Scalar>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    layer: &EncoderLayer,
    tokens: Var,
) -> Result<Var, DiffError> {
    let n = tape.value(tokens).rows();
    let d = tape.value(tokens).cols();
    let expected = store.value(layer.attention.in_proj.weight).rows();
    if d != expected {
        return Err(DiffError::ShapeMismatch(format!("token dim {d}, layer expects {expected}")));
    }
    layer.forward(tape, store, tokens, &[0..n], 0.0)
}
