use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::{DiffError, Linear, ParamId, ParamStore, ResidualBlock, Scalar, Tape, Tensor, Var};
use crate::geo::{encode_location, GeoPoint};

pub const LOCATION_INPUT_DIM: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LocationEncoderConfig {
    pub hidden_dim: usize,
    pub residual_blocks: usize,
}

impl Default for LocationEncoderConfig {
    fn default() -> Self {
        Self { hidden_dim: 256, residual_blocks: 4 }
    }
}

/// Location encoder: affine 4→d with ReLU, then residual blocks at width d.
#[derive(Debug, Clone)]
pub struct LocationEncoder {
    pub input: Linear,
    pub blocks: Vec<ResidualBlock>,
}

impl LocationEncoder {
    pub fn new<T: Scalar, R: Rng + ?Sized>(store: &mut ParamStore<T>, cfg: &LocationEncoderConfig, rng: &mut R) -> Self {
        let input = Linear::new(store, "location_encoder.input", LOCATION_INPUT_DIM, cfg.hidden_dim, rng);
        let blocks = (0..cfg.residual_blocks)
            .map(|i| ResidualBlock::new(store, &format!("location_encoder.block{i}"), cfg.hidden_dim, rng))
            .collect();
        Self { input, blocks }
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut ids = self.input.params().to_vec();
        ids.extend(self.blocks.iter().flat_map(ResidualBlock::params));
        ids
    }

    /// `x` holds one encoded location per row (`n × 4`).
    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var, dropout: f64) -> Result<Var, DiffError> {
        let h = self.input.forward(tape, store, x)?;
        let mut h = tape.relu(h)?;
        for block in &self.blocks {
            h = block.forward(tape, store, h, dropout)?;
        }
        Ok(h)
    }

    /// Inference-only embedding of `points` (`n × d`).
    pub fn embed<T: Scalar>(&self, store: &ParamStore<T>, points: &[GeoPoint]) -> Result<Tensor<T>, DiffError> {
        let mut tape = Tape::new();
        let x = tape.constant(encode_points(points));
        let h = self.forward(&mut tape, store, x, 0.0)?;
        Ok(tape.value(h).clone())
    }
}

/// Stacks the periodic encodings of `points` into an `n × 4` tensor.
pub fn encode_points<T: Scalar>(points: &[GeoPoint]) -> Tensor<T> {
    let data = points.iter().flat_map(|&p| encode_location(p).0).map(T::of).collect();
    Tensor::matrix(points.len(), LOCATION_INPUT_DIM, data).expect("4 values per point")
}

/// Per-species embedding columns (`d × s`); no bias.
#[derive(Debug, Clone, Copy)]
pub struct ClassifierHead {
    pub weight: ParamId,
    pub n_species: usize,
}

impl ClassifierHead {
    pub fn new<T: Scalar, R: Rng + ?Sized>(store: &mut ParamStore<T>, dim: usize, n_species: usize, rng: &mut R) -> Self {
        let weight = store.add_uniform("classifier.weight", &[dim, n_species], dim, rng);
        Self { weight, n_species }
    }

    /// Column `j` as a species embedding.
    pub fn column<T: Scalar>(&self, store: &ParamStore<T>, j: usize) -> Vec<T> {
        let w = store.value(self.weight);
        (0..w.rows()).map(|r| w.at(r, j)).collect()
    }

    pub fn columns<T: Scalar>(&self, store: &ParamStore<T>) -> Vec<Vec<T>> {
        (0..self.n_species).map(|j| self.column(store, j)).collect()
    }
}
