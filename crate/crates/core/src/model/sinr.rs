use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::encoder::{encode_points, ClassifierHead, LocationEncoder, LocationEncoderConfig};
use super::ModelError;
use crate::diffcore::{sigmoid_f64, DiffError, ParamStore, Scalar, Tape, Var};
use crate::geo::GeoPoint;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SinrConfig {
    pub location: LocationEncoderConfig,
    pub n_species: usize,
}

/// Location encoder plus multi-label classifier head.
#[derive(Debug, Clone)]
pub struct SinrModel<T: Scalar> {
    pub config: SinrConfig,
    pub store: ParamStore<T>,
    pub encoder: LocationEncoder,
    pub head: ClassifierHead,
}

impl<T: Scalar> SinrModel<T> {
    pub fn new(config: SinrConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let encoder = LocationEncoder::new(&mut store, &config.location, &mut rng);
        let head = ClassifierHead::new(&mut store, config.location.hidden_dim, config.n_species, &mut rng);
        Self { config, store, encoder, head }
    }

    /// Logits `f(x)·W` for a batch of encoded locations (`n × s`).
    pub fn logits(&self, tape: &mut Tape<T>, x: Var, dropout: f64) -> Result<Var, DiffError> {
        let features = self.encoder.forward(tape, &self.store, x, dropout)?;
        let w = tape.param(&self.store, self.head.weight);
        tape.matmul(features, w)
    }

    /// `σ(f(x)·W)`: presence probability for every training species.
    pub fn sinr_forward(&self, x: GeoPoint) -> Result<Vec<f64>, ModelError> {
        let mut tape = Tape::new();
        let input = tape.constant(encode_points(&[x]));
        let z = self.logits(&mut tape, input, 0.0)?;
        Ok(tape.value(z).data().iter().map(|v| sigmoid_f64(v.f64())).collect())
    }

    pub fn column(&self, j: usize) -> Vec<T> {
        self.head.column(&self.store, j)
    }
}
