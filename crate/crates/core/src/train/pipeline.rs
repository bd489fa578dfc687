use std::collections::BTreeSet;

use rand::seq::{index, SliceRandom};
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::adam::{adam_step, AdamState};
use super::loss::{loss_an_full_batch, loss_an_full_classifier};
use super::TrainError;
use crate::data::{audit_holdout, EmbeddingTable, ObservationStore};
use crate::diffcore::{Scalar, Tape, Var};
use crate::geo::{sample_uniform_sphere, GeoPoint};
use crate::model::{encode_points, ContextSet, FsSinr, FsSinrConfig, LocationEncoderConfig, SinrConfig, SinrModel};

/// Hyperparameters for both training stages. Serialized as flat JSON; absent
/// fields take the defaults.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub lr_decay_per_epoch: f64,
    pub batch_size: usize,
    pub lambda_pos: f64,
    pub sinr_epochs: usize,
    pub fsinr_epochs: usize,
    pub sinr_dropout: f64,
    pub fsinr_dropout: f64,
    pub context_len: usize,
    pub p_drop_locations: f64,
    pub p_drop_text: f64,
    pub p_drop_image: f64,
    pub per_species_cap: usize,
    pub sinr_per_species_cap: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 5e-4,
            lr_decay_per_epoch: 0.98,
            batch_size: 2048,
            lambda_pos: 2048.0,
            sinr_epochs: 20,
            fsinr_epochs: 20,
            sinr_dropout: 0.5,
            fsinr_dropout: 0.2,
            context_len: 20,
            p_drop_locations: 0.2,
            p_drop_text: 0.5,
            p_drop_image: 0.5,
            per_species_cap: 100,
            sinr_per_species_cap: 1000,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let probs = [
            ("sinr_dropout", self.sinr_dropout),
            ("fsinr_dropout", self.fsinr_dropout),
            ("p_drop_locations", self.p_drop_locations),
            ("p_drop_text", self.p_drop_text),
            ("p_drop_image", self.p_drop_image),
        ];
        for (name, p) in probs {
            if !(0.0..=1.0).contains(&p) {
                return Err(TrainError::InvalidConfig(format!("{name} = {p} is not a probability")));
            }
        }
        if self.sinr_dropout >= 1.0 || self.fsinr_dropout >= 1.0 {
            return Err(TrainError::InvalidConfig("dropout must be below 1".into()));
        }
        if !(self.lr > 0.0) || !(self.lr_decay_per_epoch > 0.0) {
            return Err(TrainError::InvalidConfig("lr and lr_decay_per_epoch must be positive".into()));
        }
        if self.per_species_cap < 1 || self.sinr_per_species_cap < 1 || self.batch_size < 1 {
            return Err(TrainError::InvalidConfig("caps and batch_size must be at least 1".into()));
        }
        if !(self.lambda_pos >= 0.0) {
            return Err(TrainError::InvalidConfig("lambda_pos must be nonnegative".into()));
        }
        Ok(())
    }
}

pub fn lr_at_epoch(cfg: &TrainConfig, epoch: usize) -> f64 {
    cfg.lr * cfg.lr_decay_per_epoch.powi(epoch as i32)
}

/// One observation used as a training target; `record` is its index in the
/// observation store.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainingExample {
    pub species_id: u32,
    pub location: GeoPoint,
    pub record: usize,
}

/// At most `cap` examples per species, drawn without replacement.
pub fn capped_examples<R: Rng + ?Sized>(store: &ObservationStore, cap: usize, rng: &mut R) -> Vec<TrainingExample> {
    let mut out = Vec::new();
    for id in store.species_ids() {
        let indices = store.indices_of(id);
        let mut chosen: Vec<usize> = if indices.len() > cap {
            index::sample(rng, indices.len(), cap).into_iter().map(|k| indices[k]).collect()
        } else {
            indices.to_vec()
        };
        chosen.sort_unstable();
        out.extend(chosen.into_iter().map(|r| TrainingExample { species_id: id, location: store.records()[r].location, record: r }));
    }
    out
}

/// Context for one training example: up to `context_len` other observations
/// of the species plus whatever text/image vectors exist, each block dropped
/// independently.
pub fn assemble_context<R: Rng + ?Sized>(
    example: &TrainingExample,
    store: &ObservationStore,
    embeddings: &EmbeddingTable,
    rng: &mut R,
    cfg: &TrainConfig,
) -> ContextSet {
    let siblings: Vec<usize> = store.indices_of(example.species_id).iter().copied().filter(|&r| r != example.record).collect();
    let take = siblings.len().min(cfg.context_len);
    let mut locations: Vec<GeoPoint> =
        index::sample(rng, siblings.len(), take).into_iter().map(|k| store.records()[siblings[k]].location).collect();
    if rng.random_bool(cfg.p_drop_locations) {
        locations.clear();
    }
    let mut text_embedding = embeddings.text(example.species_id).map(<[f32]>::to_vec);
    if rng.random_bool(cfg.p_drop_text) {
        text_embedding = None;
    }
    let mut image_embedding = embeddings.image(example.species_id).map(<[f32]>::to_vec);
    if rng.random_bool(cfg.p_drop_image) {
        image_embedding = None;
    }
    ContextSet { locations, text_embedding, image_embedding }
}

/// Encodes `points` followed by `pseudo` in one pass and splits the result.
fn features_and_pseudo<T: Scalar>(
    tape: &mut Tape<T>,
    points: &[GeoPoint],
    pseudo: &[GeoPoint],
    forward: impl FnOnce(&mut Tape<T>, Var) -> Result<Var, TrainError>,
) -> Result<(Var, Var), TrainError> {
    let b = points.len();
    let mut all = points.to_vec();
    all.extend_from_slice(pseudo);
    let x = tape.constant(encode_points::<T>(&all));
    let out = forward(tape, x)?;
    let top: Vec<usize> = (0..b).collect();
    let bottom: Vec<usize> = (b..b + pseudo.len()).collect();
    Ok((tape.gather_rows(out, &top)?, tape.gather_rows(out, &bottom)?))
}

/// Batch loss of the pretraining stage.
pub fn sinr_batch_loss<T: Scalar>(
    model: &SinrModel<T>,
    tape: &mut Tape<T>,
    locations: &[GeoPoint],
    labels: &[usize],
    pseudo: &[GeoPoint],
    lambda: f64,
    dropout: f64,
) -> Result<Var, TrainError> {
    let (z, zp) = features_and_pseudo(tape, locations, pseudo, |t, x| Ok(model.logits(t, x, dropout)?))?;
    loss_an_full_classifier(tape, z, zp, labels, lambda)
}

/// Batch loss of the few-shot stage: species embeddings from `contexts`,
/// scored at the example locations and at one pseudo-absence each.
pub fn fsinr_batch_loss<T: Scalar>(
    model: &FsSinr<T>,
    tape: &mut Tape<T>,
    examples: &[TrainingExample],
    contexts: &[ContextSet],
    pseudo: &[GeoPoint],
    lambda: f64,
    dropout: f64,
) -> Result<Var, TrainError> {
    if examples.is_empty() {
        return Err(TrainError::EmptyBatch);
    }
    if contexts.len() != examples.len() || pseudo.len() != examples.len() {
        return Err(TrainError::InvalidBatch(format!(
            "{} examples, {} contexts, {} pseudo-absences",
            examples.len(),
            contexts.len(),
            pseudo.len()
        )));
    }
    let w = model.embed_contexts(tape, contexts, dropout)?;
    let points: Vec<GeoPoint> = examples.iter().map(|e| e.location).collect();
    let (f, fp) =
        features_and_pseudo(tape, &points, pseudo, |t, x| Ok(model.encoder.forward(t, &model.store, x, dropout)?))?;
    let species: Vec<u32> = examples.iter().map(|e| e.species_id).collect();
    loss_an_full_batch(tape, f, fp, w, &species, lambda)
}

#[derive(Debug, Clone)]
pub struct SinrTraining {
    pub model: SinrModel<f32>,
    /// Species id of each classifier column.
    pub species: Vec<u32>,
    pub epoch_losses: Vec<f64>,
}

pub fn pretrain_sinr(store: &ObservationStore, encoder: LocationEncoderConfig, cfg: &TrainConfig) -> Result<SinrTraining, TrainError> {
    cfg.validate()?;
    if store.is_empty() {
        return Err(TrainError::NoTrainingData);
    }
    let species: Vec<u32> = store.species_ids().into_iter().collect();
    let mut model = SinrModel::<f32>::new(SinrConfig { location: encoder, n_species: species.len() }, cfg.seed);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));
    let mut examples = capped_examples(store, cfg.sinr_per_species_cap, &mut rng);
    let mut adam = AdamState::new(&model.store);
    let mut epoch_losses = Vec::with_capacity(cfg.sinr_epochs);

    for epoch in 0..cfg.sinr_epochs {
        let lr = lr_at_epoch(cfg, epoch);
        examples.shuffle(&mut rng);
        let mut total = 0.0;
        for batch in examples.chunks(cfg.batch_size) {
            let locations: Vec<GeoPoint> = batch.iter().map(|e| e.location).collect();
            let labels: Vec<usize> = batch.iter().map(|e| species.binary_search(&e.species_id).expect("registered species")).collect();
            let pseudo = sample_uniform_sphere(&mut rng, batch.len());
            let mut tape = Tape::training(rng.next_u64());
            let loss = sinr_batch_loss(&model, &mut tape, &locations, &labels, &pseudo, cfg.lambda_pos, cfg.sinr_dropout)?;
            total += tape.value(loss).item()?.f64() * batch.len() as f64;
            let grads = tape.backward(loss)?.into_param_grads(model.store.len());
            adam_step(&mut model.store, &grads, &mut adam, lr)?;
        }
        let mean = total / examples.len() as f64;
        log::info!("pretrain epoch {epoch}: loss {mean:.5}");
        epoch_losses.push(mean);
    }
    Ok(SinrTraining { model, species, epoch_losses })
}

#[derive(Debug, Clone)]
pub struct FsSinrTraining {
    pub model: FsSinr<f32>,
    pub epoch_losses: Vec<f64>,
    /// Every species that appeared in a batch, as target or context.
    pub species_seen: BTreeSet<u32>,
}

pub fn train_fsinr(
    store: &ObservationStore,
    embeddings: &EmbeddingTable,
    pretrained: Option<&SinrModel<f32>>,
    model_config: FsSinrConfig,
    holdout: &BTreeSet<u32>,
    cfg: &TrainConfig,
) -> Result<FsSinrTraining, TrainError> {
    cfg.validate()?;
    let pretrained = pretrained.ok_or(TrainError::MissingEncoder)?;
    audit_holdout(&store.species_ids(), holdout)?;
    if store.is_empty() {
        return Err(TrainError::NoTrainingData);
    }
    let mut model = FsSinr::<f32>::new(model_config, cfg.seed)?;
    model.load_pretrained_encoder(pretrained)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(2));
    let mut examples = capped_examples(store, cfg.per_species_cap, &mut rng);
    let mut adam = AdamState::new(&model.store);
    let mut epoch_losses = Vec::with_capacity(cfg.fsinr_epochs);
    let mut species_seen = BTreeSet::new();

    for epoch in 0..cfg.fsinr_epochs {
        let lr = lr_at_epoch(cfg, epoch);
        examples.shuffle(&mut rng);
        let mut total = 0.0;
        for batch in examples.chunks(cfg.batch_size) {
            let contexts: Vec<ContextSet> =
                batch.iter().map(|e| assemble_context(e, store, embeddings, &mut rng, cfg)).collect();
            species_seen.extend(batch.iter().map(|e| e.species_id));
            let pseudo = sample_uniform_sphere(&mut rng, batch.len());
            let mut tape = Tape::training(rng.next_u64());
            let loss = fsinr_batch_loss(&model, &mut tape, batch, &contexts, &pseudo, cfg.lambda_pos, cfg.fsinr_dropout)?;
            total += tape.value(loss).item()?.f64() * batch.len() as f64;
            let grads = tape.backward(loss)?.into_param_grads(model.store.len());
            adam_step(&mut model.store, &grads, &mut adam, lr)?;
        }
        let mean = total / examples.len() as f64;
        log::info!("fs-sinr epoch {epoch}: loss {mean:.5}");
        epoch_losses.push(mean);
    }
    audit_holdout(&species_seen, holdout)?;
    Ok(FsSinrTraining { model, epoch_losses, species_seen })
}
