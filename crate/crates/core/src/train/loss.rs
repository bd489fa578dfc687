use super::TrainError;
use crate::diffcore::{DiffError, Scalar, Tape, Var, PROB_CLAMP};

fn check_prob(p: f64) -> Result<f64, TrainError> {
    if !(0.0..=1.0).contains(&p) {
        return Err(TrainError::DomainError(p));
    }
    Ok(p)
}

fn log_clamped(p: f64) -> f64 {
    p.max(PROB_CLAMP).ln()
}

/// Full assume-negative loss for one training pair on probabilities.
///
/// `yhat[j]` is the presence probability of species `j` at the observed
/// location, `yhat_pseudo[j]` at the pseudo-absence location.
pub fn loss_an_full(yhat: &[f64], z: usize, yhat_pseudo: &[f64], lambda: f64) -> Result<f64, TrainError> {
    let s = yhat.len();
    if s == 0 || yhat_pseudo.len() != s || z >= s {
        return Err(TrainError::InvalidBatch(format!("{s} predictions, {} pseudo predictions, label {z}", yhat_pseudo.len())));
    }
    let mut total = 0.0;
    for j in 0..s {
        let (p, q) = (check_prob(yhat[j])?, check_prob(yhat_pseudo[j])?);
        if j == z {
            total += lambda * log_clamped(p);
        } else {
            total += log_clamped(1.0 - p);
        }
        total += log_clamped(1.0 - q);
    }
    Ok(-total / s as f64)
}

/// Positive weight matrix for a batch: entry `(i, j)` is λ when example `i`
/// and column `j` share a species, otherwise 1. Returns (targets, weights).
fn pair_targets<T: Scalar>(rows: &[u32], cols: &[u32], lambda: f64) -> (Vec<T>, Vec<T>) {
    let mut targets = Vec::with_capacity(rows.len() * cols.len());
    let mut weights = Vec::with_capacity(rows.len() * cols.len());
    for r in rows {
        for c in cols {
            let pos = r == c;
            targets.push(T::of(if pos { 1.0 } else { 0.0 }));
            weights.push(T::of(if pos { lambda } else { 1.0 }));
        }
    }
    (targets, weights)
}

/// Batch loss over species embeddings produced inside the batch.
///
/// `features` and `pseudo_features` are `f(x_i)` and `f(x′_i)` (`B × d`),
/// `embeddings` the per-example species embeddings `w_j` (`B × d`) and
/// `species` the label of each row. Every example is scored against every
/// batch column; columns sharing the row's species are positives. The
/// result is the per-example loss averaged over the batch.
pub fn loss_an_full_batch<T: Scalar>(
    tape: &mut Tape<T>,
    features: Var,
    pseudo_features: Var,
    embeddings: Var,
    species: &[u32],
    lambda: f64,
) -> Result<Var, TrainError> {
    let b = species.len();
    if b == 0 {
        return Err(TrainError::EmptyBatch);
    }
    for v in [features, pseudo_features, embeddings] {
        if tape.value(v).rows() != b {
            return Err(DiffError::ShapeMismatch(format!("batch of {b} labels with {} rows", tape.value(v).rows())).into());
        }
    }
    let logits = tape.matmul_nt(features, embeddings)?;
    let pseudo = tape.matmul_nt(pseudo_features, embeddings)?;
    let (targets, weights) = pair_targets::<T>(species, species, lambda);
    let zeros = vec![T::zero(); b * b];
    let ones = vec![T::one(); b * b];
    let presence = tape.bce_with_logits(logits, &targets, &weights)?;
    let absence = tape.bce_with_logits(pseudo, &zeros, &ones)?;
    let total = tape.add(presence, absence)?;
    Ok(tape.scale(total, T::of(1.0 / (b * b) as f64))?)
}

/// Loss against a full classifier: `logits` and `pseudo_logits` are
/// `B × S`, `labels` the column of each example's species.
pub fn loss_an_full_classifier<T: Scalar>(
    tape: &mut Tape<T>,
    logits: Var,
    pseudo_logits: Var,
    labels: &[usize],
    lambda: f64,
) -> Result<Var, TrainError> {
    let b = labels.len();
    if b == 0 {
        return Err(TrainError::EmptyBatch);
    }
    let s = tape.value(logits).cols();
    if tape.value(logits).rows() != b || !tape.value(logits).same_shape(tape.value(pseudo_logits)) {
        return Err(DiffError::ShapeMismatch(format!("{b} labels for logits {:?}", tape.value(logits).shape())).into());
    }
    let mut targets = vec![T::zero(); b * s];
    let mut weights = vec![T::one(); b * s];
    for (i, &z) in labels.iter().enumerate() {
        if z >= s {
            return Err(TrainError::InvalidBatch(format!("label {z} with {s} species")));
        }
        targets[i * s + z] = T::one();
        weights[i * s + z] = T::of(lambda);
    }
    let presence = tape.bce_with_logits(logits, &targets, &weights)?;
    let absence = tape.bce_with_logits(pseudo_logits, &vec![T::zero(); b * s], &vec![T::one(); b * s])?;
    let total = tape.add(presence, absence)?;
    Ok(tape.scale(total, T::of(1.0 / (b * s) as f64))?)
}
