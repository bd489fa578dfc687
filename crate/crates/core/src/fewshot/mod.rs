//! Range prediction from a context set, the retrain-free and retraining
//! baselines, and ensembles.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diffcore::{sigmoid_f64, DiffError, Tensor};
use crate::geo::{sample_uniform_sphere, GeoError, GeoPoint, GridSpec, PredictionGrid};
use crate::model::{presence_probability, ContextSet, FsSinr, ModelError, SinrModel};

/// Log-probability floor for Active-SINR products (≈ ln of the smallest
/// positive double).
pub const LOG_FLOOR: f64 = -745.0;

#[derive(Debug, Error)]
pub enum FewShotError {
    #[error("prototype support set is empty")]
    EmptySupport,
    #[error("context has no locations")]
    EmptyContext,
    #[error("every species weight underflowed")]
    AllZeroWeights,
    #[error("logistic regression needs at least one presence")]
    NoPresences,
    #[error("ensemble needs at least two members")]
    FewerThanTwoMembers,
    #[error("grid geometry mismatch")]
    GeometryMismatch,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Diff(#[from] DiffError),
    #[error(transparent)]
    Geo(#[from] GeoError),
}

/// Anything that maps locations to feature vectors.
pub trait LocationEncoding {
    fn features(&self, points: &[GeoPoint]) -> Result<Tensor<f32>, ModelError>;
}

impl LocationEncoding for SinrModel<f32> {
    fn features(&self, points: &[GeoPoint]) -> Result<Tensor<f32>, ModelError> {
        Ok(self.encoder.embed(&self.store, points)?)
    }
}

impl LocationEncoding for FsSinr<f32> {
    fn features(&self, points: &[GeoPoint]) -> Result<Tensor<f32>, ModelError> {
        self.location_features(points)
    }
}

/// Location features of every cell of a grid, computed once.
#[derive(Debug, Clone, PartialEq)]
pub struct GridEmbeddings {
    pub grid: GridSpec,
    pub features: Tensor<f32>,
}

impl GridEmbeddings {
    pub fn build(encoder: &impl LocationEncoding, grid: GridSpec) -> Result<Self, FewShotError> {
        Ok(Self { grid, features: encoder.features(&grid.centers())? })
    }

    /// `σ(f(x)·w)` for every cell.
    pub fn score(&self, w: &[f32]) -> Result<PredictionGrid, FewShotError> {
        if w.len() != self.features.cols() {
            return Err(DiffError::ShapeMismatch(format!("embedding of {} for features of {}", w.len(), self.features.cols())).into());
        }
        let cells = (0..self.features.rows()).map(|r| presence_probability(w, self.features.row(r)) as f32).collect();
        Ok(PredictionGrid::new(self.grid, cells)?)
    }
}

/// One species embedding from the context, then one inner product per cell.
pub fn feedforward_range(ctx: &ContextSet, model: &FsSinr<f32>, cache: &GridEmbeddings) -> Result<PredictionGrid, FewShotError> {
    let w = model.species_embedding(ctx)?;
    cache.score(&w)
}

fn to_rows(t: &Tensor<f32>) -> Vec<Vec<f64>> {
    (0..t.rows()).map(|r| t.row(r).iter().map(|&v| v as f64).collect()).collect()
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PrototypeClass {
    Present,
    Absent,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prototype {
    pub vector: Vec<f64>,
    pub class: PrototypeClass,
}

impl Prototype {
    /// Mean of the support features.
    pub fn from_features(features: &[Vec<f64>], class: PrototypeClass) -> Result<Self, FewShotError> {
        let first = features.first().ok_or(FewShotError::EmptySupport)?;
        let mut vector = vec![0.0; first.len()];
        for f in features {
            for (v, x) in vector.iter_mut().zip(f) {
                *v += x;
            }
        }
        let n = features.len() as f64;
        vector.iter_mut().for_each(|v| *v /= n);
        Ok(Self { vector, class })
    }
}

/// Present/absent prototypes in location-encoder space.
#[derive(Debug, Clone, PartialEq)]
pub struct PrototypePair {
    pub present: Prototype,
    pub absent: Prototype,
}

impl PrototypePair {
    pub fn fit(presences: &[GeoPoint], negatives: &[GeoPoint], encoder: &impl LocationEncoding) -> Result<Self, FewShotError> {
        if presences.is_empty() || negatives.is_empty() {
            return Err(FewShotError::EmptySupport);
        }
        Ok(Self {
            present: Prototype::from_features(&to_rows(&encoder.features(presences)?), PrototypeClass::Present)?,
            absent: Prototype::from_features(&to_rows(&encoder.features(negatives)?), PrototypeClass::Absent)?,
        })
    }

    /// Two-way softmax over cosine similarities; returns (present, absent).
    pub fn probabilities(&self, feature: &[f64]) -> (f64, f64) {
        let sp = cosine(feature, &self.present.vector);
        let sa = cosine(feature, &self.absent.vector);
        let present = sigmoid_f64(sp - sa);
        (present, 1.0 - present)
    }

    pub fn score(&self, cache: &GridEmbeddings) -> Result<PredictionGrid, FewShotError> {
        let cells = to_rows(&cache.features).iter().map(|f| self.probabilities(f).0 as f32).collect();
        Ok(PredictionGrid::new(cache.grid, cells)?)
    }
}

pub fn prototype_predict(
    presences: &[GeoPoint],
    pseudo_negatives: &[GeoPoint],
    x: GeoPoint,
    encoder: &impl LocationEncoding,
) -> Result<f64, FewShotError> {
    let pair = PrototypePair::fit(presences, pseudo_negatives, encoder)?;
    let f = to_rows(&encoder.features(&[x])?).remove(0);
    Ok(pair.probabilities(&f).0)
}

/// Weighted average of classifier columns, weight ∝ Π_c σ(f(c)·w_j).
#[derive(Debug, Clone, PartialEq)]
pub struct ActiveEmbedding {
    pub embedding: Vec<f32>,
    pub weights: Vec<f64>,
}

pub fn active_weights(context_features: &[Vec<f64>], columns: &[Vec<f64>]) -> Result<Vec<f64>, FewShotError> {
    if context_features.is_empty() {
        return Err(FewShotError::EmptyContext);
    }
    let logs: Vec<f64> = columns
        .iter()
        .map(|w| {
            context_features
                .iter()
                .map(|f| {
                    let z: f64 = f.iter().zip(w).map(|(a, b)| a * b).sum();
                    // log σ(z) = −ln(1 + e^{−z})
                    let lp = if z >= 0.0 { -(-z).exp().ln_1p() } else { z - z.exp().ln_1p() };
                    lp.max(LOG_FLOOR)
                })
                .sum()
        })
        .collect();
    let max = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return Err(FewShotError::AllZeroWeights);
    }
    let unnorm: Vec<f64> = logs.iter().map(|l| (l - max).exp()).collect();
    let total: f64 = unnorm.iter().sum();
    if !(total > 0.0) || !total.is_finite() {
        return Err(FewShotError::AllZeroWeights);
    }
    Ok(unnorm.into_iter().map(|u| u / total).collect())
}

pub fn active_embedding(
    ctx_locations: &[GeoPoint],
    classifier: &SinrModel<f32>,
) -> Result<ActiveEmbedding, FewShotError> {
    if ctx_locations.is_empty() {
        return Err(FewShotError::EmptyContext);
    }
    let features = to_rows(&classifier.features(ctx_locations)?);
    let columns: Vec<Vec<f64>> =
        classifier.head.columns(&classifier.store).into_iter().map(|c| c.into_iter().map(|v| v as f64).collect()).collect();
    let weights = active_weights(&features, &columns)?;
    let d = columns.first().map_or(0, Vec::len);
    let mut embedding = vec![0.0f64; d];
    for (w, col) in weights.iter().zip(&columns) {
        for (e, c) in embedding.iter_mut().zip(col) {
            *e += w * c;
        }
    }
    Ok(ActiveEmbedding { embedding: embedding.into_iter().map(|v| v as f32).collect(), weights })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogRegConfig {
    pub reg_weight: f64,
    pub n_pseudo_uniform: usize,
    pub n_pseudo_target: usize,
    pub max_iter: usize,
    pub tol: f64,
    pub seed: u64,
}

impl Default for LogRegConfig {
    fn default() -> Self {
        Self { reg_weight: 20.0, n_pseudo_uniform: 10_000, n_pseudo_target: 10_000, max_iter: 100, tol: 1e-6, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LogRegHead {
    pub weights: Vec<f64>,
    pub bias: f64,
    pub iterations: usize,
    pub grad_norm: f64,
}

impl LogRegHead {
    pub fn predict(&self, feature: &[f64]) -> f64 {
        sigmoid_f64(feature.iter().zip(&self.weights).map(|(a, b)| a * b).sum::<f64>() + self.bias)
    }

    pub fn score(&self, cache: &GridEmbeddings) -> Result<PredictionGrid, FewShotError> {
        let cells = to_rows(&cache.features).iter().map(|f| self.predict(f) as f32).collect();
        Ok(PredictionGrid::new(cache.grid, cells)?)
    }
}

/// Newton's method on `Σ ℓ_i + (reg/2)·‖w‖²`; the bias is not penalized.
pub fn fit_logistic_regression(features: &[Vec<f64>], labels: &[bool], reg: f64, max_iter: usize, tol: f64) -> LogRegHead {
    let n = features.len();
    let d = features.first().map_or(0, Vec::len);
    // design matrix with a trailing bias column
    let x = DMatrix::from_fn(n, d + 1, |i, j| if j < d { features[i][j] } else { 1.0 });
    let y = DVector::from_fn(n, |i, _| if labels[i] { 1.0 } else { 0.0 });
    let mut penalty = DVector::from_element(d + 1, reg);
    penalty[d] = 0.0;
    let mut beta = DVector::zeros(d + 1);
    let mut iterations = 0;
    let mut grad_norm = f64::INFINITY;
    for _ in 0..max_iter {
        let p = (&x * &beta).map(sigmoid_f64);
        let grad = x.tr_mul(&(&p - &y)) + penalty.component_mul(&beta);
        grad_norm = grad.norm();
        if grad_norm <= tol {
            break;
        }
        let s = p.map(|v| (v * (1.0 - v)).max(1e-12));
        let xs = DMatrix::from_fn(n, d + 1, |i, j| x[(i, j)] * s[i]);
        let mut hessian = x.tr_mul(&xs);
        for k in 0..=d {
            hessian[(k, k)] += penalty[k] + 1e-10;
        }
        let Some(chol) = hessian.cholesky() else { break };
        beta -= chol.solve(&grad);
        iterations += 1;
    }
    let bias = beta[d];
    LogRegHead { weights: beta.rows(0, d).iter().copied().collect(), bias, iterations, grad_norm }
}

/// Logistic-regression head on frozen location features: presences against
/// uniform-sphere and target-pool pseudo-negatives.
pub fn fit_logreg_head(
    presences: &[GeoPoint],
    encoder: &impl LocationEncoding,
    target_pool: &[GeoPoint],
    cfg: &LogRegConfig,
) -> Result<LogRegHead, FewShotError> {
    if presences.is_empty() {
        return Err(FewShotError::NoPresences);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut points = presences.to_vec();
    points.extend(sample_uniform_sphere(&mut rng, cfg.n_pseudo_uniform));
    if !target_pool.is_empty() {
        points.extend((0..cfg.n_pseudo_target).map(|_| target_pool[rng.random_range(0..target_pool.len())]));
    }
    let labels: Vec<bool> = (0..points.len()).map(|i| i < presences.len()).collect();
    let features = to_rows(&encoder.features(&points)?);
    Ok(fit_logistic_regression(&features, &labels, cfg.reg_weight, cfg.max_iter, cfg.tol))
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnsemblePrediction {
    pub mean: PredictionGrid,
    pub variance: PredictionGrid,
    pub members: usize,
}

/// Cell-wise mean and population variance of member grids.
pub fn combine_members(grids: &[PredictionGrid]) -> Result<EnsemblePrediction, FewShotError> {
    if grids.len() < 2 {
        return Err(FewShotError::FewerThanTwoMembers);
    }
    let grid = grids[0].grid;
    if grids.iter().any(|g| !g.grid.same_geometry(&grid) || g.cells.len() != grid.len()) {
        return Err(FewShotError::GeometryMismatch);
    }
    let m = grids.len() as f64;
    let mut mean = Vec::with_capacity(grid.len());
    let mut var = Vec::with_capacity(grid.len());
    for c in 0..grid.len() {
        let mu = grids.iter().map(|g| g.cells[c] as f64).sum::<f64>() / m;
        let v = grids.iter().map(|g| (g.cells[c] as f64 - mu).powi(2)).sum::<f64>() / m;
        mean.push(mu as f32);
        var.push(v as f32);
    }
    Ok(EnsemblePrediction {
        mean: PredictionGrid::new(grid, mean)?,
        variance: PredictionGrid::new(grid, var)?,
        members: grids.len(),
    })
}

/// Each member scores the context against its own grid cache.
pub fn ensemble_predict(members: &[(&FsSinr<f32>, &GridEmbeddings)], ctx: &ContextSet) -> Result<EnsemblePrediction, FewShotError> {
    if members.len() < 2 {
        return Err(FewShotError::FewerThanTwoMembers);
    }
    let grid = members[0].1.grid;
    if members.iter().any(|(_, c)| !c.grid.same_geometry(&grid)) {
        return Err(FewShotError::GeometryMismatch);
    }
    let grids = members.iter().map(|(m, c)| feedforward_range(ctx, m, c)).collect::<Result<Vec<_>, _>>()?;
    combine_members(&grids)
}
