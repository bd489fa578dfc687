//! Average precision, distance weighting, sparsification and the nested
//! few-shot evaluation loop.

mod metrics;
mod report;

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

pub use metrics::{
    average_precision, distance_weight, sparsification_metrics, species_ap, RangeDistances, ScoredCells, Sparsification,
};
pub use report::{
    group_report, ApRecord, CurvePoint, EvalReport, GroupStat, Grouping, WeightedPoint, WeightedRecord, K_GRID,
};

use crate::fewshot::FewShotError;
use crate::geo::{GeoError, GeoPoint, PredictionGrid, RangeMask};

/// Distance-weighting strengths reported next to plain AP.
pub const H_WEIGHTS: [f64; 2] = [9.0, 99.0];

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("no positive cells")]
    NoPositives,
    #[error("scores, labels and weights differ in length")]
    LengthMismatch,
    #[error("grid geometry mismatch")]
    GeometryMismatch,
    #[error("group {0:?} has no scored species")]
    EmptyGroup(String),
    #[error("species {0} is not in any group")]
    UnassignedSpecies(u32),
    #[error("no mask for species {0}")]
    MissingMask(u32),
    #[error("{0}")]
    InvalidArgument(String),
    #[error(transparent)]
    FewShot(#[from] FewShotError),
    #[error(transparent)]
    Geo(#[from] GeoError),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Per-species AP and their mean for one set of predictions.
#[derive(Debug, Clone, PartialEq)]
pub struct SpeciesScores {
    pub per_species: BTreeMap<u32, f64>,
    pub map: f64,
}

/// Per-species AP with distance weights of strength `h` (plain AP at
/// `h = 0`) and their unweighted mean.
pub fn map_over_species(
    predictions: &BTreeMap<u32, PredictionGrid>,
    masks: &BTreeMap<u32, RangeMask>,
    h: f64,
) -> Result<SpeciesScores, EvalError> {
    if predictions.is_empty() {
        return Err(EvalError::InvalidArgument("no predictions".into()));
    }
    let mut per_species = BTreeMap::new();
    for (&id, pred) in predictions {
        let mask = masks.get(&id).ok_or(EvalError::MissingMask(id))?;
        let weights = if h == 0.0 { None } else { Some(RangeDistances::new(mask)?.weights(h)) };
        per_species.insert(id, average_precision(&ScoredCells::from_grid(pred, mask, weights.as_deref())?)?);
    }
    let map = per_species.values().sum::<f64>() / per_species.len() as f64;
    Ok(SpeciesScores { per_species, map })
}

/// A held-out species with its true range and the pool its contexts are
/// drawn from.
#[derive(Debug, Clone)]
pub struct EvalSpecies {
    pub id: u32,
    pub mask: RangeMask,
    pub distances: RangeDistances,
    pub pool: Vec<GeoPoint>,
}

impl EvalSpecies {
    pub fn new(id: u32, mask: RangeMask, pool: Vec<GeoPoint>) -> Result<Self, EvalError> {
        let distances = RangeDistances::new(&mask)?;
        Ok(Self { id, mask, distances, pool })
    }

    /// The pool in a `seed`-fixed order. Every context of size `k` is the
    /// first `k` entries, so smaller contexts are prefixes of larger ones.
    pub fn ordered_pool(&self, seed: u64) -> Vec<GeoPoint> {
        let mut pool = self.pool.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (u64::from(self.id) << 32));
        pool.shuffle(&mut rng);
        pool
    }
}

/// Scores `predict` on every species, context size and seed. `predict`
/// receives the species, its first-`k` context and the seed. Each `extra_h`
/// adds a distance-weighted AP record next to the fixed columns.
pub fn evaluate_nested<F>(
    method: &str,
    species: &[EvalSpecies],
    ks: &[usize],
    seeds: &[u64],
    extra_h: &[f64],
    mut predict: F,
) -> Result<EvalReport, EvalError>
where
    F: FnMut(&EvalSpecies, &[GeoPoint], u64) -> Result<PredictionGrid, EvalError>,
{
    let mut report = EvalReport::new(method);
    for &seed in seeds {
        for sp in species {
            let pool = sp.ordered_pool(seed);
            for &k in ks {
                let ctx = &pool[..k.min(pool.len())];
                let pred = predict(sp, ctx, seed)?;
                let cells = ScoredCells::from_grid(&pred, &sp.mask, None)?;
                let ap = average_precision(&cells)?;
                let weighted = |h: f64| average_precision(&ScoredCells { weight: sp.distances.weights(h), ..cells.clone() });
                report.records.push(ApRecord {
                    species_id: sp.id,
                    k,
                    seed,
                    ap,
                    weighted_ap_h9: weighted(H_WEIGHTS[0])?,
                    weighted_ap_h99: weighted(H_WEIGHTS[1])?,
                });
                for &h in extra_h {
                    report.weighted.push(WeightedRecord { species_id: sp.id, k, seed, h, ap: weighted(h)? });
                }
            }
        }
        log::info!("{method}: seed {seed} done");
    }
    Ok(report)
}

#[cfg(test)]
mod tests;
