use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::EvalError;
use crate::geo::{cell_distances_to_range, PredictionGrid, RangeMask, ANTIPODAL_KM};

/// Parallel per-cell score, label and sample weight.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoredCells {
    pub score: Vec<f64>,
    pub label: Vec<bool>,
    pub weight: Vec<f64>,
}

impl ScoredCells {
    pub fn unweighted(score: Vec<f64>, label: Vec<bool>) -> Self {
        let weight = vec![1.0; score.len()];
        Self { score, label, weight }
    }

    pub fn from_grid(pred: &PredictionGrid, mask: &RangeMask, weight: Option<&[f64]>) -> Result<Self, EvalError> {
        if !pred.grid.same_geometry(&mask.grid) {
            return Err(EvalError::GeometryMismatch);
        }
        let score = pred.cells.iter().map(|&v| v as f64).collect();
        let weight = weight.map_or_else(|| vec![1.0; mask.cells.len()], <[f64]>::to_vec);
        let cells = Self { score, label: mask.cells.clone(), weight };
        cells.check()?;
        Ok(cells)
    }

    fn check(&self) -> Result<(), EvalError> {
        if self.label.len() != self.score.len() || self.weight.len() != self.score.len() {
            return Err(EvalError::LengthMismatch);
        }
        Ok(())
    }

    /// Indices by descending score; equal scores keep input order.
    pub fn ranking(&self) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.score.len()).collect();
        order.sort_by(|&a, &b| self.score[b].total_cmp(&self.score[a]));
        order
    }
}

/// Weighted average precision: Σ_t (R_t − R_{t−1})·P_t over the ranking.
pub fn average_precision(cells: &ScoredCells) -> Result<f64, EvalError> {
    cells.check()?;
    ap_over(cells, &cells.ranking(), None)
}

/// AP over `order`, skipping cells flagged in `removed`.
fn ap_over(cells: &ScoredCells, order: &[usize], removed: Option<&[bool]>) -> Result<f64, EvalError> {
    let kept = |i: usize| removed.is_none_or(|r| !r[i]);
    let total_pos: f64 = order.iter().filter(|&&i| kept(i) && cells.label[i]).map(|&i| cells.weight[i]).sum();
    if !(total_pos > 0.0) {
        return Err(EvalError::NoPositives);
    }
    let (mut seen, mut seen_pos, mut ap) = (0.0, 0.0, 0.0);
    for &i in order.iter().filter(|&&i| kept(i)) {
        let w = cells.weight[i];
        seen += w;
        if cells.label[i] {
            seen_pos += w;
            ap += w * (seen_pos / seen);
        }
    }
    Ok(ap / total_pos)
}

/// `1 + (d / d_antipodal)·h`.
pub fn distance_weight(d_range_km: f64, h: f64) -> f64 {
    1.0 + d_range_km / ANTIPODAL_KM * h
}

/// Great-circle distance from each cell to the range, computed once per mask.
#[derive(Debug, Clone, PartialEq)]
pub struct RangeDistances {
    pub km: Vec<f64>,
}

impl RangeDistances {
    pub fn new(mask: &RangeMask) -> Result<Self, EvalError> {
        Ok(Self { km: cell_distances_to_range(mask)? })
    }

    pub fn weights(&self, h: f64) -> Vec<f64> {
        self.km.iter().map(|&d| distance_weight(d, h)).collect()
    }
}

/// AP of one prediction against one mask, distance-weighted with `h`.
pub fn species_ap(pred: &PredictionGrid, mask: &RangeMask, distances: &RangeDistances, h: f64) -> Result<f64, EvalError> {
    let weights = if h == 0.0 { None } else { Some(distances.weights(h)) };
    average_precision(&ScoredCells::from_grid(pred, mask, weights.as_deref())?)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Sparsification {
    pub seauc: f64,
    pub aurg: f64,
    pub ap_all: f64,
    /// Number of points on the AP-versus-fraction-kept curve.
    pub steps: usize,
}

/// Drops the most uncertain `step` fraction of cells at a time and tracks AP
/// on the rest. Equal variances are ordered by a `seed`-fixed shuffle.
pub fn sparsification_metrics(
    mean: &PredictionGrid,
    variance: &PredictionGrid,
    mask: &RangeMask,
    step: f64,
    seed: u64,
) -> Result<Sparsification, EvalError> {
    if !mean.grid.same_geometry(&variance.grid) || !mean.grid.same_geometry(&mask.grid) {
        return Err(EvalError::GeometryMismatch);
    }
    if !(step > 0.0 && step < 1.0) {
        return Err(EvalError::InvalidArgument(format!("step {step} outside (0, 1)")));
    }
    let cells = ScoredCells::from_grid(mean, mask, None)?;
    let n = cells.score.len();
    let ranking = cells.ranking();
    let ap_all = ap_over(&cells, &ranking, None)?;

    let mut by_uncertainty: Vec<usize> = (0..n).collect();
    by_uncertainty.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    by_uncertainty.sort_by(|&a, &b| variance.cells[b].total_cmp(&variance.cells[a]));

    let chunk = ((step * n as f64).round() as usize).max(1);
    let mut removed = vec![false; n];
    let mut positives_left = mask.positive_count();
    let mut curve = vec![(1.0, ap_all)];
    let mut cursor = 0;
    while cursor + chunk < n {
        let batch = &by_uncertainty[cursor..cursor + chunk];
        let lost = batch.iter().filter(|&&i| mask.cells[i]).count();
        if lost >= positives_left {
            break;
        }
        for &i in batch {
            removed[i] = true;
        }
        positives_left -= lost;
        cursor += chunk;
        let ap = ap_over(&cells, &ranking, Some(&removed))?;
        curve.push(((n - cursor) as f64 / n as f64, ap));
    }

    let seauc = if curve.len() == 1 {
        ap_all
    } else {
        let area: f64 = curve.windows(2).map(|w| (w[0].0 - w[1].0) * (w[0].1 + w[1].1) / 2.0).sum();
        area / (curve[0].0 - curve[curve.len() - 1].0)
    };
    Ok(Sparsification { seauc, aurg: seauc - ap_all, ap_all, steps: curve.len() })
}
