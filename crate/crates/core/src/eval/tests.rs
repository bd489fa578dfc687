use std::collections::{BTreeMap, BTreeSet};

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::geo::{GridSpec, ANTIPODAL_KM};

/// Precision at each positive computed by pairwise comparison rather than by
/// sorting: cell `j` is ranked at or above `i` when it scores higher, or ties
/// and comes first.
fn ap_oracle(score: &[f64], label: &[bool], weight: &[f64]) -> f64 {
    let n = score.len();
    let total: f64 = (0..n).filter(|&i| label[i]).map(|i| weight[i]).sum();
    let mut ap = 0.0;
    for i in (0..n).filter(|&i| label[i]) {
        let above = |j: usize| score[j] > score[i] || (score[j] == score[i] && j <= i);
        let seen: f64 = (0..n).filter(|&j| above(j)).map(|j| weight[j]).sum();
        let seen_pos: f64 = (0..n).filter(|&j| above(j) && label[j]).map(|j| weight[j]).sum();
        ap += weight[i] / total * seen_pos / seen;
    }
    ap
}

fn grid(n_lat: usize, n_lon: usize) -> GridSpec {
    GridSpec::new(0.0, n_lat as f64, 0.0, n_lon as f64, 1.0).unwrap()
}

fn cells_strategy() -> impl Strategy<Value = (Vec<f64>, Vec<bool>)> {
    (2usize..40).prop_flat_map(|n| {
        (prop::collection::vec(-5.0f64..5.0, n), prop::collection::vec(any::<bool>(), n))
            .prop_filter("needs a positive", |(_, l)| l.iter().any(|&b| b))
    })
}

#[test]
fn hand_computed_ap() {
    let cells = ScoredCells::unweighted(vec![0.9, 0.8, 0.7, 0.6], vec![true, false, true, false]);
    assert!((average_precision(&cells).unwrap() - (1.0 + 2.0 / 3.0) / 2.0).abs() < 1e-15);
    let perfect = ScoredCells::unweighted(vec![0.9, 0.8, 0.1], vec![true, true, false]);
    assert_eq!(average_precision(&perfect).unwrap(), 1.0);
    let worst = ScoredCells::unweighted(vec![0.9, 0.8, 0.1], vec![false, false, true]);
    assert!((average_precision(&worst).unwrap() - 1.0 / 3.0).abs() < 1e-15);
}

#[test]
fn ties_follow_input_order() {
    let first = ScoredCells::unweighted(vec![0.5, 0.5], vec![true, false]);
    let second = ScoredCells::unweighted(vec![0.5, 0.5], vec![false, true]);
    assert_eq!(average_precision(&first).unwrap(), 1.0);
    assert_eq!(average_precision(&second).unwrap(), 0.5);
}

#[test]
fn ap_errors() {
    let none = ScoredCells::unweighted(vec![0.3, 0.2], vec![false, false]);
    assert!(matches!(average_precision(&none), Err(EvalError::NoPositives)));
    let bad = ScoredCells { score: vec![0.1, 0.2], label: vec![true], weight: vec![1.0, 1.0] };
    assert!(matches!(average_precision(&bad), Err(EvalError::LengthMismatch)));
}

#[test]
fn ap_matches_oracle_on_random_instances() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut checked = 0;
    while checked < 200 {
        let score: Vec<f64> = (0..10).map(|_| (rng.random::<f64>() * 4.0).round() / 4.0).collect();
        let label: Vec<bool> = (0..10).map(|_| rng.random_bool(0.4)).collect();
        let weight: Vec<f64> = (0..10).map(|_| 1.0 + 9.0 * rng.random::<f64>()).collect();
        if !label.iter().any(|&b| b) {
            continue;
        }
        let cells = ScoredCells { score: score.clone(), label: label.clone(), weight: weight.clone() };
        assert!((average_precision(&cells).unwrap() - ap_oracle(&score, &label, &weight)).abs() < 1e-12);
        let unit = ScoredCells::unweighted(score.clone(), label.clone());
        assert!((average_precision(&unit).unwrap() - ap_oracle(&score, &label, &[1.0; 10])).abs() < 1e-12);
        checked += 1;
    }
}

#[test]
fn distance_weight_values() {
    assert_eq!(distance_weight(0.0, 99.0), 1.0);
    assert!((distance_weight(ANTIPODAL_KM, 9.0) - 10.0).abs() < 1e-12);
    assert!((distance_weight(ANTIPODAL_KM / 2.0, 99.0) - 50.5).abs() < 1e-12);
    assert_eq!(distance_weight(1234.0, 0.0), 1.0);
}

#[test]
fn distance_weighting_penalizes_far_false_positives() {
    // 1x5 strip with the range in the first cell; a false positive next to
    // the range costs less than one at the far end.
    let g = grid(1, 5);
    let mask = RangeMask::new(g, vec![true, false, false, false, false]).unwrap();
    let dist = RangeDistances::new(&mask).unwrap();
    let near = PredictionGrid::new(g, vec![0.8, 0.9, 0.1, 0.1, 0.1]).unwrap();
    let far = PredictionGrid::new(g, vec![0.8, 0.1, 0.1, 0.1, 0.9]).unwrap();
    assert_eq!(species_ap(&near, &mask, &dist, 0.0).unwrap(), species_ap(&far, &mask, &dist, 0.0).unwrap());
    assert!(species_ap(&near, &mask, &dist, 99.0).unwrap() > species_ap(&far, &mask, &dist, 99.0).unwrap());
}

proptest! {
    #[test]
    fn ap_is_invariant_to_monotone_rescaling((score, label) in cells_strategy()) {
        let base = average_precision(&ScoredCells::unweighted(score.clone(), label.clone())).unwrap();
        let squashed: Vec<f64> = score.iter().map(|s| 1.0 / (1.0 + (-s).exp())).collect();
        let cubed: Vec<f64> = score.iter().map(|s| s.powi(3) + 2.0 * s).collect();
        prop_assert!((average_precision(&ScoredCells::unweighted(squashed, label.clone())).unwrap() - base).abs() < 1e-12);
        prop_assert!((average_precision(&ScoredCells::unweighted(cubed, label)).unwrap() - base).abs() < 1e-12);
    }

    #[test]
    fn constant_weights_equal_unweighted((score, label) in cells_strategy(), c in 0.1f64..50.0) {
        let base = average_precision(&ScoredCells::unweighted(score.clone(), label.clone())).unwrap();
        let n = score.len();
        let scaled = ScoredCells { score, label, weight: vec![c; n] };
        prop_assert!((average_precision(&scaled).unwrap() - base).abs() < 1e-12);
    }

    #[test]
    fn ap_is_invariant_to_cell_permutation((score, label) in cells_strategy(), seed in 0u64..1000) {
        // distinct scores so that no tie order is involved
        let score: Vec<f64> = score.iter().enumerate().map(|(i, s)| s + i as f64 * 1e-9).collect();
        let base = average_precision(&ScoredCells::unweighted(score.clone(), label.clone())).unwrap();
        let mut idx: Vec<usize> = (0..score.len()).collect();
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let permuted = ScoredCells::unweighted(idx.iter().map(|&i| score[i]).collect(), idx.iter().map(|&i| label[i]).collect());
        prop_assert!((average_precision(&permuted).unwrap() - base).abs() < 1e-12);
    }

    #[test]
    fn ap_is_a_fraction((score, label) in cells_strategy()) {
        let ap = average_precision(&ScoredCells::unweighted(score, label)).unwrap();
        prop_assert!(ap > 0.0 && ap <= 1.0);
    }
}

use rand::seq::SliceRandom;

fn strip_case() -> (PredictionGrid, RangeMask, Vec<bool>) {
    // 10x10 grid, range is the left half; the mean is wrong on a scattered
    // set of cells.
    let g = grid(10, 10);
    let mask_cells: Vec<bool> = (0..100).map(|i| i % 10 < 5).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let wrong: Vec<bool> = (0..100).map(|_| rng.random_bool(0.3)).collect();
    let mean: Vec<f32> = (0..100)
        .map(|i| {
            let truth = mask_cells[i] ^ wrong[i];
            if truth { 0.6 + 0.3 * rng.random::<f32>() } else { 0.1 + 0.3 * rng.random::<f32>() }
        })
        .collect();
    (PredictionGrid::new(g, mean).unwrap(), RangeMask::new(g, mask_cells).unwrap(), wrong)
}

#[test]
fn informative_variance_gives_positive_gain() {
    let (mean, mask, wrong) = strip_case();
    let var = PredictionGrid::new(mean.grid, wrong.iter().map(|&w| if w { 0.2 } else { 0.01 }).collect()).unwrap();
    let s = sparsification_metrics(&mean, &var, &mask, 0.02, 0).unwrap();
    assert!(s.aurg > 0.05, "{s:?}");
    assert!((s.aurg - (s.seauc - s.ap_all)).abs() < 1e-15);
    let inverted = PredictionGrid::new(mean.grid, wrong.iter().map(|&w| if w { 0.01 } else { 0.2 }).collect()).unwrap();
    assert!(sparsification_metrics(&mean, &inverted, &mask, 0.02, 0).unwrap().aurg < 0.0);
}

#[test]
fn constant_variance_gives_near_zero_gain() {
    let (mean, mask, _) = strip_case();
    let var = PredictionGrid::new(mean.grid, vec![0.05; 100]).unwrap();
    let gains: Vec<f64> = (0..20).map(|seed| sparsification_metrics(&mean, &var, &mask, 0.02, seed).unwrap().aurg).collect();
    let avg = gains.iter().sum::<f64>() / gains.len() as f64;
    assert!(avg.abs() < 0.03, "{gains:?}");
    assert_eq!(
        sparsification_metrics(&mean, &var, &mask, 0.02, 7).unwrap(),
        sparsification_metrics(&mean, &var, &mask, 0.02, 7).unwrap()
    );
}

#[test]
fn sparsification_errors() {
    let (mean, mask, _) = strip_case();
    let other = PredictionGrid::new(grid(5, 20), vec![0.0; 100]).unwrap();
    assert!(matches!(sparsification_metrics(&mean, &other, &mask, 0.02, 0), Err(EvalError::GeometryMismatch)));
    assert!(matches!(sparsification_metrics(&mean, &mean, &mask, 0.0, 0), Err(EvalError::InvalidArgument(_))));
    let empty = RangeMask::new(mean.grid, vec![false; 100]).unwrap();
    assert!(matches!(sparsification_metrics(&mean, &mean, &empty, 0.02, 0), Err(EvalError::NoPositives)));
}

#[test]
fn map_over_species_averages_and_checks_masks() {
    let g = grid(1, 4);
    let masks: BTreeMap<u32, RangeMask> = [
        (1, RangeMask::new(g, vec![true, false, false, false]).unwrap()),
        (2, RangeMask::new(g, vec![false, false, false, true]).unwrap()),
    ]
    .into();
    let pred = PredictionGrid::new(g, vec![0.9, 0.5, 0.4, 0.1]).unwrap();
    let preds: BTreeMap<u32, PredictionGrid> = [(1, pred.clone()), (2, pred.clone())].into();
    let scores = map_over_species(&preds, &masks, 0.0).unwrap();
    assert_eq!(scores.per_species[&1], 1.0);
    assert_eq!(scores.per_species[&2], 0.25);
    assert_eq!(scores.map, 0.625);

    let stray: BTreeMap<u32, PredictionGrid> = [(9, pred.clone())].into();
    assert!(matches!(map_over_species(&stray, &masks, 0.0), Err(EvalError::MissingMask(9))));
    let wrong: BTreeMap<u32, PredictionGrid> = [(1, PredictionGrid::new(grid(2, 2), vec![0.0; 4]).unwrap())].into();
    assert!(matches!(map_over_species(&wrong, &masks, 0.0), Err(EvalError::GeometryMismatch)));
}

#[test]
fn map_of_perfect_anti_and_far_predictors() {
    let g = grid(2, 10);
    let cells: Vec<bool> = (0..20).map(|i| i % 10 < 5).collect();
    let mask = RangeMask::new(g, cells.clone()).unwrap();
    let masks: BTreeMap<u32, RangeMask> = [(0, mask)].into();
    let perfect = PredictionGrid::new(g, cells.iter().map(|&c| if c { 1.0 } else { 0.0 }).collect()).unwrap();
    assert_eq!(map_over_species(&[(0, perfect)].into(), &masks, 0.0).unwrap().map, 1.0);
    let anti = PredictionGrid::new(g, cells.iter().enumerate().map(|(i, &c)| if c { 0.1 } else { 0.9 - i as f32 * 0.01 }).collect()).unwrap();
    assert!(map_over_species(&[(0, anti)].into(), &masks, 0.0).unwrap().map < 0.5);
    // one confident false positive at the far end of the strip
    let mut scores: Vec<f32> = cells.iter().map(|&c| if c { 0.8 } else { 0.1 }).collect();
    scores[9] = 0.95;
    let preds: BTreeMap<u32, PredictionGrid> = [(0, PredictionGrid::new(g, scores).unwrap())].into();
    assert!(map_over_species(&preds, &masks, 99.0).unwrap().map < map_over_species(&preds, &masks, 0.0).unwrap().map);
}

#[test]
fn map_is_invariant_to_species_order() {
    let g = grid(1, 4);
    let preds: BTreeMap<u32, PredictionGrid> =
        (0..5).map(|i| (i, PredictionGrid::new(g, vec![0.1 * i as f32, 0.5, 0.3, 0.2]).unwrap())).collect();
    let masks: BTreeMap<u32, RangeMask> =
        (0..5).map(|i| (i, RangeMask::new(g, (0..4).map(|c| c == (i as usize) % 4).collect()).unwrap())).collect();
    let scores = map_over_species(&preds, &masks, 0.0).unwrap();
    let mut aps: Vec<f64> = scores.per_species.values().copied().collect();
    aps.reverse();
    assert!((aps.iter().sum::<f64>() / 5.0 - scores.map).abs() < 1e-15);
}

#[test]
fn oracle_uncertainty_beats_random() {
    let (mean, mask, _) = strip_case();
    let oracle: Vec<f32> = mean.cells.iter().zip(&mask.cells).map(|(&p, &l)| (p - if l { 1.0 } else { 0.0 }).abs()).collect();
    let oracle = PredictionGrid::new(mean.grid, oracle).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let random = PredictionGrid::new(mean.grid, (0..100).map(|_| rng.random::<f32>()).collect()).unwrap();
    let a = sparsification_metrics(&mean, &oracle, &mask, 0.02, 0).unwrap();
    let b = sparsification_metrics(&mean, &random, &mask, 0.02, 0).unwrap();
    assert!(a.aurg > 0.0);
    assert!(a.seauc >= b.seauc);
}

fn sample_report() -> EvalReport {
    let mut r = EvalReport::new("test");
    for (seed, ap) in [(0u64, [0.2, 0.4]), (1, [0.4, 0.6])] {
        for (i, &a) in ap.iter().enumerate() {
            r.records.push(ApRecord { species_id: i as u32, k: 5, seed, ap: a, weighted_ap_h9: a / 2.0, weighted_ap_h99: a / 4.0 });
        }
    }
    r
}

#[test]
fn curve_statistics() {
    let r = sample_report();
    let p = r.curve_point(5).unwrap();
    assert_eq!((p.seeds, p.species), (2, 2));
    assert!((p.map_mean - 0.4).abs() < 1e-12);
    assert!((p.map_std - (0.02f64).sqrt()).abs() < 1e-12);
    assert!((p.weighted_h9_mean - 0.2).abs() < 1e-12);
    assert!((r.map(5, 1).unwrap() - 0.5).abs() < 1e-12);
    assert!(r.map(3, 0).is_none());
    assert!((r.species_ap(5)[&1] - 0.5).abs() < 1e-12);
}

#[test]
fn report_csv_round_trip_and_json() {
    let dir = tempfile::tempdir().unwrap();
    let r = sample_report();
    let path = dir.path().join("r.csv");
    r.write_csv(&path).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    assert!(text.starts_with("species_id,k,seed,ap,weighted_ap_h9,weighted_ap_h99\n"));
    assert_eq!(EvalReport::read_csv("test", &path).unwrap(), r);
    let json: serde_json::Value = serde_json::from_str(&r.to_json().unwrap()).unwrap();
    assert_eq!(json["curve"][0]["k"], 5);
    assert_eq!(json["records"].as_array().unwrap().len(), 4);
}

#[test]
fn grouping_and_group_report() {
    let coverage: BTreeMap<u32, f64> = [(1, 0.05), (2, 0.02), (3, 0.10), (4, 0.07), (5, 0.03), (6, 0.12)].into();
    let g = Grouping::by_range_size(&coverage, &["small", "medium", "large"]).unwrap();
    assert_eq!(g.groups["small"], BTreeSet::from([2, 5]));
    assert_eq!(g.groups["medium"], BTreeSet::from([1, 4]));
    assert_eq!(g.groups["large"], BTreeSet::from([3, 6]));

    let aps: BTreeMap<u32, f64> = [(1, 0.5), (2, 0.2), (3, 0.9), (4, 0.7), (5, 0.4), (6, 0.7)].into();
    let stats = group_report(&aps, &g).unwrap();
    assert!((stats["small"].mean - 0.3).abs() < 1e-12);
    assert!((stats["small"].sem - 0.1).abs() < 1e-12);
    assert_eq!(stats["large"].n, 2);

    let one = Grouping { groups: [("all".to_string(), (1..=6).collect())].into() };
    let all = group_report(&aps, &one).unwrap();
    assert!((all["all"].mean - aps.values().sum::<f64>() / 6.0).abs() < 1e-12);

    let partial: BTreeMap<u32, f64> = [(1, 0.5), (4, 0.3)].into();
    assert!(matches!(group_report(&partial, &g), Err(EvalError::EmptyGroup(name)) if name == "large"));
    let stray: BTreeMap<u32, f64> = [(99, 0.5)].into();
    assert!(matches!(group_report(&stray, &g), Err(EvalError::UnassignedSpecies(99))));
}

#[test]
fn nested_contexts_are_prefixes() {
    let g = grid(4, 4);
    let mask = RangeMask::new(g, (0..16).map(|i| i < 6).collect()).unwrap();
    let pool: Vec<GeoPoint> = (0..12).map(|i| GeoPoint::new(0.5 + (i % 4) as f64 * 0.1, 0.5 + i as f64 * 0.2).unwrap()).collect();
    let species = vec![EvalSpecies::new(7, mask.clone(), pool.clone()).unwrap(), EvalSpecies::new(8, mask, pool).unwrap()];
    let mut seen: BTreeMap<(u32, u64), Vec<Vec<GeoPoint>>> = BTreeMap::new();
    let report = evaluate_nested("probe", &species, &K_GRID, &[0, 1], &[3.0], |sp, ctx, seed| {
        seen.entry((sp.id, seed)).or_default().push(ctx.to_vec());
        Ok(PredictionGrid::new(g, (0..16).map(|i| 1.0 - i as f32 / 16.0).collect()).unwrap())
    })
    .unwrap();
    assert_eq!(report.records.len(), 2 * 2 * K_GRID.len());
    for contexts in seen.values() {
        for pair in contexts.windows(2) {
            assert!(pair[1].starts_with(&pair[0]));
        }
        assert_eq!(contexts.last().unwrap().len(), 12);
    }
    assert_ne!(seen[&(7, 0)].last(), seen[&(7, 1)].last());
    assert!(report.records.iter().all(|r| r.ap == 1.0));
    assert_eq!(report.weighted.len(), report.records.len());
    assert!(report.weighted_curve().iter().all(|p| p.h == 3.0 && p.map_mean == 1.0));
}
