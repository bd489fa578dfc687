use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::EvalError;

/// Context sizes reported on the few-shot curve.
pub const K_GRID: [usize; 11] = [0, 1, 2, 3, 4, 5, 8, 10, 15, 20, 50];

/// One species scored at one context size under one seed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ApRecord {
    pub species_id: u32,
    pub k: usize,
    pub seed: u64,
    pub ap: f64,
    pub weighted_ap_h9: f64,
    pub weighted_ap_h99: f64,
}

/// Mean and spread over seeds of the per-seed MAP at one `k`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub k: usize,
    pub seeds: usize,
    pub species: usize,
    pub map_mean: f64,
    pub map_std: f64,
    pub weighted_h9_mean: f64,
    pub weighted_h9_std: f64,
    pub weighted_h99_mean: f64,
    pub weighted_h99_std: f64,
}

/// Distance-weighted AP at a caller-chosen `h`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WeightedRecord {
    pub species_id: u32,
    pub k: usize,
    pub seed: u64,
    pub h: f64,
    pub ap: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightedPoint {
    pub k: usize,
    pub h: f64,
    pub map_mean: f64,
    pub map_std: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub method: String,
    pub records: Vec<ApRecord>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub weighted: Vec<WeightedRecord>,
}

fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Sample standard deviation; zero for fewer than two values.
fn sample_std(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    let m = mean(xs);
    (xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (xs.len() - 1) as f64).sqrt()
}

impl EvalReport {
    pub fn new(method: impl Into<String>) -> Self {
        Self { method: method.into(), records: Vec::new(), weighted: Vec::new() }
    }

    pub fn ks(&self) -> BTreeSet<usize> {
        self.records.iter().map(|r| r.k).collect()
    }

    /// Mean over species of `field` for each seed at context size `k`.
    fn per_seed(&self, k: usize, field: impl Fn(&ApRecord) -> f64) -> Vec<f64> {
        let mut by_seed: BTreeMap<u64, Vec<f64>> = BTreeMap::new();
        for r in self.records.iter().filter(|r| r.k == k) {
            by_seed.entry(r.seed).or_default().push(field(r));
        }
        by_seed.values().map(|v| mean(v)).collect()
    }

    /// MAP at `k` for a single seed.
    pub fn map(&self, k: usize, seed: u64) -> Option<f64> {
        let aps: Vec<f64> = self.records.iter().filter(|r| r.k == k && r.seed == seed).map(|r| r.ap).collect();
        (!aps.is_empty()).then(|| mean(&aps))
    }

    pub fn curve(&self) -> Vec<CurvePoint> {
        self.ks()
            .into_iter()
            .map(|k| {
                let plain = self.per_seed(k, |r| r.ap);
                let h9 = self.per_seed(k, |r| r.weighted_ap_h9);
                let h99 = self.per_seed(k, |r| r.weighted_ap_h99);
                let species = self.records.iter().filter(|r| r.k == k).map(|r| r.species_id).collect::<BTreeSet<_>>();
                CurvePoint {
                    k,
                    seeds: plain.len(),
                    species: species.len(),
                    map_mean: mean(&plain),
                    map_std: sample_std(&plain),
                    weighted_h9_mean: mean(&h9),
                    weighted_h9_std: sample_std(&h9),
                    weighted_h99_mean: mean(&h99),
                    weighted_h99_std: sample_std(&h99),
                }
            })
            .collect()
    }

    /// Per-seed MAP statistics of the extra weighted records, by `(k, h)`.
    pub fn weighted_curve(&self) -> Vec<WeightedPoint> {
        let mut groups: BTreeMap<(usize, u64), BTreeMap<u64, Vec<f64>>> = BTreeMap::new();
        for r in &self.weighted {
            groups.entry((r.k, r.h.to_bits())).or_default().entry(r.seed).or_default().push(r.ap);
        }
        groups
            .into_iter()
            .map(|((k, h), by_seed)| {
                let maps: Vec<f64> = by_seed.values().map(|v| mean(v)).collect();
                WeightedPoint { k, h: f64::from_bits(h), map_mean: mean(&maps), map_std: sample_std(&maps) }
            })
            .collect()
    }

    pub fn curve_point(&self, k: usize) -> Option<CurvePoint> {
        self.curve().into_iter().find(|p| p.k == k)
    }

    /// Per-species AP at `k`, averaged over seeds.
    pub fn species_ap(&self, k: usize) -> BTreeMap<u32, f64> {
        let mut acc: BTreeMap<u32, Vec<f64>> = BTreeMap::new();
        for r in self.records.iter().filter(|r| r.k == k) {
            acc.entry(r.species_id).or_default().push(r.ap);
        }
        acc.into_iter().map(|(id, v)| (id, mean(&v))).collect()
    }

    pub fn to_json(&self) -> Result<String, EvalError> {
        #[derive(Serialize)]
        struct Out<'a> {
            method: &'a str,
            curve: Vec<CurvePoint>,
            #[serde(skip_serializing_if = "Vec::is_empty")]
            weighted_curve: Vec<WeightedPoint>,
            records: &'a [ApRecord],
            #[serde(skip_serializing_if = "<[_]>::is_empty")]
            weighted: &'a [WeightedRecord],
        }
        Ok(serde_json::to_string_pretty(&Out {
            method: &self.method,
            curve: self.curve(),
            weighted_curve: self.weighted_curve(),
            records: &self.records,
            weighted: &self.weighted,
        })?)
    }

    pub fn write_json(&self, path: &Path) -> Result<(), EvalError> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    /// Columns: species_id, k, seed, ap, weighted_ap_h9, weighted_ap_h99.
    pub fn write_csv(&self, path: &Path) -> Result<(), EvalError> {
        let mut w = csv::Writer::from_path(path)?;
        for r in &self.records {
            w.serialize(r)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv(method: impl Into<String>, path: &Path) -> Result<Self, EvalError> {
        let mut rd = csv::Reader::from_path(path)?;
        let records = rd.deserialize().collect::<Result<Vec<ApRecord>, _>>()?;
        Ok(Self { method: method.into(), records, weighted: Vec::new() })
    }
}

/// Named groups of species, e.g. range-size buckets.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Grouping {
    pub groups: BTreeMap<String, BTreeSet<u32>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroupStat {
    pub n: usize,
    pub mean: f64,
    /// Standard error of the mean.
    pub sem: f64,
}

impl Grouping {
    /// Splits species into equal-count buckets by range coverage, smallest
    /// first. `labels` names the buckets.
    pub fn by_range_size(coverage: &BTreeMap<u32, f64>, labels: &[&str]) -> Result<Self, EvalError> {
        if labels.is_empty() {
            return Err(EvalError::InvalidArgument("no bucket labels".into()));
        }
        let mut ids: Vec<(u32, f64)> = coverage.iter().map(|(&id, &c)| (id, c)).collect();
        ids.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
        let n = ids.len();
        let mut groups: BTreeMap<String, BTreeSet<u32>> = labels.iter().map(|l| (l.to_string(), BTreeSet::new())).collect();
        for (rank, (id, _)) in ids.into_iter().enumerate() {
            let bucket = rank * labels.len() / n.max(1);
            groups.get_mut(labels[bucket]).expect("label present").insert(id);
        }
        Ok(Self { groups })
    }
}

/// Mean AP and its standard error per group. Every species must belong to a
/// group and every group must contain a scored species.
pub fn group_report(aps: &BTreeMap<u32, f64>, grouping: &Grouping) -> Result<BTreeMap<String, GroupStat>, EvalError> {
    for id in aps.keys() {
        if !grouping.groups.values().any(|g| g.contains(id)) {
            return Err(EvalError::UnassignedSpecies(*id));
        }
    }
    let mut out = BTreeMap::new();
    for (name, members) in &grouping.groups {
        let vals: Vec<f64> = members.iter().filter_map(|id| aps.get(id).copied()).collect();
        if vals.is_empty() {
            return Err(EvalError::EmptyGroup(name.clone()));
        }
        let sem = sample_std(&vals) / (vals.len() as f64).sqrt();
        out.insert(name.clone(), GroupStat { n: vals.len(), mean: mean(&vals), sem });
    }
    Ok(out)
}
