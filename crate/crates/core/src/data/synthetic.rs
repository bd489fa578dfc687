//! Synthetic biogeography: smooth environment fields, one niche per species,
//! thresholded suitability as the true range, presence samples inside it.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::embedding::StubTextProvider;
use super::observations::{load_observations, Observation, ObservationStore};
use super::DataError;
use crate::diffcore::sigmoid_f64;
use crate::geo::{haversine_km, GeoPoint, GridSpec, RangeMask};

const MIN_COVERAGE: f64 = 0.02;
const MAX_COVERAGE: f64 = 0.20;
const NICHE_RETRIES: usize = 50;

pub const WORLD_FILE: &str = "world.json";
pub const OBSERVATIONS_FILE: &str = "observations.csv";
pub const TEXTS_FILE: &str = "texts.json";
pub const MASK_DIR: &str = "masks";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticConfig {
    pub seed: u64,
    pub n_species: usize,
    pub n_env_fields: usize,
    pub obs_per_species: usize,
    pub holdout_fraction: f64,
    pub grid: GridSpec,
    pub bumps_per_field: usize,
    /// Exponent on the first environment field when sampling observations;
    /// 0 samples proportionally to suitability alone.
    pub density_bias: f64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            n_species: 32,
            n_env_fields: 4,
            obs_per_species: 200,
            holdout_fraction: 0.25,
            grid: GridSpec::new(-30.0, 30.0, -40.0, 40.0, 1.0).expect("valid default grid"),
            bumps_per_field: 6,
            density_bias: 0.0,
        }
    }
}

impl SyntheticConfig {
    fn validate(&self) -> Result<(), DataError> {
        if self.n_species < 2 {
            return Err(DataError::InvalidConfig("n_species must be at least 2".into()));
        }
        if self.obs_per_species < 1 {
            return Err(DataError::InvalidConfig("obs_per_species must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.holdout_fraction) {
            return Err(DataError::InvalidConfig("holdout_fraction must be in [0, 1)".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnvBump {
    pub center: GeoPoint,
    pub amplitude: f64,
    pub scale_km: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvironmentField {
    pub bumps: Vec<EnvBump>,
    /// Raw min and max over the grid, used to rescale to [0, 1].
    pub min: f64,
    pub max: f64,
}

impl EnvironmentField {
    fn raw(&self, p: GeoPoint) -> f64 {
        self.bumps
            .iter()
            .map(|b| {
                let d = haversine_km(p, b.center) / b.scale_km;
                b.amplitude * (-0.5 * d * d).exp()
            })
            .sum()
    }

    pub fn value(&self, p: GeoPoint) -> f64 {
        let span = self.max - self.min;
        if span > 0.0 {
            (self.raw(p) - self.min) / span
        } else {
            0.0
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpeciesNiche {
    pub id: u32,
    pub center: GeoPoint,
    pub field_weights: Vec<f64>,
    pub distance_weight: f64,
    pub length_scale_km: f64,
    pub threshold: f64,
    pub holdout: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticWorld {
    pub config: SyntheticConfig,
    pub fields: Vec<EnvironmentField>,
    pub species: Vec<SpeciesNiche>,
    pub masks: BTreeMap<u32, RangeMask>,
    pub observations: ObservationStore,
    pub texts: BTreeMap<u32, String>,
}

#[derive(Serialize, Deserialize)]
struct WorldFile {
    config: SyntheticConfig,
    fields: Vec<EnvironmentField>,
    species: Vec<SpeciesNiche>,
}

fn random_point<R: Rng + ?Sized>(rng: &mut R, grid: &GridSpec, inset: f64) -> GeoPoint {
    let inset_lat = inset.min((grid.lat_max - grid.lat_min) / 4.0);
    let inset_lon = inset.min((grid.lon_max - grid.lon_min) / 4.0);
    let lat = rng.random_range(grid.lat_min + inset_lat..grid.lat_max - inset_lat);
    let lon = rng.random_range(grid.lon_min + inset_lon..grid.lon_max - inset_lon);
    GeoPoint::new(lat, lon).expect("point inside grid bounds")
}

fn suitability(niche: &SpeciesNiche, env: &[f64], p: GeoPoint) -> f64 {
    let affinity: f64 = niche.field_weights.iter().zip(env).map(|(a, e)| a * e).sum();
    sigmoid_f64(affinity - niche.distance_weight * haversine_km(p, niche.center) / niche.length_scale_km)
}

fn band(value: f64, lo: f64, hi: f64, n: usize) -> usize {
    (((value - lo) / (hi - lo) * n as f64).floor().max(0.0) as usize).min(n - 1)
}

/// Description built from niche parameters so text tokens carry range signal.
fn describe(niche: &SpeciesNiche, grid: &GridSpec, coverage: f64) -> String {
    let mut words = vec!["prefers".to_string()];
    for (m, &a) in niche.field_weights.iter().enumerate() {
        if a > 0.5 {
            words.push(format!("field-{m}-high"));
        } else if a < -0.5 {
            words.push(format!("field-{m}-low"));
        }
    }
    words.push("near".into());
    let (lat, lon) = (niche.center.lat(), niche.center.lon());
    words.push(["south", "equatorial", "north"][band(lat, grid.lat_min, grid.lat_max, 3)].into());
    words.push(["west", "central", "east"][band(lon, grid.lon_min, grid.lon_max, 3)].into());
    let lat_bands = ((grid.lat_max - grid.lat_min) / 10.0).ceil().max(1.0) as usize;
    let lon_bands = ((grid.lon_max - grid.lon_min) / 10.0).ceil().max(1.0) as usize;
    words.push(format!("lat-band-{}", band(lat, grid.lat_min, grid.lat_max, lat_bands)));
    words.push(format!("lon-band-{}", band(lon, grid.lon_min, grid.lon_max, lon_bands)));
    words.push(
        if coverage < 0.06 {
            "range-small"
        } else if coverage < 0.11 {
            "range-medium"
        } else {
            "range-large"
        }
        .into(),
    );
    words.join(" ")
}

pub fn generate_synthetic_world(config: SyntheticConfig) -> Result<SyntheticWorld, DataError> {
    config.validate()?;
    let grid = config.grid;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let centers = grid.centers();

    let mut fields = Vec::with_capacity(config.n_env_fields);
    for _ in 0..config.n_env_fields {
        let bumps: Vec<EnvBump> = (0..config.bumps_per_field)
            .map(|_| EnvBump {
                center: random_point(&mut rng, &grid, 0.0),
                amplitude: rng.random_range(0.5..1.5) * if rng.random_bool(0.5) { 1.0 } else { -1.0 },
                scale_km: rng.random_range(300.0..1500.0),
            })
            .collect();
        let mut field = EnvironmentField { bumps, min: 0.0, max: 0.0 };
        let raw: Vec<f64> = centers.iter().map(|&c| field.raw(c)).collect();
        field.min = raw.iter().copied().fold(f64::INFINITY, f64::min);
        field.max = raw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        fields.push(field);
    }
    let env: Vec<Vec<f64>> = centers.iter().map(|&c| fields.iter().map(|f| f.value(c)).collect()).collect();

    let mut ids: Vec<u32> = (0..config.n_species as u32).collect();
    ids.shuffle(&mut rng);
    let n_holdout = (config.n_species as f64 * config.holdout_fraction).round() as usize;
    let holdout: BTreeSet<u32> = ids[..n_holdout].iter().copied().collect();

    let mut species = Vec::with_capacity(config.n_species);
    let mut masks = BTreeMap::new();
    let mut observations = ObservationStore::new();
    let mut texts = BTreeMap::new();
    for id in 0..config.n_species as u32 {
        let mut accepted = None;
        for _ in 0..NICHE_RETRIES {
            let mut niche = SpeciesNiche {
                id,
                center: random_point(&mut rng, &grid, 5.0),
                field_weights: (0..config.n_env_fields).map(|_| rng.random_range(-1.5..1.5)).collect(),
                distance_weight: 3.0,
                length_scale_km: rng.random_range(300.0..1000.0),
                threshold: 0.0,
                holdout: holdout.contains(&id),
            };
            let suit: Vec<f64> = centers.iter().zip(&env).map(|(&c, e)| suitability(&niche, e, c)).collect();
            let target = rng.random_range(0.03..0.15);
            let mut sorted = suit.clone();
            sorted.sort_by(|a, b| b.total_cmp(a));
            let rank = ((target * suit.len() as f64).ceil() as usize).clamp(1, suit.len());
            niche.threshold = sorted[rank - 1];
            let cells: Vec<bool> = suit.iter().map(|&s| s >= niche.threshold).collect();
            let mask = RangeMask::new(grid, cells)?;
            if (MIN_COVERAGE..=MAX_COVERAGE).contains(&mask.coverage()) {
                accepted = Some((niche, mask, suit));
                break;
            }
        }
        let (niche, mask, suit) = accepted.ok_or(DataError::DegenerateSpecies(id))?;

        let weights: Vec<f64> = suit
            .iter()
            .zip(&env)
            .zip(&mask.cells)
            .map(|((&s, e), &inside)| if inside { s * (config.density_bias * e.first().copied().unwrap_or(0.0)).exp() } else { 0.0 })
            .collect();
        let pick = WeightedIndex::new(&weights).map_err(|_| DataError::DegenerateSpecies(id))?;
        for _ in 0..config.obs_per_species {
            let cell = pick.sample(&mut rng);
            let c = grid.cell_center(cell);
            let half = grid.res_deg * 0.49;
            let location = GeoPoint::new(c.lat() + rng.random_range(-half..half), c.lon() + rng.random_range(-half..half))?;
            observations.push(Observation { species_id: id, location });
        }
        texts.insert(id, describe(&niche, &grid, mask.coverage()));
        masks.insert(id, mask);
        species.push(niche);
    }

    Ok(SyntheticWorld { config, fields, species, masks, observations, texts })
}

impl SyntheticWorld {
    pub fn environment(&self, p: GeoPoint) -> Vec<f64> {
        self.fields.iter().map(|f| f.value(p)).collect()
    }

    pub fn suitability(&self, id: u32, p: GeoPoint) -> Option<f64> {
        let niche = self.species.iter().find(|s| s.id == id)?;
        Some(suitability(niche, &self.environment(p), p))
    }

    pub fn holdout_ids(&self) -> BTreeSet<u32> {
        self.species.iter().filter(|s| s.holdout).map(|s| s.id).collect()
    }

    pub fn train_ids(&self) -> BTreeSet<u32> {
        self.species.iter().filter(|s| !s.holdout).map(|s| s.id).collect()
    }

    /// Observations of training species only.
    pub fn training_observations(&self) -> ObservationStore {
        self.observations.without(&self.holdout_ids())
    }

    pub fn mask(&self, id: u32) -> Option<&RangeMask> {
        self.masks.get(&id)
    }

    pub fn text(&self, id: u32) -> Option<&str> {
        self.texts.get(&id).map(String::as_str)
    }

    pub fn text_provider(&self) -> StubTextProvider {
        StubTextProvider::new(self.texts.clone())
    }

    pub fn mean_coverage(&self) -> f64 {
        self.masks.values().map(RangeMask::coverage).sum::<f64>() / self.masks.len() as f64
    }

    pub fn save(&self, dir: &Path) -> Result<(), DataError> {
        fs::create_dir_all(dir.join(MASK_DIR))?;
        let file = WorldFile { config: self.config, fields: self.fields.clone(), species: self.species.clone() };
        fs::write(dir.join(WORLD_FILE), serde_json::to_vec_pretty(&file)?)?;
        fs::write(dir.join(TEXTS_FILE), serde_json::to_vec_pretty(&self.texts)?)?;
        self.observations.save_csv(&dir.join(OBSERVATIONS_FILE))?;
        for (id, mask) in &self.masks {
            mask.save(&dir.join(MASK_DIR).join(format!("species_{id}")))?;
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self, DataError> {
        let file: WorldFile = serde_json::from_slice(&fs::read(dir.join(WORLD_FILE))?)?;
        let texts: BTreeMap<u32, String> = serde_json::from_slice(&fs::read(dir.join(TEXTS_FILE))?)?;
        let observations = load_observations(&dir.join(OBSERVATIONS_FILE))?;
        let mut masks = BTreeMap::new();
        for niche in &file.species {
            let mask = RangeMask::load(&dir.join(MASK_DIR).join(format!("species_{}", niche.id)))?;
            if !mask.grid.same_geometry(&file.config.grid) {
                return Err(DataError::Geo(crate::geo::GeoError::GeometryMismatch));
            }
            masks.insert(niche.id, mask);
        }
        Ok(Self { config: file.config, fields: file.fields, species: file.species, masks, observations, texts })
    }
}
