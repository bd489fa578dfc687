//! End-to-end synthetic benchmark: pretrain, train FS-SINR per seed, then
//! score held-out species against the baselines.

use std::collections::BTreeMap;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{DataError, EmbeddingTable, SyntheticConfig, SyntheticWorld};
use crate::eval::{evaluate_nested, sparsification_metrics, EvalError, EvalReport, EvalSpecies, Grouping, GroupStat};
use crate::fewshot::{ensemble_predict, feedforward_range, FewShotError, GridEmbeddings, PrototypePair};
use crate::geo::{sample_uniform_sphere, GeoPoint};
use crate::model::{ContextSet, FsSinr, FsSinrConfig, LocationEncoderConfig, SinrModel};
use crate::diffcore::AttentionConfig;
use crate::train::{pretrain_sinr, train_fsinr, TrainConfig, TrainError};

#[derive(Debug, Error)]
pub enum BenchmarkError {
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    FewShot(#[from] FewShotError),
    #[error("{0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchmarkConfig {
    pub world: SyntheticConfig,
    pub model: FsSinrConfig,
    pub train: TrainConfig,
    pub seeds: Vec<u64>,
    pub ks: Vec<usize>,
    pub ensemble_ks: Vec<usize>,
    /// Uniform and target-pool pseudo-negatives, each, for Prototype-SINR.
    pub prototype_negatives: usize,
    pub sparsification_step: f64,
}

/// Width used by the desk-scale benchmark.
pub const BENCH_WIDTH: usize = 64;

impl Default for BenchmarkConfig {
    fn default() -> Self {
        let location = LocationEncoderConfig { hidden_dim: BENCH_WIDTH, residual_blocks: 4 };
        let model = FsSinrConfig {
            location,
            attention: AttentionConfig { model_dim: BENCH_WIDTH, heads: 2, ffn_dim: 2 * BENCH_WIDTH, layer_norm_eps: 1e-5 },
            encoder_layers: 4,
            adapter_hidden: 2 * BENCH_WIDTH,
            ..FsSinrConfig::default()
        };
        let train = TrainConfig {
            lr: 1e-3,
            lr_decay_per_epoch: 0.98,
            batch_size: 128,
            lambda_pos: 128.0,
            sinr_epochs: 30,
            fsinr_epochs: 30,
            ..TrainConfig::default()
        };
        Self {
            world: SyntheticConfig { n_species: 32, obs_per_species: 200, holdout_fraction: 0.25, ..SyntheticConfig::default() },
            model,
            train,
            seeds: vec![0, 1, 2],
            ks: vec![0, 1, 2, 3, 4, 5, 8, 10, 15, 20, 50],
            ensemble_ks: vec![0, 1, 5, 10],
            prototype_negatives: 1000,
            sparsification_step: 0.02,
        }
    }
}

/// The pretrained classifier and FS-SINR model for one seed.
pub struct SeedModels {
    pub seed: u64,
    pub sinr: SinrModel<f32>,
    pub fsinr: FsSinr<f32>,
    pub sinr_cache: GridEmbeddings,
    pub fsinr_cache: GridEmbeddings,
    pub sinr_losses: Vec<f64>,
    pub fsinr_losses: Vec<f64>,
}

pub fn embedding_table(world: &SyntheticWorld) -> EmbeddingTable {
    let provider = world.text_provider();
    EmbeddingTable::from_providers(world.masks.keys().copied(), Some(&provider), None)
}

pub fn train_seed(world: &SyntheticWorld, cfg: &BenchmarkConfig, seed: u64) -> Result<SeedModels, BenchmarkError> {
    let train_cfg = TrainConfig { seed, ..cfg.train.clone() };
    let store = world.training_observations();
    let sinr = pretrain_sinr(&store, cfg.model.location, &train_cfg)?;
    let table = embedding_table(world);
    let fsinr = train_fsinr(&store, &table, Some(&sinr.model), cfg.model, &world.holdout_ids(), &train_cfg)?;
    let grid = world.config.grid;
    Ok(SeedModels {
        seed,
        sinr_cache: GridEmbeddings::build(&sinr.model, grid)?,
        fsinr_cache: GridEmbeddings::build(&fsinr.model, grid)?,
        sinr: sinr.model,
        fsinr: fsinr.model,
        sinr_losses: sinr.epoch_losses,
        fsinr_losses: fsinr.epoch_losses,
    })
}

/// Held-out species with their masks and observation pools.
pub fn held_out_species(world: &SyntheticWorld) -> Result<Vec<EvalSpecies>, BenchmarkError> {
    let mut out = Vec::new();
    for id in world.holdout_ids() {
        let mask = world.mask(id).ok_or(EvalError::MissingMask(id))?.clone();
        out.push(EvalSpecies::new(id, mask, world.observations.locations_of(id))?);
    }
    Ok(out)
}

fn model_for(models: &[SeedModels], seed: u64) -> Result<&SeedModels, EvalError> {
    models.iter().find(|m| m.seed == seed).ok_or_else(|| EvalError::InvalidArgument(format!("no model for seed {seed}")))
}

/// FS-SINR with location-only contexts.
pub fn evaluate_fsinr(species: &[EvalSpecies], models: &[SeedModels], ks: &[usize]) -> Result<EvalReport, EvalError> {
    let seeds: Vec<u64> = models.iter().map(|m| m.seed).collect();
    evaluate_nested("fs-sinr", species, ks, &seeds, &[], |_, ctx, seed| {
        let m = model_for(models, seed)?;
        Ok(feedforward_range(&ContextSet::from_locations(ctx.to_vec()), &m.fsinr, &m.fsinr_cache)?)
    })
}

/// FS-SINR given only the species text, or nothing at all.
pub fn evaluate_zero_shot(
    species: &[EvalSpecies],
    models: &[SeedModels],
    table: &EmbeddingTable,
    with_text: bool,
) -> Result<EvalReport, EvalError> {
    let seeds: Vec<u64> = models.iter().map(|m| m.seed).collect();
    let name = if with_text { "fs-sinr-text" } else { "fs-sinr-prior" };
    evaluate_nested(name, species, &[0], &seeds, &[], |sp, _, seed| {
        let m = model_for(models, seed)?;
        let ctx = ContextSet { text_embedding: if with_text { table.text(sp.id).map(<[f32]>::to_vec) } else { None }, ..ContextSet::default() };
        Ok(feedforward_range(&ctx, &m.fsinr, &m.fsinr_cache)?)
    })
}

/// Uniform-sphere plus training-location pseudo-negatives.
pub fn prototype_negatives(world: &SyntheticWorld, n: usize, seed: u64) -> Vec<GeoPoint> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(17));
    let pool = world.training_observations().all_locations();
    let mut out = sample_uniform_sphere(&mut rng, n);
    if !pool.is_empty() {
        out.extend((0..n).map(|_| pool[rng.random_range(0..pool.len())]));
    }
    out
}

/// Prototype-SINR on the pretrained location encoder. Needs `k ≥ 1`.
pub fn evaluate_prototype(
    world: &SyntheticWorld,
    species: &[EvalSpecies],
    models: &[SeedModels],
    ks: &[usize],
    n_negatives: usize,
) -> Result<EvalReport, EvalError> {
    let seeds: Vec<u64> = models.iter().map(|m| m.seed).collect();
    let ks: Vec<usize> = ks.iter().copied().filter(|&k| k > 0).collect();
    let negatives: BTreeMap<u64, Vec<GeoPoint>> =
        seeds.iter().map(|&s| (s, prototype_negatives(world, n_negatives, s))).collect();
    evaluate_nested("prototype-sinr", species, &ks, &seeds, &[], |_, ctx, seed| {
        let m = model_for(models, seed)?;
        Ok(PrototypePair::fit(ctx, &negatives[&seed], &m.sinr)?.score(&m.sinr_cache)?)
    })
}

/// Mean AURG of the ensemble over species and the given context orders.
pub fn ensemble_aurg(
    species: &[EvalSpecies],
    members: &[(&FsSinr<f32>, &GridEmbeddings)],
    order_seeds: &[u64],
    ks: &[usize],
    step: f64,
) -> Result<BTreeMap<usize, f64>, EvalError> {
    let mut out = BTreeMap::new();
    for &k in ks {
        let mut gains = Vec::new();
        for &order_seed in order_seeds {
            for sp in species {
                let pool = sp.ordered_pool(order_seed);
                let ctx = ContextSet::from_locations(pool[..k.min(pool.len())].to_vec());
                let ens = ensemble_predict(members, &ctx)?;
                gains.push(sparsification_metrics(&ens.mean, &ens.variance, &sp.mask, step, order_seed)?.aurg);
            }
        }
        if gains.is_empty() {
            return Err(EvalError::InvalidArgument("no species or context orders".into()));
        }
        out.insert(k, gains.iter().sum::<f64>() / gains.len() as f64);
    }
    Ok(out)
}

/// Range-size tertiles of the held-out species.
pub fn range_size_grouping(species: &[EvalSpecies]) -> Result<Grouping, EvalError> {
    let coverage: BTreeMap<u32, f64> = species.iter().map(|s| (s.id, s.mask.coverage())).collect();
    Grouping::by_range_size(&coverage, &["small", "medium", "large"])
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BenchmarkOutcome {
    pub fsinr: EvalReport,
    pub prototype: EvalReport,
    pub text_zero_shot: EvalReport,
    pub empty_prior: EvalReport,
    pub ensemble_aurg: BTreeMap<usize, f64>,
    /// Per seed, group statistics at the largest evaluated `k ≤ 10`.
    pub range_groups: Vec<BTreeMap<String, GroupStat>>,
    pub train_seconds: f64,
    pub eval_seconds: f64,
}

pub fn run_benchmark(cfg: &BenchmarkConfig) -> Result<(BenchmarkOutcome, Vec<SeedModels>), BenchmarkError> {
    if cfg.seeds.is_empty() {
        return Err(BenchmarkError::InvalidConfig("no seeds".into()));
    }
    let world = crate::data::generate_synthetic_world(cfg.world.clone())?;
    let start = Instant::now();
    let models = cfg
        .seeds
        .iter()
        .map(|&s| {
            log::info!("benchmark: training seed {s}");
            train_seed(&world, cfg, s)
        })
        .collect::<Result<Vec<_>, _>>()?;
    let train_seconds = start.elapsed().as_secs_f64();
    let outcome = evaluate_models(&world, cfg, &models, train_seconds)?;
    Ok((outcome, models))
}

pub fn evaluate_models(
    world: &SyntheticWorld,
    cfg: &BenchmarkConfig,
    models: &[SeedModels],
    train_seconds: f64,
) -> Result<BenchmarkOutcome, BenchmarkError> {
    let start = Instant::now();
    let species = held_out_species(world)?;
    let table = embedding_table(world);
    let fsinr = evaluate_fsinr(&species, models, &cfg.ks)?;
    let prototype = evaluate_prototype(world, &species, models, &cfg.ks, cfg.prototype_negatives)?;
    let text_zero_shot = evaluate_zero_shot(&species, models, &table, true)?;
    let empty_prior = evaluate_zero_shot(&species, models, &table, false)?;
    let ensemble_aurg = if models.len() >= 2 {
        let members: Vec<(&FsSinr<f32>, &GridEmbeddings)> = models.iter().map(|m| (&m.fsinr, &m.fsinr_cache)).collect();
        let seeds: Vec<u64> = models.iter().map(|m| m.seed).collect();
        ensemble_aurg(&species, &members, &seeds, &cfg.ensemble_ks, cfg.sparsification_step)?
    } else {
        BTreeMap::new()
    };
    let grouping = range_size_grouping(&species)?;
    let group_k = cfg.ks.iter().copied().filter(|&k| k <= 10).max().unwrap_or(0);
    let mut range_groups = Vec::new();
    for m in models {
        let aps: BTreeMap<u32, f64> =
            fsinr.records.iter().filter(|r| r.k == group_k && r.seed == m.seed).map(|r| (r.species_id, r.ap)).collect();
        range_groups.push(crate::eval::group_report(&aps, &grouping)?);
    }
    Ok(BenchmarkOutcome {
        fsinr,
        prototype,
        text_zero_shot,
        empty_prior,
        ensemble_aurg,
        range_groups,
        train_seconds,
        eval_seconds: start.elapsed().as_secs_f64(),
    })
}
