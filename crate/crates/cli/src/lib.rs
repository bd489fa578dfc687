//! `fsinr` command-line entry points. Every flag has a config-file key of
//! the same name; flags win over the file.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fmt::Display;
use std::fs;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use fsinr_core::benchmark::{embedding_table, ensemble_aurg, held_out_species};
use fsinr_core::data::{generate_synthetic_world, SyntheticConfig, SyntheticWorld};
use fsinr_core::eval::{evaluate_nested, EvalReport, K_GRID};
use fsinr_core::fewshot::{feedforward_range, GridEmbeddings};
use fsinr_core::geo::GridSpec;
use fsinr_core::model::{
    load_checkpoint, read_manifest, save_checkpoint, store_checksum, CheckpointMeta, Component, ContextSet, FsSinr,
    FsSinrConfig, SinrModel,
};
use fsinr_core::train::{pretrain_sinr, train_fsinr, TrainConfig};
use fsinr_service::{AppState, ServiceConfig};

pub const EXIT_OK: i32 = 0;
pub const EXIT_DOMAIN: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

pub const REPORT_JSON: &str = "report.json";
pub const REPORT_CSV: &str = "report.csv";
pub const UNCERTAINTY_JSON: &str = "uncertainty.json";
pub const LOSSES_JSON: &str = "losses.json";

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Domain(String),
}

impl CliError {
    pub fn code(&self) -> i32 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Domain(_) => EXIT_DOMAIN,
        }
    }
}

impl Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage error: {m}"),
            CliError::Domain(m) => write!(f, "error: {m}"),
        }
    }
}

fn domain(e: impl Display) -> CliError {
    CliError::Domain(e.to_string())
}

#[derive(Debug, Parser)]
#[command(name = "fsinr", version, about = "Few-shot species range estimation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic world directory.
    Synth(Flags),
    /// Train the location encoder with a per-species classifier.
    Pretrain(Flags),
    /// Train FS-SINR on top of a pretrained encoder.
    Train(Flags),
    /// Score held-out species with nested contexts.
    Eval(Flags),
    /// Serve the HTTP API.
    Serve(Flags),
    /// Describe a checkpoint or world as JSON.
    Inspect(Flags),
}

#[derive(Debug, Clone, Default, Args)]
pub struct Flags {
    /// JSON config file; keys mirror the flags.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub world: Option<PathBuf>,
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Number of species in a synthetic world.
    #[arg(long)]
    pub species: Option<usize>,
    /// Context sizes, comma separated.
    #[arg(long, value_delimiter = ',')]
    pub k: Option<Vec<usize>>,
    /// Number of context orderings.
    #[arg(long)]
    pub seeds: Option<usize>,
    /// Extra distance-weight strengths, comma separated.
    #[arg(long, value_delimiter = ',')]
    pub h: Option<Vec<f64>>,
    /// FS-SINR checkpoints forming an ensemble, comma separated.
    #[arg(long, value_delimiter = ',')]
    pub ensemble: Option<Vec<PathBuf>>,
    #[arg(long)]
    pub port: Option<u16>,
}

/// The config file: flag keys plus nested sections.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FileConfig {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub world: Option<PathBuf>,
    pub model: Option<PathBuf>,
    pub species: Option<usize>,
    pub k: Option<Vec<usize>>,
    pub seeds: Option<usize>,
    pub h: Option<Vec<f64>>,
    pub ensemble: Option<Vec<PathBuf>>,
    pub port: Option<u16>,
    pub synthetic: Option<SyntheticConfig>,
    pub architecture: Option<FsSinrConfig>,
    pub train: Option<TrainConfig>,
    pub cors_origin: Option<String>,
    pub text_routing: Option<bool>,
    /// Extra service grid presets, name to grid.
    pub presets: Option<BTreeMap<String, GridSpec>>,
}

/// Flags merged over the config file.
#[derive(Debug, Clone, PartialEq)]
pub struct Settings {
    pub seed: u64,
    pub out: Option<PathBuf>,
    pub world: Option<PathBuf>,
    pub model: Option<PathBuf>,
    pub k: Vec<usize>,
    pub seeds: usize,
    pub h: Vec<f64>,
    pub ensemble: Vec<PathBuf>,
    pub port: u16,
    pub synthetic: SyntheticConfig,
    pub architecture: FsSinrConfig,
    pub train: TrainConfig,
    pub cors_origin: Option<String>,
    pub text_routing: bool,
    pub presets: BTreeMap<String, GridSpec>,
}

impl Settings {
    pub fn resolve(flags: &Flags) -> Result<Self, CliError> {
        let file: FileConfig = match &flags.config {
            Some(path) => {
                let text = fs::read_to_string(path).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
                serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?
            }
            None => FileConfig::default(),
        };
        let seed = flags.seed.or(file.seed).unwrap_or(0);
        let mut synthetic = file.synthetic.unwrap_or_default();
        synthetic.seed = seed;
        if let Some(n) = flags.species.or(file.species) {
            synthetic.n_species = n;
        }
        let mut train = file.train.unwrap_or_default();
        train.seed = seed;
        Ok(Self {
            seed,
            out: flags.out.clone().or(file.out),
            world: flags.world.clone().or(file.world),
            model: flags.model.clone().or(file.model),
            k: flags.k.clone().or(file.k).unwrap_or_else(|| K_GRID.to_vec()),
            seeds: flags.seeds.or(file.seeds).unwrap_or(1),
            h: flags.h.clone().or(file.h).unwrap_or_default(),
            ensemble: flags.ensemble.clone().or(file.ensemble).unwrap_or_default(),
            port: flags.port.or(file.port).unwrap_or(8080),
            synthetic,
            architecture: file.architecture.unwrap_or_default(),
            train,
            cors_origin: file.cors_origin,
            text_routing: file.text_routing.unwrap_or(true),
            presets: file.presets.unwrap_or_default(),
        })
    }

    fn required<'a>(value: &'a Option<PathBuf>, flag: &str) -> Result<&'a Path, CliError> {
        value.as_deref().ok_or_else(|| CliError::Usage(format!("--{flag} is required")))
    }

    /// Context orderings used by `eval`.
    pub fn eval_seeds(&self) -> Vec<u64> {
        (0..self.seeds as u64).map(|i| self.seed + i).collect()
    }
}

/// Parses `argv` (program name first) and runs the command.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match execute(&cli.command) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("{e}");
            e.code()
        }
    }
}

pub fn execute(command: &Command) -> Result<(), CliError> {
    match command {
        Command::Synth(f) => synth(&Settings::resolve(f)?),
        Command::Pretrain(f) => pretrain(&Settings::resolve(f)?),
        Command::Train(f) => train(&Settings::resolve(f)?),
        Command::Eval(f) => eval(&Settings::resolve(f)?),
        Command::Serve(f) => serve(&Settings::resolve(f)?),
        Command::Inspect(f) => inspect(&Settings::resolve(f)?),
    }
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value).map_err(domain)?;
    fs::write(path, text + "\n").map_err(domain)
}

fn load_world(s: &Settings) -> Result<SyntheticWorld, CliError> {
    SyntheticWorld::load(Settings::required(&s.world, "world")?).map_err(domain)
}

fn load_fsinr(path: &Path) -> Result<FsSinr<f32>, CliError> {
    Ok(load_checkpoint::<FsSinr<f32>>(path).map_err(|e| CliError::Domain(format!("{}: {e}", path.display())))?.0)
}

fn synth(s: &Settings) -> Result<(), CliError> {
    let out = Settings::required(&s.out, "out")?;
    let world = generate_synthetic_world(s.synthetic).map_err(domain)?;
    world.save(out).map_err(domain)?;
    log::info!("wrote {} species to {}", world.species.len(), out.display());
    Ok(())
}

fn pretrain(s: &Settings) -> Result<(), CliError> {
    let out = Settings::required(&s.out, "out")?;
    let world = load_world(s)?;
    let result = pretrain_sinr(&world.training_observations(), s.architecture.location, &s.train).map_err(domain)?;
    let meta = CheckpointMeta { seed: s.seed, epoch: s.train.sinr_epochs as u64 };
    save_checkpoint(&result.model, out, meta).map_err(domain)?;
    write_json(&out.join(LOSSES_JSON), &result.epoch_losses)
}

fn train(s: &Settings) -> Result<(), CliError> {
    let out = Settings::required(&s.out, "out")?;
    let world = load_world(s)?;
    let encoder_dir = Settings::required(&s.model, "model")?;
    let (sinr, _) = load_checkpoint::<SinrModel<f32>>(encoder_dir)
        .map_err(|e| CliError::Domain(format!("{}: {e}", encoder_dir.display())))?;
    let table = embedding_table(&world);
    let result = train_fsinr(
        &world.training_observations(),
        &table,
        Some(&sinr),
        s.architecture,
        &world.holdout_ids(),
        &s.train,
    )
    .map_err(domain)?;
    let meta = CheckpointMeta { seed: s.seed, epoch: s.train.fsinr_epochs as u64 };
    save_checkpoint(&result.model, out, meta).map_err(domain)?;
    write_json(&out.join(LOSSES_JSON), &result.epoch_losses)
}

#[derive(Debug, Serialize)]
struct UncertaintyReport {
    members: usize,
    order_seeds: Vec<u64>,
    aurg: BTreeMap<usize, f64>,
}

fn eval(s: &Settings) -> Result<(), CliError> {
    let out = Settings::required(&s.out, "out")?;
    if s.seeds == 0 {
        return Err(CliError::Usage("--seeds must be at least 1".into()));
    }
    let world = load_world(s)?;
    let model = load_fsinr(Settings::required(&s.model, "model")?)?;
    let species = held_out_species(&world).map_err(domain)?;
    let cache = GridEmbeddings::build(&model, world.config.grid).map_err(domain)?;
    let seeds = s.eval_seeds();
    let report: EvalReport = evaluate_nested("fs-sinr", &species, &s.k, &seeds, &s.h, |_, ctx, _| {
        Ok(feedforward_range(&ContextSet::from_locations(ctx.to_vec()), &model, &cache)?)
    })
    .map_err(domain)?;
    fs::create_dir_all(out).map_err(domain)?;
    report.write_json(&out.join(REPORT_JSON)).map_err(domain)?;
    report.write_csv(&out.join(REPORT_CSV)).map_err(domain)?;
    for p in report.curve() {
        println!("k={:<3} MAP {:.4} ± {:.4}", p.k, p.map_mean, p.map_std);
    }

    if !s.ensemble.is_empty() {
        let models = s.ensemble.iter().map(|p| load_fsinr(p)).collect::<Result<Vec<_>, _>>()?;
        if models.len() < 2 {
            return Err(CliError::Usage("--ensemble needs at least two checkpoints".into()));
        }
        let caches = models
            .iter()
            .map(|m| GridEmbeddings::build(m, world.config.grid))
            .collect::<Result<Vec<_>, _>>()
            .map_err(domain)?;
        let members: Vec<_> = models.iter().zip(&caches).collect();
        let aurg = ensemble_aurg(&species, &members, &seeds, &s.k, 0.02).map_err(domain)?;
        write_json(&out.join(UNCERTAINTY_JSON), &UncertaintyReport { members: models.len(), order_seeds: seeds, aurg })?;
    }
    Ok(())
}

/// Presets served by default: the world's grid when given, and a coarse
/// global grid.
fn service_presets(s: &Settings) -> Result<Vec<(String, GridSpec)>, CliError> {
    let mut presets = Vec::new();
    if s.world.is_some() {
        presets.push(("world".to_string(), load_world(s)?.config.grid));
    }
    presets.push(("global".to_string(), GridSpec::global(2.0).map_err(domain)?));
    presets.extend(s.presets.iter().map(|(k, v)| (k.clone(), *v)));
    Ok(presets)
}

pub fn build_service(s: &Settings) -> Result<AppState, CliError> {
    let mut paths = Vec::new();
    if let Some(m) = &s.model {
        paths.push(m.clone());
    }
    paths.extend(s.ensemble.iter().filter(|p| Some(*p) != s.model.as_ref()).cloned());
    if paths.is_empty() {
        return Err(CliError::Usage("--model or --ensemble is required".into()));
    }
    let models = paths.iter().map(|p| load_fsinr(p)).collect::<Result<Vec<_>, _>>()?;
    let config = ServiceConfig { presets: service_presets(s)?, text_routing: s.text_routing, cors_origin: s.cors_origin.clone() };
    AppState::new(models, config).map_err(domain)
}

fn serve(s: &Settings) -> Result<(), CliError> {
    let state = Arc::new(build_service(s)?);
    let addr = SocketAddr::from(([0, 0, 0, 0], s.port));
    let runtime = tokio::runtime::Runtime::new().map_err(domain)?;
    runtime.block_on(fsinr_service::serve(state, addr)).map_err(domain)
}

#[derive(Debug, Serialize)]
struct CheckpointSummary {
    kind: String,
    seed: u64,
    epoch: u64,
    config: serde_json::Value,
    checksum: String,
    parameter_counts: BTreeMap<String, usize>,
}

#[derive(Debug, Serialize)]
struct WorldSummary {
    species: usize,
    held_out: Vec<u32>,
    observations: usize,
    mean_coverage: f64,
    grid: GridSpec,
}

fn inspect(s: &Settings) -> Result<(), CliError> {
    let text = if let Some(dir) = &s.model {
        let manifest = read_manifest(dir).map_err(domain)?;
        let (checksum, parameter_counts) = if manifest.kind == "fs_sinr" {
            let m = load_fsinr(dir)?;
            let counts = [
                ("location_encoder", Component::LocationEncoder),
                ("text_adapter", Component::TextAdapter),
                ("image_adapter", Component::ImageAdapter),
                ("transformer", Component::Transformer),
                ("species_decoder", Component::SpeciesDecoder),
                ("total", Component::Total),
            ]
            .into_iter()
            .map(|(name, c)| (name.to_string(), m.count_parameters(c)))
            .collect();
            (store_checksum(&m.store), counts)
        } else {
            let (m, _) = load_checkpoint::<SinrModel<f32>>(dir).map_err(domain)?;
            (store_checksum(&m.store), BTreeMap::from([("total".to_string(), m.store.ids().map(|id| m.store.value(id).len()).sum())]))
        };
        let summary = CheckpointSummary {
            kind: manifest.kind,
            seed: manifest.seed,
            epoch: manifest.epoch,
            config: manifest.config,
            checksum,
            parameter_counts,
        };
        serde_json::to_string_pretty(&summary).map_err(domain)?
    } else if s.world.is_some() {
        let world = load_world(s)?;
        let summary = WorldSummary {
            species: world.species.len(),
            held_out: world.holdout_ids().into_iter().collect(),
            observations: world.observations.len(),
            mean_coverage: world.mean_coverage(),
            grid: world.config.grid,
        };
        serde_json::to_string_pretty(&summary).map_err(domain)?
    } else {
        return Err(CliError::Usage("--model or --world is required".into()));
    };
    println!("{text}");
    Ok(())
}
