//! Read-only HTTP inference API: embed a species from its context, score a
//! grid against an embedding, and describe the served model.

pub mod api;

use std::net::SocketAddr;
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::State;
use axum::http::{HeaderValue, StatusCode};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::de::DeserializeOwned;
use thiserror::Error;
use tower_http::cors::{Any, CorsLayer};

use fsinr_core::data::hashed_bag_of_words;
use fsinr_core::fewshot::{combine_members, FewShotError, GridEmbeddings};
use fsinr_core::geo::{GeoPoint, GridSpec};
use fsinr_core::model::{store_checksum, Component, ContextSet, FsSinr, ModelError, MAX_CONTEXT_LOCATIONS};

pub use api::*;

/// Explicit grids larger than this are rejected.
pub const MAX_CELLS: usize = 1_000_000;

#[derive(Debug, Error)]
pub enum ServiceError {
    #[error("no model to serve")]
    NoModels,
    #[error("no grid preset")]
    NoPresets,
    #[error("ensemble members differ in configuration")]
    MixedConfigs,
    #[error(transparent)]
    FewShot(#[from] FewShotError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone)]
pub struct ServiceConfig {
    pub presets: Vec<(String, GridSpec)>,
    /// Route free-text through the hashed bag-of-words embedding.
    pub text_routing: bool,
    /// `None` allows any origin.
    pub cors_origin: Option<String>,
}

/// A preset grid with the cell features of every served model.
struct Preset {
    name: String,
    grid: GridSpec,
    caches: Vec<Arc<GridEmbeddings>>,
}

/// Shared, immutable serving state.
pub struct AppState {
    models: Vec<FsSinr<f32>>,
    presets: Vec<Preset>,
    text_routing: bool,
    cors_origin: Option<String>,
}

impl AppState {
    /// Precomputes cell features for every preset and model.
    pub fn new(models: Vec<FsSinr<f32>>, config: ServiceConfig) -> Result<Self, ServiceError> {
        let first = models.first().ok_or(ServiceError::NoModels)?;
        if models.iter().any(|m| m.config != first.config) {
            return Err(ServiceError::MixedConfigs);
        }
        if config.presets.is_empty() {
            return Err(ServiceError::NoPresets);
        }
        let mut presets = Vec::new();
        for (name, grid) in config.presets {
            let caches = models
                .iter()
                .map(|m| GridEmbeddings::build(m, grid).map(Arc::new))
                .collect::<Result<Vec<_>, _>>()?;
            log::info!("preset {name}: {} cells", grid.len());
            presets.push(Preset { name, grid, caches });
        }
        Ok(Self { models, presets, text_routing: config.text_routing, cors_origin: config.cors_origin })
    }

    pub fn primary(&self) -> &FsSinr<f32> {
        &self.models[0]
    }

    pub fn ensemble_size(&self) -> usize {
        self.models.len()
    }

    /// Checksum over every served model's parameters, recomputed on call.
    pub fn checksum(&self) -> String {
        let parts: Vec<String> = self.models.iter().map(|m| store_checksum(&m.store)).collect();
        parts.join(":")
    }

    pub fn model_info(&self) -> ModelInfo {
        let m = self.primary();
        let count = |c| m.count_parameters(c);
        ModelInfo {
            config: m.config,
            parameter_counts: ParameterCounts {
                location_encoder: count(Component::LocationEncoder),
                text_adapter: count(Component::TextAdapter),
                image_adapter: count(Component::ImageAdapter),
                transformer: count(Component::Transformer),
                species_decoder: count(Component::SpeciesDecoder),
                total: count(Component::Total),
            },
            checksum: self.checksum(),
            ensemble_size: self.models.len(),
            text_routing: self.text_routing,
            grid_presets: self.presets.iter().map(|p| PresetInfo { name: p.name.clone(), grid: (&p.grid).into() }).collect(),
        }
    }

    fn context(&self, req: &EmbedRequest) -> Result<ContextSet, ApiError> {
        if req.context_locations.len() > MAX_CONTEXT_LOCATIONS {
            return Err(ApiError {
                status: StatusCode::PAYLOAD_TOO_LARGE,
                message: format!("{} context locations, at most {MAX_CONTEXT_LOCATIONS}", req.context_locations.len()),
            });
        }
        let locations = req
            .context_locations
            .iter()
            .map(|&[lat, lon]| GeoPoint::new(lat, lon).map_err(|e| ApiError::bad_request(e.to_string())))
            .collect::<Result<Vec<_>, _>>()?;
        let cfg = &self.primary().config;
        let text_embedding = match (&req.text, &req.text_embedding) {
            (Some(_), Some(_)) => return Err(ApiError::bad_request("give text or text_embedding, not both")),
            (Some(_), None) if !self.text_routing => return Err(ApiError::unprocessable("no text provider configured")),
            (Some(t), None) if t.trim().is_empty() => None,
            (Some(t), None) => Some(hashed_bag_of_words(t, cfg.text_dim)),
            (None, raw) => raw.clone(),
        };
        check_len("text_embedding", text_embedding.as_deref(), cfg.text_dim)?;
        check_len("image_embedding", req.image_embedding.as_deref(), cfg.image_dim)?;
        Ok(ContextSet { locations, text_embedding, image_embedding: req.image_embedding.clone() })
    }

    /// One inference-mode forward pass per served model.
    pub fn embed(&self, req: &EmbedRequest) -> Result<EmbedResponse, ApiError> {
        let ctx = self.context(req)?;
        let members = self
            .models
            .iter()
            .map(|m| m.species_embedding(&ctx).map_err(model_error))
            .collect::<Result<Vec<_>, _>>()?;
        let embedding = members[0].clone();
        Ok(EmbedResponse { embedding, members: (self.models.len() > 1).then_some(members) })
    }

    fn grid_caches(&self, choice: Option<&GridChoice>) -> Result<(GridSpec, Vec<Arc<GridEmbeddings>>), ApiError> {
        match choice {
            None => Ok((self.presets[0].grid, self.presets[0].caches.clone())),
            Some(GridChoice::Preset(name)) => self
                .presets
                .iter()
                .find(|p| &p.name == name)
                .map(|p| (p.grid, p.caches.clone()))
                .ok_or_else(|| ApiError { status: StatusCode::NOT_FOUND, message: format!("unknown grid preset {name:?}") }),
            Some(GridChoice::Bounds(b)) => {
                let grid = GridSpec::new(b.lat_min, b.lat_max, b.lon_min, b.lon_max, b.res_deg)
                    .map_err(|e| ApiError::bad_request(e.to_string()))?;
                if grid.len() > MAX_CELLS {
                    return Err(ApiError::bad_request(format!("{} cells, at most {MAX_CELLS}", grid.len())));
                }
                let caches = self
                    .models
                    .iter()
                    .map(|m| GridEmbeddings::build(m, grid).map(Arc::new))
                    .collect::<Result<Vec<_>, _>>()
                    .map_err(internal)?;
                Ok((grid, caches))
            }
        }
    }

    /// Scores the grid from cached cell features; writes nothing.
    pub fn predict(&self, req: &PredictRequest) -> Result<PredictResponse, ApiError> {
        if let Some(t) = req.threshold {
            if !(0.0..=1.0).contains(&t) {
                return Err(ApiError::bad_request(format!("threshold {t} outside [0, 1]")));
            }
        }
        let embeddings: Vec<Vec<f32>> = match (&req.embedding, &req.context) {
            (Some(_), Some(_)) | (None, None) => {
                return Err(ApiError::bad_request("give exactly one of embedding or context"));
            }
            (Some(_), None) if req.ensemble => return Err(ApiError::bad_request("ensemble needs an inline context")),
            (Some(w), None) => {
                check_len("embedding", Some(w), self.primary().dim())?;
                vec![w.clone()]
            }
            (None, Some(ctx)) => {
                let resp = self.embed(ctx)?;
                if req.ensemble {
                    resp.members.ok_or_else(|| ApiError::bad_request("ensemble needs at least two served models"))?
                } else {
                    vec![resp.embedding]
                }
            }
        };
        let (grid, caches) = self.grid_caches(req.grid.as_ref())?;
        let grids = embeddings
            .iter()
            .zip(&caches)
            .map(|(w, cache)| cache.score(w))
            .collect::<Result<Vec<_>, _>>()
            .map_err(internal)?;
        let (probabilities, variance) = if grids.len() > 1 {
            let ens = combine_members(&grids).map_err(internal)?;
            (ens.mean.cells, Some(ens.variance.cells))
        } else {
            (grids.into_iter().next().expect("one member").cells, None)
        };
        let binary = req.threshold.map(|t| probabilities.iter().map(|&p| u8::from(f64::from(p) >= t)).collect());
        Ok(PredictResponse { grid: (&grid).into(), probabilities, variance, binary })
    }
}

fn check_len(field: &str, v: Option<&[f32]>, expected: usize) -> Result<(), ApiError> {
    match v {
        Some(v) if v.len() != expected => {
            Err(ApiError::unprocessable(format!("{field} has length {}, expected {expected}", v.len())))
        }
        _ => Ok(()),
    }
}

fn model_error(e: ModelError) -> ApiError {
    match e {
        ModelError::EmbeddingDimMismatch { .. } => ApiError::unprocessable(e.to_string()),
        other => internal(other),
    }
}

fn internal(e: impl std::fmt::Display) -> ApiError {
    ApiError { status: StatusCode::INTERNAL_SERVER_ERROR, message: e.to_string() }
}

/// Any JSON problem, syntactic or structural, is a 400.
fn parse<T: DeserializeOwned>(body: &Bytes) -> Result<T, ApiError> {
    let body: &[u8] = if body.iter().all(u8::is_ascii_whitespace) { b"{}" } else { body };
    serde_json::from_slice(body).map_err(|e| ApiError::bad_request(format!("malformed request: {e}")))
}

async fn blocking<T: Send + 'static>(
    f: impl FnOnce() -> Result<T, ApiError> + Send + 'static,
) -> Result<T, ApiError> {
    tokio::task::spawn_blocking(f).await.map_err(internal)?
}

async fn embed_handler(State(state): State<Arc<AppState>>, body: Bytes) -> Result<Json<EmbedResponse>, ApiError> {
    let req: EmbedRequest = parse(&body)?;
    Ok(Json(blocking(move || state.embed(&req)).await?))
}

async fn predict_handler(State(state): State<Arc<AppState>>, body: Bytes) -> Result<Json<PredictResponse>, ApiError> {
    let req: PredictRequest = parse(&body)?;
    Ok(Json(blocking(move || state.predict(&req)).await?))
}

async fn model_handler(State(state): State<Arc<AppState>>) -> Result<Json<ModelInfo>, ApiError> {
    Ok(Json(blocking(move || Ok(state.model_info())).await?))
}

pub fn router(state: Arc<AppState>) -> Router {
    let cors = CorsLayer::new().allow_methods(Any).allow_headers(Any);
    let cors = match state.cors_origin.as_deref().map(HeaderValue::from_str) {
        Some(Ok(origin)) => cors.allow_origin(origin),
        _ => cors.allow_origin(Any),
    };
    Router::new()
        .route("/api/embed", post(embed_handler))
        .route("/api/predict", post(predict_handler))
        .route("/api/model", get(model_handler))
        .layer(cors)
        .with_state(state)
}

pub async fn serve(state: Arc<AppState>, addr: SocketAddr) -> Result<(), ServiceError> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!("listening on {}", listener.local_addr()?);
    axum::serve(listener, router(state)).await?;
    Ok(())
}
