use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::Json;
use serde::{Deserialize, Serialize};

use fsinr_core::geo::GridSpec;
use fsinr_core::model::FsSinrConfig;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EmbedRequest {
    /// `[lat, lon]` pairs.
    #[serde(default)]
    pub context_locations: Vec<[f64; 2]>,
    pub text: Option<String>,
    pub text_embedding: Option<Vec<f32>>,
    pub image_embedding: Option<Vec<f32>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbedResponse {
    pub embedding: Vec<f32>,
    /// One embedding per ensemble member when more than one model is served.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub members: Option<Vec<Vec<f32>>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridBounds {
    pub lat_min: f64,
    pub lat_max: f64,
    pub lon_min: f64,
    pub lon_max: f64,
    pub res_deg: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum GridChoice {
    Preset(String),
    Bounds(GridBounds),
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PredictRequest {
    pub embedding: Option<Vec<f32>>,
    pub context: Option<EmbedRequest>,
    /// Defaults to the first preset.
    pub grid: Option<GridChoice>,
    pub threshold: Option<f64>,
    /// Mean and variance over all served models; needs an inline context.
    #[serde(default)]
    pub ensemble: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridMeta {
    pub lat_min: f64,
    pub lat_max: f64,
    pub lon_min: f64,
    pub lon_max: f64,
    pub res_deg: f64,
    pub n_rows: usize,
    pub n_cols: usize,
}

impl From<&GridSpec> for GridMeta {
    fn from(g: &GridSpec) -> Self {
        Self {
            lat_min: g.lat_min,
            lat_max: g.lat_max,
            lon_min: g.lon_min,
            lon_max: g.lon_max,
            res_deg: g.res_deg,
            n_rows: g.n_rows,
            n_cols: g.n_cols,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictResponse {
    pub grid: GridMeta,
    /// Row-major, north-west first in grid order.
    pub probabilities: Vec<f32>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub variance: Option<Vec<f32>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub binary: Option<Vec<u8>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParameterCounts {
    pub location_encoder: usize,
    pub text_adapter: usize,
    pub image_adapter: usize,
    pub transformer: usize,
    pub species_decoder: usize,
    pub total: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PresetInfo {
    pub name: String,
    pub grid: GridMeta,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelInfo {
    pub config: FsSinrConfig,
    pub parameter_counts: ParameterCounts,
    pub checksum: String,
    pub ensemble_size: usize,
    pub text_routing: bool,
    pub grid_presets: Vec<PresetInfo>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ApiError {
    pub status: StatusCode,
    pub message: String,
}

impl ApiError {
    pub fn bad_request(message: impl Into<String>) -> Self {
        Self { status: StatusCode::BAD_REQUEST, message: message.into() }
    }

    pub fn unprocessable(message: impl Into<String>) -> Self {
        Self { status: StatusCode::UNPROCESSABLE_ENTITY, message: message.into() }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(serde_json::json!({ "error": self.message }))).into_response()
    }
}
