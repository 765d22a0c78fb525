//! HTTP API over one loaded slider space.
//!
//! Every response carries the manifest hash in the `x-manifest-hash` header
//! (and in the body of JSON responses). A request that sends a different hash
//! in the same header receives `409 Conflict`.

use std::collections::BTreeMap;
use std::sync::Arc;
use std::time::Duration;

use axum::body::{Body, Bytes};
use axum::extract::{Query, Request, State};
use axum::http::{header, HeaderMap, HeaderValue, StatusCode};
use axum::middleware::{self, Next};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::Engine;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use sliderspace_core::backend::DiffusionBackend;
use sliderspace_core::composer::{
    encode_png, generate, image_sheet, sparse_random_activation, GenerationRequest, SignPolicy, SliderLibrary,
    TimestepGate,
};
use sliderspace_core::manifest::SliderSpace;
use sliderspace_core::pca::variance_spectrum;
use sliderspace_core::Error;

use crate::queue::{GenerationQueue, QueueError};

pub const MANIFEST_HASH_HEADER: &str = "x-manifest-hash";
pub const REQUEST_ECHO_HEADER: &str = "x-request-echo";

#[derive(Debug, Clone)]
pub struct ServiceConfig {
    pub workers: usize,
    pub queue_depth: usize,
    pub deadline: Duration,
    /// Largest accepted `|scale|` for any activation.
    pub max_abs_scale: f64,
    /// Largest accepted number of cells in one grid request.
    pub max_grid_cells: usize,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self {
            workers: 1,
            queue_depth: 8,
            deadline: Duration::from_secs(30),
            max_abs_scale: 4.0,
            max_grid_cells: 64,
        }
    }
}

pub struct AppState {
    space: SliderSpace,
    library: Arc<SliderLibrary>,
    backend: Arc<dyn DiffusionBackend>,
    hash: String,
    queue: GenerationQueue,
    config: ServiceConfig,
}

impl AppState {
    pub fn new(space: SliderSpace, backend: Arc<dyn DiffusionBackend>, config: ServiceConfig) -> Self {
        Self {
            library: Arc::new(space.library()),
            hash: space.manifest.hash(),
            queue: GenerationQueue::new(config.workers, config.queue_depth, config.deadline),
            space,
            backend,
            config,
        }
    }

    pub fn manifest_hash(&self) -> &str {
        &self.hash
    }

    pub fn queue(&self) -> &GenerationQueue {
        &self.queue
    }
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/manifest", get(manifest))
        .route("/sliders", get(sliders))
        .route("/spectrum", get(spectrum))
        .route("/generate", post(generate_image))
        .route("/grid", post(grid))
        .route("/random", post(random))
        .layer(middleware::from_fn_with_state(state.clone(), manifest_guard))
        .with_state(state)
}

/// Rejects stale clients and stamps the manifest hash on every response.
async fn manifest_guard(State(state): State<Arc<AppState>>, req: Request, next: Next) -> Response {
    let stale = req
        .headers()
        .get(MANIFEST_HASH_HEADER)
        .map(|h| h.as_bytes() != state.hash.as_bytes())
        .unwrap_or(false);
    let mut response = if stale {
        ApiError::new(
            StatusCode::CONFLICT,
            "manifest hash does not match the served slider space; reload the manifest",
        )
        .with_hash(&state.hash)
        .into_response()
    } else {
        next.run(req).await
    };
    if let Ok(v) = HeaderValue::from_str(&state.hash) {
        response.headers_mut().insert(MANIFEST_HASH_HEADER, v);
    }
    response
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ApiError {
    #[serde(skip)]
    pub status: StatusCode,
    pub error: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub field: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub manifest_hash: Option<String>,
}

impl ApiError {
    pub fn new(status: StatusCode, error: impl Into<String>) -> Self {
        Self {
            status,
            error: error.into(),
            field: None,
            manifest_hash: None,
        }
    }

    fn field(mut self, path: impl Into<String>) -> Self {
        self.field = Some(path.into());
        self
    }

    fn with_hash(mut self, hash: &str) -> Self {
        self.manifest_hash = Some(hash.to_string());
        self
    }
}

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        let status = match &e {
            Error::NotFound(_) => StatusCode::NOT_FOUND,
            Error::Validation(_) | Error::Config(_) | Error::Parse(_) | Error::Contract(_) | Error::Capability(_) => {
                StatusCode::BAD_REQUEST
            }
            Error::Timeout(_) => StatusCode::SERVICE_UNAVAILABLE,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        ApiError::new(status, e.to_string())
    }
}

impl From<QueueError> for ApiError {
    fn from(e: QueueError) -> Self {
        let status = match e {
            QueueError::Busy(_) => StatusCode::TOO_MANY_REQUESTS,
            QueueError::DeadlineExceeded(_) => StatusCode::SERVICE_UNAVAILABLE,
            QueueError::Worker(_) => StatusCode::INTERNAL_SERVER_ERROR,
        };
        ApiError::new(status, e.to_string())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(&self)).into_response()
    }
}

type ApiResult<T> = std::result::Result<T, ApiError>;

fn parse_body<T: serde::de::DeserializeOwned>(bytes: &Bytes) -> ApiResult<T> {
    serde_json::from_slice(bytes).map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, format!("invalid request body: {e}")))
}

#[derive(Debug, Default, Deserialize)]
pub struct FormatQuery {
    /// `base64` returns a JSON document with the image inlined.
    pub format: Option<String>,
}

fn wants_json(query: &FormatQuery, headers: &HeaderMap) -> ApiResult<bool> {
    match query.format.as_deref() {
        Some("base64") | Some("json") => return Ok(true),
        Some("png") => return Ok(false),
        Some(other) => {
            return Err(ApiError::new(StatusCode::BAD_REQUEST, format!("unknown format '{other}'")).field("format"))
        }
        None => {}
    }
    let accept = headers.get(header::ACCEPT).and_then(|v| v.to_str().ok()).unwrap_or("");
    Ok(accept.contains("application/json") && !accept.contains("image/png"))
}

/// Compact JSON with every non-ASCII character escaped, safe for a header value.
fn ascii_json<T: Serialize>(value: &T) -> String {
    let text = serde_json::to_string(value).expect("value serializes");
    let mut out = String::with_capacity(text.len());
    for c in text.chars() {
        if c.is_ascii() {
            out.push(c);
        } else {
            let mut buf = [0u16; 2];
            for unit in c.encode_utf16(&mut buf) {
                out.push_str(&format!("\\u{unit:04x}"));
            }
        }
    }
    out
}

fn check_activations(state: &AppState, activations: &BTreeMap<String, f64>, path: &str) -> ApiResult<()> {
    for (id, scale) in activations {
        if state.library.get(id).is_err() {
            return Err(ApiError::new(StatusCode::NOT_FOUND, format!("unknown slider '{id}'")).field(format!("{path}.{id}")));
        }
        if !scale.is_finite() || scale.abs() > state.config.max_abs_scale {
            return Err(ApiError::new(
                StatusCode::BAD_REQUEST,
                format!("scale {scale} for '{id}' is outside [-{m}, {m}]", m = state.config.max_abs_scale),
            )
            .field(format!("{path}.{id}")));
        }
    }
    Ok(())
}

async fn manifest(State(state): State<Arc<AppState>>) -> Json<serde_json::Value> {
    Json(json!({
        "manifest_hash": state.hash,
        "manifest": state.space.manifest,
    }))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SliderInfo {
    pub id: String,
    pub label: Option<String>,
    pub label_source: Option<String>,
    pub pc_index: usize,
    pub variance_share: f64,
}

async fn sliders(State(state): State<Arc<AppState>>) -> Json<serde_json::Value> {
    let mut entries: Vec<SliderInfo> = state
        .space
        .manifest
        .sliders
        .iter()
        .map(|s| SliderInfo {
            id: s.adapter_id.clone(),
            label: s.label.clone(),
            label_source: s.label_source.clone(),
            pc_index: s.pc_index,
            variance_share: s.explained_variance_share,
        })
        .collect();
    entries.sort_by_key(|s| s.pc_index);
    Json(json!({ "manifest_hash": state.hash, "sliders": entries }))
}

async fn spectrum(State(state): State<Arc<AppState>>) -> Json<serde_json::Value> {
    Json(json!({
        "manifest_hash": state.hash,
        "encoder_id": state.space.manifest.encoder_id(),
        "spectrum": variance_spectrum(&state.space.directions),
    }))
}

fn image_response(
    state: &AppState,
    png: Vec<u8>,
    echo: serde_json::Value,
    as_json: bool,
) -> ApiResult<Response> {
    if as_json {
        let body = json!({
            "manifest_hash": state.hash,
            "request": echo,
            "content_type": "image/png",
            "image_base64": base64::engine::general_purpose::STANDARD.encode(&png),
        });
        return Ok(Json(body).into_response());
    }
    let mut response = Response::new(Body::from(png));
    let headers = response.headers_mut();
    headers.insert(header::CONTENT_TYPE, HeaderValue::from_static("image/png"));
    let echo = HeaderValue::from_str(&ascii_json(&echo))
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))?;
    headers.insert(REQUEST_ECHO_HEADER, echo);
    Ok(response)
}

async fn generate_image(
    State(state): State<Arc<AppState>>,
    Query(query): Query<FormatQuery>,
    headers: HeaderMap,
    body: Bytes,
) -> ApiResult<Response> {
    let as_json = wants_json(&query, &headers)?;
    let req: GenerationRequest = parse_body(&body)?;
    check_activations(&state, &req.activations, "activations")?;
    let library = state.library.clone();
    let backend = state.backend.clone();
    let job_req = req.clone();
    let image = state
        .queue
        .run(move || generate(&job_req, &library, backend.as_ref()))
        .await??;
    let png = image.png()?;
    let echo = json!({ "request": req, "timesteps": image.metadata.timesteps, "gate": image.metadata.gate, "transfer": image.metadata.transfer });
    image_response(&state, png, echo, as_json)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridRequest {
    pub prompt: String,
    pub seeds: Vec<u64>,
    /// One sheet row per activation map.
    pub activations: Vec<BTreeMap<String, f64>>,
    #[serde(default)]
    pub gate: Option<TimestepGate>,
    #[serde(default)]
    pub num_steps: Option<usize>,
}

async fn grid(
    State(state): State<Arc<AppState>>,
    Query(query): Query<FormatQuery>,
    headers: HeaderMap,
    body: Bytes,
) -> ApiResult<Response> {
    let as_json = wants_json(&query, &headers)?;
    let req: GridRequest = parse_body(&body)?;
    if req.seeds.is_empty() || req.activations.is_empty() {
        return Err(ApiError::new(StatusCode::BAD_REQUEST, "grid needs at least one seed and one activation map"));
    }
    let cells = req.seeds.len() * req.activations.len();
    if cells > state.config.max_grid_cells {
        return Err(ApiError::new(
            StatusCode::BAD_REQUEST,
            format!("grid of {cells} cells exceeds the limit of {}", state.config.max_grid_cells),
        ));
    }
    for (row, acts) in req.activations.iter().enumerate() {
        check_activations(&state, acts, &format!("activations[{row}]"))?;
    }
    let library = state.library.clone();
    let backend = state.backend.clone();
    let job_req = req.clone();
    let sheet = state
        .queue
        .run(move || -> sliderspace_core::Result<Vec<u8>> {
            let mut images = Vec::with_capacity(cells);
            let mut shape = [0usize; 3];
            for acts in &job_req.activations {
                for seed in &job_req.seeds {
                    let g = GenerationRequest {
                        prompt: job_req.prompt.clone(),
                        seed: *seed,
                        activations: acts.clone(),
                        gate: job_req.gate,
                        num_steps: job_req.num_steps,
                    };
                    let img = generate(&g, &library, backend.as_ref())?;
                    shape = img.latent.shape();
                    images.push(img.rgb);
                }
            }
            let refs: Vec<&[f32]> = images.iter().map(|v| v.as_slice()).collect();
            let (rgb, sheet_shape) = image_sheet(&refs, shape, job_req.seeds.len())?;
            encode_png(&rgb, sheet_shape)
        })
        .await??;
    let echo = json!({ "request": req, "rows": req.activations.len(), "cols": req.seeds.len() });
    image_response(&state, sheet, echo, as_json)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RandomRequest {
    pub k: usize,
    #[serde(default = "unit_magnitude")]
    pub magnitude: f64,
    #[serde(default)]
    pub signs: SignPolicy,
    /// Fixed seed for reproducible draws; omitted means a fresh draw.
    #[serde(default)]
    pub seed: Option<u64>,
}

fn unit_magnitude() -> f64 {
    1.0
}

async fn random(State(state): State<Arc<AppState>>, body: Bytes) -> ApiResult<Json<serde_json::Value>> {
    let req: RandomRequest = parse_body(&body)?;
    if !req.magnitude.is_finite() || req.magnitude.abs() > state.config.max_abs_scale {
        return Err(ApiError::new(StatusCode::BAD_REQUEST, "magnitude outside the accepted scale range").field("magnitude"));
    }
    let ids = state.library.ids();
    let mut rng = match req.seed {
        Some(seed) => ChaCha8Rng::seed_from_u64(seed),
        None => ChaCha8Rng::from_os_rng(),
    };
    let activations = sparse_random_activation(&ids, req.k, req.magnitude, req.signs, &mut rng)
        .map_err(|e| ApiError::from(e).field("k"))?;
    Ok(Json(json!({
        "manifest_hash": state.hash,
        "request": req,
        "activations": activations,
    })))
}
