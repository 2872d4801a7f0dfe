//! HTTP API.
//!
//! | method | path                | body                                   |
//! |--------|---------------------|----------------------------------------|
//! | POST   | `/v1/batches`       | NDJSON events, returns `BatchResult`   |
//! | GET    | `/v1/batches/{id}`  | retained `BatchResult`                 |
//! | GET    | `/v1/alerts`        | `?batch_id=`, latest batch by default  |
//! | POST   | `/v1/annotations`   | `{batch_id, event_id, annotator, note?}` |
//! | GET    | `/v1/config`        | current `AdjustmentConfig`             |
//! | PUT    | `/v1/config`        | whole `AdjustmentConfig`               |
//! | POST   | `/v1/preview`       | `{theta, d?, score, config?}`          |
//! | POST   | `/v1/diagnostics`   | NDJSON `{embedding, label}` lines      |
//!
//! Errors are JSON objects `{"error": "..."}`. When a token is configured
//! every route requires `Authorization: Bearer <token>`.

use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{DefaultBodyLimit, Path, Query, Request, State};
use axum::http::{header, HeaderValue, StatusCode};
use axum::middleware::{self, Next};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::Router;
use raad_core::diagnostics::DiagnosticsReport;
use raad_core::{
    adjust_event, AdjustError, AdjustmentConfig, AnnotationId, FpStore, MatchResult, Pipeline, PipelineError,
    StoreError,
};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::commands;
use crate::config::{AdjustmentOverrides, ServiceConfig};

#[derive(Clone)]
pub struct AppState {
    pipeline: Arc<Pipeline>,
    token: Option<Arc<str>>,
    anchors: Option<usize>,
}

impl AppState {
    pub fn new(pipeline: Arc<Pipeline>, token: Option<String>, anchors: Option<usize>) -> Self {
        Self {
            pipeline,
            token: token.map(Arc::from),
            anchors,
        }
    }

    /// Opens the configured store (or an in-memory one) and builds the pipeline.
    pub fn from_config(cfg: &ServiceConfig) -> Result<Self, Box<dyn std::error::Error + Send + Sync>> {
        let store = match &cfg.store {
            Some(path) => FpStore::open(path)?,
            None => FpStore::in_memory(),
        };
        let pipeline = Pipeline::with_retention(Arc::new(store), cfg.adjustment, cfg.retention)?;
        Ok(Self::new(Arc::new(pipeline), cfg.token.clone(), cfg.anchors))
    }

    pub fn pipeline(&self) -> &Arc<Pipeline> {
        &self.pipeline
    }
}

pub fn router(state: AppState, body_limit: usize) -> Router {
    Router::new()
        .route("/v1/batches", post(post_batch))
        .route("/v1/batches/{id}", get(get_batch))
        .route("/v1/alerts", get(get_alerts))
        .route("/v1/annotations", post(post_annotation))
        .route("/v1/config", get(get_config).put(put_config))
        .route("/v1/preview", post(post_preview))
        .route("/v1/diagnostics", post(post_diagnostics))
        .layer(middleware::from_fn_with_state(state.clone(), require_token))
        .layer(DefaultBodyLimit::max(body_limit))
        .with_state(state)
}

/// Serves until Ctrl-C.
pub async fn serve(cfg: &ServiceConfig) -> std::io::Result<()> {
    let state = AppState::from_config(cfg).map_err(std::io::Error::other)?;
    if cfg.store.is_none() {
        tracing::warn!("no store path configured; annotations will not survive a restart");
    }
    if cfg.token.is_none() {
        tracing::warn!("no bearer token configured; the API is unauthenticated");
    }
    let app = router(state, cfg.body_limit);
    let listener = tokio::net::TcpListener::bind(cfg.listen).await?;
    tracing::info!(addr = %listener.local_addr()?, "listening");
    axum::serve(listener, app)
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
            tracing::info!("shutting down");
        })
        .await
}

pub struct ApiError {
    status: StatusCode,
    message: String,
}

impl ApiError {
    fn new(status: StatusCode, message: impl Into<String>) -> Self {
        Self {
            status,
            message: message.into(),
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        #[derive(Serialize)]
        struct Body {
            error: String,
        }
        let mut resp = json_response(self.status, &Body { error: self.message });
        if self.status == StatusCode::UNAUTHORIZED {
            resp.headers_mut()
                .insert(header::WWW_AUTHENTICATE, HeaderValue::from_static("Bearer"));
        }
        resp
    }
}

impl From<StoreError> for ApiError {
    fn from(e: StoreError) -> Self {
        let status = match e {
            StoreError::DimensionMismatch { .. } | StoreError::BatchDimensionMismatch { .. } => {
                StatusCode::UNPROCESSABLE_ENTITY
            }
            StoreError::StorageFailure(_) | StoreError::CorruptSnapshot(_) | StoreError::UnsupportedVersion(_) => {
                StatusCode::SERVICE_UNAVAILABLE
            }
        };
        ApiError::new(status, e.to_string())
    }
}

impl From<PipelineError> for ApiError {
    fn from(e: PipelineError) -> Self {
        match e {
            PipelineError::UnknownEvent { .. } => ApiError::new(StatusCode::NOT_FOUND, e.to_string()),
            PipelineError::Store(e) => e.into(),
            PipelineError::Adjust(e) => e.into(),
        }
    }
}

impl From<AdjustError> for ApiError {
    fn from(e: AdjustError) -> Self {
        ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, e.to_string())
    }
}

type ApiResult = Result<Response, ApiError>;

fn json_response<T: Serialize>(status: StatusCode, value: &T) -> Response {
    let body = serde_json::to_vec(value).expect("response serialization cannot fail");
    (status, [(header::CONTENT_TYPE, "application/json")], body).into_response()
}

/// Syntax errors are 400; well-formed JSON with bad values is 422.
fn parse_json<T: DeserializeOwned>(body: &[u8]) -> Result<T, ApiError> {
    serde_json::from_slice(body).map_err(|e| {
        let status = match e.classify() {
            serde_json::error::Category::Data => StatusCode::UNPROCESSABLE_ENTITY,
            _ => StatusCode::BAD_REQUEST,
        };
        ApiError::new(status, e.to_string())
    })
}

fn utf8_body(body: Bytes) -> Result<String, ApiError> {
    String::from_utf8(Vec::from(body)).map_err(|_| ApiError::new(StatusCode::BAD_REQUEST, "body is not valid UTF-8"))
}

async fn blocking<T: Send + 'static>(f: impl FnOnce() -> T + Send + 'static) -> Result<T, ApiError> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError::new(StatusCode::SERVICE_UNAVAILABLE, format!("worker failed: {e}")))
}

fn constant_time_eq(a: &[u8], b: &[u8]) -> bool {
    a.len() == b.len() && a.iter().zip(b).fold(0u8, |acc, (x, y)| acc | (x ^ y)) == 0
}

async fn require_token(State(state): State<AppState>, request: Request, next: Next) -> Response {
    if let Some(token) = &state.token {
        let presented = request
            .headers()
            .get(header::AUTHORIZATION)
            .and_then(|v| v.to_str().ok())
            .and_then(|v| v.strip_prefix("Bearer "));
        let ok = presented.is_some_and(|p| constant_time_eq(p.as_bytes(), token.as_bytes()));
        if !ok {
            return ApiError::new(StatusCode::UNAUTHORIZED, "missing or invalid bearer token").into_response();
        }
    }
    next.run(request).await
}

async fn post_batch(State(state): State<AppState>, body: Bytes) -> ApiResult {
    let text = utf8_body(body)?;
    let pipeline = Arc::clone(&state.pipeline);
    let batch = blocking(move || pipeline.process_ndjson(&text)).await?;
    tracing::info!(
        batch_id = batch.result.batch_id,
        events = batch.result.outcomes.len(),
        alerts = batch.result.alerts.len(),
        rejects = batch.result.rejects.len(),
        "batch processed"
    );
    Ok(json_response(StatusCode::OK, &batch.result))
}

async fn get_batch(State(state): State<AppState>, Path(id): Path<u64>) -> ApiResult {
    let batch = state
        .pipeline
        .batch(id)
        .ok_or_else(|| ApiError::new(StatusCode::NOT_FOUND, format!("batch {id} is not retained")))?;
    Ok(json_response(StatusCode::OK, &batch.result))
}

#[derive(Deserialize)]
struct AlertsQuery {
    batch_id: Option<u64>,
}

async fn get_alerts(State(state): State<AppState>, Query(q): Query<AlertsQuery>) -> ApiResult {
    match q.batch_id {
        Some(id) => get_batch(State(state), Path(id)).await,
        None => {
            let batch = state
                .pipeline
                .latest_batch()
                .ok_or_else(|| ApiError::new(StatusCode::NOT_FOUND, "no batches processed yet"))?;
            Ok(json_response(StatusCode::OK, &batch.result))
        }
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct AnnotationRequest {
    batch_id: u64,
    event_id: String,
    annotator: String,
    #[serde(default)]
    note: Option<String>,
}

#[derive(Serialize)]
struct AnnotationCreated {
    annotation_id: AnnotationId,
}

async fn post_annotation(State(state): State<AppState>, body: Bytes) -> ApiResult {
    let req: AnnotationRequest = parse_json(&body)?;
    let pipeline = Arc::clone(&state.pipeline);
    let id = blocking(move || pipeline.annotate_from_outcome(req.batch_id, &req.event_id, &req.annotator, req.note))
        .await??;
    tracing::info!(annotation_id = %id, "annotation stored");
    Ok(json_response(
        StatusCode::CREATED,
        &AnnotationCreated { annotation_id: id },
    ))
}

async fn get_config(State(state): State<AppState>) -> ApiResult {
    Ok(json_response(StatusCode::OK, &state.pipeline.config()))
}

async fn put_config(State(state): State<AppState>, body: Bytes) -> ApiResult {
    let cfg: AdjustmentConfig = parse_json(&body)?;
    state.pipeline.set_config(cfg)?;
    tracing::info!(?cfg, "config updated");
    Ok(json_response(StatusCode::OK, &cfg))
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct PreviewRequest {
    theta: f64,
    #[serde(default)]
    d: Option<f64>,
    score: f64,
    #[serde(default, alias = "config_override")]
    config: AdjustmentOverrides,
}

async fn post_preview(State(state): State<AppState>, body: Bytes) -> ApiResult {
    let req: PreviewRequest = parse_json(&body)?;
    let cfg = req
        .config
        .apply(state.pipeline.config())
        .map_err(|e| ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, e))?;
    let matched = MatchResult {
        theta_closest: req.theta,
        d_closest: req.d.unwrap_or(0.0),
        annotation_id: AnnotationId(0),
    };
    let mut outcome = adjust_event(req.score, Some(&matched), &cfg)?;
    outcome.annotation_id = None;
    Ok(json_response(StatusCode::OK, &outcome))
}

#[derive(Deserialize)]
struct DiagnosticsQuery {
    #[serde(default)]
    seed: u64,
}

async fn post_diagnostics(State(state): State<AppState>, Query(q): Query<DiagnosticsQuery>, body: Bytes) -> ApiResult {
    let text = utf8_body(body)?;
    let anchors = state.anchors;
    let report = blocking(move || diagnose_lines(&text, anchors, q.seed)).await??;
    Ok(json_response(StatusCode::OK, &report))
}

fn diagnose_lines(text: &str, anchors: Option<usize>, seed: u64) -> Result<DiagnosticsReport, ApiError> {
    let invalid = |e: String| ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, e);
    let data = commands::parse_labeled(text).map_err(invalid)?;
    commands::separability(&data, anchors, seed).map_err(invalid)
}
