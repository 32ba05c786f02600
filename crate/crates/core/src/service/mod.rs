//! HTTP interface over cached runs.
//!
//! | method | path                              | body                       |
//! |--------|-----------------------------------|----------------------------|
//! | GET    | `/models`                         | model names                |
//! | GET    | `/dataset`                        | preloaded prompts          |
//! | POST   | `/runs` `{model?, text}`          | [`RunDocument`]            |
//! | GET    | `/runs/{id}`                      | [`RunDocument`]            |
//! | GET    | `/runs/{id}/graph`                | graph document             |
//! | GET    | `/runs/{id}/heads`                | head importances           |
//! | GET    | `/runs/{id}/attention_map`        | `T×T` attention weights    |
//! | GET    | `/runs/{id}/contribution_map`     | `T×T` contributions        |
//! | GET    | `/runs/{id}/neurons`              | top contributing neurons   |
//! | GET    | `/runs/{id}/lens`                 | logit lens table           |
//! | GET    | `/runs/{id}/projection`           | promoted / suppressed      |
//! | GET    | `/stats`                          | forward passes per model   |
//!
//! Errors are `{"error": "..."}` with 400 (bad query), 404 (unknown run or
//! model), 410 (run evicted from the cache), 413 (text too long).

pub mod cache;
pub mod config;

use std::collections::HashMap;
use std::net::SocketAddr;
use std::sync::{Arc, Mutex};
use std::time::SystemTime;

use axum::extract::{FromRequest, FromRequestParts, Path, Query, State};
use axum::http::request::Parts;
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use tokio::sync::OnceCell;

pub use cache::{Lookup, RunCache, RunEntry};
pub use config::ServiceConfig;

use crate::error::Error;
use crate::lens::Component;
use crate::payload::{to_json_bytes, Analysis, RunDocument, Targets};
use crate::registry::{load_named_model, LoadedModel};
use crate::transformer::{run_text, Point};

pub const TOP_PREDICTIONS: usize = 10;
const DEFAULT_K: usize = 10;

#[derive(Debug)]
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

    pub fn status(&self) -> StatusCode {
        self.status
    }
}

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        let status = match &e {
            Error::Index(_)
            | Error::InvalidThreshold(_)
            | Error::EmptyTargets
            | Error::EmptyInput
            | Error::UnknownTokenId(_)
            | Error::ContextOverflow { .. } => StatusCode::BAD_REQUEST,
            Error::ModelNotFound(_) => StatusCode::NOT_FOUND,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        Self::new(status, e.to_string())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(serde_json::json!({ "error": self.message }))).into_response()
    }
}

type ApiResult = Result<Response, ApiError>;

/// `Query` whose rejection renders as an [`ApiError`].
struct ApiQuery<T>(T);

#[axum::async_trait]
impl<T, S> FromRequestParts<S> for ApiQuery<T>
where
    T: serde::de::DeserializeOwned,
    S: Send + Sync,
{
    type Rejection = ApiError;

    async fn from_request_parts(parts: &mut Parts, state: &S) -> Result<Self, Self::Rejection> {
        Query::<T>::from_request_parts(parts, state)
            .await
            .map(|Query(q)| ApiQuery(q))
            .map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, e.body_text()))
    }
}

/// `Json` whose rejection renders as an [`ApiError`].
struct ApiJson<T>(T);

#[axum::async_trait]
impl<T, S> FromRequest<S> for ApiJson<T>
where
    T: serde::de::DeserializeOwned,
    S: Send + Sync,
{
    type Rejection = ApiError;

    async fn from_request(req: axum::extract::Request, state: &S) -> Result<Self, Self::Rejection> {
        Json::<T>::from_request(req, state)
            .await
            .map(|Json(v)| ApiJson(v))
            .map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, e.body_text()))
    }
}

fn json_body<T: Serialize>(doc: &T) -> Response {
    ([(header::CONTENT_TYPE, "application/json")], to_json_bytes(doc)).into_response()
}

/// Shared server state: configuration, lazily loaded models and the run cache.
pub struct AppState {
    config: ServiceConfig,
    models: Mutex<HashMap<String, Arc<OnceCell<Arc<LoadedModel>>>>>,
    cache: Mutex<RunCache>,
}

impl AppState {
    pub fn new(config: ServiceConfig) -> Self {
        let cache = RunCache::new(config.cache_capacity);
        Self {
            config,
            models: Mutex::new(HashMap::new()),
            cache: Mutex::new(cache),
        }
    }

    pub fn config(&self) -> &ServiceConfig {
        &self.config
    }

    async fn model(&self, name: &str) -> Result<Arc<LoadedModel>, ApiError> {
        let reference = self
            .config
            .model_reference(name)
            .ok_or_else(|| ApiError::new(StatusCode::NOT_FOUND, format!("unknown model `{name}`")))?
            .to_string();
        let cell = self
            .models
            .lock()
            .expect("model table lock")
            .entry(name.to_string())
            .or_default()
            .clone();
        let base = self.config.base_dir.clone();
        let name = name.to_string();
        cell.get_or_try_init(|| async move {
            tokio::task::spawn_blocking(move || load_named_model(&name, &reference, Some(&base)))
                .await
                .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))?
                .map(Arc::new)
                .map_err(ApiError::from)
        })
        .await
        .cloned()
    }

    /// Forward passes executed so far, per loaded model.
    pub fn forward_passes(&self) -> Vec<(String, u64)> {
        let models = self.models.lock().expect("model table lock");
        let mut out: Vec<_> = models
            .iter()
            .filter_map(|(n, cell)| cell.get().map(|m| (n.clone(), m.params.forward_pass_count())))
            .collect();
        out.sort();
        out
    }

    /// Runs (or reuses) the analysis of `text` under `model`.
    pub async fn create_run(&self, model: &str, text: &str) -> Result<Arc<RunEntry>, ApiError> {
        let length = text.chars().count();
        if length > self.config.max_user_string_length {
            return Err(ApiError::new(
                StatusCode::PAYLOAD_TOO_LARGE,
                format!(
                    "text has {length} characters, the limit is {}",
                    self.config.max_user_string_length
                ),
            ));
        }
        let loaded = self.model(model).await?;
        let key = (model.to_string(), text.to_string());
        let slot = self.cache.lock().expect("cache lock").slot(key.clone());
        let run_id = slot.run_id.clone();
        let result = slot
            .cell
            .get_or_try_init(|| {
                let loaded = loaded.clone();
                let text = text.to_string();
                let run_id = run_id.clone();
                async move {
                    tokio::task::spawn_blocking(move || {
                        let capture = run_text(&loaded.params, &loaded.vocab, &text)?;
                        Ok::<_, Error>(Arc::new(RunEntry {
                            run_id,
                            model: loaded,
                            text,
                            capture,
                            created: SystemTime::now(),
                        }))
                    })
                    .await
                    .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))?
                    .map_err(ApiError::from)
                }
            })
            .await
            .cloned();
        if result.is_err() {
            self.cache.lock().expect("cache lock").discard(&key, &run_id);
        }
        result
    }

    pub fn run(&self, run_id: &str) -> Result<Arc<RunEntry>, ApiError> {
        match self.cache.lock().expect("cache lock").lookup(run_id) {
            Lookup::Ready(entry) => Ok(entry),
            Lookup::Evicted => Err(ApiError::new(
                StatusCode::GONE,
                format!("run `{run_id}` was evicted from the cache"),
            )),
            Lookup::Unknown => Err(ApiError::new(StatusCode::NOT_FOUND, format!("unknown run `{run_id}`"))),
        }
    }
}

pub fn run_document(entry: &RunEntry) -> RunDocument {
    let analysis = Analysis::new(&entry.model.params, Some(&entry.model.vocab), &entry.capture);
    RunDocument {
        run_id: entry.run_id.clone(),
        model: entry.model.name.clone(),
        tokens: entry.capture.token_strings().to_vec(),
        token_ids: entry.capture.tokens().to_vec(),
        top_predictions: analysis.top_predictions(TOP_PREDICTIONS),
    }
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/models", get(list_models))
        .route("/dataset", get(list_dataset))
        .route("/stats", get(stats))
        .route("/runs", post(create_run))
        .route("/runs/:id", get(get_run))
        .route("/runs/:id/graph", get(graph))
        .route("/runs/:id/heads", get(heads))
        .route("/runs/:id/attention_map", get(attention_map))
        .route("/runs/:id/contribution_map", get(contribution_map))
        .route("/runs/:id/neurons", get(neurons))
        .route("/runs/:id/lens", get(lens))
        .route("/runs/:id/projection", get(projection))
        .with_state(state)
}

/// Binds `addr` and serves until the process is interrupted.
pub async fn serve(config: ServiceConfig, addr: SocketAddr) -> std::io::Result<()> {
    let state = Arc::new(AppState::new(config));
    let listener = tokio::net::TcpListener::bind(addr).await?;
    tracing::info!("listening on {}", listener.local_addr()?);
    axum::serve(listener, router(state))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}

// ---------------------------------------------------------------------------
// Handlers
// ---------------------------------------------------------------------------

async fn list_models(State(state): State<Arc<AppState>>) -> Response {
    let names: Vec<&str> = state.config.models.iter().map(|(n, _)| n.as_str()).collect();
    json_body(&names)
}

async fn list_dataset(State(state): State<Arc<AppState>>) -> Response {
    json_body(&state.config.dataset)
}

async fn stats(State(state): State<Arc<AppState>>) -> Response {
    let passes: serde_json::Map<String, serde_json::Value> =
        state.forward_passes().into_iter().map(|(n, c)| (n, c.into())).collect();
    json_body(&serde_json::json!({ "forward_passes": passes }))
}

#[derive(Deserialize)]
struct CreateRun {
    model: Option<String>,
    text: String,
}

async fn create_run(State(state): State<Arc<AppState>>, ApiJson(req): ApiJson<CreateRun>) -> ApiResult {
    let model = req.model.unwrap_or_else(|| state.config.default_model.clone());
    let entry = state.create_run(&model, &req.text).await?;
    Ok(json_body(&run_document(&entry)))
}

async fn get_run(State(state): State<Arc<AppState>>, Path(id): Path<String>) -> ApiResult {
    let entry = state.run(&id)?;
    Ok(json_body(&run_document(&entry)))
}

/// Runs an analysis closure on the blocking pool and serializes its result.
async fn analyse<T, F>(state: &AppState, id: &str, f: F) -> ApiResult
where
    T: Serialize + Send + 'static,
    F: FnOnce(Analysis<'_>) -> crate::Result<T> + Send + 'static,
{
    let entry = state.run(id)?;
    let doc = tokio::task::spawn_blocking(move || {
        f(Analysis::new(
            &entry.model.params,
            Some(&entry.model.vocab),
            &entry.capture,
        ))
    })
    .await
    .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))??;
    Ok(json_body(&doc))
}

#[derive(Deserialize)]
struct GraphQuery {
    threshold: Option<f64>,
    targets: Option<String>,
}

async fn graph(
    State(state): State<Arc<AppState>>,
    Path(id): Path<String>,
    ApiQuery(q): ApiQuery<GraphQuery>,
) -> ApiResult {
    let threshold = q.threshold.unwrap_or(state.config.default_threshold);
    let targets: Targets = q.targets.as_deref().unwrap_or("last").parse()?;
    analyse(&state, &id, move |a| a.graph(threshold, &targets)).await
}

#[derive(Deserialize)]
struct StepQuery {
    layer: usize,
    position: usize,
    k: Option<usize>,
}

async fn heads(
    State(state): State<Arc<AppState>>,
    Path(id): Path<String>,
    ApiQuery(q): ApiQuery<StepQuery>,
) -> ApiResult {
    analyse(&state, &id, move |a| a.heads(q.layer, q.position)).await
}

async fn neurons(
    State(state): State<Arc<AppState>>,
    Path(id): Path<String>,
    ApiQuery(q): ApiQuery<StepQuery>,
) -> ApiResult {
    let k = q.k.unwrap_or(DEFAULT_K);
    analyse(&state, &id, move |a| a.neurons(q.layer, q.position, k)).await
}

#[derive(Deserialize)]
struct MapQuery {
    layer: usize,
    head: usize,
}

async fn attention_map(
    State(state): State<Arc<AppState>>,
    Path(id): Path<String>,
    ApiQuery(q): ApiQuery<MapQuery>,
) -> ApiResult {
    analyse(&state, &id, move |a| a.attention_map(q.layer, q.head)).await
}

async fn contribution_map(
    State(state): State<Arc<AppState>>,
    Path(id): Path<String>,
    ApiQuery(q): ApiQuery<MapQuery>,
) -> ApiResult {
    analyse(&state, &id, move |a| a.contribution_map(q.layer, q.head)).await
}

#[derive(Deserialize)]
struct LensQuery {
    layer: usize,
    point: Option<String>,
    position: usize,
    k: Option<usize>,
    apply_ln: Option<bool>,
}

async fn lens(
    State(state): State<Arc<AppState>>,
    Path(id): Path<String>,
    ApiQuery(q): ApiQuery<LensQuery>,
) -> ApiResult {
    let point: Point = q.point.as_deref().unwrap_or("post").parse()?;
    let k = q.k.unwrap_or(DEFAULT_K);
    let apply_ln = q.apply_ln.unwrap_or(true);
    analyse(&state, &id, move |a| a.lens(q.layer, point, q.position, k, apply_ln)).await
}

#[derive(Deserialize)]
struct ProjectionQuery {
    component: String,
    k: Option<usize>,
}

async fn projection(
    State(state): State<Arc<AppState>>,
    Path(id): Path<String>,
    ApiQuery(q): ApiQuery<ProjectionQuery>,
) -> ApiResult {
    let component: Component = q.component.parse()?;
    let k = q.k.unwrap_or(DEFAULT_K);
    analyse(&state, &id, move |a| a.projection(component, k)).await
}
