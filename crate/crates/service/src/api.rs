//! HTTP routes for projects, generation, editing and export.

use std::collections::HashMap;
use std::sync::{Arc, Mutex};

use axum::body::{Body, Bytes};
use axum::extract::{FromRequest, Path, Request, State};
use axum::http::{header, HeaderMap, HeaderValue, Method, StatusCode};
use axum::middleware::{self, Next};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post, put};
use axum::{Json, Router};
use protoflow::assembler::{export_project_json, AssemblyError};
use protoflow::kb::LayoutError;
use protoflow::orchestrator::{OrchestratorError, ThemeDescription, ThemeError};
use protoflow::{DesignInput, GenerationTrace, Prototype};
use serde::{Deserialize, Serialize};

use crate::engine::Engine;
use crate::store::{Project, ProjectStore, StoreError};

pub const IDEMPOTENCY_KEY: &str = "idempotency-key";

/// Largest response body kept for idempotent replay.
const MAX_REPLAY_BYTES: usize = 64 << 20;

pub struct AppState {
    pub engine: Arc<Engine>,
    pub store: Arc<ProjectStore>,
    replays: Mutex<HashMap<String, Arc<tokio::sync::Mutex<Option<Replay>>>>>,
}

#[derive(Clone)]
struct Replay {
    status: StatusCode,
    content_type: Option<HeaderValue>,
    etag: Option<HeaderValue>,
    body: Bytes,
}

impl AppState {
    pub fn new(engine: Arc<Engine>, store: Arc<ProjectStore>) -> Arc<Self> {
        Arc::new(AppState {
            engine,
            store,
            replays: Mutex::new(HashMap::new()),
        })
    }
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/api/projects", post(create_project))
        .route("/api/projects/{id}", get(get_project).put(put_project))
        .route("/api/projects/{id}/generate", post(generate))
        .route("/api/projects/{id}/theme", put(update_theme))
        .route("/api/projects/{id}/components/{index}", put(update_component))
        .route("/api/projects/{id}/export.svg", get(export_svg))
        .route("/api/projects/{id}/export.json", get(export_json))
        .route("/api/projects/{id}/trace", get(get_trace))
        .layer(middleware::from_fn_with_state(state.clone(), idempotency))
        .with_state(state)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub error: ErrorDetail,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorDetail {
    pub code: String,
    pub message: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub stage: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub path: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub component: Option<usize>,
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    detail: ErrorDetail,
}

impl ApiError {
    fn new(status: StatusCode, code: &str, message: impl Into<String>) -> Self {
        ApiError {
            status,
            detail: ErrorDetail {
                code: code.into(),
                message: message.into(),
                stage: None,
                path: None,
                component: None,
            },
        }
    }

    fn stage(mut self, stage: impl Into<String>) -> Self {
        self.detail.stage = Some(stage.into());
        self
    }

    fn path(mut self, path: impl Into<String>) -> Self {
        self.detail.path = Some(path.into());
        self
    }

    fn component(mut self, index: Option<usize>) -> Self {
        self.detail.component = index;
        self
    }

    fn internal(message: impl Into<String>) -> Self {
        ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", message)
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        if self.status.is_server_error() {
            log::error!("{}: {}", self.detail.code, self.detail.message);
        }
        (self.status, Json(ErrorBody { error: self.detail })).into_response()
    }
}

impl From<StoreError> for ApiError {
    fn from(e: StoreError) -> Self {
        match e {
            StoreError::NotFound(_) => ApiError::new(StatusCode::NOT_FOUND, "not_found", e.to_string()),
            StoreError::Stale { .. } => {
                ApiError::new(StatusCode::CONFLICT, "stale_revision", e.to_string())
            }
            StoreError::Corrupt { .. } | StoreError::Io { .. } => ApiError::internal(e.to_string()),
        }
    }
}

impl From<LayoutError> for ApiError {
    fn from(e: LayoutError) -> Self {
        ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, "invalid_input", e.message.clone())
            .path(e.path)
            .component(e.component)
    }
}

impl From<ThemeError> for ApiError {
    fn from(e: ThemeError) -> Self {
        let path = match &e {
            ThemeError::BadColor { field, .. } => format!("theme.{field}"),
            ThemeError::PlanMismatch { .. } => "theme.component_plan".to_string(),
            ThemeError::Parse(_) => "theme".to_string(),
        };
        ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, "invalid_theme", e.to_string()).path(path)
    }
}

impl From<OrchestratorError> for ApiError {
    fn from(e: OrchestratorError) -> Self {
        let stage = e.stage();
        match e {
            OrchestratorError::InvalidInput(l) => ApiError::from(l).stage(stage),
            OrchestratorError::InvalidTheme(t) => ApiError::from(t).stage(stage),
            OrchestratorError::InvalidIndex { index, .. } => {
                ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, "invalid_index", e.to_string())
                    .path("index")
                    .component(Some(index))
                    .stage(stage)
            }
            OrchestratorError::Step { index, .. } => {
                ApiError::new(StatusCode::BAD_GATEWAY, "generation_failed", e.to_string())
                    .component(Some(index))
                    .stage(stage)
            }
            _ => ApiError::new(StatusCode::BAD_GATEWAY, "generation_failed", e.to_string())
                .stage(stage),
        }
    }
}

impl From<AssemblyError> for ApiError {
    fn from(e: AssemblyError) -> Self {
        ApiError::internal(format!("assembly: {e}"))
    }
}

/// JSON body whose rejections use the service error format.
pub struct JsonBody<T>(pub T);

impl<S, T> FromRequest<S> for JsonBody<T>
where
    Json<T>: FromRequest<S, Rejection = axum::extract::rejection::JsonRejection>,
    S: Send + Sync,
{
    type Rejection = ApiError;

    async fn from_request(req: Request, state: &S) -> Result<Self, Self::Rejection> {
        match Json::<T>::from_request(req, state).await {
            Ok(Json(v)) => Ok(JsonBody(v)),
            Err(rejection) => Err(ApiError::new(
                rejection.status(),
                "bad_request",
                rejection.body_text(),
            )),
        }
    }
}

/// The revision named by an `If-Match` header, quoted or bare.
fn expected_revision(headers: &HeaderMap) -> Result<Option<u64>, ApiError> {
    let Some(value) = headers.get(header::IF_MATCH) else {
        return Ok(None);
    };
    let text = value
        .to_str()
        .ok()
        .map(|s| s.trim().trim_start_matches("W/").trim_matches('"'));
    match text.and_then(|s| s.parse::<u64>().ok()) {
        Some(rev) => Ok(Some(rev)),
        None => Err(ApiError::new(
            StatusCode::BAD_REQUEST,
            "bad_request",
            "If-Match must be a project revision number",
        )
        .path("If-Match")),
    }
}

fn with_etag(status: StatusCode, project: &Project) -> Response {
    let mut response = (status, Json(project)).into_response();
    response.headers_mut().insert(
        header::ETAG,
        HeaderValue::from_str(&format!("\"{}\"", project.revision)).expect("ascii"),
    );
    response
}

fn require_trace(project: &Project) -> Result<&GenerationTrace, ApiError> {
    project.trace.as_ref().ok_or_else(|| {
        ApiError::new(
            StatusCode::CONFLICT,
            "not_generated",
            format!("project `{}` has not been generated yet", project.id),
        )
    })
}

async fn blocking<T: Send + 'static>(
    f: impl FnOnce() -> Result<T, ApiError> + Send + 'static,
) -> Result<T, ApiError> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError::internal(format!("worker failed: {e}")))?
}

async fn create_project(
    State(state): State<Arc<AppState>>,
    JsonBody(input): JsonBody<DesignInput>,
) -> Result<Response, ApiError> {
    input.validate()?;
    let store = state.store.clone();
    let project = blocking(move || Ok(store.create(input)?)).await?;
    log::info!("created project {}", project.id);
    Ok(with_etag(StatusCode::CREATED, &project))
}

async fn get_project(
    State(state): State<Arc<AppState>>,
    Path(id): Path<String>,
) -> Result<Response, ApiError> {
    Ok(with_etag(StatusCode::OK, &state.store.get(&id)?))
}

/// Replaces the design input. The old trace no longer matches and is dropped.
async fn put_project(
    State(state): State<Arc<AppState>>,
    Path(id): Path<String>,
    headers: HeaderMap,
    JsonBody(input): JsonBody<DesignInput>,
) -> Result<Response, ApiError> {
    let expected = expected_revision(&headers)?;
    state.store.get(&id)?;
    input.validate()?;
    let lock = state.store.lock_for(&id);
    let _guard = lock.lock().await;
    let store = state.store.clone();
    let project = blocking(move || {
        Ok(store.update(&id, expected, |p| {
            p.input = input;
            p.trace = None;
        })?)
    })
    .await?;
    Ok(with_etag(StatusCode::OK, &project))
}

async fn generate(
    State(state): State<Arc<AppState>>,
    Path(id): Path<String>,
    headers: HeaderMap,
) -> Result<Response, ApiError> {
    let expected = expected_revision(&headers)?;
    state.store.get(&id)?;
    let lock = state.store.lock_for(&id);
    let Ok(_guard) = lock.try_lock() else {
        return Err(ApiError::new(
            StatusCode::CONFLICT,
            "busy",
            format!("project `{id}` is already being generated"),
        ));
    };
    let project = state.store.get(&id)?;
    ProjectStore::check_revision(&project, expected)?;
    let (engine, store) = (state.engine.clone(), state.store.clone());
    let updated = blocking(move || {
        let trace = engine.pipeline().generate_prototype(&project.input)?;
        Ok(store.update(&project.id, Some(project.revision), |p| {
            p.trace = Some(trace)
        })?)
    })
    .await?;
    log::info!("generated project {} at revision {}", updated.id, updated.revision);
    Ok(with_etag(StatusCode::OK, &updated))
}

async fn update_theme(
    State(state): State<Arc<AppState>>,
    Path(id): Path<String>,
    headers: HeaderMap,
    JsonBody(theme): JsonBody<ThemeDescription>,
) -> Result<Response, ApiError> {
    let expected = expected_revision(&headers)?;
    state.store.get(&id)?;
    let lock = state.store.lock_for(&id);
    let _guard = lock.lock().await;
    let project = state.store.get(&id)?;
    ProjectStore::check_revision(&project, expected)?;
    require_trace(&project)?;
    theme.validate(project.input.layout.components.len())?;
    let (engine, store) = (state.engine.clone(), state.store.clone());
    let updated = blocking(move || {
        let trace = project.trace.as_ref().expect("checked above");
        let next = engine
            .pipeline()
            .regenerate_all(trace, &project.input, &theme)?;
        Ok(store.update(&project.id, Some(project.revision), |p| {
            p.trace = Some(next)
        })?)
    })
    .await?;
    Ok(with_etag(StatusCode::OK, &updated))
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ComponentEdit {
    #[serde(default)]
    pub hint: Option<String>,
}

async fn update_component(
    State(state): State<Arc<AppState>>,
    Path((id, index)): Path<(String, usize)>,
    headers: HeaderMap,
    JsonBody(edit): JsonBody<ComponentEdit>,
) -> Result<Response, ApiError> {
    let expected = expected_revision(&headers)?;
    state.store.get(&id)?;
    let lock = state.store.lock_for(&id);
    let _guard = lock.lock().await;
    let project = state.store.get(&id)?;
    ProjectStore::check_revision(&project, expected)?;
    require_trace(&project)?;
    let (engine, store) = (state.engine.clone(), state.store.clone());
    let updated = blocking(move || {
        let trace = project.trace.as_ref().expect("checked above");
        let next = engine.pipeline().regenerate_component(
            trace,
            &project.input,
            index,
            edit.hint.as_deref(),
        )?;
        Ok(store.update(&project.id, Some(project.revision), |p| {
            p.trace = Some(next)
        })?)
    })
    .await?;
    Ok(with_etag(StatusCode::OK, &updated))
}

fn prototype(project: &Project) -> Result<Prototype, ApiError> {
    let trace = require_trace(project)?;
    Ok(Prototype::from_trace(&project.input, trace)?)
}

async fn export_svg(
    State(state): State<Arc<AppState>>,
    Path(id): Path<String>,
) -> Result<Response, ApiError> {
    let project = state.store.get(&id)?;
    let svg = prototype(&project)?.svg;
    Ok(([(header::CONTENT_TYPE, "image/svg+xml")], svg).into_response())
}

async fn export_json(
    State(state): State<Arc<AppState>>,
    Path(id): Path<String>,
) -> Result<Response, ApiError> {
    let project = state.store.get(&id)?;
    let json = export_project_json(&prototype(&project)?)?;
    Ok(([(header::CONTENT_TYPE, "application/json")], json).into_response())
}

async fn get_trace(
    State(state): State<Arc<AppState>>,
    Path(id): Path<String>,
) -> Result<Response, ApiError> {
    let project = state.store.get(&id)?;
    Ok(Json(require_trace(&project)?).into_response())
}

/// Replays the first successful response for a repeated idempotency key.
/// Requests sharing a key wait for each other, so a retry that races the
/// original sees its result instead of running twice.
async fn idempotency(State(state): State<Arc<AppState>>, req: Request, next: Next) -> Response {
    let key = match req.headers().get(IDEMPOTENCY_KEY) {
        Some(key) if req.method() != Method::GET && req.method() != Method::HEAD => key,
        _ => return next.run(req).await,
    };
    let Ok(key) = key.to_str() else {
        return ApiError::new(StatusCode::BAD_REQUEST, "bad_request", "unreadable Idempotency-Key")
            .into_response();
    };
    let slot_key = format!("{} {} {}", req.method(), req.uri().path(), key);
    let slot = state
        .replays
        .lock()
        .unwrap()
        .entry(slot_key)
        .or_default()
        .clone();
    let mut slot = slot.lock().await;
    if let Some(replay) = slot.as_ref() {
        return replay_response(replay);
    }
    let response = next.run(req).await;
    if !response.status().is_success() {
        return response;
    }
    let (parts, body) = response.into_parts();
    let body = match axum::body::to_bytes(body, MAX_REPLAY_BYTES).await {
        Ok(body) => body,
        Err(e) => return ApiError::internal(format!("buffering response: {e}")).into_response(),
    };
    let replay = Replay {
        status: parts.status,
        content_type: parts.headers.get(header::CONTENT_TYPE).cloned(),
        etag: parts.headers.get(header::ETAG).cloned(),
        body: body.clone(),
    };
    *slot = Some(replay);
    Response::from_parts(parts, Body::from(body))
}

fn replay_response(replay: &Replay) -> Response {
    let mut response = Response::new(Body::from(replay.body.clone()));
    *response.status_mut() = replay.status;
    let headers = response.headers_mut();
    if let Some(ct) = &replay.content_type {
        headers.insert(header::CONTENT_TYPE, ct.clone());
    }
    if let Some(etag) = &replay.etag {
        headers.insert(header::ETAG, etag.clone());
    }
    headers.insert("idempotent-replay", HeaderValue::from_static("true"));
    response
}
