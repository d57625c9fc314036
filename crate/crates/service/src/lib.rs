//! HTTP/JSON front end over a shared [`Registry`].
//!
//! Routes:
//!
//! | method | path | |
//! |---|---|---|
//! | `POST` | `/models` | register a model with its sketch |
//! | `GET` | `/models` | list records |
//! | `GET` | `/models/{id}` | one record |
//! | `DELETE` | `/models/{id}` | remove a model |
//! | `GET` | `/jobs/{id}` | status of a deferred registration |
//! | `POST` | `/search` | ranked models for a query sketch |
//! | `GET` | `/healthz` | liveness |
//!
//! Searches run the same pipeline as the command line (`SearchResponse::run`).

use std::collections::BTreeMap;
use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex, RwLock};

use axum::body::Bytes;
use axum::extract::{Path, State};
use axum::http::{header, HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use fitsearch_core::registry::RegistrationReceipt;
use fitsearch_core::{DatasetSketch, Error, ModelRecord, Registry, SearchConfig, SearchResponse};
use serde::{Deserialize, Serialize};
use serde_json::json;

/// Registrations of sketches with more partitions than this are deferred.
pub const DEFAULT_ASYNC_PARTITIONS: usize = 256;

#[derive(Clone, Debug)]
pub struct ServiceConfig {
    /// Saved after every mutation when set.
    pub registry_path: Option<PathBuf>,
    pub async_partitions: usize,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        ServiceConfig { registry_path: None, async_partitions: DEFAULT_ASYNC_PARTITIONS }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum JobState {
    Pending,
    Done { receipt: RegistrationReceipt },
    Failed { error: ApiError },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ApiError {
    pub code: String,
    pub message: String,
}

#[derive(Clone)]
pub struct AppState {
    registry: Arc<RwLock<Registry>>,
    config: Arc<ServiceConfig>,
    jobs: Arc<Mutex<BTreeMap<u64, JobState>>>,
    next_job: Arc<AtomicU64>,
}

impl AppState {
    pub fn new(registry: Registry, config: ServiceConfig) -> Self {
        AppState {
            registry: Arc::new(RwLock::new(registry)),
            config: Arc::new(config),
            jobs: Arc::default(),
            next_job: Arc::new(AtomicU64::new(1)),
        }
    }

    pub fn registry(&self) -> Arc<RwLock<Registry>> {
        self.registry.clone()
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegisterRequest {
    pub model_id: String,
    #[serde(default)]
    pub display_name: Option<String>,
    #[serde(default)]
    pub task_tag: String,
    #[serde(default)]
    pub source_accuracy: Option<f64>,
    #[serde(default)]
    pub notes: String,
    pub sketch: DatasetSketch,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SearchRequest {
    pub sketch: DatasetSketch,
    #[serde(default)]
    pub config: SearchConfig,
}

struct Failure(StatusCode, ApiError);

impl Failure {
    fn new(status: StatusCode, code: &str, message: impl Into<String>) -> Self {
        Failure(status, ApiError { code: code.into(), message: message.into() })
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let (status, code) = match &e {
            Error::Conflict(_) => (StatusCode::CONFLICT, "conflict"),
            Error::NotFound(_) => (StatusCode::NOT_FOUND, "not_found"),
            Error::Io(_) | Error::Corruption(_) | Error::Format(_) => (StatusCode::INTERNAL_SERVER_ERROR, "storage"),
            Error::Params(_) => (StatusCode::UNPROCESSABLE_ENTITY, "params"),
            _ => (StatusCode::UNPROCESSABLE_ENTITY, "invalid"),
        };
        Failure::new(status, code, e.to_string())
    }
}

impl IntoResponse for Failure {
    fn into_response(self) -> Response {
        (self.0, Json(json!({ "error": self.1 }))).into_response()
    }
}

type Reply = Result<Response, Failure>;

fn parse_json<T: serde::de::DeserializeOwned>(headers: &HeaderMap, body: &Bytes) -> Result<T, Failure> {
    if let Some(ct) = headers.get(header::CONTENT_TYPE) {
        let ct = ct.to_str().unwrap_or_default();
        if !ct.starts_with("application/json") {
            return Err(Failure::new(
                StatusCode::UNSUPPORTED_MEDIA_TYPE,
                "media_type",
                format!("expected application/json, got `{ct}`"),
            ));
        }
    }
    serde_json::from_slice(body).map_err(|e| Failure::new(StatusCode::UNPROCESSABLE_ENTITY, "invalid", e.to_string()))
}

fn read(state: &AppState) -> std::sync::RwLockReadGuard<'_, Registry> {
    state.registry.read().unwrap_or_else(|p| p.into_inner())
}

async fn blocking<T: Send + 'static>(f: impl FnOnce() -> T + Send + 'static) -> Result<T, Failure> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| Failure::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", e.to_string()))
}

/// Validate, register and persist under one write lock so readers never see
/// a half-applied registration.
fn register_now(state: &AppState, record: ModelRecord, sketch: DatasetSketch) -> Result<RegistrationReceipt, Failure> {
    let mut reg = state.registry.write().unwrap_or_else(|p| p.into_inner());
    let id = record.model_id.clone();
    let receipt = reg.register(record, sketch)?;
    if let Some(path) = &state.config.registry_path {
        if let Err(e) = reg.save(path) {
            let _ = reg.remove(&id);
            return Err(e.into());
        }
    }
    tracing::info!(model_id = %id, version = receipt.manifest_version, "registered");
    Ok(receipt)
}

async fn register(State(state): State<AppState>, headers: HeaderMap, body: Bytes) -> Reply {
    let req: RegisterRequest = parse_json(&headers, &body)?;
    let mut record = ModelRecord::new(req.model_id, req.sketch.dataset_id.clone());
    if let Some(name) = req.display_name {
        record.display_name = name;
    }
    record.task_tag = req.task_tag;
    record.source_accuracy = req.source_accuracy;
    record.notes = req.notes;
    record.validate()?;
    req.sketch.validate()?;
    {
        let reg = read(&state);
        reg.params().check_sketch(&req.sketch)?;
        if reg.get(&record.model_id).is_some() {
            return Err(Error::Conflict(format!("model `{}` already registered", record.model_id)).into());
        }
    }

    if req.sketch.num_partitions() > state.config.async_partitions {
        let job = state.next_job.fetch_add(1, Ordering::Relaxed);
        state.jobs.lock().unwrap_or_else(|p| p.into_inner()).insert(job, JobState::Pending);
        let st = state.clone();
        tokio::task::spawn_blocking(move || {
            let outcome = match register_now(&st, record, req.sketch) {
                Ok(receipt) => JobState::Done { receipt },
                Err(Failure(_, error)) => JobState::Failed { error },
            };
            st.jobs.lock().unwrap_or_else(|p| p.into_inner()).insert(job, outcome);
        });
        let poll = format!("/jobs/{job}");
        return Ok((StatusCode::ACCEPTED, [(header::LOCATION, poll.clone())], Json(json!({ "job_id": job, "poll": poll })))
            .into_response());
    }

    let st = state.clone();
    let receipt = blocking(move || register_now(&st, record, req.sketch)).await??;
    let version = receipt.manifest_version;
    Ok((StatusCode::CREATED, Json(json!({ "manifest_version": version, "receipt": receipt }))).into_response())
}

async fn job_status(State(state): State<AppState>, Path(job): Path<u64>) -> Reply {
    let jobs = state.jobs.lock().unwrap_or_else(|p| p.into_inner());
    match jobs.get(&job) {
        Some(s) => Ok(Json(s.clone()).into_response()),
        None => Err(Failure::new(StatusCode::NOT_FOUND, "not_found", format!("no job {job}"))),
    }
}

async fn list_models(State(state): State<AppState>) -> Reply {
    let reg = read(&state);
    Ok(Json(json!({ "manifest_version": reg.manifest_version(), "models": reg.records() })).into_response())
}

async fn get_model(State(state): State<AppState>, Path(id): Path<String>) -> Reply {
    let reg = read(&state);
    let m = reg.get(&id).ok_or_else(|| Error::NotFound(format!("model `{id}`")))?;
    Ok(Json(json!({
        "manifest_version": reg.manifest_version(),
        "record": m.record,
        "num_features": m.sketch.descriptors.len(),
        "num_partitions": m.sketch.num_partitions(),
    }))
    .into_response())
}

async fn delete_model(State(state): State<AppState>, Path(id): Path<String>) -> Reply {
    let st = state.clone();
    let receipt = blocking(move || -> Result<_, Failure> {
        let mut reg = st.registry.write().unwrap_or_else(|p| p.into_inner());
        let before = reg.clone();
        let receipt = reg.remove(&id)?;
        if let Some(path) = &st.config.registry_path {
            if let Err(e) = reg.save(path) {
                *reg = before;
                return Err(e.into());
            }
        }
        Ok(receipt)
    })
    .await??;
    Ok(Json(json!({ "manifest_version": receipt.manifest_version, "receipt": receipt })).into_response())
}

async fn search(State(state): State<AppState>, headers: HeaderMap, body: Bytes) -> Reply {
    let req: SearchRequest = parse_json(&headers, &body)?;
    let st = state.clone();
    let response = blocking(move || SearchResponse::run(&req.sketch, &read(&st), &req.config)).await??;
    Ok(Json(response).into_response())
}

async fn healthz(State(state): State<AppState>) -> Reply {
    Ok(Json(json!({ "status": "ok", "manifest_version": read(&state).manifest_version() })).into_response())
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/models", post(register).get(list_models))
        .route("/models/{id}", get(get_model).delete(delete_model))
        .route("/jobs/{id}", get(job_status))
        .route("/search", post(search))
        .route("/healthz", get(healthz))
        .with_state(state)
}

/// Serve until the process is stopped.
pub async fn serve(addr: SocketAddr, state: AppState) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    tracing::info!(addr = %listener.local_addr()?, "listening");
    axum::serve(listener, router(state)).await
}
