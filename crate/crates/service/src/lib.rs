//! HTTP/JSON service exposing the engine's operations.
//!
//! Scenario-level operations (`/v1/run`, `/v1/profile`, `/v1/derive`,
//! `/v1/report`) are stateless request/response: scenario, knowledge-base and
//! trace content travel as text, so artifacts stay byte-deterministic no
//! matter where the client writes them. The session API keeps a live engine
//! per scenario and feeds it execution requests first-come-first-served.

use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use axum::extract::{Path, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{delete, get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};

use hetsim_client::{
    ApiErrorBody, DeriveRequest, DeriveResponse, ProfileRequest, ProfileResponse, ReportRequest,
    ReportResponse, RunScenarioRequest, RunScenarioResponse,
};
use hetsim_core::engine::{Engine, EngineService};
use hetsim_core::scenario::{
    derive_scenario, profile_scenario, run_scenario, RunOptions, Scenario, ScenarioError,
};
use hetsim_core::trace::{self, TraceRecord};

pub struct AppState {
    /// One scenario executes at a time; concurrent calls queue here.
    run_lock: tokio::sync::Mutex<()>,
    sessions: Mutex<HashMap<u64, Arc<Session>>>,
    next_session: AtomicU64,
}

struct Session {
    scenario: Scenario,
    engine: EngineService,
    records: Mutex<Vec<TraceRecord>>,
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    body: ApiErrorBody,
}

impl ApiError {
    fn validation(message: impl Into<String>) -> Self {
        ApiError {
            status: StatusCode::BAD_REQUEST,
            body: ApiErrorBody { kind: "validation".into(), message: message.into() },
        }
    }

    fn runtime(message: impl Into<String>) -> Self {
        ApiError {
            status: StatusCode::INTERNAL_SERVER_ERROR,
            body: ApiErrorBody { kind: "runtime".into(), message: message.into() },
        }
    }

    fn not_found(message: impl Into<String>) -> Self {
        ApiError {
            status: StatusCode::NOT_FOUND,
            body: ApiErrorBody { kind: "validation".into(), message: message.into() },
        }
    }
}

impl From<ScenarioError> for ApiError {
    fn from(e: ScenarioError) -> Self {
        match &e {
            ScenarioError::Parse(_) | ScenarioError::Validation { .. } => {
                ApiError::validation(e.to_string())
            }
            _ => ApiError::runtime(e.to_string()),
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(self.body)).into_response()
    }
}

pub fn router() -> Router {
    let state = Arc::new(AppState {
        run_lock: tokio::sync::Mutex::new(()),
        sessions: Mutex::new(HashMap::new()),
        next_session: AtomicU64::new(1),
    });
    Router::new()
        .route("/v1/health", get(health))
        .route("/v1/run", post(run))
        .route("/v1/profile", post(profile))
        .route("/v1/derive", post(derive))
        .route("/v1/report", post(report))
        .route("/v1/sessions", post(create_session))
        .route("/v1/sessions/{id}/runs", post(session_run))
        .route("/v1/sessions/{id}/trace", get(session_trace))
        .route("/v1/sessions/{id}/kb", get(session_kb))
        .route("/v1/sessions/{id}", delete(close_session))
        .with_state(state)
}

/// Bind and serve until the task is cancelled.
pub async fn serve(listener: tokio::net::TcpListener) -> std::io::Result<()> {
    axum::serve(listener, router()).await
}

async fn health() -> Json<serde_json::Value> {
    Json(serde_json::json!({ "status": "ok" }))
}

async fn run(
    State(state): State<Arc<AppState>>,
    Json(req): Json<RunScenarioRequest>,
) -> Result<Json<RunScenarioResponse>, ApiError> {
    let _guard = state.run_lock.lock().await;
    let options =
        RunOptions { seed: req.seed, no_profiling: req.no_profiling, kb_text: req.kb.clone() };
    let artifacts = tokio::task::spawn_blocking(move || run_scenario(&req.scenario, &options))
        .await
        .map_err(|e| ApiError::runtime(e.to_string()))??;
    Ok(Json(RunScenarioResponse {
        trace: artifacts.trace,
        kb: artifacts.kb,
        series_csv: artifacts.series_csv,
        summary: artifacts.summary,
    }))
}

async fn profile(
    State(state): State<Arc<AppState>>,
    Json(req): Json<ProfileRequest>,
) -> Result<Json<ProfileResponse>, ApiError> {
    let _guard = state.run_lock.lock().await;
    let options = RunOptions { seed: req.seed, no_profiling: false, kb_text: req.kb.clone() };
    let artifacts = tokio::task::spawn_blocking(move || {
        profile_scenario(&req.scenario, &req.sct, &req.workload, &options)
    })
    .await
    .map_err(|e| ApiError::runtime(e.to_string()))??;
    Ok(Json(ProfileResponse {
        profile: artifacts.profile,
        kb: artifacts.kb,
        search: artifacts.search.steps,
    }))
}

async fn derive(Json(req): Json<DeriveRequest>) -> Result<Json<DeriveResponse>, ApiError> {
    let out = tokio::task::spawn_blocking(move || {
        derive_scenario(&req.scenario, &req.sct, &req.workload, &RunOptions {
            kb_text: req.kb.clone(),
            ..Default::default()
        })
    })
    .await
    .map_err(|e| ApiError::runtime(e.to_string()))??;
    let config = &out.derivation.config;
    Ok(Json(DeriveResponse {
        scope: out.derivation.scope.label().to_string(),
        split_cpu: config.split.cpu,
        split_gpu: config.split.gpu,
        fission: config.fission.label().to_string(),
        overlap: config.overlap,
        wgs: config.wgs.clone(),
        stored: out.stored,
    }))
}

async fn report(Json(req): Json<ReportRequest>) -> Result<Json<ReportResponse>, ApiError> {
    let records = trace::from_toml(&req.trace).map_err(|e| ApiError::validation(e.to_string()))?;
    Ok(Json(ReportResponse { summary: trace::summarize(&records) }))
}

// ── Session API ─────────────────────────────────────────────────────────────

#[derive(Debug, Deserialize)]
pub struct CreateSessionRequest {
    pub scenario: String,
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub no_profiling: bool,
    #[serde(default)]
    pub kb: Option<String>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct CreateSessionResponse {
    pub id: u64,
}

#[derive(Debug, Deserialize)]
pub struct SessionRunRequest {
    pub sct: String,
    pub workload: String,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct SessionRunResponse {
    pub record: TraceRecord,
}

async fn create_session(
    State(state): State<Arc<AppState>>,
    Json(req): Json<CreateSessionRequest>,
) -> Result<Json<CreateSessionResponse>, ApiError> {
    let session = tokio::task::spawn_blocking(move || -> Result<Session, ScenarioError> {
        let scenario = Scenario::parse(&req.scenario)?;
        let options =
            RunOptions { seed: req.seed, no_profiling: req.no_profiling, kb_text: req.kb.clone() };
        let engine: Engine = scenario.engine(&options)?;
        Ok(Session {
            scenario,
            engine: EngineService::spawn(engine),
            records: Mutex::new(Vec::new()),
        })
    })
    .await
    .map_err(|e| ApiError::runtime(e.to_string()))??;

    let id = state.next_session.fetch_add(1, Ordering::SeqCst);
    state.sessions.lock().unwrap().insert(id, Arc::new(session));
    Ok(Json(CreateSessionResponse { id }))
}

fn session_of(state: &AppState, id: u64) -> Result<Arc<Session>, ApiError> {
    state
        .sessions
        .lock()
        .unwrap()
        .get(&id)
        .cloned()
        .ok_or_else(|| ApiError::not_found(format!("no session {id}")))
}

async fn session_run(
    State(state): State<Arc<AppState>>,
    Path(id): Path<u64>,
    Json(req): Json<SessionRunRequest>,
) -> Result<Json<SessionRunResponse>, ApiError> {
    let session = session_of(&state, id)?;
    let record = tokio::task::spawn_blocking(move || -> Result<TraceRecord, ScenarioError> {
        let sct = session.scenario.sct(&req.sct)?.clone();
        let request = session.scenario.request_for(&req.sct, &req.workload)?;
        let outcome = session.engine.submit(sct, request).wait()?;
        let record = TraceRecord::from_outcome(&req.sct, &outcome);
        session.records.lock().unwrap().push(record.clone());
        Ok(record)
    })
    .await
    .map_err(|e| ApiError::runtime(e.to_string()))??;
    Ok(Json(SessionRunResponse { record }))
}

async fn session_trace(
    State(state): State<Arc<AppState>>,
    Path(id): Path<u64>,
) -> Result<Json<serde_json::Value>, ApiError> {
    let session = session_of(&state, id)?;
    let records = session.records.lock().unwrap().clone();
    Ok(Json(serde_json::json!({ "trace": trace::to_toml(&records) })))
}

async fn session_kb(
    State(state): State<Arc<AppState>>,
    Path(id): Path<u64>,
) -> Result<Json<serde_json::Value>, ApiError> {
    let session = session_of(&state, id)?;
    let kb = tokio::task::spawn_blocking(move || {
        session.engine.inspect(|engine| engine.kb.to_toml_string())
    })
    .await
    .map_err(|e| ApiError::runtime(e.to_string()))?;
    Ok(Json(serde_json::json!({ "kb": kb })))
}

async fn close_session(
    State(state): State<Arc<AppState>>,
    Path(id): Path<u64>,
) -> Result<StatusCode, ApiError> {
    let removed = state.sessions.lock().unwrap().remove(&id);
    match removed {
        Some(_) => Ok(StatusCode::NO_CONTENT),
        None => Err(ApiError::not_found(format!("no session {id}"))),
    }
}
