//! The `/v1` HTTP API.
//!
//! Handlers parse and validate, then make one pipeline or engine call on
//! the blocking pool (remote backends use blocking I/O). Every mutation is
//! followed by a save when a corpus path is configured.

use std::path::PathBuf;
use std::sync::{Arc, Mutex, RwLock};

use axum::body::{Body, Bytes};
use axum::extract::rejection::QueryRejection;
use axum::extract::{Path, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, patch, post};
use axum::{Json, Router};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::json;
use tokio::sync::{mpsc, Semaphore};
use tower_http::cors::CorsLayer;

use rit_core::engine::EntryPatch;
use rit_core::metrics::{evaluate_detailed, EVAL_REPORT_COLUMNS};
use rit_core::simulate::{load_dataset, LabeledExample};
use rit_core::{Error, Pipeline, Polarity, PromptTemplate, RetrievalConfig};

use crate::config::BackendMode;
use crate::views::{CorpusPage, EntryView, EvalResponse, FeedbackResponse, QueryResponse, Settings, SettingsPatch};

pub const DEFAULT_PAGE_LIMIT: usize = 50;
pub const MAX_PAGE_LIMIT: usize = 1000;

/// JSON error body: `{"error": kind, "detail": message}`.
#[derive(Debug, Clone, PartialEq)]
pub struct ApiError {
    pub status: StatusCode,
    pub error: &'static str,
    pub detail: String,
}

impl ApiError {
    pub fn new(status: StatusCode, error: &'static str, detail: impl Into<String>) -> Self {
        Self {
            status,
            error,
            detail: detail.into(),
        }
    }

    pub fn bad_request(detail: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, "invalid_request", detail)
    }

    fn body(&self) -> serde_json::Value {
        json!({"error": self.error, "detail": self.detail})
    }
}

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        let (status, kind) = match &e {
            Error::EmptyText => (StatusCode::UNPROCESSABLE_ENTITY, "empty_text"),
            Error::Parse { .. } => (StatusCode::UNPROCESSABLE_ENTITY, "malformed_rows"),
            Error::NotFound(_) => (StatusCode::NOT_FOUND, "not_found"),
            Error::InvalidConfig(_) | Error::InvalidInput(_) => (StatusCode::BAD_REQUEST, "invalid_request"),
            Error::BackendUnavailable(_) => (StatusCode::BAD_GATEWAY, "backend_unavailable"),
            Error::BackendProtocol(_) | Error::PromptParse(_) | Error::DimMismatch { .. } => {
                (StatusCode::BAD_GATEWAY, "backend_error")
            }
            Error::InvalidDim(_) | Error::NoContext | Error::Io { .. } => {
                (StatusCode::INTERNAL_SERVER_ERROR, "internal")
            }
        };
        Self::new(status, kind, e.to_string())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(self.body())).into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;

pub struct AppState {
    pipeline: Pipeline,
    settings: RwLock<Settings>,
    corpus_path: Option<PathBuf>,
    backend: BackendMode,
    save_lock: Mutex<()>,
    eval_slot: Arc<Semaphore>,
}

impl AppState {
    pub fn new(pipeline: Pipeline, settings: Settings, corpus_path: Option<PathBuf>, backend: BackendMode) -> Self {
        Self {
            pipeline,
            settings: RwLock::new(settings),
            corpus_path,
            backend,
            save_lock: Mutex::new(()),
            eval_slot: Arc::new(Semaphore::new(1)),
        }
    }

    pub fn pipeline(&self) -> &Pipeline {
        &self.pipeline
    }

    pub fn settings(&self) -> Settings {
        *self.settings.read().unwrap_or_else(|p| p.into_inner())
    }

    /// Writes the corpus file, if any. Saves are serialized.
    fn persist(&self) -> Result<(), Error> {
        if let Some(path) = &self.corpus_path {
            let _guard = self.save_lock.lock().unwrap_or_else(|p| p.into_inner());
            self.pipeline.engine().save_corpus(path)?;
        }
        Ok(())
    }
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/v1/query", post(query))
        .route("/v1/feedback", post(feedback))
        .route("/v1/corpus", get(list_corpus))
        .route("/v1/corpus/{id}", patch(patch_entry).delete(delete_entry))
        .route("/v1/evaluate", post(evaluate))
        .route("/v1/config", get(get_config).patch(patch_config))
        .route("/v1/health", get(health))
        .fallback(|| async { ApiError::new(StatusCode::NOT_FOUND, "not_found", "no such route") })
        .layer(CorsLayer::permissive())
        .with_state(state)
}

/// Serves until ctrl-c.
pub async fn serve(listener: tokio::net::TcpListener, state: Arc<AppState>) -> std::io::Result<()> {
    axum::serve(listener, router(state))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}

fn parse_body<T: DeserializeOwned>(body: &Bytes) -> ApiResult<T> {
    serde_json::from_slice(body).map_err(|e| ApiError::bad_request(format!("invalid body: {e}")))
}

async fn blocking<T: Send + 'static>(f: impl FnOnce() -> Result<T, Error> + Send + 'static) -> ApiResult<T> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", e.to_string()))?
        .map_err(ApiError::from)
}

/// Per-request retrieval overrides.
#[derive(Debug, Default, Deserialize)]
struct RetrievalOverrides {
    t: Option<f64>,
    c: Option<usize>,
    template: Option<PromptTemplate>,
}

impl RetrievalOverrides {
    fn apply(&self, base: RetrievalConfig) -> ApiResult<RetrievalConfig> {
        let cfg = RetrievalConfig {
            t: self.t.unwrap_or(base.t),
            c: self.c.unwrap_or(base.c),
            template: self.template.unwrap_or(base.template),
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Deserialize)]
struct QueryRequest {
    text: String,
    #[serde(flatten)]
    overrides: RetrievalOverrides,
}

async fn query(State(state): State<Arc<AppState>>, body: Bytes) -> ApiResult<Json<QueryResponse>> {
    let req: QueryRequest = parse_body(&body)?;
    let settings = state.settings();
    let retrieval = req.overrides.apply(settings.retrieval)?;
    if req.text.trim().is_empty() {
        return Err(Error::EmptyText.into());
    }
    let record = blocking({
        let state = Arc::clone(&state);
        move || state.pipeline.answer(&req.text, &retrieval, &settings.generation)
    })
    .await?;
    Ok(Json(QueryResponse::new(record, retrieval)))
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct FeedbackRequest {
    query: String,
    answer: String,
    polarity: Polarity,
}

async fn feedback(State(state): State<Arc<AppState>>, body: Bytes) -> ApiResult<Json<FeedbackResponse>> {
    let req: FeedbackRequest = parse_body(&body)?;
    let up = blocking(move || {
        let up = state.pipeline.apply_feedback(&req.query, &req.answer, req.polarity)?;
        state.persist()?;
        Ok(up)
    })
    .await?;
    Ok(Json(up.into()))
}

#[derive(Debug, Deserialize)]
struct ListParams {
    offset: Option<usize>,
    limit: Option<usize>,
    search: Option<String>,
}

async fn list_corpus(
    State(state): State<Arc<AppState>>,
    params: Result<Query<ListParams>, QueryRejection>,
) -> ApiResult<Json<CorpusPage>> {
    let Query(params) = params.map_err(|e| ApiError::bad_request(format!("bad pagination: {}", e.body_text())))?;
    let offset = params.offset.unwrap_or(0);
    let limit = params.limit.unwrap_or(DEFAULT_PAGE_LIMIT);
    if limit == 0 || limit > MAX_PAGE_LIMIT {
        return Err(ApiError::bad_request(format!("limit must be in 1..={MAX_PAGE_LIMIT}")));
    }
    let search = params.search.as_deref().filter(|s| !s.is_empty());
    let (items, total) = state.pipeline.engine().list(offset, limit, search);
    Ok(Json(CorpusPage {
        items: items.iter().map(EntryView::from).collect(),
        total,
        offset,
        limit,
    }))
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct PatchRequest {
    query: Option<String>,
    answer: Option<String>,
    polarity: Option<Polarity>,
}

async fn patch_entry(
    State(state): State<Arc<AppState>>,
    Path(id): Path<String>,
    body: Bytes,
) -> ApiResult<Json<EntryView>> {
    let req: PatchRequest = parse_body(&body)?;
    let patch = EntryPatch {
        query_text: req.query,
        answer_text: req.answer,
        polarity: req.polarity,
    };
    let entry = blocking(move || {
        let entry = state.pipeline.engine().update_entry(&id, &patch)?;
        state.persist()?;
        Ok(entry)
    })
    .await?;
    Ok(Json(EntryView::from(&entry)))
}

async fn delete_entry(State(state): State<Arc<AppState>>, Path(id): Path<String>) -> ApiResult<Json<serde_json::Value>> {
    blocking(move || {
        if !state.pipeline.engine().remove_entry(&id) {
            return Err(Error::NotFound(format!("entry {id}")));
        }
        state.persist()?;
        Ok(json!({ "deleted": id }))
    })
    .await
    .map(Json)
}

#[derive(Debug, Deserialize)]
struct EvaluateRequest {
    dataset_path: Option<PathBuf>,
    examples: Option<Vec<serde_json::Value>>,
    #[serde(flatten)]
    overrides: RetrievalOverrides,
}

#[derive(Debug, Default, Deserialize)]
struct EvaluateParams {
    #[serde(default)]
    stream: bool,
}

/// Validates inline rows one by one so the bad row can be named.
fn inline_rows(raw: Vec<serde_json::Value>) -> Result<Vec<LabeledExample>, ApiError> {
    raw.into_iter()
        .enumerate()
        .map(|(i, v)| {
            let malformed = |detail: String| {
                ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, "malformed_rows", format!("row {i}: {detail}"))
            };
            let row: LabeledExample = serde_json::from_value(v).map_err(|e| malformed(e.to_string()))?;
            if row.query.trim().is_empty() || row.gold_answer.trim().is_empty() {
                return Err(malformed("empty query or answer".into()));
            }
            Ok(row)
        })
        .collect()
}

#[derive(Serialize)]
struct Progress {
    done: usize,
    total: usize,
}

fn run_evaluation(
    pipeline: &Pipeline,
    rows: &[LabeledExample],
    settings: &Settings,
    retrieval: &RetrievalConfig,
    mut on_progress: impl FnMut(usize),
) -> Result<EvalResponse, Error> {
    let mut records = Vec::with_capacity(rows.len());
    for (i, row) in rows.iter().enumerate() {
        records.push(pipeline.answer(&row.query, retrieval, &settings.generation)?);
        on_progress(i + 1);
    }
    let engine = pipeline.engine();
    let (report, diagnostics) = evaluate_detailed(&records, rows, engine.embedder().as_ref(), engine.len())?;
    Ok(EvalResponse { report, diagnostics })
}

async fn evaluate(
    State(state): State<Arc<AppState>>,
    params: Result<Query<EvaluateParams>, QueryRejection>,
    body: Bytes,
) -> ApiResult<Response> {
    let Query(params) = params.map_err(|e| ApiError::bad_request(e.body_text()))?;
    let req: EvaluateRequest = parse_body(&body)?;
    let settings = state.settings();
    let retrieval = req.overrides.apply(settings.retrieval)?;
    let rows = match (req.dataset_path, req.examples) {
        (Some(path), None) => blocking(move || load_dataset(path)).await?,
        (None, Some(raw)) => inline_rows(raw)?,
        _ => return Err(ApiError::bad_request("give exactly one of dataset_path or examples")),
    };
    if rows.is_empty() {
        return Err(ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, "malformed_rows", "dataset is empty"));
    }
    let permit = Arc::clone(&state.eval_slot)
        .try_acquire_owned()
        .map_err(|_| ApiError::new(StatusCode::CONFLICT, "busy", "an evaluation is already running"))?;

    if !params.stream {
        let response = blocking(move || {
            let _permit = permit;
            run_evaluation(&state.pipeline, &rows, &settings, &retrieval, |_| {})
        })
        .await?;
        return Ok(Json(response).into_response());
    }

    // NDJSON: progress lines, then one final report or error line.
    let (tx, rx) = mpsc::channel::<String>(64);
    tokio::task::spawn_blocking(move || {
        let _permit = permit;
        let total = rows.len();
        let step = (total / 20).max(1);
        let line = |v: serde_json::Value| format!("{v}\n");
        let result = run_evaluation(&state.pipeline, &rows, &settings, &retrieval, |done| {
            if done % step == 0 || done == total {
                let _ = tx.blocking_send(line(json!({ "progress": Progress { done, total } })));
            }
        });
        let last = match result {
            Ok(r) => line(json!({ "report": r.report, "diagnostics": r.diagnostics })),
            Err(e) => line(ApiError::from(e).body()),
        };
        let _ = tx.blocking_send(last);
    });
    let stream = futures_util::stream::unfold(rx, |mut rx| async move {
        rx.recv().await.map(|chunk| (Ok::<_, std::convert::Infallible>(chunk), rx))
    });
    Ok(([(header::CONTENT_TYPE, "application/x-ndjson")], Body::from_stream(stream)).into_response())
}

#[derive(Serialize)]
struct ConfigView {
    retrieval: RetrievalConfig,
    generation: rit_core::GenerationConfig,
    backend: BackendMode,
    corpus_path: Option<PathBuf>,
    report_columns: [&'static str; 9],
}

fn config_view(state: &AppState) -> ConfigView {
    let settings = state.settings();
    ConfigView {
        retrieval: settings.retrieval,
        generation: settings.generation,
        backend: state.backend,
        corpus_path: state.corpus_path.clone(),
        report_columns: EVAL_REPORT_COLUMNS,
    }
}

async fn get_config(State(state): State<Arc<AppState>>) -> Json<ConfigView> {
    Json(config_view(&state))
}

async fn patch_config(State(state): State<Arc<AppState>>, body: Bytes) -> ApiResult<Json<ConfigView>> {
    let patch: SettingsPatch = parse_body(&body)?;
    {
        let mut settings = state.settings.write().unwrap_or_else(|p| p.into_inner());
        *settings = patch.apply(*settings)?;
    }
    Ok(Json(config_view(&state)))
}

async fn health(State(state): State<Arc<AppState>>) -> Json<serde_json::Value> {
    let stats = state.pipeline.engine().stats();
    Json(json!({
        "status": "ok",
        "backend": state.backend,
        "entries": stats.count,
        "dim": stats.dim,
    }))
}
