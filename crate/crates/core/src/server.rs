//! Telemetry and control HTTP service over the memory and control logs.

use std::collections::BTreeMap;
use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::Arc;
use std::time::{Duration, Instant};

use axum::extract::{Path as UrlPath, Query, State};
use axum::http::StatusCode;
use axum::response::{Html, IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use serde_json::json;
use tower_http::services::ServeDir;

use crate::analysis::{project_records, score_histogram};
use crate::control::{Command, ControlError, ControlLog};
use crate::domain::ScoreRecord;
use crate::memory::{MemoryError, MemoryStore};

pub const PAGE_SIZE: usize = 500;
pub const DEFAULT_LONG_POLL: Duration = Duration::from_secs(25);
pub const DEFAULT_BIND: &str = "127.0.0.1:8080";
const POLL_STEP: Duration = Duration::from_millis(50);

#[derive(Clone)]
pub struct AppState {
    pub memory: Arc<MemoryStore>,
    pub control: Arc<ControlLog>,
    pub long_poll: Duration,
}

pub struct ServeConfig {
    pub memory: PathBuf,
    pub control: PathBuf,
    pub bind: SocketAddr,
    pub static_dir: Option<PathBuf>,
    pub long_poll: Duration,
}

#[derive(Debug)]
pub enum ApiError {
    BadRequest(String),
    NotFound(String),
    Unprocessable(String),
    Unavailable(String),
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let (status, msg) = match self {
            ApiError::BadRequest(m) => (StatusCode::BAD_REQUEST, m),
            ApiError::NotFound(m) => (StatusCode::NOT_FOUND, m),
            ApiError::Unprocessable(m) => (StatusCode::UNPROCESSABLE_ENTITY, m),
            ApiError::Unavailable(m) => (StatusCode::SERVICE_UNAVAILABLE, m),
        };
        (status, Json(json!({ "error": msg }))).into_response()
    }
}

impl From<MemoryError> for ApiError {
    fn from(e: MemoryError) -> Self {
        ApiError::Unavailable(e.to_string())
    }
}

impl From<ControlError> for ApiError {
    fn from(e: ControlError) -> Self {
        match e {
            ControlError::UnknownAgent(_) => ApiError::NotFound(e.to_string()),
            ControlError::InvalidSeed(_) => ApiError::Unprocessable(e.to_string()),
            ControlError::InvalidParam(_) => ApiError::Unprocessable(e.to_string()),
            ControlError::Storage(_) | ControlError::Malformed(_) => ApiError::Unavailable(e.to_string()),
        }
    }
}

type ApiResult<T> = Result<Json<T>, ApiError>;

#[derive(Debug, Deserialize)]
pub struct RecordsQuery {
    since: Option<String>,
    wait: Option<String>,
}

#[derive(Debug, Serialize, Deserialize, PartialEq)]
pub struct RecordPage {
    pub records: Vec<ScoreRecord>,
    /// Cursor for the next page when this one was capped.
    pub next: Option<u64>,
    pub last_seq: Option<u64>,
}

/// `since` absent or -1 means from the start; otherwise records with a
/// greater seq.
fn parse_since(raw: Option<&str>) -> Result<Option<u64>, ApiError> {
    match raw.map(str::trim) {
        None | Some("") | Some("-1") => Ok(None),
        Some(s) => s
            .parse::<u64>()
            .map(Some)
            .map_err(|_| ApiError::BadRequest(format!("malformed cursor {s:?}"))),
    }
}

fn parse_bool(raw: Option<&str>) -> Result<bool, ApiError> {
    match raw {
        None | Some("") | Some("0") | Some("false") => Ok(false),
        Some("1") | Some("true") => Ok(true),
        Some(other) => Err(ApiError::BadRequest(format!("bad boolean {other:?}"))),
    }
}

async fn blocking<T: Send + 'static>(f: impl FnOnce() -> T + Send + 'static) -> T {
    tokio::task::spawn_blocking(f).await.expect("blocking task panicked")
}

async fn records(State(st): State<AppState>, Query(q): Query<RecordsQuery>) -> ApiResult<RecordPage> {
    let since = parse_since(q.since.as_deref())?;
    let wait = parse_bool(q.wait.as_deref())?;
    let deadline = Instant::now() + st.long_poll;
    loop {
        let memory = Arc::clone(&st.memory);
        let (mut batch, last_seq) =
            blocking(move || Ok::<_, MemoryError>((memory.read_since(since)?, memory.last_seq()?))).await?;
        if !batch.is_empty() || !wait || Instant::now() >= deadline {
            let next = (batch.len() > PAGE_SIZE).then(|| batch[PAGE_SIZE - 1].seq);
            batch.truncate(PAGE_SIZE);
            return Ok(Json(RecordPage {
                records: batch,
                next,
                last_seq,
            }));
        }
        tokio::time::sleep(POLL_STEP.min(deadline.saturating_duration_since(Instant::now()))).await;
    }
}

#[derive(Debug, Serialize, Deserialize, PartialEq)]
pub struct AgentView {
    pub agent_id: String,
    pub paused: bool,
    pub temperature: Option<f64>,
    pub epsilon: Option<f64>,
    pub records: u64,
    pub ok_records: u64,
    pub best_score: Option<f64>,
    pub last_seq: Option<u64>,
}

async fn agents(State(st): State<AppState>) -> ApiResult<Vec<AgentView>> {
    let views = blocking(move || -> Result<Vec<AgentView>, ApiError> {
        let records = st.memory.records()?;
        let control = st.control.state()?;
        let mut views: BTreeMap<String, AgentView> = BTreeMap::new();
        let blank = |id: &str| AgentView {
            agent_id: id.to_string(),
            paused: false,
            temperature: None,
            epsilon: None,
            records: 0,
            ok_records: 0,
            best_score: None,
            last_seq: None,
        };
        for (id, c) in &control.agents {
            let v = views.entry(id.clone()).or_insert_with(|| blank(id));
            v.paused = c.paused;
            v.temperature = c.temperature;
            v.epsilon = c.epsilon;
        }
        for r in &records {
            let v = views.entry(r.agent_id.clone()).or_insert_with(|| blank(&r.agent_id));
            v.records += 1;
            v.last_seq = Some(r.seq);
            if r.is_ok() {
                v.ok_records += 1;
                v.best_score = Some(v.best_score.map_or(r.relative_score, |b| b.max(r.relative_score)));
            }
        }
        Ok(views.into_values().collect())
    })
    .await?;
    Ok(Json(views))
}

#[derive(Debug, Deserialize)]
pub struct HistogramQuery {
    agent: Option<String>,
    bins: Option<String>,
}

async fn histogram(State(st): State<AppState>, Query(q): Query<HistogramQuery>) -> Result<Json<serde_json::Value>, ApiError> {
    let bins: usize = match q.bins.as_deref() {
        None => 20,
        Some(b) => b
            .parse()
            .ok()
            .filter(|&n| (1..=1000).contains(&n))
            .ok_or_else(|| ApiError::BadRequest(format!("bins must be in 1..=1000, got {b:?}")))?,
    };
    let agent = q.agent.filter(|a| a != "all");
    let records = blocking(move || st.memory.records()).await?;
    let hist = score_histogram(&records, agent.as_deref(), bins).expect("bins >= 1");
    Ok(Json(json!({ "agent": agent.unwrap_or_else(|| "all".into()), "bins": hist })))
}

async fn projection(State(st): State<AppState>) -> Result<Json<serde_json::Value>, ApiError> {
    let points = blocking(move || st.memory.records().map(|r| project_records(&r))).await?;
    Ok(Json(json!({ "points": points })))
}

async fn submit(st: AppState, command: Command) -> Result<Json<crate::control::Ack>, ApiError> {
    let ack = blocking(move || -> Result<_, ApiError> {
        let records = st.memory.records()?;
        let last = records.last().map(|r| r.seq);
        let known = |id: &str| records.iter().any(|r| r.agent_id == id);
        Ok(st.control.submit(command, &known, last)?)
    })
    .await?;
    Ok(Json(ack))
}

async fn pause(State(st): State<AppState>, UrlPath(id): UrlPath<String>) -> Result<Json<crate::control::Ack>, ApiError> {
    submit(st, Command::Pause { agent_id: id }).await
}

async fn resume(State(st): State<AppState>, UrlPath(id): UrlPath<String>) -> Result<Json<crate::control::Ack>, ApiError> {
    submit(st, Command::Resume { agent_id: id }).await
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParamsBody {
    temperature: Option<f64>,
    epsilon: Option<f64>,
}

async fn params(
    State(st): State<AppState>,
    UrlPath(id): UrlPath<String>,
    Json(body): Json<ParamsBody>,
) -> Result<Json<crate::control::Ack>, ApiError> {
    submit(
        st,
        Command::Params {
            agent_id: id,
            temperature: body.temperature,
            epsilon: body.epsilon,
        },
    )
    .await
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SeedBody {
    user_template: String,
}

async fn seeds(State(st): State<AppState>, Json(body): Json<SeedBody>) -> Result<Json<crate::control::Ack>, ApiError> {
    submit(st, Command::Seed { user_template: body.user_template }).await
}

const FALLBACK_PAGE: &str = "<!doctype html>\n<html><head><meta charset=\"utf-8\"><title>featureloop</title></head>\n<body><h1>featureloop</h1><p>No dashboard assets are installed. JSON endpoints:</p>\n<ul><li>/api/records?since=&lt;seq&gt;&amp;wait=true</li><li>/api/agents</li><li>/api/histogram?agent=all&amp;bins=20</li><li>/api/projection</li></ul></body></html>\n";

async fn fallback_page() -> Html<&'static str> {
    Html(FALLBACK_PAGE)
}

pub fn router(state: AppState, static_dir: Option<PathBuf>) -> Router {
    let api = Router::new()
        .route("/api/records", get(records))
        .route("/api/agents", get(agents))
        .route("/api/histogram", get(histogram))
        .route("/api/projection", get(projection))
        .route("/api/control/agents/{id}/pause", post(pause))
        .route("/api/control/agents/{id}/resume", post(resume))
        .route("/api/control/agents/{id}/params", post(params))
        .route("/api/control/seeds", post(seeds))
        .with_state(state);
    match static_dir {
        Some(dir) => api.fallback_service(ServeDir::new(dir).fallback(get(fallback_page))),
        None => api.fallback(get(fallback_page)),
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ServeError {
    #[error("cannot bind {addr}: {source}")]
    BindFailed { addr: SocketAddr, source: std::io::Error },
    #[error(transparent)]
    Memory(#[from] MemoryError),
    #[error(transparent)]
    Control(#[from] ControlError),
    #[error("server: {0}")]
    Io(#[from] std::io::Error),
}

pub fn app_state(config: &ServeConfig) -> Result<AppState, ServeError> {
    Ok(AppState {
        memory: Arc::new(MemoryStore::open(&config.memory)?),
        control: Arc::new(ControlLog::open(&config.control)?),
        long_poll: config.long_poll,
    })
}

/// Serves until `shutdown` resolves.
pub async fn serve_until(
    config: ServeConfig,
    shutdown: impl std::future::Future<Output = ()> + Send + 'static,
    on_bound: impl FnOnce(SocketAddr),
) -> Result<(), ServeError> {
    let state = app_state(&config)?;
    let listener = tokio::net::TcpListener::bind(config.bind)
        .await
        .map_err(|source| ServeError::BindFailed { addr: config.bind, source })?;
    on_bound(listener.local_addr()?);
    axum::serve(listener, router(state, config.static_dir))
        .with_graceful_shutdown(shutdown)
        .await?;
    Ok(())
}

/// Blocking entry point used by the CLI; stops on Ctrl-C.
pub fn serve(config: ServeConfig) -> Result<(), ServeError> {
    let rt = tokio::runtime::Builder::new_multi_thread().enable_all().build()?;
    rt.block_on(serve_until(
        config,
        async {
            let _ = tokio::signal::ctrl_c().await;
        },
        |addr| log::info!("listening on http://{addr}"),
    ))
}
