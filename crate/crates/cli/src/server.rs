//! HTTP/JSON service over a set of campaigns.

use std::collections::HashMap;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, RwLock};

use axum::extract::{Path as UrlPath, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use microstudy_core::phase2::{EnrollmentRequest, TrialReportRequest};
use microstudy_core::store::ErrorKind;
use microstudy_core::{
    ApiError, CampaignConfig, CampaignHandle, Clock, EventLog, Phase1Submission, StudyApi, TrialCampaign, WorkerId,
};
use serde::{Deserialize, Serialize};

/// Campaign registry plus where new campaigns keep their logs.
pub struct AppState {
    campaigns: RwLock<HashMap<String, Arc<CampaignHandle>>>,
    data_dir: Option<PathBuf>,
    clock: Arc<dyn Clock>,
    next_id: AtomicU64,
}

impl AppState {
    pub fn new(data_dir: Option<PathBuf>, clock: Arc<dyn Clock>) -> Self {
        Self {
            campaigns: RwLock::new(HashMap::new()),
            data_dir,
            clock,
            next_id: AtomicU64::new(1),
        }
    }

    /// Rebuilds every `<id>.jsonl` campaign found in the data directory.
    pub fn recover(data_dir: &Path, clock: Arc<dyn Clock>) -> anyhow::Result<Self> {
        std::fs::create_dir_all(data_dir)?;
        let state = Self::new(Some(data_dir.to_path_buf()), clock);
        for entry in std::fs::read_dir(data_dir)? {
            let path = entry?.path();
            if path.extension().and_then(|e| e.to_str()) != Some("jsonl") {
                continue;
            }
            let Some(id) = path.file_stem().and_then(|s| s.to_str()).map(str::to_string) else {
                continue;
            };
            let handle = CampaignHandle::recover(EventLog::open(&path)?, Arc::clone(&state.clock))?;
            tracing::info!(campaign = %id, events = handle.records().len(), "recovered campaign");
            state.insert(id, handle);
        }
        Ok(state)
    }

    fn insert(&self, id: String, handle: CampaignHandle) {
        if let Ok(n) = id.parse::<u64>() {
            self.next_id.fetch_max(n + 1, Ordering::SeqCst);
        }
        self.campaigns
            .write()
            .unwrap_or_else(|p| p.into_inner())
            .insert(id, Arc::new(handle));
    }

    pub fn get(&self, id: &str) -> Option<Arc<CampaignHandle>> {
        self.campaigns.read().unwrap_or_else(|p| p.into_inner()).get(id).cloned()
    }

    /// Creates a campaign under `id`, or under the next free number.
    pub fn create(&self, id: Option<String>, config: CampaignConfig) -> Result<String, ApiError> {
        let id = match id {
            Some(id) if !id.is_empty() && id.chars().all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_') => id,
            Some(id) => return Err(ApiError::new(ErrorKind::Rejected, format!("invalid campaign id {id:?}"))),
            None => loop {
                let candidate = self.next_id.fetch_add(1, Ordering::SeqCst).to_string();
                if self.get(&candidate).is_none() {
                    break candidate;
                }
            },
        };
        let mut campaigns = self.campaigns.write().unwrap_or_else(|p| p.into_inner());
        if campaigns.contains_key(&id) {
            return Err(ApiError::new(ErrorKind::Conflict, format!("campaign {id} exists")));
        }
        let log = match &self.data_dir {
            Some(dir) => EventLog::open(dir.join(format!("{id}.jsonl")))?,
            None => EventLog::in_memory(),
        };
        let handle = CampaignHandle::create(config, log, Arc::clone(&self.clock))?;
        campaigns.insert(id.clone(), Arc::new(handle));
        Ok(id)
    }
}

struct HttpError(ApiError);

impl From<ApiError> for HttpError {
    fn from(e: ApiError) -> Self {
        HttpError(e)
    }
}

pub fn status_for(kind: ErrorKind) -> StatusCode {
    match kind {
        ErrorKind::NotFound => StatusCode::NOT_FOUND,
        ErrorKind::Conflict | ErrorKind::Closed => StatusCode::CONFLICT,
        ErrorKind::Rejected => StatusCode::UNPROCESSABLE_ENTITY,
        ErrorKind::Internal | ErrorKind::Transport => StatusCode::INTERNAL_SERVER_ERROR,
    }
}

impl IntoResponse for HttpError {
    fn into_response(self) -> Response {
        (status_for(self.0.kind), Json(self.0)).into_response()
    }
}

type Shared = Arc<AppState>;

fn campaign(state: &AppState, id: &str) -> Result<Arc<CampaignHandle>, HttpError> {
    state
        .get(id)
        .ok_or_else(|| HttpError(ApiError::new(ErrorKind::NotFound, format!("unknown campaign {id}"))))
}

/// Runs a campaign operation off the async executor; they lock and may fsync.
async fn blocking<T, F>(state: &AppState, id: &str, f: F) -> Result<T, HttpError>
where
    T: Send + 'static,
    F: FnOnce(&CampaignHandle) -> Result<T, ApiError> + Send + 'static,
{
    let handle = campaign(state, id)?;
    tokio::task::spawn_blocking(move || f(&handle))
        .await
        .map_err(|e| HttpError(ApiError::new(ErrorKind::Internal, e.to_string())))?
        .map_err(HttpError)
}

#[derive(Debug, Default, Serialize, Deserialize)]
pub struct CreateCampaign {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub id: Option<String>,
    #[serde(default)]
    pub config: CampaignConfig,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct Created {
    pub id: String,
}

async fn create_campaign(State(state): State<Shared>, Json(body): Json<CreateCampaign>) -> Result<Response, HttpError> {
    let st = Arc::clone(&state);
    let id = tokio::task::spawn_blocking(move || st.create(body.id, body.config))
        .await
        .map_err(|e| HttpError(ApiError::new(ErrorKind::Internal, e.to_string())))??;
    tracing::info!(campaign = %id, "created campaign");
    Ok((StatusCode::CREATED, Json(Created { id })).into_response())
}

#[derive(Debug, Deserialize)]
struct WorkerQuery {
    worker: String,
}

async fn next_task(
    State(state): State<Shared>,
    UrlPath(id): UrlPath<String>,
    Query(q): Query<WorkerQuery>,
) -> Result<Response, HttpError> {
    let worker = WorkerId(q.worker);
    let task = blocking(&state, &id, move |h| h.next_task(&worker)).await?;
    Ok(Json(task).into_response())
}

async fn submit(
    State(state): State<Shared>,
    UrlPath(id): UrlPath<String>,
    Json(sub): Json<Phase1Submission>,
) -> Result<Response, HttpError> {
    let ack = blocking(&state, &id, move |h| h.submit(&sub)).await?;
    Ok(Json(ack).into_response())
}

#[derive(Debug, Deserialize)]
struct KQuery {
    k: Option<usize>,
}

async fn report(
    State(state): State<Shared>,
    UrlPath(id): UrlPath<String>,
    Query(q): Query<KQuery>,
) -> Result<Response, HttpError> {
    let k = q.k.unwrap_or(usize::MAX);
    let ranked = blocking(&state, &id, move |h| h.report(k)).await?;
    Ok(Json(ranked).into_response())
}

async fn configure_trial(
    State(state): State<Shared>,
    UrlPath(id): UrlPath<String>,
    Json(trial): Json<TrialCampaign>,
) -> Result<Response, HttpError> {
    blocking(&state, &id, move |h| h.configure_trial(&trial)).await?;
    Ok(StatusCode::NO_CONTENT.into_response())
}

async fn enroll(
    State(state): State<Shared>,
    UrlPath(id): UrlPath<String>,
    Json(req): Json<EnrollmentRequest>,
) -> Result<Response, HttpError> {
    let enrollment = blocking(&state, &id, move |h| h.enroll(&req)).await?;
    Ok(Json(enrollment).into_response())
}

async fn trial_report(
    State(state): State<Shared>,
    UrlPath(id): UrlPath<String>,
    Json(req): Json<TrialReportRequest>,
) -> Result<Response, HttpError> {
    blocking(&state, &id, move |h| h.record_report(&req)).await?;
    Ok(StatusCode::NO_CONTENT.into_response())
}

async fn analysis(State(state): State<Shared>, UrlPath(id): UrlPath<String>) -> Result<Response, HttpError> {
    let report = blocking(&state, &id, |h| h.analyze()).await?;
    Ok(Json(report).into_response())
}

async fn export_csv(State(state): State<Shared>, UrlPath(id): UrlPath<String>) -> Result<Response, HttpError> {
    let csv = blocking(&state, &id, |h| h.export_csv()).await?;
    Ok(([(header::CONTENT_TYPE, "text/csv; charset=utf-8")], csv).into_response())
}

async fn close(State(state): State<Shared>, UrlPath(id): UrlPath<String>) -> Result<Response, HttpError> {
    blocking(&state, &id, |h| h.close()).await?;
    Ok(StatusCode::NO_CONTENT.into_response())
}

async fn events(State(state): State<Shared>, UrlPath(id): UrlPath<String>) -> Result<Response, HttpError> {
    let handle = campaign(&state, &id)?;
    let mut body = String::new();
    for r in handle.records() {
        body.push_str(&serde_json::to_string(&r).map_err(|e| HttpError(ApiError::new(ErrorKind::Internal, e.to_string())))?);
        body.push('\n');
    }
    Ok(([(header::CONTENT_TYPE, "application/x-ndjson")], body).into_response())
}

pub fn router(state: Shared) -> Router {
    Router::new()
        .route("/campaigns", post(create_campaign))
        .route("/campaigns/{id}/phase1/next-task", get(next_task))
        .route("/campaigns/{id}/phase1/submissions", post(submit))
        .route("/campaigns/{id}/report", get(report))
        .route("/campaigns/{id}/phase2/trial", post(configure_trial))
        .route("/campaigns/{id}/phase2/enrollments", post(enroll))
        .route("/campaigns/{id}/phase2/reports", post(trial_report))
        .route("/campaigns/{id}/phase2/analysis", get(analysis))
        .route("/campaigns/{id}/export.csv", get(export_csv))
        .route("/campaigns/{id}/close", post(close))
        .route("/campaigns/{id}/events", get(events))
        .with_state(state)
}

pub async fn serve(state: Shared, addr: SocketAddr) -> anyhow::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    tracing::info!(addr = %listener.local_addr()?, "listening");
    axum::serve(listener, router(state))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await?;
    Ok(())
}

/// A server on its own runtime thread, for blocking callers and tests.
pub struct BackgroundServer {
    pub addr: SocketAddr,
    shutdown: Option<tokio::sync::oneshot::Sender<()>>,
    thread: Option<std::thread::JoinHandle<()>>,
}

impl BackgroundServer {
    pub fn start(state: Shared) -> anyhow::Result<Self> {
        let runtime = tokio::runtime::Builder::new_multi_thread().worker_threads(4).enable_all().build()?;
        let listener = runtime.block_on(tokio::net::TcpListener::bind(SocketAddr::from(([127, 0, 0, 1], 0))))?;
        let addr = listener.local_addr()?;
        let (tx, rx) = tokio::sync::oneshot::channel::<()>();
        let thread = std::thread::spawn(move || {
            runtime.block_on(async move {
                let _ = axum::serve(listener, router(state))
                    .with_graceful_shutdown(async {
                        let _ = rx.await;
                    })
                    .await;
            });
        });
        Ok(Self {
            addr,
            shutdown: Some(tx),
            thread: Some(thread),
        })
    }

    pub fn base_url(&self) -> String {
        format!("http://{}", self.addr)
    }
}

impl Drop for BackgroundServer {
    fn drop(&mut self) {
        if let Some(tx) = self.shutdown.take() {
            let _ = tx.send(());
        }
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}
