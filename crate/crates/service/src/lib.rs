//! HTTP front end for shelf-image ingestion.
//!
//! * `POST /v1/shelf-image` with `x-device-id` and `x-store-token` headers
//!   and the JPEG as body. Answers `202` with the job id, or `200` when the
//!   same bytes were already received.
//! * `GET /v1/report/{job}`: the job record once processed, `202` while
//!   pending.
//! * `GET /v1/health`.
//!
//! Uploads are stored content-addressed, so a job id is a function of the
//! image bytes. Processing runs on a bounded queue drained by a fixed pool of
//! workers; finished records are appended to a line-delimited log and
//! reloaded on start.

use std::collections::HashMap;
use std::path::PathBuf;
use std::sync::{Arc, Mutex};
use std::time::{SystemTime, UNIX_EPOCH};

use axum::body::Bytes;
use axum::extract::{DefaultBodyLimit, Path, State};
use axum::http::{HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use thiserror::Error;
use tokio::sync::mpsc;

use planogram_core::detect::{DetectorProvider, FeatureProvider};
use planogram_core::ingest::{
    decode_image, job_record, process_shelf, ContentHash, IngestError, JobRecord, ObjectStore,
    ReportLog, StoreConfig,
};
use planogram_core::model::Catalog;
use planogram_core::search::SearchParams;

pub const DEVICE_HEADER: &str = "x-device-id";
pub const TOKEN_HEADER: &str = "x-store-token";
/// Optional capture time, seconds since the Unix epoch.
pub const TIMESTAMP_HEADER: &str = "x-capture-time";
pub const REPORT_LOG: &str = "reports.jsonl";
const MAX_UPLOAD_BYTES: usize = 32 * 1024 * 1024;

#[derive(Debug, Error)]
pub enum ServiceError {
    #[error("missing or wrong store token")]
    Unauthorized,
    #[error("missing {0} header")]
    MissingHeader(&'static str),
    #[error(transparent)]
    Ingest(#[from] IngestError),
    #[error("job queue is full")]
    Busy,
    #[error("unknown job {0:?}")]
    UnknownJob(String),
}

impl ServiceError {
    fn status(&self) -> StatusCode {
        match self {
            ServiceError::Unauthorized => StatusCode::UNAUTHORIZED,
            ServiceError::MissingHeader(_) => StatusCode::BAD_REQUEST,
            ServiceError::Ingest(IngestError::Decode(_)) => StatusCode::BAD_REQUEST,
            ServiceError::Ingest(IngestError::RackCount { .. }) => StatusCode::UNPROCESSABLE_ENTITY,
            ServiceError::Ingest(IngestError::UnknownDevice(_)) => StatusCode::FORBIDDEN,
            ServiceError::Ingest(_) => StatusCode::INTERNAL_SERVER_ERROR,
            ServiceError::Busy => StatusCode::SERVICE_UNAVAILABLE,
            ServiceError::UnknownJob(_) => StatusCode::NOT_FOUND,
        }
    }
}

impl IntoResponse for ServiceError {
    fn into_response(self) -> Response {
        let body = Json(serde_json::json!({ "error": self.to_string() }));
        (self.status(), body).into_response()
    }
}

#[derive(Debug, Clone)]
pub struct ServiceConfig {
    pub storage_root: PathBuf,
    pub workers: usize,
    pub queue_capacity: usize,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self { storage_root: PathBuf::from("storage"), workers: 2, queue_capacity: 64 }
    }
}

/// Progress of one job as reported by the API.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum JobStatus {
    Queued,
    Running,
    Done { record: Box<JobRecord> },
    Failed { error: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UploadAck {
    pub job_id: String,
    pub image: ContentHash,
    /// True when these bytes had been received before.
    pub duplicate: bool,
}

struct Job {
    hash: ContentHash,
    device_id: String,
    received_at: u64,
}

struct Inner {
    store: ObjectStore,
    log: ReportLog,
    store_config: StoreConfig,
    catalog: Catalog,
    detector: Box<dyn DetectorProvider>,
    features: Box<dyn FeatureProvider>,
    search: SearchParams,
    jobs: Mutex<HashMap<String, JobStatus>>,
    queue: mpsc::Sender<Job>,
}

#[derive(Clone)]
pub struct AppState(Arc<Inner>);

impl AppState {
    /// Opens storage, reloads finished jobs and starts the workers. Must be
    /// called inside a Tokio runtime.
    pub fn start(
        config: &ServiceConfig,
        store_config: StoreConfig,
        catalog: Catalog,
        detector: Box<dyn DetectorProvider>,
        features: Box<dyn FeatureProvider>,
        search: SearchParams,
    ) -> Result<Self, IngestError> {
        store_config.validate(&catalog)?;
        let store = ObjectStore::open(&config.storage_root)?;
        let log = ReportLog::open(config.storage_root.join(REPORT_LOG))?;
        let mut jobs = HashMap::new();
        for record in log.read_all::<JobRecord>()? {
            jobs.insert(record.job_id.clone(), JobStatus::Done { record: Box::new(record) });
        }
        let (tx, rx) = mpsc::channel(config.queue_capacity.max(1));
        let state = AppState(Arc::new(Inner {
            store,
            log,
            store_config,
            catalog,
            detector,
            features,
            search,
            jobs: Mutex::new(jobs),
            queue: tx,
        }));
        let rx = Arc::new(tokio::sync::Mutex::new(rx));
        for _ in 0..config.workers.max(1) {
            tokio::spawn(worker(state.clone(), rx.clone()));
        }
        Ok(state)
    }

    pub fn job_status(&self, job_id: &str) -> Option<JobStatus> {
        self.0.jobs.lock().expect("job table poisoned").get(job_id).cloned()
    }

    fn set_status(&self, job_id: &str, status: JobStatus) {
        self.0.jobs.lock().expect("job table poisoned").insert(job_id.to_string(), status);
    }

    /// Stores the image and queues its job; a repeat upload of the same
    /// bytes returns the existing job.
    pub fn receive(&self, device_id: &str, token: &str, received_at: u64, body: &[u8]) -> Result<UploadAck, ServiceError> {
        let inner = &self.0;
        if token != inner.store_config.token {
            return Err(ServiceError::Unauthorized);
        }
        let device = inner.store_config.device(device_id)?;
        let image = decode_image(body)?;
        if device.rack_count > image.height() {
            return Err(IngestError::RackCount { count: device.rack_count, height: image.height() }.into());
        }
        let (hash, _) = inner.store.put(body)?;
        let job_id = hash.job_id();
        {
            let mut jobs = inner.jobs.lock().expect("job table poisoned");
            if let Some(existing) = jobs.get(&job_id) {
                if !matches!(existing, JobStatus::Failed { .. }) {
                    return Ok(UploadAck { job_id, image: hash, duplicate: true });
                }
            }
            let job = Job { hash: hash.clone(), device_id: device_id.to_string(), received_at };
            inner.queue.try_send(job).map_err(|_| ServiceError::Busy)?;
            jobs.insert(job_id.clone(), JobStatus::Queued);
        }
        log::info!("queued {job_id} from {device_id}");
        Ok(UploadAck { job_id, image: hash, duplicate: false })
    }

    fn process(&self, job: &Job) -> Result<JobRecord, IngestError> {
        let inner = &self.0;
        let bytes = inner.store.get(&job.hash)?;
        let image = decode_image(&bytes)?;
        let device = inner.store_config.device(&job.device_id)?;
        let racks = process_shelf(
            &image,
            &job.hash,
            device,
            &inner.catalog,
            inner.detector.as_ref(),
            inner.features.as_ref(),
            &inner.search,
        )?;
        let record = job_record(&job.hash, &job.device_id, job.received_at, racks);
        inner.log.append(&record)?;
        Ok(record)
    }
}

async fn worker(state: AppState, rx: Arc<tokio::sync::Mutex<mpsc::Receiver<Job>>>) {
    loop {
        let Some(job) = rx.lock().await.recv().await else {
            return;
        };
        let job_id = job.hash.job_id();
        state.set_status(&job_id, JobStatus::Running);
        let s = state.clone();
        let result = tokio::task::spawn_blocking(move || s.process(&job)).await;
        let status = match result {
            Ok(Ok(record)) => {
                log::info!("{job_id}: mu {}/{}", record.matched, record.required);
                JobStatus::Done { record: Box::new(record) }
            }
            Ok(Err(e)) => {
                log::warn!("{job_id} failed: {e}");
                JobStatus::Failed { error: e.to_string() }
            }
            Err(e) => JobStatus::Failed { error: format!("worker panicked: {e}") },
        };
        state.set_status(&job_id, status);
    }
}

fn header<'a>(headers: &'a HeaderMap, name: &'static str) -> Result<&'a str, ServiceError> {
    headers
        .get(name)
        .and_then(|v| v.to_str().ok())
        .ok_or(ServiceError::MissingHeader(name))
}

fn now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs())
}

async fn upload(State(state): State<AppState>, headers: HeaderMap, body: Bytes) -> Result<Response, ServiceError> {
    let token = headers.get(TOKEN_HEADER).and_then(|v| v.to_str().ok()).unwrap_or_default();
    let device = header(&headers, DEVICE_HEADER)?;
    let received_at = headers
        .get(TIMESTAMP_HEADER)
        .and_then(|v| v.to_str().ok())
        .and_then(|v| v.parse().ok())
        .unwrap_or_else(now);
    let ack = state.receive(device, token, received_at, &body)?;
    let code = if ack.duplicate { StatusCode::OK } else { StatusCode::ACCEPTED };
    Ok((code, Json(ack)).into_response())
}

async fn report(State(state): State<AppState>, Path(job): Path<String>) -> Result<Response, ServiceError> {
    match state.job_status(&job) {
        None => Err(ServiceError::UnknownJob(job)),
        Some(JobStatus::Done { record }) => Ok((StatusCode::OK, Json(*record)).into_response()),
        Some(s @ JobStatus::Failed { .. }) => Ok((StatusCode::INTERNAL_SERVER_ERROR, Json(s)).into_response()),
        Some(s) => Ok((StatusCode::ACCEPTED, Json(s)).into_response()),
    }
}

async fn health(State(state): State<AppState>) -> Json<serde_json::Value> {
    let jobs = state.0.jobs.lock().expect("job table poisoned");
    let pending = jobs
        .values()
        .filter(|s| matches!(s, JobStatus::Queued | JobStatus::Running))
        .count();
    Json(serde_json::json!({ "status": "ok", "jobs": jobs.len(), "pending": pending }))
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/v1/shelf-image", post(upload))
        .route("/v1/report/{job}", get(report))
        .route("/v1/health", get(health))
        .layer(DefaultBodyLimit::max(MAX_UPLOAD_BYTES))
        .with_state(state)
}

/// Serves until the listener fails or ctrl-c.
pub async fn serve(listener: tokio::net::TcpListener, state: AppState) -> std::io::Result<()> {
    axum::serve(listener, router(state))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}
