//! HTTP+JSON front end for a [`FabricService`].
//!
//! | method | path | body → response |
//! |---|---|---|
//! | POST | `/queue/enqueue` | `TaskSpec` → `EnqueueAck` |
//! | POST | `/queue/dequeue` | `{worker}` → `Dequeue` |
//! | POST | `/queue/delete` | `{id, receipt}` → `{report}` |
//! | GET | `/queue/exists/{id}` | → `{exists}` |
//! | GET | `/queue/snapshot` | → `[SnapshotRow]` |
//! | PUT/GET | `/blobs/{container}/{name}` | raw bytes ↔ `BlobRef` / bytes |
//! | POST | `/topics/{client}/publish` | `ResultRecord` → `{}` |
//! | GET | `/topics/{client}?cursor=N` | → `{records, next_cursor}` |
//! | POST | `/telemetry` | `TelemetryRecord` → `{}` |
//! | GET | `/telemetry/stats` | → `TelemetryStats` |
//! | PUT/GET | `/versions/{id}` | zip bytes ↔ `VersionPackage` / zip bytes |
//! | GET | `/versions` | → `[VersionPackage]` |
//! | GET | `/monitor` | → `MonitorSnapshot` |
//! | GET | `/metrics` | → request counters |
//!
//! Errors are `{"error": kind, "message": text}` with a matching status code.

use std::io;
use std::net::SocketAddr;
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::Duration;

use axum::body::Bytes;
use axum::extract::{DefaultBodyLimit, Path, Query, State};
use axum::http::{header, HeaderMap, HeaderValue, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post, put};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use tokio::sync::oneshot;

use super::{Fabric, FabricError, FabricService};
use crate::model::{BlobRef, ResultRecord, TaskId, TaskSpec, TelemetryRecord, ToolVersionId};
use crate::queue::{DeleteReport, Receipt};

pub const CONTENT_HASH_HEADER: &str = "x-content-hash";

#[derive(Debug, Serialize, Deserialize)]
pub(super) struct ErrorBody {
    pub error: String,
    pub message: String,
}

#[derive(Debug, Serialize, Deserialize)]
pub(super) struct DequeueRequest {
    pub worker: String,
}

#[derive(Debug, Serialize, Deserialize)]
pub(super) struct DeleteRequest {
    pub id: TaskId,
    pub receipt: Receipt,
}

#[derive(Debug, Serialize, Deserialize)]
pub(super) struct DeleteResponse {
    pub report: DeleteReport,
}

#[derive(Debug, Serialize, Deserialize)]
pub(super) struct ExistsResponse {
    pub exists: bool,
}

#[derive(Debug, Serialize, Deserialize)]
pub(super) struct PollResponse {
    pub records: Vec<ResultRecord>,
    pub next_cursor: u64,
}

#[derive(Debug, Deserialize)]
struct CursorQuery {
    #[serde(default)]
    cursor: u64,
}

#[derive(Debug, Deserialize)]
struct HashQuery {
    hash: Option<String>,
}

struct ApiError(FabricError);

impl From<FabricError> for ApiError {
    fn from(e: FabricError) -> Self {
        Self(e)
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let status = match &self.0 {
            FabricError::NotFound(_) => StatusCode::NOT_FOUND,
            FabricError::Duplicate(_) | FabricError::HashMismatch(_) => StatusCode::CONFLICT,
            FabricError::Invalid(_) | FabricError::MalformedArchive(_) => {
                StatusCode::UNPROCESSABLE_ENTITY
            }
            FabricError::Service(_) | FabricError::Unreachable(_) => {
                StatusCode::INTERNAL_SERVER_ERROR
            }
        };
        let body = ErrorBody {
            error: self.0.kind().to_owned(),
            message: self.0.to_string(),
        };
        (status, Json(body)).into_response()
    }
}

type Api<T> = Result<Json<T>, ApiError>;
type Svc = State<Arc<FabricService>>;

fn parse_id(s: &str) -> Result<TaskId, ApiError> {
    s.parse()
        .map_err(|_| ApiError(FabricError::Invalid(format!("bad task id {s:?}"))))
}

fn bytes_response(bytes: Vec<u8>, hash: Option<&str>) -> Response {
    let mut headers = HeaderMap::new();
    headers.insert(
        header::CONTENT_TYPE,
        HeaderValue::from_static("application/octet-stream"),
    );
    if let Some(h) = hash.and_then(|h| HeaderValue::from_str(h).ok()) {
        headers.insert(CONTENT_HASH_HEADER, h);
    }
    (headers, bytes).into_response()
}

async fn enqueue(State(s): Svc, Json(task): Json<TaskSpec>) -> Api<super::EnqueueAck> {
    Ok(Json(s.enqueue(&task)?))
}

async fn dequeue(State(s): Svc, Json(req): Json<DequeueRequest>) -> Api<crate::queue::Dequeue> {
    Ok(Json(s.dequeue(&req.worker)?))
}

async fn delete(State(s): Svc, Json(req): Json<DeleteRequest>) -> Api<DeleteResponse> {
    Ok(Json(DeleteResponse {
        report: s.delete(req.id, &req.receipt)?,
    }))
}

async fn exists(State(s): Svc, Path(id): Path<String>) -> Api<ExistsResponse> {
    Ok(Json(ExistsResponse {
        exists: s.exists(parse_id(&id)?)?,
    }))
}

async fn snapshot(State(s): Svc) -> Api<Vec<crate::queue::SnapshotRow>> {
    Ok(Json(s.snapshot()?))
}

async fn put_blob(
    State(s): Svc,
    Path((container, name)): Path<(String, String)>,
    body: Bytes,
) -> Api<BlobRef> {
    Ok(Json(s.put_blob(&container, &name, &body)?))
}

async fn get_blob(
    State(s): Svc,
    Path((container, name)): Path<(String, String)>,
    Query(q): Query<HashQuery>,
) -> Result<Response, ApiError> {
    s.count("get_blob");
    let (bytes, recorded) = match q.hash {
        Some(content_hash) => {
            let blob = BlobRef {
                container,
                name,
                content_hash,
            };
            let bytes = s.blobs.get(&blob).map_err(FabricError::from)?;
            (bytes, blob)
        }
        None => s
            .blobs
            .get_by_name(&container, &name)
            .map_err(FabricError::from)?,
    };
    Ok(bytes_response(bytes, Some(&recorded.content_hash)))
}

async fn publish(
    State(s): Svc,
    Path(client): Path<String>,
    Json(record): Json<ResultRecord>,
) -> Api<serde_json::Value> {
    s.publish(&client, &record)?;
    Ok(Json(serde_json::json!({})))
}

async fn poll(State(s): Svc, Path(client): Path<String>, Query(q): Query<CursorQuery>) -> Api<PollResponse> {
    let (records, next_cursor) = s.poll(&client, q.cursor)?;
    Ok(Json(PollResponse {
        records,
        next_cursor,
    }))
}

async fn close_topic(State(s): Svc, Path(client): Path<String>) -> Api<serde_json::Value> {
    let closed = s.close_topic(&client)?;
    Ok(Json(serde_json::json!({ "closed": closed })))
}

async fn record_telemetry(State(s): Svc, Json(rec): Json<TelemetryRecord>) -> Api<serde_json::Value> {
    s.record_telemetry(&rec)?;
    Ok(Json(serde_json::json!({})))
}

async fn telemetry_stats(State(s): Svc) -> Api<crate::store::TelemetryStats> {
    Ok(Json(s.telemetry_stats()?))
}

async fn telemetry_for(State(s): Svc, Path(id): Path<String>) -> Api<Vec<TelemetryRecord>> {
    Ok(Json(s.telemetry_for(parse_id(&id)?)))
}

async fn upload_version(
    State(s): Svc,
    Path(id): Path<String>,
    body: Bytes,
) -> Api<crate::store::VersionPackage> {
    Ok(Json(s.upload_version(&ToolVersionId::new(id), &body)?))
}

async fn download_version(State(s): Svc, Path(id): Path<String>) -> Result<Response, ApiError> {
    let id = ToolVersionId::new(id);
    match s.download_version(&id)? {
        Some(bytes) => {
            let hash = crate::store::sha256_hex(&bytes);
            Ok(bytes_response(bytes, Some(&hash)))
        }
        None => Err(FabricError::NotFound(format!("version {id}")).into()),
    }
}

async fn list_versions(State(s): Svc) -> Api<Vec<crate::store::VersionPackage>> {
    Ok(Json(s.list_versions()?))
}

async fn monitor(State(s): Svc) -> Api<super::MonitorSnapshot> {
    Ok(Json(s.monitor()?))
}

async fn metrics(State(s): Svc) -> Json<std::collections::BTreeMap<String, u64>> {
    Json(s.metrics())
}

pub fn router(service: Arc<FabricService>) -> Router {
    Router::new()
        .route("/queue/enqueue", post(enqueue))
        .route("/queue/dequeue", post(dequeue))
        .route("/queue/delete", post(delete))
        .route("/queue/exists/{id}", get(exists))
        .route("/queue/snapshot", get(snapshot))
        .route("/blobs/{container}/{name}", put(put_blob).get(get_blob))
        .route("/topics/{client}/publish", post(publish))
        .route("/topics/{client}", get(poll).delete(close_topic))
        .route("/telemetry", post(record_telemetry))
        .route("/telemetry/stats", get(telemetry_stats))
        .route("/telemetry/{id}", get(telemetry_for))
        .route("/versions", get(list_versions))
        .route("/versions/{id}", put(upload_version).get(download_version))
        .route("/monitor", get(monitor))
        .route("/metrics", get(metrics))
        .layer(DefaultBodyLimit::max(1 << 30))
        .with_state(service)
}

/// A running fabric server. Dropping the handle stops it.
pub struct ServerHandle {
    addr: SocketAddr,
    shutdown: Option<oneshot::Sender<()>>,
    thread: Option<JoinHandle<()>>,
}

impl ServerHandle {
    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn url(&self) -> String {
        format!("http://{}", self.addr)
    }

    /// Requests shutdown and waits for in-flight requests and the journal flush.
    pub fn stop(mut self) {
        self.stop_inner();
    }

    /// Blocks until the server exits (on SIGINT/SIGTERM when signals are handled).
    pub fn join(mut self) {
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }

    fn stop_inner(&mut self) {
        if let Some(tx) = self.shutdown.take() {
            let _ = tx.send(());
        }
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

impl Drop for ServerHandle {
    fn drop(&mut self) {
        self.stop_inner();
    }
}

#[derive(Clone, Copy, Debug)]
pub struct ServeOptions {
    /// Interval of the background visibility sweep.
    pub sweep_interval: Duration,
    /// Stop on SIGINT/SIGTERM.
    pub handle_signals: bool,
}

impl Default for ServeOptions {
    fn default() -> Self {
        Self {
            sweep_interval: Duration::from_secs(1),
            handle_signals: false,
        }
    }
}

/// Binds `listen` and serves the API from a background thread.
pub fn serve(service: Arc<FabricService>, listen: &str, opts: ServeOptions) -> io::Result<ServerHandle> {
    let std_listener = std::net::TcpListener::bind(listen)?;
    std_listener.set_nonblocking(true)?;
    let addr = std_listener.local_addr()?;
    let runtime = tokio::runtime::Builder::new_multi_thread()
        .worker_threads(4)
        .enable_all()
        .build()?;
    let (tx, rx) = oneshot::channel::<()>();
    let thread = std::thread::Builder::new()
        .name("fabric-http".into())
        .spawn(move || {
            runtime.block_on(async move {
                let listener = match tokio::net::TcpListener::from_std(std_listener) {
                    Ok(l) => l,
                    Err(e) => {
                        log::error!("fabric listener: {e}");
                        return;
                    }
                };
                let sweeper = {
                    let service = Arc::clone(&service);
                    tokio::spawn(async move {
                        let mut tick = tokio::time::interval(opts.sweep_interval);
                        loop {
                            tick.tick().await;
                            if let Err(e) = service.sweep() {
                                log::warn!("visibility sweep failed: {e}");
                            }
                        }
                    })
                };
                let stop = async move {
                    if opts.handle_signals {
                        let mut term =
                            tokio::signal::unix::signal(tokio::signal::unix::SignalKind::terminate())
                                .expect("install SIGTERM handler");
                        tokio::select! {
                            _ = rx => {}
                            _ = tokio::signal::ctrl_c() => {}
                            _ = term.recv() => {}
                        }
                    } else {
                        let _ = rx.await;
                    }
                };
                let app = router(Arc::clone(&service));
                if let Err(e) = axum::serve(listener, app).with_graceful_shutdown(stop).await {
                    log::error!("fabric server: {e}");
                }
                sweeper.abort();
                if let Err(e) = service.flush() {
                    log::error!("journal flush on shutdown: {e}");
                }
            });
        })?;
    Ok(ServerHandle {
        addr,
        shutdown: Some(tx),
        thread: Some(thread),
    })
}
