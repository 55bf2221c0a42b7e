//! The fabric: queue, blobs, topics, telemetry and versions behind one service boundary.
//!
//! [`Fabric`] is the contract workers and clients program against. [`FabricService`] is the
//! in-process implementation; [`HttpFabric`] speaks the JSON API served by [`http::serve`].

mod client;
pub mod http;
mod registry;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, MutexGuard};

use serde::{Deserialize, Serialize};

pub use client::HttpFabric;
pub use registry::WorkerInfo;

use crate::autoscale::AutoscalePolicy;
use crate::clock::{Clock, SystemClock};
use crate::model::{BlobRef, ResultRecord, TaskId, TaskSpec, TelemetryRecord, Timestamp, ToolVersionId};
use crate::queue::{DeleteReport, Dequeue, Queue, QueueConfig, QueueError, Receipt, SnapshotRow};
use crate::store::{
    BlobStore, StoreError, TelemetryStats, TelemetryStore, TopicStore, VersionPackage, VersionRepo,
};
use registry::WorkerRegistry;

#[derive(Debug, thiserror::Error)]
pub enum FabricError {
    #[error("not found: {0}")]
    NotFound(String),
    #[error("hash mismatch: {0}")]
    HashMismatch(String),
    #[error("duplicate: {0}")]
    Duplicate(String),
    #[error("invalid request: {0}")]
    Invalid(String),
    #[error("malformed archive: {0}")]
    MalformedArchive(String),
    #[error("fabric service error: {0}")]
    Service(String),
    #[error("fabric unreachable: {0}")]
    Unreachable(String),
}

impl FabricError {
    pub fn kind(&self) -> &'static str {
        match self {
            FabricError::NotFound(_) => "not_found",
            FabricError::HashMismatch(_) => "hash_mismatch",
            FabricError::Duplicate(_) => "duplicate",
            FabricError::Invalid(_) => "invalid",
            FabricError::MalformedArchive(_) => "malformed_archive",
            FabricError::Service(_) => "service",
            FabricError::Unreachable(_) => "unreachable",
        }
    }

    pub fn from_kind(kind: &str, message: String) -> Self {
        match kind {
            "not_found" => FabricError::NotFound(message),
            "hash_mismatch" => FabricError::HashMismatch(message),
            "duplicate" => FabricError::Duplicate(message),
            "invalid" => FabricError::Invalid(message),
            "malformed_archive" => FabricError::MalformedArchive(message),
            "unreachable" => FabricError::Unreachable(message),
            _ => FabricError::Service(message),
        }
    }
}

impl From<StoreError> for FabricError {
    fn from(e: StoreError) -> Self {
        let msg = e.to_string();
        match e {
            StoreError::NotFound(_) => FabricError::NotFound(msg),
            StoreError::HashMismatch { .. } => FabricError::HashMismatch(msg),
            StoreError::InvalidName(_) | StoreError::TopicMismatch { .. } => FabricError::Invalid(msg),
            StoreError::MalformedArchive(_) => FabricError::MalformedArchive(msg),
            StoreError::Io(_) | StoreError::Journal(_) => FabricError::Service(msg),
        }
    }
}

impl From<QueueError> for FabricError {
    fn from(e: QueueError) -> Self {
        let msg = e.to_string();
        match e {
            QueueError::Duplicate(_) => FabricError::Duplicate(msg),
            QueueError::Invalid(_) => FabricError::Invalid(msg),
            QueueError::Journal(_) => FabricError::Service(msg),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EnqueueAck {
    pub id: TaskId,
    pub enqueued_at: Timestamp,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MonitorSnapshot {
    pub deployment: String,
    pub active_workers: usize,
    pub workers: Vec<WorkerInfo>,
    pub queue: Vec<SnapshotRow>,
}

/// Operations the cloud fabric offers to workers and clients.
pub trait Fabric: Send + Sync {
    fn enqueue(&self, task: &TaskSpec) -> Result<EnqueueAck, FabricError>;
    /// Dequeues on behalf of `worker`; the worker identity feeds the monitor's registry.
    fn dequeue(&self, worker: &str) -> Result<Dequeue, FabricError>;
    fn delete(&self, id: TaskId, receipt: &Receipt) -> Result<DeleteReport, FabricError>;
    fn exists(&self, id: TaskId) -> Result<bool, FabricError>;
    fn snapshot(&self) -> Result<Vec<SnapshotRow>, FabricError>;

    fn put_blob(&self, container: &str, name: &str, bytes: &[u8]) -> Result<BlobRef, FabricError>;
    fn get_blob(&self, blob: &BlobRef) -> Result<Vec<u8>, FabricError>;

    fn publish(&self, topic: &str, record: &ResultRecord) -> Result<(), FabricError>;
    fn poll(&self, topic: &str, cursor: u64) -> Result<(Vec<ResultRecord>, u64), FabricError>;

    fn record_telemetry(&self, record: &TelemetryRecord) -> Result<(), FabricError>;
    fn telemetry_stats(&self) -> Result<TelemetryStats, FabricError>;

    fn upload_version(&self, id: &ToolVersionId, archive: &[u8]) -> Result<VersionPackage, FabricError>;
    /// The package archive, or `None` when the repository has no such version.
    fn download_version(&self, id: &ToolVersionId) -> Result<Option<Vec<u8>>, FabricError>;
    fn list_versions(&self) -> Result<Vec<VersionPackage>, FabricError>;

    fn monitor(&self) -> Result<MonitorSnapshot, FabricError>;
}

impl<T: Fabric + ?Sized> Fabric for Arc<T> {
    fn enqueue(&self, task: &TaskSpec) -> Result<EnqueueAck, FabricError> {
        (**self).enqueue(task)
    }
    fn dequeue(&self, worker: &str) -> Result<Dequeue, FabricError> {
        (**self).dequeue(worker)
    }
    fn delete(&self, id: TaskId, receipt: &Receipt) -> Result<DeleteReport, FabricError> {
        (**self).delete(id, receipt)
    }
    fn exists(&self, id: TaskId) -> Result<bool, FabricError> {
        (**self).exists(id)
    }
    fn snapshot(&self) -> Result<Vec<SnapshotRow>, FabricError> {
        (**self).snapshot()
    }
    fn put_blob(&self, container: &str, name: &str, bytes: &[u8]) -> Result<BlobRef, FabricError> {
        (**self).put_blob(container, name, bytes)
    }
    fn get_blob(&self, blob: &BlobRef) -> Result<Vec<u8>, FabricError> {
        (**self).get_blob(blob)
    }
    fn publish(&self, topic: &str, record: &ResultRecord) -> Result<(), FabricError> {
        (**self).publish(topic, record)
    }
    fn poll(&self, topic: &str, cursor: u64) -> Result<(Vec<ResultRecord>, u64), FabricError> {
        (**self).poll(topic, cursor)
    }
    fn record_telemetry(&self, record: &TelemetryRecord) -> Result<(), FabricError> {
        (**self).record_telemetry(record)
    }
    fn telemetry_stats(&self) -> Result<TelemetryStats, FabricError> {
        (**self).telemetry_stats()
    }
    fn upload_version(&self, id: &ToolVersionId, archive: &[u8]) -> Result<VersionPackage, FabricError> {
        (**self).upload_version(id, archive)
    }
    fn download_version(&self, id: &ToolVersionId) -> Result<Option<Vec<u8>>, FabricError> {
        (**self).download_version(id)
    }
    fn list_versions(&self) -> Result<Vec<VersionPackage>, FabricError> {
        (**self).list_versions()
    }
    fn monitor(&self) -> Result<MonitorSnapshot, FabricError> {
        (**self).monitor()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LauncherMode {
    /// Spawn local `worker` processes for autoscaled instances.
    Process,
    /// Do not launch workers; they are started externally.
    None,
}

/// Fabric configuration file (JSON).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FabricConfig {
    pub deployment: String,
    pub listen: String,
    pub root: PathBuf,
    pub queue: QueueConfig,
    pub autoscale: AutoscalePolicy,
    pub launcher: LauncherMode,
    /// Seconds after its last poll during which an idle worker counts as active.
    pub activity_window_s: u64,
    /// Poll interval handed to launched workers.
    pub worker_poll_interval_s: f64,
}

impl Default for FabricConfig {
    fn default() -> Self {
        Self {
            deployment: "local".into(),
            listen: "127.0.0.1:7878".into(),
            root: PathBuf::from("fabric-state"),
            queue: QueueConfig::default(),
            autoscale: AutoscalePolicy::default(),
            launcher: LauncherMode::None,
            activity_window_s: 30,
            worker_poll_interval_s: 1.0,
        }
    }
}

/// In-process fabric over a state root directory.
pub struct FabricService {
    deployment: String,
    root: PathBuf,
    clock: Arc<dyn Clock>,
    queue: Mutex<Queue>,
    blobs: BlobStore,
    topics: Mutex<TopicStore>,
    telemetry: Mutex<TelemetryStore>,
    versions: Mutex<VersionRepo>,
    registry: Mutex<WorkerRegistry>,
    counters: Mutex<BTreeMap<&'static str, u64>>,
}

fn lock<T>(m: &Mutex<T>) -> MutexGuard<'_, T> {
    m.lock().unwrap_or_else(|poisoned| poisoned.into_inner())
}

impl FabricService {
    pub fn open(config: &FabricConfig) -> Result<Self, FabricError> {
        Self::open_with_clock(config, Arc::new(SystemClock))
    }

    pub fn open_with_clock(config: &FabricConfig, clock: Arc<dyn Clock>) -> Result<Self, FabricError> {
        let root = config.root.clone();
        std::fs::create_dir_all(&root)
            .map_err(|e| FabricError::Service(format!("{}: {e}", root.display())))?;
        Ok(Self {
            deployment: config.deployment.clone(),
            queue: Mutex::new(Queue::open(config.queue, &root.join("queue.journal"))?),
            blobs: BlobStore::open(root.join("blobs"))?,
            topics: Mutex::new(TopicStore::open(root.join("topics"))?),
            telemetry: Mutex::new(TelemetryStore::open(&root.join("telemetry.jsonl"))?),
            versions: Mutex::new(VersionRepo::open(root.join("versions"))?),
            registry: Mutex::new(WorkerRegistry::new(config.activity_window_s * 1000)),
            counters: Mutex::new(BTreeMap::new()),
            clock,
            root,
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn now(&self) -> Timestamp {
        self.clock.now()
    }

    fn count(&self, what: &'static str) {
        *lock(&self.counters).entry(what).or_default() += 1;
    }

    /// Per-operation request counts since the service started.
    pub fn metrics(&self) -> BTreeMap<String, u64> {
        lock(&self.counters)
            .iter()
            .map(|(k, v)| (k.to_string(), *v))
            .collect()
    }

    pub fn request_count(&self, what: &str) -> u64 {
        lock(&self.counters).get(what).copied().unwrap_or(0)
    }

    /// Reverts expired invisible entries; run periodically by the server.
    pub fn sweep(&self) -> Result<usize, FabricError> {
        let now = self.clock.now();
        Ok(lock(&self.queue).revert_expired(now)?)
    }

    /// Number of live entries, visible or not.
    pub fn queue_len(&self) -> usize {
        lock(&self.queue).len()
    }

    pub fn blob_count(&self) -> usize {
        self.blobs.count()
    }

    pub fn telemetry_for(&self, id: TaskId) -> Vec<TelemetryRecord> {
        lock(&self.telemetry).query(id)
    }

    pub fn close_topic(&self, topic: &str) -> Result<bool, FabricError> {
        Ok(lock(&self.topics).close(topic)?)
    }

    /// Compacts the queue journal; called on graceful shutdown.
    pub fn flush(&self) -> Result<(), FabricError> {
        Ok(lock(&self.queue).compact()?)
    }
}

impl Fabric for FabricService {
    fn enqueue(&self, task: &TaskSpec) -> Result<EnqueueAck, FabricError> {
        self.count("enqueue");
        let now = self.clock.now();
        let enqueued_at = lock(&self.queue).enqueue(task.clone(), now)?;
        Ok(EnqueueAck {
            id: task.id,
            enqueued_at,
        })
    }

    fn dequeue(&self, worker: &str) -> Result<Dequeue, FabricError> {
        self.count("dequeue");
        let now = self.clock.now();
        let result = lock(&self.queue).dequeue(now)?;
        let holding = match &result {
            Dequeue::Dequeued { entry, .. } => Some((entry.task.id, entry.invisible_until)),
            _ => None,
        };
        if !worker.is_empty() {
            lock(&self.registry).observe(worker, now, holding);
        }
        Ok(result)
    }

    fn delete(&self, id: TaskId, receipt: &Receipt) -> Result<DeleteReport, FabricError> {
        self.count("delete");
        Ok(lock(&self.queue).delete(id, receipt)?)
    }

    fn exists(&self, id: TaskId) -> Result<bool, FabricError> {
        self.count("exists");
        let now = self.clock.now();
        let mut q = lock(&self.queue);
        q.revert_expired(now)?;
        Ok(q.exists(id))
    }

    fn snapshot(&self) -> Result<Vec<SnapshotRow>, FabricError> {
        self.count("snapshot");
        let now = self.clock.now();
        let mut q = lock(&self.queue);
        q.revert_expired(now)?;
        Ok(q.snapshot())
    }

    fn put_blob(&self, container: &str, name: &str, bytes: &[u8]) -> Result<BlobRef, FabricError> {
        self.count("put_blob");
        Ok(self.blobs.put(container, name, bytes)?)
    }

    fn get_blob(&self, blob: &BlobRef) -> Result<Vec<u8>, FabricError> {
        self.count("get_blob");
        Ok(self.blobs.get(blob)?)
    }

    fn publish(&self, topic: &str, record: &ResultRecord) -> Result<(), FabricError> {
        self.count("publish");
        lock(&self.topics).publish(topic, record)?;
        Ok(())
    }

    fn poll(&self, topic: &str, cursor: u64) -> Result<(Vec<ResultRecord>, u64), FabricError> {
        self.count("poll");
        Ok(lock(&self.topics).poll(topic, cursor))
    }

    fn record_telemetry(&self, record: &TelemetryRecord) -> Result<(), FabricError> {
        self.count("record_telemetry");
        Ok(lock(&self.telemetry).record(record)?)
    }

    fn telemetry_stats(&self) -> Result<TelemetryStats, FabricError> {
        self.count("telemetry_stats");
        Ok(lock(&self.telemetry).stats())
    }

    fn upload_version(&self, id: &ToolVersionId, archive: &[u8]) -> Result<VersionPackage, FabricError> {
        self.count("upload_version");
        let now = self.clock.now();
        Ok(lock(&self.versions).upload(id, archive, now)?)
    }

    fn download_version(&self, id: &ToolVersionId) -> Result<Option<Vec<u8>>, FabricError> {
        self.count("download_version");
        match lock(&self.versions).get(id) {
            Ok((_, bytes)) => Ok(Some(bytes)),
            Err(StoreError::NotFound(_)) => Ok(None),
            Err(e) => Err(e.into()),
        }
    }

    fn list_versions(&self) -> Result<Vec<VersionPackage>, FabricError> {
        self.count("list_versions");
        Ok(lock(&self.versions).list())
    }

    fn monitor(&self) -> Result<MonitorSnapshot, FabricError> {
        self.count("monitor");
        let now = self.clock.now();
        let queue = {
            let mut q = lock(&self.queue);
            q.revert_expired(now)?;
            q.snapshot()
        };
        let workers = lock(&self.registry).active(now);
        Ok(MonitorSnapshot {
            deployment: self.deployment.clone(),
            active_workers: workers.len(),
            workers,
            queue,
        })
    }
}
