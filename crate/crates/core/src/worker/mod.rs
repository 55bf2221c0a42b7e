//! The worker agent: poll the queue, provision the tool version, run the check under limits,
//! publish the result (unless another worker already finished it), delete the entry.

mod cache;
pub mod exec;

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use tempfile::TempDir;

pub use cache::{Provisioned, VersionCache};
pub use exec::{classify, classify_in, execute_with_limits, ExecutionReport, ExitKind, OUTCOME_FILE};

use crate::clock::{Clock, SystemClock};
use crate::fabric::{Fabric, FabricError};
use crate::model::{Outcome, OutcomeKind, ResultRecord, TaskId, TaskSpec, TelemetryRecord};
use crate::queue::{DeleteReport, Dequeue, QueueEntry, Receipt};
use crate::store::extract_zip;

#[derive(Clone, Debug)]
pub struct WorkerConfig {
    pub id: String,
    pub poll_interval: Duration,
    /// Holds the version cache and per-task working directories.
    pub cache_dir: PathBuf,
    /// Ceiling for the retry delay while the fabric is unreachable.
    pub max_backoff: Duration,
}

impl WorkerConfig {
    pub fn new(id: impl Into<String>, cache_dir: impl Into<PathBuf>) -> Self {
        Self {
            id: id.into(),
            poll_interval: Duration::from_secs(1),
            cache_dir: cache_dir.into(),
            max_backoff: Duration::from_secs(30),
        }
    }
}

/// A fresh worker name unique to this process.
pub fn default_worker_id() -> String {
    format!("worker-{}-{}", std::process::id(), &uuid::Uuid::new_v4().simple().to_string()[..6])
}

/// An entry this worker holds invisible.
#[derive(Debug)]
pub struct Claimed {
    pub entry: QueueEntry,
    pub receipt: Receipt,
    started: Instant,
}

#[derive(Debug)]
pub enum Claim {
    Empty,
    Task(Claimed),
    /// The queue dropped the entry at its dequeue limit; the worker reports it.
    Exhausted(QueueEntry),
}

/// A finished attempt waiting to be published or discarded.
#[derive(Debug)]
pub struct Executed {
    pub entry: QueueEntry,
    pub receipt: Receipt,
    pub outcome: Outcome,
    pub report: Option<ExecutionReport>,
    pub processing_time: f64,
    _workdir: Option<TempDir>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "disposition", content = "delete", rename_all = "snake_case")]
pub enum Disposition {
    Published(DeleteReport),
    Discarded,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Step {
    Idle,
    Finished {
        task: TaskId,
        outcome: OutcomeKind,
        disposition: Disposition,
    },
    ReportedExhausted(TaskId),
}

/// Substitutes `{tool_dir}` and `{work_dir}` in a task command.
pub fn expand_command(command: &str, tool_dir: &Path, work_dir: &Path) -> String {
    command
        .replace("{tool_dir}", &tool_dir.to_string_lossy())
        .replace("{work_dir}", &work_dir.to_string_lossy())
}

/// Runs a staged task: expands the command, executes it under the task's limits, classifies.
pub fn run_staged(task: &TaskSpec, tool_dir: &Path, work_dir: &Path) -> (Outcome, ExecutionReport) {
    let command = expand_command(&task.command, tool_dir, work_dir);
    let env = [
        ("VERIFARM_TOOL_DIR", tool_dir.to_string_lossy().into_owned()),
        ("VERIFARM_WORK_DIR", work_dir.to_string_lossy().into_owned()),
        ("VERIFARM_TASK_ID", task.id.to_string()),
        ("VERIFARM_MODULE", task.module_name.clone()),
        ("VERIFARM_RULE", task.rule_name.clone()),
        ("VERIFARM_VERSION", task.version.to_string()),
    ];
    let report = execute_with_limits(&command, work_dir, &task.limits, &env);
    let outcome = classify_in(&report.exit, work_dir);
    (outcome, report)
}

/// Writes one payload blob into the working directory; zip archives are unpacked.
pub fn stage_payload(work_dir: &Path, name: &str, bytes: &[u8]) -> Result<(), String> {
    if name.ends_with(".zip") {
        extract_zip(bytes, work_dir).map_err(|e| e.to_string())
    } else {
        fs::write(work_dir.join(name), bytes).map_err(|e| e.to_string())
    }
}

/// Error trace named by the verdict file, if any.
fn trace_path(work_dir: &Path) -> Option<PathBuf> {
    let text = fs::read_to_string(work_dir.join(OUTCOME_FILE)).ok()?;
    let file: exec::OutcomeFile = serde_json::from_str(&text).ok()?;
    let path = work_dir.join(file.trace?);
    path.is_file().then_some(path)
}

pub struct WorkerAgent<F: Fabric> {
    fabric: F,
    config: WorkerConfig,
    cache: VersionCache,
    work_root: PathBuf,
    clock: Arc<dyn Clock>,
    current_task: Option<TaskId>,
}

impl<F: Fabric> WorkerAgent<F> {
    pub fn new(fabric: F, config: WorkerConfig) -> std::io::Result<Self> {
        let cache = VersionCache::open(&config.cache_dir.join("versions"))?;
        let work_root = config.cache_dir.join("work");
        fs::create_dir_all(&work_root)?;
        Ok(Self {
            fabric,
            config,
            cache,
            work_root,
            clock: Arc::new(SystemClock),
            current_task: None,
        })
    }

    pub fn with_clock(mut self, clock: Arc<dyn Clock>) -> Self {
        self.clock = clock;
        self
    }

    pub fn id(&self) -> &str {
        &self.config.id
    }

    pub fn fabric(&self) -> &F {
        &self.fabric
    }

    pub fn cache(&self) -> &VersionCache {
        &self.cache
    }

    pub fn current_task(&self) -> Option<TaskId> {
        self.current_task
    }

    pub fn claim(&mut self) -> Result<Claim, FabricError> {
        Ok(match self.fabric.dequeue(&self.config.id)? {
            Dequeue::Empty => Claim::Empty,
            Dequeue::Exhausted { entry } => Claim::Exhausted(entry),
            Dequeue::Dequeued { entry, receipt } => {
                self.current_task = Some(entry.task.id);
                Claim::Task(Claimed {
                    entry,
                    receipt,
                    started: Instant::now(),
                })
            }
        })
    }

    /// Provisions the version, stages the payload and runs the command. Task-level problems
    /// become outcomes; only fabric transport failures are errors, leaving the entry to revert.
    pub fn execute(&mut self, claimed: Claimed) -> Result<Executed, FabricError> {
        let Claimed {
            entry,
            receipt,
            started,
        } = claimed;
        let task = &entry.task;
        let done = |outcome, report, workdir| Executed {
            processing_time: started.elapsed().as_secs_f64(),
            entry: entry.clone(),
            receipt: receipt.clone(),
            outcome,
            report,
            _workdir: workdir,
        };

        let tool_dir = match self.cache.ensure(&self.fabric, &task.version)? {
            Provisioned::Installed(dir) => dir,
            Provisioned::Missing(detail) => {
                return Ok(done(Outcome::with_detail(OutcomeKind::VersionNotFound, detail), None, None))
            }
        };
        let workdir = tempfile::Builder::new()
            .prefix(&format!("{}-", task.id))
            .tempdir_in(&self.work_root)
            .map_err(|e| FabricError::Service(format!("creating working directory: {e}")))?;
        for blob in &task.payload {
            let staged = match self.fabric.get_blob(blob) {
                Ok(bytes) => stage_payload(workdir.path(), &blob.name, &bytes),
                Err(e @ FabricError::Unreachable(_)) => return Err(e),
                Err(e) => Err(e.to_string()),
            };
            if let Err(detail) = staged {
                let detail = format!("payload {}/{}: {detail}", blob.container, blob.name);
                return Ok(done(Outcome::with_detail(OutcomeKind::ToolError, detail), None, Some(workdir)));
            }
        }

        let (mut outcome, report) = run_staged(task, &tool_dir, workdir.path());
        if outcome.kind == OutcomeKind::Defect {
            if let Some(path) = trace_path(workdir.path()) {
                let name = format!("{}-{}", task.id, entry.dequeue_count);
                match fs::read(&path).map_err(|e| e.to_string()).and_then(|bytes| {
                    self.fabric.put_blob("traces", &name, &bytes).map_err(|e| e.to_string())
                }) {
                    Ok(blob) => outcome.trace_ref = Some(blob),
                    Err(e) => log::warn!("uploading trace for {}: {e}", task.id),
                }
            }
        }
        Ok(done(outcome, Some(report), Some(workdir)))
    }

    /// Publishes and deletes, or discards when another worker already retired the entry.
    pub fn publish_or_discard(&mut self, executed: Executed) -> Result<Disposition, FabricError> {
        let task = &executed.entry.task;
        self.current_task = None;
        if !self.fabric.exists(task.id)? {
            log::info!("{}: task {} already completed elsewhere, discarding", self.config.id, task.id);
            return Ok(Disposition::Discarded);
        }
        let record = self.record(&executed.entry, executed.outcome.clone(), executed.processing_time);
        self.fabric.publish(&task.client.to_string(), &record)?;
        let report = self.fabric.delete(task.id, &executed.receipt)?;
        if report == DeleteReport::StaleReceipt {
            log::warn!(
                "{}: receipt for {} went stale; the published result stands",
                self.config.id,
                task.id
            );
        }
        self.telemetry(&executed.entry, executed.processing_time);
        Ok(Disposition::Published(report))
    }

    /// Reports an entry the queue dropped at its dequeue limit.
    pub fn report_exhausted(&mut self, entry: &QueueEntry) -> Result<(), FabricError> {
        let detail = format!(
            "dequeue limit reached after {} attempts without a result",
            entry.dequeue_count
        );
        let record = self.record(entry, Outcome::with_detail(OutcomeKind::ToolError, detail), 0.0);
        self.fabric.publish(&entry.task.client.to_string(), &record)?;
        self.telemetry(entry, 0.0);
        Ok(())
    }

    fn record(&self, entry: &QueueEntry, outcome: Outcome, processing_time: f64) -> ResultRecord {
        ResultRecord {
            task: entry.task.id,
            client: entry.task.client,
            outcome,
            worker: self.config.id.clone(),
            queue_wait: entry.queue_wait_secs(),
            processing_time,
            dequeue_count: entry.dequeue_count,
            completed_at: self.clock.now(),
        }
    }

    fn telemetry(&self, entry: &QueueEntry, processing_time: f64) {
        let rec = TelemetryRecord {
            task: entry.task.id,
            queue_wait: entry.queue_wait_secs(),
            processing_time,
            dequeue_count: entry.dequeue_count,
            visibility_transitions: entry.reversions,
            worker: self.config.id.clone(),
        };
        if let Err(e) = self.fabric.record_telemetry(&rec) {
            log::warn!("telemetry for {}: {e}", entry.task.id);
        }
    }

    /// One iteration of the loop: claim at most one entry and carry it to a terminal state.
    pub fn run_once(&mut self) -> Result<Step, FabricError> {
        match self.claim()? {
            Claim::Empty => Ok(Step::Idle),
            Claim::Exhausted(entry) => {
                self.report_exhausted(&entry)?;
                Ok(Step::ReportedExhausted(entry.task.id))
            }
            Claim::Task(claimed) => {
                let task = claimed.entry.task.id;
                log::info!("{}: running {task} (attempt {})", self.config.id, claimed.entry.dequeue_count);
                let executed = self.execute(claimed);
                let executed = match executed {
                    Ok(x) => x,
                    Err(e) => {
                        self.current_task = None;
                        return Err(e);
                    }
                };
                let outcome = executed.outcome.kind;
                let disposition = self.publish_or_discard(executed)?;
                Ok(Step::Finished {
                    task,
                    outcome,
                    disposition,
                })
            }
        }
    }

    /// Polls until `shutdown` is set. An in-flight task always runs to completion first.
    pub fn run(&mut self, shutdown: &AtomicBool) {
        let mut backoff = self.config.poll_interval;
        while !shutdown.load(Ordering::SeqCst) {
            match self.run_once() {
                Ok(Step::Idle) => {
                    backoff = self.config.poll_interval;
                    sleep_unless(shutdown, self.config.poll_interval);
                }
                Ok(_) => backoff = self.config.poll_interval,
                Err(e @ FabricError::Unreachable(_)) => {
                    log::warn!("{}: fabric unreachable, retrying in {backoff:?}: {e}", self.config.id);
                    sleep_unless(shutdown, backoff);
                    backoff = (backoff * 2).min(self.config.max_backoff).max(Duration::from_millis(10));
                }
                Err(e) => {
                    log::error!("{}: {e}", self.config.id);
                    sleep_unless(shutdown, self.config.poll_interval);
                }
            }
        }
    }
}

fn sleep_unless(shutdown: &AtomicBool, total: Duration) {
    let deadline = Instant::now() + total;
    while !shutdown.load(Ordering::SeqCst) {
        let left = deadline.saturating_duration_since(Instant::now());
        if left.is_zero() {
            break;
        }
        std::thread::sleep(left.min(Duration::from_millis(50)));
    }
}
