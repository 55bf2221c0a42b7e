//! The client side: build modules, fan modules × rules into checks, then run them on the
//! fabric (submit, poll the result topic, deduplicate) or on the local machine.

pub mod manifest;
pub mod pipeline;

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{mpsc, Mutex};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

pub use manifest::{Backend, LocalOptions, Manifest, ManifestError, ModuleSpec, PipelineHooks};
pub use pipeline::{run_pipeline, ArtifactSet, Invocation, PipelineError, Station};

use crate::clock::{Clock, SystemClock};
use crate::fabric::{Fabric, FabricError, HttpFabric};
use crate::model::{
    new_task_id, BlobRef, ClientId, OutcomeKind, ResultRecord, TaskId, TaskSpec, Timestamp,
};
use crate::store::{build_zip, sha256_hex};
use crate::worker::{run_staged, stage_payload};

/// Container the client uploads task payloads into.
pub const PAYLOAD_CONTAINER: &str = "payloads";
/// File inside each payload naming the rule to check.
pub const RULE_FILE: &str = "rule";
/// Default interval between result-topic polls.
pub const DEFAULT_POLL_INTERVAL: Duration = Duration::from_secs(2);

/// A task together with its payload archive, ready for submission or local execution.
#[derive(Clone, Debug)]
pub struct PreparedTask {
    pub spec: TaskSpec,
    pub payload: Vec<u8>,
}

fn expand_template(template: &str, rule: &str, module: &str, version: &str) -> String {
    template
        .replace("{rule}", rule)
        .replace("{module}", module)
        .replace("{version}", version)
}

/// Expands every built module against every rule. Modules absent from `built` (their
/// pipeline failed) contribute no tasks. Output is grouped by module, rules in manifest order.
pub fn generate_checks(
    manifest: &Manifest,
    client: ClientId,
    built: &[ArtifactSet],
    now: Timestamp,
) -> Vec<PreparedTask> {
    let by_name: HashMap<&str, &ArtifactSet> = built.iter().map(|a| (a.module.as_str(), a)).collect();
    let mut tasks = Vec::with_capacity(manifest.check_count());
    for module in &manifest.modules {
        let Some(artifacts) = by_name.get(module.name.as_str()) else {
            continue;
        };
        let template = manifest
            .template_for(module)
            .expect("validated manifest has a template");
        for rule in &manifest.rules {
            let id = new_task_id();
            let mut files: Vec<(&str, &[u8], bool)> = artifacts
                .files
                .iter()
                .map(|(n, b)| (n.as_str(), b.as_slice(), false))
                .collect();
            files.push((RULE_FILE, rule.as_bytes(), false));
            let payload = build_zip(files);
            let blob = BlobRef {
                container: PAYLOAD_CONTAINER.into(),
                name: format!("{id}.zip"),
                content_hash: sha256_hex(&payload),
            };
            tasks.push(PreparedTask {
                spec: TaskSpec {
                    id,
                    client,
                    module_name: module.name.clone(),
                    rule_name: rule.clone(),
                    version: manifest.version.clone(),
                    command: expand_template(template, rule, &module.name, manifest.version.as_str()),
                    payload: vec![blob],
                    limits: manifest.limits,
                    submitted_at: now,
                },
                payload,
            });
        }
    }
    tasks
}

/// Orders tasks for submission: modules are taken in windows of `parallelism` (the builds that
/// would finish together) and tasks within a window are interleaved round-robin.
pub fn interleave(tasks: Vec<PreparedTask>, parallelism: usize) -> Vec<PreparedTask> {
    let mut modules: Vec<Vec<PreparedTask>> = Vec::new();
    for t in tasks {
        match modules.last_mut() {
            Some(group) if group[0].spec.module_name == t.spec.module_name => group.push(t),
            _ => modules.push(vec![t]),
        }
    }
    let mut out = Vec::new();
    for window in modules.chunks_mut(parallelism.max(1)) {
        let mut iters: Vec<_> = window.iter_mut().map(|g| std::mem::take(g).into_iter()).collect();
        loop {
            let before = out.len();
            for it in &mut iters {
                out.extend(it.next());
            }
            if out.len() == before {
                break;
            }
        }
    }
    out
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SubmissionReceipt {
    pub client: ClientId,
    pub task_ids: Vec<TaskId>,
    /// Tasks that were not enqueued, with the reason.
    pub failed: Vec<(TaskId, String)>,
}

/// Uploads each task's payload, then enqueues it. A task whose upload fails is not enqueued.
pub fn submit(fabric: &dyn Fabric, client: ClientId, tasks: &[PreparedTask]) -> Result<SubmissionReceipt, FabricError> {
    let mut receipt = SubmissionReceipt {
        client,
        ..SubmissionReceipt::default()
    };
    for task in tasks {
        let mut uploaded = Ok(());
        for blob in &task.spec.payload {
            match fabric.put_blob(&blob.container, &blob.name, &task.payload) {
                Ok(stored) if stored.content_hash == blob.content_hash => {}
                Ok(stored) => {
                    uploaded = Err(format!(
                        "payload hash mismatch: expected {}, stored {}",
                        blob.content_hash, stored.content_hash
                    ))
                }
                Err(e @ FabricError::Unreachable(_)) => return Err(e),
                Err(e) => uploaded = Err(format!("payload upload failed: {e}")),
            }
        }
        if let Err(reason) = uploaded {
            log::warn!("task {} not submitted: {reason}", task.spec.id);
            receipt.failed.push((task.spec.id, reason));
            continue;
        }
        match fabric.enqueue(&task.spec) {
            Ok(_) => receipt.task_ids.push(task.spec.id),
            Err(e @ FabricError::Unreachable(_)) => return Err(e),
            Err(e) => receipt.failed.push((task.spec.id, format!("enqueue failed: {e}"))),
        }
    }
    Ok(receipt)
}

/// First record per task, as seen on the client's topic.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Collected {
    pub records: BTreeMap<TaskId, ResultRecord>,
    pub duplicates: usize,
    pub unresolved: Vec<TaskId>,
}

/// Polls the client's topic until every submitted task has a record or `deadline` passes.
pub fn await_results(
    fabric: &dyn Fabric,
    receipt: &SubmissionReceipt,
    poll_interval: Duration,
    deadline: Option<Duration>,
) -> Result<Collected, FabricError> {
    let started = Instant::now();
    let topic = receipt.client.to_string();
    let wanted: std::collections::HashSet<TaskId> = receipt.task_ids.iter().copied().collect();
    let mut collected = Collected::default();
    let mut cursor = 0;
    loop {
        let (records, next) = fabric.poll(&topic, cursor)?;
        cursor = next;
        for rec in records {
            if !wanted.contains(&rec.task) {
                continue;
            }
            match collected.records.entry(rec.task) {
                std::collections::btree_map::Entry::Occupied(_) => collected.duplicates += 1,
                std::collections::btree_map::Entry::Vacant(slot) => {
                    slot.insert(rec);
                }
            }
        }
        if collected.records.len() == wanted.len() {
            return Ok(collected);
        }
        if deadline.is_some_and(|d| started.elapsed() >= d) {
            collected.unresolved = receipt
                .task_ids
                .iter()
                .filter(|id| !collected.records.contains_key(id))
                .copied()
                .collect();
            return Ok(collected);
        }
        std::thread::sleep(poll_interval);
    }
}

/// One execution on the local backend, seconds since the run started.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExecSpan {
    pub task: TaskId,
    pub slot: usize,
    pub start: f64,
    pub end: f64,
}

impl ExecSpan {
    /// Largest number of spans overlapping at any instant.
    pub fn max_concurrency(spans: &[ExecSpan]) -> usize {
        let mut edges: Vec<(f64, i32)> = spans.iter().flat_map(|s| [(s.start, 1), (s.end, -1)]).collect();
        // Ends sort before starts at the same instant.
        edges.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let mut cur = 0i32;
        let mut max = 0i32;
        for (_, d) in edges {
            cur += d;
            max = max.max(cur);
        }
        max as usize
    }
}

/// Runs tasks on this machine with at most `cores` at once, in task order.
pub fn run_local(
    tasks: &[PreparedTask],
    tool_dir: &Path,
    cores: usize,
    work_root: &Path,
) -> std::io::Result<(Vec<ResultRecord>, Vec<ExecSpan>)> {
    std::fs::create_dir_all(work_root)?;
    let clock = SystemClock;
    let started = Instant::now();
    let next = AtomicUsize::new(0);
    let results = Mutex::new(Vec::with_capacity(tasks.len()));
    let spans = Mutex::new(Vec::with_capacity(tasks.len()));
    std::thread::scope(|scope| {
        for slot in 0..cores.max(1).min(tasks.len().max(1)) {
            let (next, results, spans, clock) = (&next, &results, &spans, &clock);
            scope.spawn(move || loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(task) = tasks.get(i) else { break };
                let begin = started.elapsed().as_secs_f64();
                let outcome = match tempfile::Builder::new()
                    .prefix(&format!("{}-", task.spec.id))
                    .tempdir_in(work_root)
                {
                    Ok(dir) => {
                        let staged = task
                            .spec
                            .payload
                            .iter()
                            .try_for_each(|b| stage_payload(dir.path(), &b.name, &task.payload));
                        match staged {
                            Ok(()) => run_staged(&task.spec, tool_dir, dir.path()).0,
                            Err(e) => crate::model::Outcome::with_detail(OutcomeKind::ToolError, e),
                        }
                    }
                    Err(e) => crate::model::Outcome::with_detail(OutcomeKind::ToolError, e.to_string()),
                };
                let end = started.elapsed().as_secs_f64();
                lock(spans).push(ExecSpan {
                    task: task.spec.id,
                    slot,
                    start: begin,
                    end,
                });
                lock(results).push(ResultRecord {
                    task: task.spec.id,
                    client: task.spec.client,
                    outcome,
                    worker: format!("local-{slot}"),
                    queue_wait: begin,
                    processing_time: end - begin,
                    dequeue_count: 1,
                    completed_at: clock.now(),
                });
            });
        }
    });
    let mut spans = spans.into_inner().unwrap_or_else(|e| e.into_inner());
    spans.sort_by(|a, b| a.start.total_cmp(&b.start));
    Ok((results.into_inner().unwrap_or_else(|e| e.into_inner()), spans))
}

fn lock<T>(m: &Mutex<T>) -> std::sync::MutexGuard<'_, T> {
    m.lock().unwrap_or_else(|e| e.into_inner())
}

/// Client-side category for a task: one of the six outcome kinds, or `Unresolved`.
pub const UNRESOLVED: &str = "Unresolved";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskReport {
    pub task: TaskId,
    pub module: String,
    pub rule: String,
    /// Outcome kind name, or `Unresolved`.
    pub kind: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub record: Option<ResultRecord>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ModuleRollup {
    pub name: String,
    pub counts: BTreeMap<String, usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub client: ClientId,
    pub backend: String,
    pub tasks: Vec<TaskReport>,
    pub modules: Vec<ModuleRollup>,
    pub counts: BTreeMap<String, usize>,
    pub duplicates: usize,
    /// Tasks that never reached the queue.
    pub submit_failures: Vec<(TaskId, String)>,
    pub wall_clock: f64,
}

impl RunReport {
    pub fn count(&self, kind: &str) -> usize {
        self.counts.get(kind).copied().unwrap_or(0)
    }

    /// No defects, tool errors, unresolved tasks, failed modules or unsubmitted tasks.
    pub fn is_clean(&self) -> bool {
        [OutcomeKind::Defect.as_str(), OutcomeKind::ToolError.as_str(), UNRESOLVED]
            .iter()
            .all(|k| self.count(k) == 0)
            && self.modules.iter().all(|m| m.error.is_none())
            && self.submit_failures.is_empty()
    }

    /// Assembles the report from the generated tasks and whatever records arrived.
    pub fn assemble(
        client: ClientId,
        backend: &str,
        manifest: &Manifest,
        tasks: &[PreparedTask],
        records: &BTreeMap<TaskId, ResultRecord>,
        module_errors: &BTreeMap<String, String>,
        module_warnings: &BTreeMap<String, Vec<String>>,
    ) -> Self {
        let mut report = RunReport {
            client,
            backend: backend.into(),
            ..RunReport::default()
        };
        let mut rollups: BTreeMap<&str, ModuleRollup> = manifest
            .modules
            .iter()
            .map(|m| {
                (
                    m.name.as_str(),
                    ModuleRollup {
                        name: m.name.clone(),
                        error: module_errors.get(&m.name).cloned(),
                        warnings: module_warnings.get(&m.name).cloned().unwrap_or_default(),
                        ..ModuleRollup::default()
                    },
                )
            })
            .collect();
        for t in tasks {
            let record = records.get(&t.spec.id).cloned();
            let kind = record
                .as_ref()
                .map_or(UNRESOLVED, |r| r.outcome.kind.as_str())
                .to_owned();
            *report.counts.entry(kind.clone()).or_default() += 1;
            if let Some(r) = rollups.get_mut(t.spec.module_name.as_str()) {
                *r.counts.entry(kind.clone()).or_default() += 1;
            }
            report.tasks.push(TaskReport {
                task: t.spec.id,
                module: t.spec.module_name.clone(),
                rule: t.spec.rule_name.clone(),
                kind,
                record,
            });
        }
        report.modules = manifest
            .modules
            .iter()
            .filter_map(|m| rollups.remove(m.name.as_str()))
            .collect();
        report
    }
}

#[derive(Debug, thiserror::Error)]
pub enum OrchestratorError {
    #[error(transparent)]
    Manifest(#[from] ManifestError),
    #[error(transparent)]
    Fabric(#[from] FabricError),
    #[error("local backend needs local.tool_dir in the manifest")]
    NoLocalTool,
    #[error("{0}")]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Debug)]
pub struct RunOptions {
    /// Overrides the manifest's backend.
    pub backend: Option<Backend>,
    pub poll_interval: Duration,
    pub deadline: Option<Duration>,
    /// Scratch space for local execution and hook inputs.
    pub work_dir: Option<PathBuf>,
}

impl Default for RunOptions {
    fn default() -> Self {
        Self {
            backend: None,
            poll_interval: DEFAULT_POLL_INTERVAL,
            deadline: None,
            work_dir: None,
        }
    }
}

/// Runs every module pipeline with at most `compile_parallelism` at once.
pub fn build_all(manifest: &Manifest) -> (Vec<ArtifactSet>, BTreeMap<String, String>) {
    let next = AtomicUsize::new(0);
    let (tx, rx) = mpsc::channel();
    std::thread::scope(|scope| {
        for _ in 0..manifest.compile_parallelism.max(1).min(manifest.modules.len()) {
            let tx = tx.clone();
            let next = &next;
            scope.spawn(move || loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(module) = manifest.modules.get(i) else { break };
                let _ = tx.send((i, run_pipeline(module, &manifest.hooks)));
            });
        }
    });
    drop(tx);
    let mut results: Vec<_> = rx.into_iter().collect();
    results.sort_by_key(|(i, _)| *i);
    let mut built = Vec::new();
    let mut errors = BTreeMap::new();
    for (i, r) in results {
        match r {
            Ok(set) => built.push(set),
            Err(e) => {
                let name = manifest.modules[i].name.clone();
                log::error!("module {name}: {e}");
                errors.insert(name, e.to_string());
            }
        }
    }
    (built, errors)
}

/// Builds, generates, executes on the chosen backend, runs post-analysis hooks and reports.
pub fn run(manifest: &Manifest, opts: &RunOptions) -> Result<RunReport, OrchestratorError> {
    manifest.validate()?;
    let started = Instant::now();
    let client = ClientId::new();
    let (built, mut module_errors) = build_all(manifest);
    let warnings: BTreeMap<String, Vec<String>> = built
        .iter()
        .filter(|a| !a.warnings.is_empty())
        .map(|a| (a.module.clone(), a.warnings.clone()))
        .collect();
    let tasks = interleave(
        generate_checks(manifest, client, &built, SystemClock.now()),
        manifest.compile_parallelism,
    );
    let scratch = match &opts.work_dir {
        Some(d) => {
            std::fs::create_dir_all(d)?;
            tempfile::Builder::new().prefix("run-").tempdir_in(d)?
        }
        None => tempfile::tempdir()?,
    };

    let backend = opts.backend.clone().unwrap_or_else(|| manifest.backend.clone());
    let (name, records, duplicates, submit_failures) = match &backend {
        Backend::Local => {
            let tool_dir = manifest.local.tool_dir.as_ref().ok_or(OrchestratorError::NoLocalTool)?;
            let cores = manifest
                .local
                .cores
                .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
            let (records, _) = run_local(&tasks, tool_dir, cores, &scratch.path().join("work"))?;
            let records = records.into_iter().map(|r| (r.task, r)).collect();
            ("local", records, 0, Vec::new())
        }
        Backend::Cloud { fabric } => {
            let fabric = HttpFabric::new(fabric)?;
            let receipt = submit(&fabric, client, &tasks)?;
            let collected = await_results(&fabric, &receipt, opts.poll_interval, opts.deadline)?;
            let _ = fabric.close_topic(&client.to_string());
            ("cloud", collected.records, collected.duplicates, receipt.failed)
        }
    };
    let submitted: Vec<PreparedTask> = tasks
        .into_iter()
        .filter(|t| !submit_failures.iter().any(|(id, _)| *id == t.spec.id))
        .collect();
    let mut report = RunReport::assemble(client, name, manifest, &submitted, &records, &module_errors, &warnings);
    report.duplicates = duplicates;
    report.submit_failures = submit_failures;

    if manifest.hooks.post_analysis.is_some() {
        for module in &manifest.modules {
            if module_errors.contains_key(&module.name) {
                continue;
            }
            let mine: Vec<&TaskReport> = report.tasks.iter().filter(|t| t.module == module.name).collect();
            let file = scratch.path().join(format!("results-{}.json", sha256_hex(module.name.as_bytes())));
            std::fs::write(&file, serde_json::to_vec_pretty(&mine).expect("serializable"))?;
            if let Err(e) = pipeline::run_post_analysis(module, &manifest.hooks, &file) {
                module_errors.insert(module.name.clone(), e.to_string());
            }
        }
        for m in &mut report.modules {
            m.error = module_errors.get(&m.name).cloned();
        }
    }
    report.wall_clock = started.elapsed().as_secs_f64();
    Ok(report)
}
