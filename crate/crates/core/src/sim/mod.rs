//! Deterministic discrete-event simulation of a farm run: client compile pipelines submitting
//! checks, the visibility-timeout queue, polling workers, autoscaling and worker crashes, all
//! under virtual time. The queue and the scaling rule are the live implementations.

mod dist;
pub mod presets;

use std::cmp::Reverse;
use std::collections::{BTreeMap, BinaryHeap};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use dist::Dist;

use crate::autoscale::{apply, evaluate, AutoscalePolicy, LaunchError, Launcher};
use crate::model::{ClientId, ResourceLimits, TaskId, TaskSpec, Timestamp, ToolVersionId};
use crate::queue::{Dequeue, Queue, QueueConfig, Receipt};
use crate::stats::Summary;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Suite {
    pub modules: usize,
    pub rules_per_module: usize,
}

impl Suite {
    pub fn checks(&self) -> usize {
        self.modules * self.rules_per_module
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub seed: u64,
    pub suite: Suite,
    /// Seconds per check, also used for the local baseline.
    pub service_time: Dist,
    /// Seconds to build a module and prepare its per-rule inputs on the client.
    pub compile_time: Dist,
    /// Concurrent compile pipelines on the client.
    pub compile_parallelism: usize,
    /// Seconds per task for payload upload plus enqueue.
    pub submit_overhead: Dist,
    pub policy: AutoscalePolicy,
    /// Seconds between polls of an idle worker.
    pub worker_poll_interval: f64,
    /// Probability that a worker dies during any single attempt.
    #[serde(default)]
    pub crash_probability: f64,
    #[serde(default)]
    pub queue: QueueConfig,
    /// Per-task timeout, seconds; sets the invisibility period.
    pub task_timeout: u64,
    /// Logical cores of the machine running the local baseline.
    pub local_cores: usize,
}

impl SimConfig {
    pub fn validate(&self) -> Result<(), String> {
        let mut problems = Vec::new();
        if self.suite.modules < 1 || self.suite.rules_per_module < 1 {
            problems.push("suite counts must be ≥ 1".to_owned());
        }
        if self.compile_parallelism < 1 || self.local_cores < 1 || self.task_timeout < 1 {
            problems.push("compile_parallelism, local_cores and task_timeout must be ≥ 1".to_owned());
        }
        #[allow(clippy::neg_cmp_op_on_partial_ord)] // also rejects NaN
        if !(self.worker_poll_interval > 0.0) {
            problems.push("worker_poll_interval must be > 0".to_owned());
        }
        if !(0.0..=1.0).contains(&self.crash_probability) {
            problems.push("crash_probability must be in [0, 1]".to_owned());
        }
        if self.queue.dequeue_limit < 1 {
            problems.push("dequeue_limit must be ≥ 1".to_owned());
        }
        if self.policy.min_instances < 1 {
            // An empty pool with a sub-threshold backlog would never drain.
            problems.push("policy.min must be ≥ 1".to_owned());
        }
        for d in [&self.service_time, &self.compile_time, &self.submit_overhead] {
            if let Err(e) = d.validate() {
                problems.push(e);
            }
        }
        if let Err(e) = self.policy.validate() {
            problems.push(e);
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(problems.join("; "))
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimReport {
    /// Virtual seconds from the first compile start to the last task resolution.
    pub makespan: f64,
    /// Virtual seconds per wall-clock second of the modeled system.
    pub time_scale: f64,
    pub enqueued: usize,
    pub completed: usize,
    /// Tasks dropped at the dequeue limit and reported as tool errors.
    pub exhausted: usize,
    /// First-dequeue wait of every completed task, in task order.
    pub waits: Vec<f64>,
    pub wait_stats: Summary,
    /// `(time, active workers)` at every change.
    pub worker_timeline: Vec<(f64, usize)>,
    /// Results produced for a task that was already resolved.
    pub duplicate_processing: usize,
    /// Dequeue count at resolution → number of tasks.
    pub dequeue_histogram: BTreeMap<u32, usize>,
    pub crashes: usize,
    pub events: u64,
    pub trace_hash: String,
}

impl SimReport {
    pub fn peak_workers(&self) -> usize {
        self.worker_timeline.iter().map(|&(_, n)| n).max().unwrap_or(0)
    }
}

/// Sample statistics over first-dequeue waits.
pub fn wait_statistics(report: &SimReport) -> Summary {
    Summary::of(&report.waits)
}

// Random streams are keyed by entity so that, e.g., adding workers leaves service draws alone.
const STREAM_COMPILE: u64 = 1;
const STREAM_SUBMIT: u64 = 2;
const STREAM_SERVICE: u64 = 3;
const STREAM_WORKER: u64 = 4;
const STREAM_SCALE: u64 = 5;

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn stream(seed: u64, parts: &[u64]) -> ChaCha8Rng {
    let mut h = splitmix(seed);
    for &p in parts {
        h = splitmix(h ^ splitmix(p));
    }
    ChaCha8Rng::seed_from_u64(h)
}

fn secs_to_ms(s: f64) -> Timestamp {
    (s * 1000.0).round().max(0.0) as Timestamp
}

fn ms_to_s(ms: Timestamp) -> f64 {
    ms as f64 / 1000.0
}

fn compile_ms(cfg: &SimConfig, module: usize) -> Timestamp {
    secs_to_ms(cfg.compile_time.sample(&mut stream(cfg.seed, &[STREAM_COMPILE, module as u64])))
}

fn service_ms(cfg: &SimConfig, task: usize, attempt: u32) -> Timestamp {
    let mut rng = stream(cfg.seed, &[STREAM_SERVICE, task as u64, attempt as u64]);
    let s = cfg.service_time.sample(&mut rng).min(cfg.task_timeout as f64);
    secs_to_ms(s)
}

/// Whether this attempt crashes, and after how long.
fn crash_after_ms(cfg: &SimConfig, task: usize, attempt: u32, service: Timestamp) -> Option<Timestamp> {
    if cfg.crash_probability <= 0.0 {
        return None;
    }
    let mut rng = stream(cfg.seed, &[STREAM_SERVICE, task as u64, attempt as u64, 1]);
    (rng.random::<f64>() < cfg.crash_probability).then(|| (service as f64 * rng.random::<f64>()) as Timestamp)
}

/// Makespan of the single-machine baseline: one module at a time, compile then its checks on
/// `local_cores`, each core taking the next check as soon as it is free.
pub fn simulate_local(cfg: &SimConfig) -> f64 {
    let rules = cfg.suite.rules_per_module;
    let mut t: Timestamp = 0;
    for m in 0..cfg.suite.modules {
        t += compile_ms(cfg, m);
        let mut cores: BinaryHeap<Reverse<Timestamp>> = (0..cfg.local_cores).map(|_| Reverse(t)).collect();
        let mut end = t;
        for r in 0..rules {
            let Reverse(free) = cores.pop().expect("at least one core");
            let done = free + service_ms(cfg, m * rules + r, 1);
            end = end.max(done);
            cores.push(Reverse(done));
        }
        t = end;
    }
    ms_to_s(t)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    TaskCompleted,
    WorkerCrash,
    VisibilityExpired,
    ModuleCompiled,
    TaskEnqueued,
    WorkerReady,
    ScaleTick,
    WorkerPoll,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Event {
    ModuleCompiled { module: usize },
    TaskEnqueued { task: usize },
    WorkerPoll { worker: usize },
    TaskCompleted { worker: usize },
    ScaleTick,
    WorkerReady { worker: usize },
    WorkerCrash { worker: usize },
    VisibilityExpired,
}

impl Event {
    fn kind(&self) -> EventKind {
        match self {
            Event::ModuleCompiled { .. } => EventKind::ModuleCompiled,
            Event::TaskEnqueued { .. } => EventKind::TaskEnqueued,
            Event::WorkerPoll { .. } => EventKind::WorkerPoll,
            Event::TaskCompleted { .. } => EventKind::TaskCompleted,
            Event::ScaleTick => EventKind::ScaleTick,
            Event::WorkerReady { .. } => EventKind::WorkerReady,
            Event::WorkerCrash { .. } => EventKind::WorkerCrash,
            Event::VisibilityExpired => EventKind::VisibilityExpired,
        }
    }

    fn subject(&self) -> u64 {
        match *self {
            Event::ModuleCompiled { module } => module as u64,
            Event::TaskEnqueued { task } => task as u64,
            Event::WorkerPoll { worker }
            | Event::TaskCompleted { worker }
            | Event::WorkerReady { worker }
            | Event::WorkerCrash { worker } => worker as u64,
            Event::ScaleTick | Event::VisibilityExpired => 0,
        }
    }
}

struct Scheduled {
    at: Timestamp,
    kind: EventKind,
    seq: u64,
    event: Event,
}

impl Scheduled {
    fn key(&self) -> (Timestamp, EventKind, u64) {
        (self.at, self.kind, self.seq)
    }
}

impl PartialEq for Scheduled {
    fn eq(&self, other: &Self) -> bool {
        self.key() == other.key()
    }
}
impl Eq for Scheduled {}
impl PartialOrd for Scheduled {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Scheduled {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.key().cmp(&other.key())
    }
}

#[derive(Clone, Debug, PartialEq)]
enum WorkerState {
    Starting,
    Idle { since: Timestamp },
    Busy { task: usize, receipt: Receipt },
}

#[derive(Debug)]
struct Worker {
    state: WorkerState,
    poll_pending: bool,
    launches: u64,
}

/// Collects launches requested by the scaling rule.
struct VirtualLauncher<'a> {
    instances: usize,
    ready: &'a mut Vec<Timestamp>,
}

impl Launcher for VirtualLauncher<'_> {
    fn launch(&mut self, ready_at: Timestamp) -> Result<(), LaunchError> {
        self.ready.push(ready_at);
        Ok(())
    }
    fn instances(&mut self) -> usize {
        self.instances + self.ready.len()
    }
}

struct Engine<'a> {
    cfg: &'a SimConfig,
    poll_ms: Timestamp,
    heap: BinaryHeap<Reverse<Scheduled>>,
    seq: u64,
    queue: Queue,
    workers: Vec<Worker>,
    active: usize,
    next_module: usize,
    resolved: Vec<bool>,
    outstanding: usize,
    waits: Vec<Option<f64>>,
    completed_flags: Vec<bool>,
    report: SimReport,
    hasher: Sha256,
    last_resolution: Timestamp,
    ticks: u64,
}

/// Runs the event loop to quiescence.
pub fn simulate(cfg: &SimConfig) -> Result<SimReport, String> {
    cfg.validate()?;
    let n = cfg.suite.checks();
    let mut engine = Engine {
        cfg,
        poll_ms: secs_to_ms(cfg.worker_poll_interval).max(1),
        heap: BinaryHeap::new(),
        seq: 0,
        queue: Queue::new(cfg.queue),
        workers: Vec::new(),
        active: 0,
        next_module: 0,
        resolved: vec![false; n],
        outstanding: n,
        waits: vec![None; n],
        completed_flags: vec![false; n],
        report: SimReport {
            makespan: 0.0,
            time_scale: 1.0,
            enqueued: 0,
            completed: 0,
            exhausted: 0,
            waits: Vec::new(),
            wait_stats: Summary::default(),
            worker_timeline: vec![(0.0, 0)],
            duplicate_processing: 0,
            dequeue_histogram: BTreeMap::new(),
            crashes: 0,
            events: 0,
            trace_hash: String::new(),
        },
        hasher: Sha256::new(),
        last_resolution: 0,
        ticks: 0,
    };
    engine.run()?;
    Ok(engine.finish())
}

impl Engine<'_> {
    fn schedule(&mut self, at: Timestamp, event: Event) {
        self.seq += 1;
        self.heap.push(Reverse(Scheduled {
            at,
            kind: event.kind(),
            seq: self.seq,
            event,
        }));
    }

    fn task_spec(&self, index: usize, now: Timestamp) -> TaskSpec {
        TaskSpec {
            id: TaskId::from_u128(index as u128 + 1),
            client: ClientId::from_u128(0),
            module_name: format!("m{}", index / self.cfg.suite.rules_per_module),
            rule_name: format!("r{}", index % self.cfg.suite.rules_per_module),
            version: ToolVersionId::new("sim"),
            command: "sim".into(),
            payload: Vec::new(),
            limits: ResourceLimits {
                timeout: self.cfg.task_timeout,
                spaceout: 1,
            },
            submitted_at: now,
        }
    }

    fn set_active(&mut self, t: Timestamp, delta: isize) {
        self.active = (self.active as isize + delta) as usize;
        let at = ms_to_s(t);
        match self.report.worker_timeline.last_mut() {
            Some(last) if last.0 == at => last.1 = self.active,
            _ => self.report.worker_timeline.push((at, self.active)),
        }
    }

    fn add_worker(&mut self, ready_at: Timestamp) {
        let id = self.workers.len();
        self.workers.push(Worker {
            state: WorkerState::Starting,
            poll_pending: false,
            launches: 1,
        });
        self.schedule(ready_at, Event::WorkerReady { worker: id });
    }

    fn start_pipeline(&mut self, t: Timestamp) {
        if self.next_module < self.cfg.suite.modules {
            let m = self.next_module;
            self.next_module += 1;
            self.schedule(t + compile_ms(self.cfg, m), Event::ModuleCompiled { module: m });
        }
    }

    fn run(&mut self) -> Result<(), String> {
        for _ in 0..self.cfg.compile_parallelism {
            self.start_pipeline(0);
        }
        for _ in 0..self.cfg.policy.min_instances {
            self.add_worker(0);
        }
        if self.cfg.policy.max_instances > self.cfg.policy.min_instances {
            self.schedule(self.cfg.policy.eval_interval * 1000, Event::ScaleTick);
        }
        // Every event either resolves work or is bounded by it; this guards against bugs.
        let budget = 1_000 + 200 * self.cfg.suite.checks() as u64 * (self.cfg.queue.dequeue_limit as u64 + 1);
        while let Some(Reverse(s)) = self.heap.pop() {
            self.report.events += 1;
            if self.report.events > budget {
                return Err("simulation did not quiesce".into());
            }
            self.hasher.update(format!("{} {:?} {} {}\n", s.at, s.kind, s.seq, s.event.subject()));
            self.handle(s.at, s.event)?;
        }
        if self.outstanding != 0 {
            return Err(format!("{} tasks never resolved", self.outstanding));
        }
        Ok(())
    }

    fn handle(&mut self, t: Timestamp, event: Event) -> Result<(), String> {
        match event {
            Event::ModuleCompiled { module } => {
                let rules = self.cfg.suite.rules_per_module;
                let mut at = t;
                for r in 0..rules {
                    let task = module * rules + r;
                    let mut rng = stream(self.cfg.seed, &[STREAM_SUBMIT, task as u64]);
                    at += secs_to_ms(self.cfg.submit_overhead.sample(&mut rng));
                    self.schedule(at, Event::TaskEnqueued { task });
                }
                self.start_pipeline(at);
            }
            Event::TaskEnqueued { task } => {
                let spec = self.task_spec(task, t);
                self.queue.enqueue(spec, t).map_err(|e| e.to_string())?;
                self.report.enqueued += 1;
                self.wake(t);
            }
            Event::VisibilityExpired => {
                self.queue.revert_expired(t).map_err(|e| e.to_string())?;
                self.wake(t);
            }
            Event::WorkerReady { worker } => {
                self.set_active(t, 1);
                self.workers[worker].state = WorkerState::Idle { since: t };
                self.workers[worker].poll_pending = true;
                self.schedule(t, Event::WorkerPoll { worker });
            }
            Event::WorkerPoll { worker } => self.poll(t, worker)?,
            Event::TaskCompleted { worker } => {
                let WorkerState::Busy { task, receipt } = self.workers[worker].state.clone() else {
                    return Err(format!("worker {worker} completed without a task"));
                };
                let id = TaskId::from_u128(task as u128 + 1);
                let count = self.queue.get(id).map(|e| e.dequeue_count);
                if let Some(count) = count {
                    // Publish, then delete with our receipt.
                    self.resolve(t, task, count, true);
                    self.queue.delete(id, &receipt).map_err(|e| e.to_string())?;
                } else {
                    // Someone else finished it first: discard.
                    self.report.duplicate_processing += 1;
                }
                self.workers[worker].state = WorkerState::Idle { since: t };
                self.workers[worker].poll_pending = true;
                self.schedule(t, Event::WorkerPoll { worker });
            }
            Event::WorkerCrash { worker } => {
                self.report.crashes += 1;
                self.set_active(t, -1);
                if let WorkerState::Busy { task, .. } = self.workers[worker].state {
                    // The abandoned entry resurfaces once its invisibility lapses.
                    if let Some(entry) = self.queue.get(TaskId::from_u128(task as u128 + 1)) {
                        let at = entry.invisible_until;
                        self.schedule(at, Event::VisibilityExpired);
                    }
                }
                let w = &mut self.workers[worker];
                w.state = WorkerState::Starting;
                w.poll_pending = false;
                w.launches += 1;
                let mut rng = stream(self.cfg.seed, &[STREAM_WORKER, worker as u64, w.launches]);
                let restart = secs_to_ms(self.cfg.policy.draw_startup(&mut rng));
                self.schedule(t + restart, Event::WorkerReady { worker });
            }
            Event::ScaleTick => {
                self.ticks += 1;
                let current = self.workers.len();
                let decision = evaluate(&self.cfg.policy, self.queue.len(), current, t);
                let mut ready = Vec::new();
                let mut rng = stream(self.cfg.seed, &[STREAM_SCALE, self.ticks]);
                apply(
                    &self.cfg.policy,
                    &decision,
                    &mut VirtualLauncher {
                        instances: current,
                        ready: &mut ready,
                    },
                    &mut rng,
                );
                for at in ready {
                    self.add_worker(at);
                }
                if self.outstanding > 0 {
                    self.schedule(t + self.cfg.policy.eval_interval * 1000, Event::ScaleTick);
                }
            }
        }
        Ok(())
    }

    fn poll(&mut self, t: Timestamp, worker: usize) -> Result<(), String> {
        let w = &mut self.workers[worker];
        if !matches!(w.state, WorkerState::Idle { .. }) || !w.poll_pending {
            return Ok(());
        }
        w.poll_pending = false;
        match self.queue.dequeue(t).map_err(|e| e.to_string())? {
            Dequeue::Empty => {
                self.workers[worker].state = WorkerState::Idle { since: t };
            }
            Dequeue::Exhausted { entry } => {
                let task = (entry.task.id.as_u128() - 1) as usize;
                self.resolve(t, task, entry.dequeue_count, false);
                self.workers[worker].poll_pending = true;
                self.schedule(t, Event::WorkerPoll { worker });
            }
            Dequeue::Dequeued { entry, receipt } => {
                let task = (entry.task.id.as_u128() - 1) as usize;
                if entry.dequeue_count == 1 {
                    self.waits[task] = Some(ms_to_s(t - entry.enqueued_at));
                }
                let service = service_ms(self.cfg, task, entry.dequeue_count);
                self.workers[worker].state = WorkerState::Busy { task, receipt };
                match crash_after_ms(self.cfg, task, entry.dequeue_count, service) {
                    Some(after) => self.schedule(t + after, Event::WorkerCrash { worker }),
                    None => self.schedule(t + service, Event::TaskCompleted { worker }),
                }
            }
        }
        Ok(())
    }

    /// Schedules polls for idle workers until every visible entry has a poll coming. Each idle
    /// worker polls on a grid anchored at its last empty poll; the earliest grid point wins.
    fn wake(&mut self, t: Timestamp) {
        let pending = self.workers.iter().filter(|w| w.poll_pending).count();
        let mut demand = self.queue.visible_len().saturating_sub(pending);
        while demand > 0 {
            let next = self
                .workers
                .iter()
                .enumerate()
                .filter_map(|(i, w)| match w.state {
                    WorkerState::Idle { since } if !w.poll_pending => {
                        let k = (t.saturating_sub(since)).div_ceil(self.poll_ms).max(1);
                        Some((since + k * self.poll_ms, i))
                    }
                    _ => None,
                })
                .min();
            let Some((at, worker)) = next else { break };
            self.workers[worker].poll_pending = true;
            self.schedule(at, Event::WorkerPoll { worker });
            demand -= 1;
        }
    }

    fn resolve(&mut self, t: Timestamp, task: usize, dequeue_count: u32, completed: bool) {
        if self.resolved[task] {
            self.report.duplicate_processing += 1;
            return;
        }
        self.resolved[task] = true;
        self.completed_flags[task] = completed;
        self.outstanding -= 1;
        self.last_resolution = self.last_resolution.max(t);
        *self.report.dequeue_histogram.entry(dequeue_count).or_default() += 1;
        if completed {
            self.report.completed += 1;
        } else {
            self.report.exhausted += 1;
        }
    }

    fn finish(mut self) -> SimReport {
        self.report.makespan = ms_to_s(self.last_resolution);
        self.report.waits = self
            .waits
            .iter()
            .zip(&self.completed_flags)
            .filter(|(_, &c)| c)
            .map(|(w, _)| w.unwrap_or(0.0))
            .collect();
        self.report.wait_stats = Summary::of(&self.report.waits);
        self.report.trace_hash = hex::encode(self.hasher.finalize());
        self.report
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentRow {
    pub cap: usize,
    pub makespan: f64,
    pub speedup: f64,
    pub peak_workers: usize,
    pub mean_wait: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentTable {
    pub checks: usize,
    pub local_makespan: f64,
    pub rows: Vec<ExperimentRow>,
    pub time_scale: f64,
}

impl ExperimentTable {
    pub fn row(&self, cap: usize) -> Option<&ExperimentRow> {
        self.rows.iter().find(|r| r.cap == cap)
    }

    /// Table 1 style CSV: checks, local and one column per cap, times as hh:mm.
    pub fn to_csv(&self) -> String {
        let hhmm = |s: f64| {
            let m = (s / 60.0).round() as u64;
            format!("{:02}:{:02}", m / 60, m % 60)
        };
        let mut header = vec!["Checks".to_owned(), "Local".to_owned()];
        let mut row = vec![self.checks.to_string(), hhmm(self.local_makespan)];
        for r in &self.rows {
            header.push(format!("Cloud{}", r.cap));
            row.push(hhmm(r.makespan));
        }
        format!("{}\n{}\n", header.join(","), row.join(","))
    }
}

/// Local baseline plus one cloud run per worker cap.
pub fn run_experiment_table(base: &SimConfig, caps: &[usize]) -> Result<ExperimentTable, String> {
    if caps.is_empty() {
        return Err("caps must be non-empty".into());
    }
    let local = simulate_local(base);
    let mut rows = Vec::new();
    for &cap in caps {
        let mut cfg = base.clone();
        cfg.policy.max_instances = cap;
        cfg.policy.min_instances = cfg.policy.min_instances.min(cap);
        let report = simulate(&cfg)?;
        rows.push(ExperimentRow {
            cap,
            makespan: report.makespan,
            speedup: local / report.makespan,
            peak_workers: report.peak_workers(),
            mean_wait: report.wait_stats.mean,
        });
    }
    Ok(ExperimentTable {
        checks: base.suite.checks(),
        local_makespan: local,
        rows,
        time_scale: 1.0,
    })
}
