//! Work-request queue with visibility timeouts.
//!
//! Entries move through three states:
//!
//! * `S0` visible: waiting for a worker.
//! * `S1` invisible: handed to a worker; hidden until `invisible_until`.
//! * `S2` deleted: gone for good, unreachable by every operation.
//!
//! A dequeue atomically moves the oldest visible entry to `S1`, hiding it for
//! the task timeout plus a buffer, and bumps its dequeue count. An entry whose
//! deadline passes reverts to `S0` keeping its count and FIFO position. A
//! dequeue that would push the count past the limit deletes the entry instead
//! and hands the task back as [`Dequeue::Exhausted`] so the caller can publish
//! a `ToolError`.
//!
//! The same [`Queue`] runs inside the fabric service (wall clock, journaled)
//! and inside the simulator (virtual clock, no journal): every operation takes
//! `now` explicitly.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use uuid::Uuid;

use crate::journal::{Journal, JournalError};
use crate::model::{validate_task, TaskId, TaskSpec, Timestamp, ToolVersionId};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct QueueConfig {
    /// Seconds added to the task timeout to form the invisibility period.
    pub invisibility_buffer: u64,
    /// Maximum number of times an entry may be handed out.
    pub dequeue_limit: u32,
}

impl Default for QueueConfig {
    fn default() -> Self {
        Self {
            invisibility_buffer: 300,
            dequeue_limit: 3,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum EntryState {
    Visible,
    Invisible,
}

impl fmt::Display for EntryState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            EntryState::Visible => f.write_str("visible"),
            EntryState::Invisible => f.write_str("invisible"),
        }
    }
}

/// Token proving ownership of one dequeue of an entry.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Receipt(String);

impl Receipt {
    fn fresh() -> Self {
        Self(Uuid::new_v4().simple().to_string())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl From<&str> for Receipt {
    fn from(s: &str) -> Self {
        Self(s.to_owned())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QueueEntry {
    pub task: TaskSpec,
    pub state: EntryState,
    /// Meaningful only while invisible.
    pub invisible_until: Timestamp,
    pub dequeue_count: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub receipt: Option<Receipt>,
    pub enqueued_at: Timestamp,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub first_dequeued_at: Option<Timestamp>,
    /// Number of S1→S0 reversions so far.
    pub reversions: u32,
    /// FIFO position; assigned at enqueue, never changes.
    pub seq: u64,
}

impl QueueEntry {
    /// Seconds between enqueue and first dequeue (zero if never dequeued).
    pub fn queue_wait_secs(&self) -> f64 {
        self.first_dequeued_at
            .map(|t| t.saturating_sub(self.enqueued_at) as f64 / 1000.0)
            .unwrap_or(0.0)
    }
}

/// Result of a dequeue attempt.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Dequeue {
    Empty,
    Dequeued {
        entry: QueueEntry,
        receipt: Receipt,
    },
    /// The entry hit the dequeue limit and was removed; the caller must publish a `ToolError`.
    Exhausted {
        entry: QueueEntry,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DeleteReport {
    Deleted,
    AlreadyGone,
    StaleReceipt,
}

/// One row of the monitor listing.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SnapshotRow {
    pub id: TaskId,
    pub module_name: String,
    pub rule_name: String,
    pub version: ToolVersionId,
    pub submitted_at: Timestamp,
    pub command: String,
    pub state: EntryState,
    pub dequeue_count: u32,
}

#[derive(Debug, thiserror::Error)]
pub enum QueueError {
    #[error("task {0} is already in the queue")]
    Duplicate(TaskId),
    #[error("invalid task: {}", .0.join("; "))]
    Invalid(Vec<String>),
    #[error(transparent)]
    Journal(#[from] JournalError),
}

/// Mutations as recorded in the journal. Replaying them in order rebuilds the queue exactly.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub(crate) enum QueueOp {
    Enqueue {
        task: TaskSpec,
        at: Timestamp,
    },
    Dequeue {
        id: TaskId,
        receipt: Receipt,
        at: Timestamp,
        invisible_until: Timestamp,
    },
    Revert {
        id: TaskId,
    },
    Delete {
        id: TaskId,
    },
    Restore {
        entry: Box<QueueEntry>,
    },
}

/// The queue state machine.
#[derive(Debug)]
pub struct Queue {
    config: QueueConfig,
    entries: BTreeMap<u64, QueueEntry>,
    by_id: HashMap<TaskId, u64>,
    visible: BTreeSet<u64>,
    deadlines: BTreeSet<(Timestamp, u64)>,
    next_seq: u64,
    journal: Option<Journal>,
}

impl Queue {
    pub fn new(config: QueueConfig) -> Self {
        Self {
            config,
            entries: BTreeMap::new(),
            by_id: HashMap::new(),
            visible: BTreeSet::new(),
            deadlines: BTreeSet::new(),
            next_seq: 0,
            journal: None,
        }
    }

    /// Opens a journaled queue, replaying `path` if it exists, then compacting it.
    pub fn open(config: QueueConfig, path: &Path) -> Result<Self, QueueError> {
        let mut queue = Self::new(config);
        for op in Journal::replay::<QueueOp>(path)? {
            queue.apply(op);
        }
        let journal = Journal::create_compacted(path, queue.compacted_ops())?;
        queue.journal = Some(journal);
        Ok(queue)
    }

    pub fn config(&self) -> QueueConfig {
        self.config
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn visible_len(&self) -> usize {
        self.visible.len()
    }

    pub fn enqueue(&mut self, task: TaskSpec, now: Timestamp) -> Result<Timestamp, QueueError> {
        let violations = validate_task(&task);
        if !violations.is_empty() {
            return Err(QueueError::Invalid(violations));
        }
        if self.by_id.contains_key(&task.id) {
            return Err(QueueError::Duplicate(task.id));
        }
        self.record(QueueOp::Enqueue { task, at: now })?;
        Ok(now)
    }

    pub fn dequeue(&mut self, now: Timestamp) -> Result<Dequeue, QueueError> {
        self.revert_expired(now)?;
        let Some(&seq) = self.visible.iter().next() else {
            return Ok(Dequeue::Empty);
        };
        let entry = &self.entries[&seq];
        let id = entry.task.id;
        if entry.dequeue_count >= self.config.dequeue_limit {
            let entry = entry.clone();
            self.record(QueueOp::Delete { id })?;
            return Ok(Dequeue::Exhausted { entry });
        }
        let invisible_until =
            now + (entry.task.limits.timeout + self.config.invisibility_buffer) * 1000;
        let receipt = Receipt::fresh();
        self.record(QueueOp::Dequeue {
            id,
            receipt: receipt.clone(),
            at: now,
            invisible_until,
        })?;
        Ok(Dequeue::Dequeued {
            entry: self.entries[&seq].clone(),
            receipt,
        })
    }

    /// Moves every invisible entry whose deadline has passed back to visible.
    pub fn revert_expired(&mut self, now: Timestamp) -> Result<usize, QueueError> {
        let expired: Vec<u64> = self
            .deadlines
            .range(..=(now, u64::MAX))
            .map(|&(_, seq)| seq)
            .collect();
        for seq in &expired {
            let id = self.entries[seq].task.id;
            self.record(QueueOp::Revert { id })?;
        }
        Ok(expired.len())
    }

    pub fn delete(&mut self, id: TaskId, receipt: &Receipt) -> Result<DeleteReport, QueueError> {
        let Some(seq) = self.by_id.get(&id) else {
            return Ok(DeleteReport::AlreadyGone);
        };
        if self.entries[seq].receipt.as_ref() != Some(receipt) {
            return Ok(DeleteReport::StaleReceipt);
        }
        self.record(QueueOp::Delete { id })?;
        Ok(DeleteReport::Deleted)
    }

    pub fn exists(&self, id: TaskId) -> bool {
        self.by_id.contains_key(&id)
    }

    pub fn get(&self, id: TaskId) -> Option<&QueueEntry> {
        self.by_id.get(&id).map(|seq| &self.entries[seq])
    }

    /// Earliest pending invisibility deadline, if any entry is invisible.
    pub fn next_deadline(&self) -> Option<Timestamp> {
        self.deadlines.iter().next().map(|&(t, _)| t)
    }

    pub fn entries(&self) -> impl Iterator<Item = &QueueEntry> {
        self.entries.values()
    }

    pub fn snapshot(&self) -> Vec<SnapshotRow> {
        self.entries
            .values()
            .map(|e| SnapshotRow {
                id: e.task.id,
                module_name: e.task.module_name.clone(),
                rule_name: e.task.rule_name.clone(),
                version: e.task.version.clone(),
                submitted_at: e.task.submitted_at,
                command: e.task.command.clone(),
                state: e.state,
                dequeue_count: e.dequeue_count,
            })
            .collect()
    }

    /// Rewrites the journal to one `restore` record per live entry.
    pub fn compact(&mut self) -> Result<(), QueueError> {
        if let Some(journal) = self.journal.as_mut() {
            let ops = Self::restore_ops(&self.entries);
            journal.rewrite(ops)?;
        }
        Ok(())
    }

    fn compacted_ops(&self) -> Vec<QueueOp> {
        Self::restore_ops(&self.entries)
    }

    fn restore_ops(entries: &BTreeMap<u64, QueueEntry>) -> Vec<QueueOp> {
        entries
            .values()
            .map(|e| QueueOp::Restore {
                entry: Box::new(e.clone()),
            })
            .collect()
    }

    fn record(&mut self, op: QueueOp) -> Result<(), QueueError> {
        if let Some(journal) = self.journal.as_mut() {
            journal.append(&op)?;
        }
        self.apply(op);
        if let Some(journal) = self.journal.as_ref() {
            if journal.appended() > 1024 && journal.appended() > 8 * self.entries.len() as u64 {
                self.compact()?;
            }
        }
        Ok(())
    }

    fn apply(&mut self, op: QueueOp) {
        match op {
            QueueOp::Enqueue { task, at } => {
                let seq = self.next_seq;
                self.insert(QueueEntry {
                    task,
                    state: EntryState::Visible,
                    invisible_until: 0,
                    dequeue_count: 0,
                    receipt: None,
                    enqueued_at: at,
                    first_dequeued_at: None,
                    reversions: 0,
                    seq,
                });
            }
            QueueOp::Restore { entry } => self.insert(*entry),
            QueueOp::Dequeue {
                id,
                receipt,
                at,
                invisible_until,
            } => {
                let Some(&seq) = self.by_id.get(&id) else {
                    return;
                };
                let entry = self.entries.get_mut(&seq).expect("indexed entry");
                if entry.state == EntryState::Invisible {
                    self.deadlines.remove(&(entry.invisible_until, seq));
                }
                self.visible.remove(&seq);
                entry.state = EntryState::Invisible;
                entry.invisible_until = invisible_until;
                entry.dequeue_count += 1;
                entry.receipt = Some(receipt);
                entry.first_dequeued_at.get_or_insert(at);
                self.deadlines.insert((invisible_until, seq));
            }
            QueueOp::Revert { id } => {
                let Some(&seq) = self.by_id.get(&id) else {
                    return;
                };
                let entry = self.entries.get_mut(&seq).expect("indexed entry");
                if entry.state == EntryState::Invisible {
                    self.deadlines.remove(&(entry.invisible_until, seq));
                    entry.state = EntryState::Visible;
                    entry.reversions += 1;
                    self.visible.insert(seq);
                }
            }
            QueueOp::Delete { id } => {
                let Some(seq) = self.by_id.remove(&id) else {
                    return;
                };
                if let Some(entry) = self.entries.remove(&seq) {
                    self.visible.remove(&seq);
                    self.deadlines.remove(&(entry.invisible_until, seq));
                }
            }
        }
    }

    fn insert(&mut self, entry: QueueEntry) {
        let seq = entry.seq;
        self.next_seq = self.next_seq.max(seq + 1);
        self.by_id.insert(entry.task.id, seq);
        match entry.state {
            EntryState::Visible => {
                self.visible.insert(seq);
            }
            EntryState::Invisible => {
                self.deadlines.insert((entry.invisible_until, seq));
            }
        }
        self.entries.insert(seq, entry);
    }
}


#[cfg(test)]
mod properties {
    use super::*;
    use crate::model::{new_task_id, ClientId, ResourceLimits};
    use proptest::prelude::*;
    use std::sync::{Arc, Mutex};

    fn task() -> TaskSpec {
        TaskSpec {
            id: new_task_id(),
            client: ClientId::new(),
            module_name: "m".into(),
            rule_name: "r".into(),
            version: "v".into(),
            command: "true".into(),
            payload: vec![],
            limits: ResourceLimits {
                timeout: 1,
                spaceout: 1,
            },
            submitted_at: 0,
        }
    }

    #[derive(Clone, Debug)]
    enum Step {
        Dequeue,
        DeleteLatest,
        Advance(u64),
    }

    fn step() -> impl Strategy<Value = Step> {
        prop_oneof![
            Just(Step::Dequeue),
            Just(Step::DeleteLatest),
            (0u64..3000).prop_map(Step::Advance),
        ]
    }

    #[test]
    fn concurrent_dequeuers_get_one_entry_once() {
        for _ in 0..20 {
            let q = Arc::new(Mutex::new(Queue::new(QueueConfig::default())));
            q.lock().unwrap().enqueue(task(), 0).unwrap();
            let handles: Vec<_> = (0..16)
                .map(|_| {
                    let q = Arc::clone(&q);
                    std::thread::spawn(move || {
                        matches!(q.lock().unwrap().dequeue(0).unwrap(), Dequeue::Dequeued { .. })
                    })
                })
                .collect();
            let wins = handles
                .into_iter()
                .map(|h| h.join().unwrap())
                .filter(|&won| won)
                .count();
            assert_eq!(wins, 1);
        }
    }

    proptest! {
        // Under any schedule of dequeues, deletes and time steps: counts rise by exactly one
        // per dequeue, never exceed the limit, and once the entry is gone it stays gone.
        #[test]
        fn lifecycle_invariants(steps in prop::collection::vec(step(), 1..60), limit in 1u32..5) {
            let mut q = Queue::new(QueueConfig { invisibility_buffer: 0, dequeue_limit: limit });
            let t = task();
            q.enqueue(t.clone(), 0).unwrap();
            let mut now = 0;
            let mut last_count = 0;
            let mut receipts = Vec::new();
            let mut gone = false;
            for s in steps {
                match s {
                    Step::Dequeue => match q.dequeue(now).unwrap() {
                        Dequeue::Dequeued { entry, receipt } => {
                            prop_assert!(!gone);
                            prop_assert_eq!(entry.dequeue_count, last_count + 1);
                            prop_assert!(entry.dequeue_count <= limit);
                            prop_assert!(entry.invisible_until > now);
                            last_count = entry.dequeue_count;
                            receipts.push(receipt);
                        }
                        Dequeue::Exhausted { entry } => {
                            prop_assert_eq!(entry.dequeue_count, limit);
                            gone = true;
                        }
                        Dequeue::Empty => {}
                    },
                    Step::DeleteLatest => {
                        if let Some(r) = receipts.last() {
                            let report = q.delete(t.id, r).unwrap();
                            if report == DeleteReport::Deleted { gone = true; }
                            if gone { prop_assert!(report != DeleteReport::StaleReceipt); }
                        }
                    }
                    Step::Advance(ms) => now += ms,
                }
                prop_assert_eq!(q.exists(t.id), !gone);
            }
        }

        // An entry that is never deleted terminates via exhaustion after exactly `limit` dequeues.
        #[test]
        fn crash_forever_terminates(limit in 1u32..6) {
            let mut q = Queue::new(QueueConfig { invisibility_buffer: 0, dequeue_limit: limit });
            q.enqueue(task(), 0).unwrap();
            let mut handed_out = 0;
            let mut now = 0;
            loop {
                match q.dequeue(now).unwrap() {
                    Dequeue::Dequeued { .. } => handed_out += 1,
                    Dequeue::Exhausted { .. } => break,
                    Dequeue::Empty => {}
                }
                now += 1000;
                prop_assert!(now < 1_000_000);
            }
            prop_assert_eq!(handed_out, limit);
            prop_assert!(q.is_empty());
        }
    }
}
