use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::model::{TaskId, Timestamp};

/// A worker as seen by the fabric through its dequeue calls.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct WorkerInfo {
    pub id: String,
    pub last_seen: Timestamp,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub current_task: Option<TaskId>,
}

#[derive(Debug)]
struct Seen {
    last_seen: Timestamp,
    holding: Option<(TaskId, Timestamp)>,
}

/// Workers are active while they poll within the window, or while they hold an invisible entry.
#[derive(Debug)]
pub(super) struct WorkerRegistry {
    window_ms: u64,
    workers: BTreeMap<String, Seen>,
}

impl WorkerRegistry {
    pub(super) fn new(window_ms: u64) -> Self {
        Self {
            window_ms,
            workers: BTreeMap::new(),
        }
    }

    pub(super) fn observe(&mut self, worker: &str, now: Timestamp, holding: Option<(TaskId, Timestamp)>) {
        self.workers.insert(
            worker.to_owned(),
            Seen {
                last_seen: now,
                holding,
            },
        );
    }

    pub(super) fn active(&mut self, now: Timestamp) -> Vec<WorkerInfo> {
        let window = self.window_ms;
        self.workers.retain(|_, s| {
            now <= s.last_seen + window || s.holding.is_some_and(|(_, until)| now <= until)
        });
        self.workers
            .iter()
            .map(|(id, s)| WorkerInfo {
                id: id.clone(),
                last_seen: s.last_seen,
                current_task: s
                    .holding
                    .filter(|&(_, until)| now <= until)
                    .map(|(task, _)| task),
            })
            .collect()
    }
}
