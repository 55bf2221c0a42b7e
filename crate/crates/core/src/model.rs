//! Domain vocabulary shared by the fabric, workers, orchestrator and simulator.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use uuid::Uuid;

/// Milliseconds since the Unix epoch (or since simulation start under virtual time).
pub type Timestamp = u64;

/// Converts a millisecond span to fractional seconds.
pub fn ms_to_secs(ms: u64) -> f64 {
    ms as f64 / 1000.0
}

macro_rules! uuid_newtype {
    ($(#[$meta:meta])* $name:ident) => {
        $(#[$meta])*
        #[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
        #[serde(transparent)]
        pub struct $name(Uuid);

        impl $name {
            pub fn new() -> Self {
                Self(Uuid::new_v4())
            }

            pub fn from_u128(v: u128) -> Self {
                Self(Uuid::from_u128(v))
            }

            pub fn as_u128(&self) -> u128 {
                self.0.as_u128()
            }
        }

        impl Default for $name {
            fn default() -> Self {
                Self::new()
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                self.0.hyphenated().fmt(f)
            }
        }

        impl FromStr for $name {
            type Err = uuid::Error;

            fn from_str(s: &str) -> Result<Self, Self::Err> {
                Uuid::parse_str(s).map(Self)
            }
        }
    };
}

uuid_newtype!(
    /// Globally unique identifier of one verification task. Stable across requeues.
    TaskId
);
uuid_newtype!(
    /// Identity of one client session; its rendering names the result topic.
    ClientId
);

/// Issues a fresh task identifier.
pub fn new_task_id() -> TaskId {
    TaskId::new()
}

/// Label of a tool package in the version repository. Matching is exact and case-sensitive.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ToolVersionId(String);

impl ToolVersionId {
    pub fn new(name: impl Into<String>) -> Self {
        Self(name.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }

    /// A label is usable as a path component and URL segment.
    pub fn is_valid(&self) -> bool {
        !self.0.is_empty() && is_safe_name(&self.0)
    }
}

impl fmt::Display for ToolVersionId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for ToolVersionId {
    fn from(s: &str) -> Self {
        Self(s.to_owned())
    }
}

/// Names used as single path components: no separators, no dot-only names.
pub fn is_safe_name(s: &str) -> bool {
    !s.is_empty()
        && s != "."
        && s != ".."
        && !s.contains(['/', '\\', '\0'])
}

/// Per-task time (seconds) and memory (megabytes) ceilings.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ResourceLimits {
    pub timeout: u64,
    pub spaceout: u64,
}

impl Default for ResourceLimits {
    fn default() -> Self {
        Self {
            timeout: 3000,
            spaceout: 4096,
        }
    }
}

/// Pointer to a stored blob.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BlobRef {
    pub container: String,
    pub name: String,
    /// Lowercase hex SHA-256 of the contents.
    pub content_hash: String,
}

/// One verification check: module × rule × tool version.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub id: TaskId,
    pub client: ClientId,
    pub module_name: String,
    pub rule_name: String,
    pub version: ToolVersionId,
    pub command: String,
    pub payload: Vec<BlobRef>,
    pub limits: ResourceLimits,
    pub submitted_at: Timestamp,
}

/// Returns one description per violated invariant; empty means well-formed.
pub fn validate_task(spec: &TaskSpec) -> Vec<String> {
    let mut violations = Vec::new();
    if spec.limits.timeout < 1 {
        violations.push("limits.timeout must be ≥ 1".to_owned());
    }
    if spec.limits.spaceout < 1 {
        violations.push("limits.spaceout must be ≥ 1".to_owned());
    }
    if spec.command.trim().is_empty() {
        violations.push("command non-empty".to_owned());
    }
    if !spec.version.is_valid() {
        violations.push("version must be a non-empty name without path separators".to_owned());
    }
    for (i, blob) in spec.payload.iter().enumerate() {
        if !is_safe_name(&blob.container) || !is_safe_name(&blob.name) {
            violations.push(format!("payload[{i}] must name a container and blob"));
        }
    }
    violations
}

/// The closed set of terminal outcome kinds.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum OutcomeKind {
    Pass,
    Defect,
    TimeOut,
    SpaceOut,
    ToolError,
    VersionNotFound,
}

impl OutcomeKind {
    pub const ALL: [OutcomeKind; 6] = [
        OutcomeKind::Pass,
        OutcomeKind::Defect,
        OutcomeKind::TimeOut,
        OutcomeKind::SpaceOut,
        OutcomeKind::ToolError,
        OutcomeKind::VersionNotFound,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            OutcomeKind::Pass => "Pass",
            OutcomeKind::Defect => "Defect",
            OutcomeKind::TimeOut => "TimeOut",
            OutcomeKind::SpaceOut => "SpaceOut",
            OutcomeKind::ToolError => "ToolError",
            OutcomeKind::VersionNotFound => "VersionNotFound",
        }
    }
}

impl fmt::Display for OutcomeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for OutcomeKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        OutcomeKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| format!("unknown outcome kind {s:?}"))
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Outcome {
    pub kind: OutcomeKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub detail: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trace_ref: Option<BlobRef>,
}

impl Outcome {
    pub fn new(kind: OutcomeKind) -> Self {
        Self {
            kind,
            detail: None,
            trace_ref: None,
        }
    }

    pub fn with_detail(kind: OutcomeKind, detail: impl Into<String>) -> Self {
        Self {
            kind,
            detail: Some(detail.into()),
            trace_ref: None,
        }
    }
}

/// Terminal outcome of one task attempt, as published on the client's topic.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultRecord {
    pub task: TaskId,
    pub client: ClientId,
    pub outcome: Outcome,
    pub worker: String,
    /// Seconds between enqueue and first dequeue.
    pub queue_wait: f64,
    /// Seconds spent executing the attempt that produced this record.
    pub processing_time: f64,
    /// Dequeue count of the attempt that produced this record.
    pub dequeue_count: u32,
    pub completed_at: Timestamp,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TelemetryRecord {
    pub task: TaskId,
    pub queue_wait: f64,
    pub processing_time: f64,
    pub dequeue_count: u32,
    /// S1→S0 reversions the entry went through before this attempt.
    pub visibility_transitions: u32,
    pub worker: String,
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::collections::HashSet;

    pub(crate) fn sample_task() -> TaskSpec {
        TaskSpec {
            id: new_task_id(),
            client: ClientId::new(),
            module_name: "fail_driver1".into(),
            rule_name: "SpinLock".into(),
            version: "sdv-2.1".into(),
            command: "run-analysis --rule SpinLock".into(),
            payload: vec![],
            limits: ResourceLimits {
                timeout: 3000,
                spaceout: 512,
            },
            submitted_at: 0,
        }
    }

    #[test]
    fn ids_are_distinct() {
        let a = new_task_id();
        let b = new_task_id();
        assert_ne!(a, b);
        let all: HashSet<_> = (0..10_000).map(|_| new_task_id()).collect();
        assert_eq!(all.len(), 10_000);
    }

    #[test]
    fn id_render_reparses() {
        let id = new_task_id();
        let text = id.to_string();
        assert_eq!(text.len(), 36);
        assert_eq!(text.parse::<TaskId>().unwrap(), id);
    }

    #[test]
    fn validation() {
        assert!(validate_task(&sample_task()).is_empty());

        let mut t = sample_task();
        t.limits.timeout = 0;
        assert_eq!(validate_task(&t), vec!["limits.timeout must be ≥ 1"]);

        let mut t = sample_task();
        t.command = String::new();
        assert_eq!(validate_task(&t), vec!["command non-empty"]);

        let mut t = sample_task();
        t.version = "".into();
        assert_eq!(validate_task(&t).len(), 1);
    }

    #[test]
    fn outcome_kind_strings() {
        let json = serde_json::to_string(&OutcomeKind::VersionNotFound).unwrap();
        assert_eq!(json, "\"VersionNotFound\"");
        for k in OutcomeKind::ALL {
            assert_eq!(k.as_str().parse::<OutcomeKind>().unwrap(), k);
        }
        assert!(serde_json::from_str::<OutcomeKind>("\"Crash\"").is_err());
    }

    fn arb_kind() -> impl Strategy<Value = OutcomeKind> {
        prop::sample::select(OutcomeKind::ALL.to_vec())
    }

    proptest! {
        #[test]
        fn task_spec_json_roundtrip(module in "[a-z_0-9]{1,12}", rule in "[A-Za-z]{1,12}",
                                    timeout in 1u64..100_000, spaceout in 1u64..100_000,
                                    id in any::<u128>(), at in any::<u64>()) {
            let spec = TaskSpec {
                id: TaskId::from_u128(id),
                client: ClientId::from_u128(id.rotate_left(7)),
                module_name: module,
                rule_name: rule,
                version: "v1".into(),
                command: "run".into(),
                payload: vec![BlobRef { container: "c".into(), name: "n".into(), content_hash: "00".into() }],
                limits: ResourceLimits { timeout, spaceout },
                submitted_at: at,
            };
            let text = serde_json::to_string(&spec).unwrap();
            prop_assert_eq!(serde_json::from_str::<TaskSpec>(&text).unwrap(), spec);
        }

        #[test]
        fn result_record_json_roundtrip(kind in arb_kind(), wait in 0.0f64..1e6, proc_time in 0.0f64..1e6,
                                        count in 1u32..10, detail in proptest::option::of("[ -~]{0,20}")) {
            let rec = ResultRecord {
                task: new_task_id(),
                client: ClientId::new(),
                outcome: Outcome { kind, detail, trace_ref: None },
                worker: "w-1".into(),
                queue_wait: wait,
                processing_time: proc_time,
                dequeue_count: count,
                completed_at: 17,
            };
            let text = serde_json::to_string(&rec).unwrap();
            prop_assert_eq!(serde_json::from_str::<ResultRecord>(&text).unwrap(), rec);
        }
    }
}
