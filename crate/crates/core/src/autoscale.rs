//! Queue-length autoscaling: every `interval_s` the controller looks at the queue length and,
//! when it exceeds the threshold, asks for `step` more workers up to `max`. The pool never
//! shrinks below `min` and never scales down.

use std::path::PathBuf;
use std::process::{Child, Command, Stdio};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::model::Timestamp;

/// Upper bound on any modeled startup latency, seconds.
pub const STARTUP_CAP_S: f64 = 600.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AutoscalePolicy {
    #[serde(rename = "min")]
    pub min_instances: usize,
    #[serde(rename = "max")]
    pub max_instances: usize,
    pub step: usize,
    #[serde(rename = "threshold")]
    pub queue_threshold: usize,
    #[serde(rename = "interval_s")]
    pub eval_interval: u64,
    /// Uniform startup latency bounds in seconds, capped at [`STARTUP_CAP_S`].
    #[serde(rename = "startup_s")]
    pub startup: [f64; 2],
}

impl Default for AutoscalePolicy {
    fn default() -> Self {
        Self {
            min_instances: 2,
            max_instances: 200,
            step: 50,
            queue_threshold: 100,
            eval_interval: 600,
            startup: [120.0, 180.0],
        }
    }
}

impl AutoscalePolicy {
    pub fn validate(&self) -> Result<(), String> {
        if self.min_instances > self.max_instances {
            return Err(format!(
                "min ({}) exceeds max ({})",
                self.min_instances, self.max_instances
            ));
        }
        if self.step < 1 {
            return Err("step must be ≥ 1".into());
        }
        if self.eval_interval < 1 {
            return Err("interval_s must be ≥ 1".into());
        }
        let [lo, hi] = self.startup;
        if !(lo >= 0.0 && lo <= hi && hi.is_finite()) {
            return Err(format!("startup_s bounds [{lo}, {hi}] are not an interval"));
        }
        Ok(())
    }

    /// Largest latency the model can produce, seconds.
    pub fn startup_upper_bound(&self) -> f64 {
        self.startup[1].min(STARTUP_CAP_S)
    }

    pub fn draw_startup<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        let [lo, hi] = self.startup;
        let s = if hi > lo { rng.random_range(lo..=hi) } else { lo };
        s.min(STARTUP_CAP_S)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScaleDecision {
    pub at: Timestamp,
    pub observed_queue_length: usize,
    pub current: usize,
    pub target: usize,
}

impl ScaleDecision {
    pub fn launches(&self) -> usize {
        self.target.saturating_sub(self.current)
    }
}

/// Pure scaling rule.
pub fn evaluate(
    policy: &AutoscalePolicy,
    queue_length: usize,
    current: usize,
    now: Timestamp,
) -> ScaleDecision {
    let floor = current.max(policy.min_instances);
    let target = if queue_length > policy.queue_threshold {
        (current + policy.step).max(floor).min(policy.max_instances)
    } else {
        floor.min(policy.max_instances)
    };
    ScaleDecision {
        at: now,
        observed_queue_length: queue_length,
        current,
        target: target.max(current.min(policy.max_instances)),
    }
}

#[derive(Debug, thiserror::Error)]
#[error("launch failed: {0}")]
pub struct LaunchError(pub String);

/// Something that can bring up worker instances.
pub trait Launcher {
    /// Schedules one worker that becomes active at `ready_at`.
    fn launch(&mut self, ready_at: Timestamp) -> Result<(), LaunchError>;
    /// Active plus pending instances.
    fn instances(&mut self) -> usize;
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PendingLaunch {
    pub ready_at: Timestamp,
}

/// Schedules `target − current` launches, each ready after a drawn startup latency.
/// Failed launches are dropped; the next tick sees the shortfall and retries.
pub fn apply<R: Rng + ?Sized>(
    policy: &AutoscalePolicy,
    decision: &ScaleDecision,
    launcher: &mut dyn Launcher,
    rng: &mut R,
) -> Vec<PendingLaunch> {
    let mut pending = Vec::with_capacity(decision.launches());
    for _ in 0..decision.launches() {
        let delay_ms = (policy.draw_startup(rng) * 1000.0).round() as u64;
        let ready_at = decision.at + delay_ms;
        match launcher.launch(ready_at) {
            Ok(()) => pending.push(PendingLaunch { ready_at }),
            Err(e) => log::warn!("{e}"),
        }
    }
    pending
}

/// Periodic controller: bootstrap to the minimum, then evaluate on interval ticks.
#[derive(Debug)]
pub struct Controller {
    policy: AutoscalePolicy,
    started_at: Timestamp,
    next_tick: Timestamp,
    pub decisions: Vec<ScaleDecision>,
}

impl Controller {
    pub fn new(policy: AutoscalePolicy, started_at: Timestamp) -> Self {
        Self {
            policy,
            started_at,
            next_tick: started_at + policy.eval_interval * 1000,
            decisions: Vec::new(),
        }
    }

    /// Launches the minimum pool with no startup latency.
    pub fn bootstrap(&mut self, launcher: &mut dyn Launcher) {
        let have = launcher.instances();
        for _ in have..self.policy.min_instances {
            if let Err(e) = launcher.launch(self.started_at) {
                log::warn!("bootstrap {e}");
            }
        }
    }

    /// Runs every tick due at or before `now`; returns launches scheduled.
    pub fn tick<R: Rng + ?Sized>(
        &mut self,
        now: Timestamp,
        queue_length: usize,
        launcher: &mut dyn Launcher,
        rng: &mut R,
    ) -> Vec<PendingLaunch> {
        let mut pending = Vec::new();
        while self.next_tick <= now {
            let at = self.next_tick;
            let decision = evaluate(&self.policy, queue_length, launcher.instances(), at);
            pending.extend(apply(&self.policy, &decision, launcher, rng));
            self.decisions.push(decision);
            self.next_tick += self.policy.eval_interval * 1000;
        }
        pending
    }
}

/// Launches workers as local child processes (`<program> <args...> --id <name>`), each spawned
/// once its ready time arrives.
pub struct ProcessLauncher {
    program: PathBuf,
    args: Vec<String>,
    prefix: String,
    next_index: usize,
    scheduled: Vec<(Timestamp, String)>,
    running: Vec<(String, Child)>,
}

impl ProcessLauncher {
    pub fn new(program: PathBuf, args: Vec<String>, prefix: impl Into<String>) -> Self {
        Self {
            program,
            args,
            prefix: prefix.into(),
            next_index: 0,
            scheduled: Vec::new(),
            running: Vec::new(),
        }
    }

    /// Spawns launches whose ready time has come and reaps exited workers.
    pub fn poll(&mut self, now: Timestamp) {
        self.running.retain_mut(|(name, child)| match child.try_wait() {
            Ok(Some(status)) => {
                log::warn!("worker {name} exited: {status}");
                false
            }
            _ => true,
        });
        let (due, later): (Vec<_>, Vec<_>) =
            self.scheduled.drain(..).partition(|(at, _)| *at <= now);
        self.scheduled = later;
        for (_, name) in due {
            let spawned = Command::new(&self.program)
                .args(&self.args)
                .arg("--id")
                .arg(&name)
                .stdin(Stdio::null())
                .spawn();
            match spawned {
                Ok(child) => self.running.push((name, child)),
                Err(e) => log::error!("spawning worker {name}: {e}"),
            }
        }
    }

    pub fn running(&self) -> usize {
        self.running.len()
    }

    /// Sends SIGTERM to every worker and waits for them.
    pub fn shutdown(&mut self) {
        for (_, child) in &self.running {
            // SAFETY: plain signal delivery to a child we own.
            unsafe {
                libc::kill(child.id() as libc::pid_t, libc::SIGTERM);
            }
        }
        for (_, child) in &mut self.running {
            let _ = child.wait();
        }
        self.running.clear();
        self.scheduled.clear();
    }
}

impl Launcher for ProcessLauncher {
    fn launch(&mut self, ready_at: Timestamp) -> Result<(), LaunchError> {
        self.next_index += 1;
        let name = format!("{}-{}", self.prefix, self.next_index);
        self.scheduled.push((ready_at, name));
        Ok(())
    }

    fn instances(&mut self) -> usize {
        self.running.len() + self.scheduled.len()
    }
}

impl Drop for ProcessLauncher {
    fn drop(&mut self) {
        self.shutdown();
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[derive(Default)]
    struct Recording {
        ready: Vec<Timestamp>,
        fail_every: Option<usize>,
        calls: usize,
    }

    impl Launcher for Recording {
        fn launch(&mut self, ready_at: Timestamp) -> Result<(), LaunchError> {
            self.calls += 1;
            if self.fail_every.is_some_and(|n| self.calls.is_multiple_of(n)) {
                return Err(LaunchError("quota".into()));
            }
            self.ready.push(ready_at);
            Ok(())
        }
        fn instances(&mut self) -> usize {
            self.ready.len()
        }
    }

    #[test]
    fn default_policy_constants() {
        let p = AutoscalePolicy::default();
        assert_eq!(evaluate(&p, 0, 2, 0).target, 2);
        assert_eq!(evaluate(&p, 120, 2, 0).target, 52);
        assert_eq!(evaluate(&p, 10_000, 180, 0).target, 200);
        assert_eq!(evaluate(&p, 100, 2, 0).target, 2);
        assert_eq!(evaluate(&p, 0, 0, 0).target, 2);
    }

    #[test]
    fn config_field_names() {
        let json = serde_json::to_value(AutoscalePolicy::default()).unwrap();
        assert_eq!(
            json,
            serde_json::json!({"min": 2, "max": 200, "step": 50, "threshold": 100,
                               "interval_s": 600, "startup_s": [120.0, 180.0]})
        );
    }

    #[test]
    fn fixed_latency_launches() {
        let p = AutoscalePolicy {
            startup: [150.0, 150.0],
            ..AutoscalePolicy::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut launcher = Recording::default();
        let d = evaluate(&p, 1000, 2, 10_000);
        let pending = apply(&p, &d, &mut launcher, &mut rng);
        assert_eq!(pending.len(), 50);
        assert!(pending.iter().all(|l| l.ready_at == 160_000));

        let none = apply(&p, &evaluate(&p, 0, 2, 0), &mut launcher, &mut rng);
        assert!(none.is_empty());
    }

    #[test]
    fn latency_is_capped() {
        let p = AutoscalePolicy {
            startup: [900.0, 1200.0],
            ..AutoscalePolicy::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..100 {
            assert!(p.draw_startup(&mut rng) <= STARTUP_CAP_S);
        }
    }

    #[test]
    fn launcher_failures_reduce_achieved_count() {
        let p = AutoscalePolicy::default();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut launcher = Recording {
            fail_every: Some(5),
            ..Recording::default()
        };
        let pending = apply(&p, &evaluate(&p, 1000, 0, 0), &mut launcher, &mut rng);
        assert_eq!(pending.len(), 40);
    }

    #[test]
    fn controller_ticks_on_interval_multiples() {
        let p = AutoscalePolicy {
            startup: [0.0, 0.0],
            ..AutoscalePolicy::default()
        };
        let mut c = Controller::new(p, 1_000);
        let mut launcher = Recording::default();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        c.bootstrap(&mut launcher);
        assert_eq!(launcher.instances(), 2);
        assert!(c.tick(600_999, 500, &mut launcher, &mut rng).is_empty());
        assert_eq!(c.tick(601_000, 500, &mut launcher, &mut rng).len(), 50);
        c.tick(3_601_000, 500, &mut launcher, &mut rng);
        let ticks: Vec<_> = c.decisions.iter().map(|d| d.at).collect();
        assert_eq!(
            ticks,
            (1..=6).map(|k| 1_000 + k * 600_000).collect::<Vec<_>>()
        );
        assert_eq!(launcher.instances(), 200);
    }

    proptest! {
        #[test]
        fn decision_bounds(q in 0usize..100_000, current in 0usize..=200,
                           min in 0usize..10, extra in 0usize..300, step in 1usize..100,
                           threshold in 0usize..500) {
            let p = AutoscalePolicy { min_instances: min, max_instances: min + extra, step,
                                      queue_threshold: threshold, ..AutoscalePolicy::default() };
            let current = current.min(p.max_instances);
            let d = evaluate(&p, q, current, 0);
            prop_assert!(d.target >= p.min_instances && d.target <= p.max_instances);
            prop_assert!(d.target >= current);
            // Monotone in queue length for fixed current.
            let d2 = evaluate(&p, q + 1, current, 0);
            prop_assert!(d2.target >= d.target);
        }
    }
}
