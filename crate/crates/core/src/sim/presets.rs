//! Calibrated configurations shaped like the published experiment suites. Per-check times are
//! not published, so the distributions are fitted to reproduce the orderings and bands of the
//! reported results rather than the exact wall-clock figures.

use super::{Dist, SimConfig, Suite};
use crate::autoscale::AutoscalePolicy;
use crate::queue::QueueConfig;

/// Rule timeout: 50 minutes.
pub const RULE_TIMEOUT_S: u64 = 3000;

fn base(suite: Suite) -> SimConfig {
    SimConfig {
        seed: 42,
        suite,
        service_time: Dist::LogNormal {
            median: 6.0,
            sigma: 2.2,
            cap: Some(RULE_TIMEOUT_S as f64),
        },
        compile_time: Dist::LogNormal {
            median: 900.0,
            sigma: 0.3,
            cap: None,
        },
        compile_parallelism: 8,
        submit_overhead: Dist::Uniform { lo: 0.5, hi: 1.5 },
        policy: AutoscalePolicy {
            min_instances: 2,
            max_instances: 200,
            ..AutoscalePolicy::default()
        },
        worker_poll_interval: 10.0,
        crash_probability: 0.0,
        queue: QueueConfig::default(),
        task_timeout: RULE_TIMEOUT_S,
        local_cores: 64,
    }
}

/// 91 modules × 180 rules.
pub fn bugbash() -> SimConfig {
    base(Suite {
        modules: 91,
        rules_per_module: 180,
    })
}

/// One small module, 192 checks of at most a few seconds each, dominated by client-side
/// compilation.
pub fn fail_driver1() -> SimConfig {
    SimConfig {
        service_time: Dist::Uniform { lo: 0.5, hi: 3.0 },
        compile_time: Dist::fixed(3150.0),
        compile_parallelism: 1,
        ..base(Suite {
            modules: 1,
            rules_per_module: 192,
        })
    }
}

/// A 3858-check run used for queue-wait statistics: short checks, a small warm pool and
/// workers that poll every 30 s.
pub fn queue_wait_run() -> SimConfig {
    let mut cfg = base(Suite {
        modules: 6,
        rules_per_module: 643,
    });
    cfg.service_time = Dist::LogNormal {
        median: 5.0,
        sigma: 1.0,
        cap: Some(RULE_TIMEOUT_S as f64),
    };
    cfg.compile_parallelism = 2;
    cfg.policy.min_instances = 10;
    cfg.worker_poll_interval = 30.0;
    cfg
}

/// Looks a preset up by name.
pub fn by_name(name: &str) -> Option<SimConfig> {
    match name {
        "bugbash" => Some(bugbash()),
        "fail_driver1" => Some(fail_driver1()),
        "queue_wait" => Some(queue_wait_run()),
        _ => None,
    }
}

pub const NAMES: [&str; 3] = ["bugbash", "fail_driver1", "queue_wait"];
