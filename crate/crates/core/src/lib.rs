//! Self-hosted verification farm: a cloud fabric (visibility-timeout queue, blobs, result
//! topics, telemetry, tool versions), worker agents that run analysis checks under resource
//! limits, a queue-length autoscaler, a client orchestrator that fans modules × rules into
//! checks, and a deterministic discrete-event simulator of the whole system.

pub mod autoscale;
pub mod clock;
pub mod fabric;
pub mod journal;
pub mod model;
pub mod orchestrator;
pub mod queue;
pub mod sim;
pub mod stats;
pub mod store;
pub mod worker;
