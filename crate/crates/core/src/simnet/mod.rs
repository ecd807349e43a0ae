//! Deterministic discrete-event simulator with fault injection, safety
//! monitors and message accounting.

mod engine;
pub mod metrics;
mod monitor;
pub mod scenario;
pub mod trace;

pub use engine::{run, run_observed, SimOutput};
pub use metrics::{MetricsReport, RequestLatency, Violation, ViolationKind};
pub use scenario::{
    CryptoChoice, FaultKind, FaultSpec, Network, ProtocolOverrides, Scenario, ScenarioError, Workload,
};
pub use trace::{count_messages, render, PhaseCounts, TraceRecord};
