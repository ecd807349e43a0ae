//! Run summary.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use super::trace::PhaseCounts;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ViolationKind {
    /// Two correct replicas executed different requests at one position.
    Prefix,
    /// Two correct replicas executed different requests at one counter value.
    Agreement,
    /// A client accepted a result no correct replica produced.
    UnexecutedResult,
    /// A client accepted a request twice.
    DuplicateAcceptance,
    /// A TEE bound two digests to one counter value.
    TeeEquivocation,
    /// A TEE bound a counter value not above its previous one.
    TeeNonMonotonic,
    /// A fallback reconstruction differs from the preprocessed secret.
    Reconstruction,
    /// A correct client's request did not complete before the horizon.
    Liveness,
}

impl fmt::Display for ViolationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            ViolationKind::Prefix => "prefix",
            ViolationKind::Agreement => "agreement",
            ViolationKind::UnexecutedResult => "unexecuted-result",
            ViolationKind::DuplicateAcceptance => "duplicate-acceptance",
            ViolationKind::TeeEquivocation => "tee-equivocation",
            ViolationKind::TeeNonMonotonic => "tee-non-monotonic",
            ViolationKind::Reconstruction => "reconstruction",
            ViolationKind::Liveness => "liveness",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    /// Index of the event being processed when the monitor fired.
    pub event: u64,
    pub kind: ViolationKind,
    pub detail: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} at event {}: {}", self.kind, self.event, self.detail)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RequestLatency {
    pub client: u32,
    pub seq: u64,
    /// Simulated ticks from first send to acceptance.
    pub latency: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub n: usize,
    pub f: usize,
    pub seed: u64,
    pub end_time: u64,
    pub events: u64,
    pub messages_by_tag: BTreeMap<String, u64>,
    pub total_messages: u64,
    pub requests_issued: u64,
    pub requests_completed: u64,
    /// Normal-case messages summed over completed requests.
    pub phase_totals: PhaseCounts,
    pub messages_per_request: f64,
    pub latencies: Vec<RequestLatency>,
    pub mean_latency: f64,
    pub max_latency: u64,
    /// Regular view changes installed.
    pub view_changes: u64,
    pub new_trees: u64,
    pub fallback_entries: u64,
    pub fallback_exits: u64,
    /// Fallback secrets reconstructed, all checked against the TEE's record.
    pub fallback_reconstructions: u64,
    pub rejoins: u64,
    pub safe: bool,
    pub live: bool,
    pub violations: Vec<Violation>,
}

impl MetricsReport {
    pub fn clean(&self) -> bool {
        self.safe && self.live
    }
}
