//! The replica state machine.
//!
//! A [`Replica`] is driven by [`Input`]s (messages, timer expiries, reboots)
//! and answers with [`Action`]s. Handlers never block and never touch another
//! replica's state; the simulator owns delivery and time.

pub mod app;
pub mod history;
pub mod messages;
mod replica;

use serde::{Deserialize, Serialize};

pub use app::{AppResult, KvStore, Operation};
pub use messages::{
    Checkpoint, ClientRegistry, HistoryEntry, LogEntry, Mode, NewTree, NewView, ProtocolMessage,
    RejoinResponse, Reply, ReqViewChange, Request, ViewChangeKind,
};
pub use replica::{genesis, Replica, Role, Status};

use crate::primitives::{Digest, Secret};
use crate::{ClientId, CounterValue, NodeId, ReplicaId, RequestId};

/// Timing and threshold knobs. Durations are in simulated ticks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProtocolConfig {
    pub n: usize,
    pub f: usize,
    pub branching: usize,
    /// Nominal one-hop delay Δ.
    pub delta: u64,
    /// Child share timeout per level of the child's subtree.
    pub child_timeout: u64,
    /// How long the primary collects SUSPECTs before picking one.
    pub suspect_window: u64,
    /// Suspects per view that trigger the fallback transition.
    pub fallback_threshold: u32,
    /// Requests served in fallback before probing for the way back.
    pub fallback_duration: u64,
    /// Checkpoint every K executed requests.
    pub checkpoint_interval: u64,
    /// Counter values preprocessed per batch (kept even).
    pub preprocess_batch: usize,
    pub request_timeout: u64,
    pub view_change_timeout: u64,
    pub retransmit_timeout: u64,
    pub rejoin_retry: u64,
    pub probe_timeout: u64,
}

impl ProtocolConfig {
    /// Defaults for `n = 2f + 1` with Δ = 100 ticks.
    pub fn new(f: usize) -> Self {
        Self::with_delta(f, 100)
    }

    pub fn with_delta(f: usize, delta: u64) -> Self {
        let mut cfg = ProtocolConfig {
            n: 2 * f + 1,
            f,
            branching: crate::topology::DEFAULT_BRANCHING,
            delta,
            child_timeout: 4 * delta,
            suspect_window: 2 * delta,
            fallback_threshold: 3,
            fallback_duration: 50,
            checkpoint_interval: 10,
            preprocess_batch: 16,
            request_timeout: 0,
            view_change_timeout: 0,
            retransmit_timeout: 4 * delta,
            rejoin_retry: 20 * delta,
            probe_timeout: 4 * delta,
        };
        cfg.derive_timeouts(1);
        cfg
    }

    /// Depth of a balanced tree over the `f + 1` actives.
    pub fn tree_depth(&self) -> usize {
        let d = self.branching.max(1);
        let (mut depth, mut level, mut placed) = (0, 1usize, 1usize);
        while placed < self.f + 1 {
            level = level.saturating_mul(d);
            placed = placed.saturating_add(level);
            depth += 1;
        }
        depth
    }

    /// Upper estimate of one agreement round, in ticks.
    pub fn round_estimate(&self) -> u64 {
        (2 + 4 * self.tree_depth() as u64) * 2 * self.delta
    }

    /// Sets request and view-change timeouts for `clients` closed-loop
    /// clients sharing the primary.
    pub fn derive_timeouts(&mut self, clients: usize) {
        let round = self.round_estimate();
        let detect = self.child_timeout * (self.tree_depth() as u64 + 1) + self.suspect_window;
        self.request_timeout = 3 * (clients as u64 + 1) * round + 2 * detect + 20 * self.delta;
        self.view_change_timeout = 20 * self.delta + 2 * round;
    }

    /// Timeout for a client's first attempt.
    pub fn client_timeout(&self) -> u64 {
        10 * self.delta + 2 * self.round_estimate()
    }
}

/// Timer identities. Setting a timer that is already armed re-arms it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Timer {
    ChildShare { counter: CounterValue, child: ReplicaId },
    SuspectWindow,
    Request(ClientId),
    ViewChange,
    Retransmit,
    Rejoin,
    Probe,
    ClientRetry,
}

/// What a fault script makes the untrusted logic of a replica do.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Behavior {
    pub silent_shares: bool,
    pub wrong_shares: bool,
    pub equivocate: bool,
    pub primary_silent: bool,
}

impl Behavior {
    pub fn is_honest(&self) -> bool {
        *self == Behavior::default()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Input {
    Message { from: NodeId, msg: ProtocolMessage },
    Timer(Timer),
    /// Power cycle without a persisted record.
    Reboot,
}

/// Facts reported to the simulator's monitors.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Observation {
    /// A request changed the application state.
    Executed {
        request: RequestId,
        digest: Digest,
        counter: CounterValue,
        result: AppResult,
    },
    /// State replaced by a checkpoint covering `seq` executions.
    StateTransfer { seq: u64, digest: Digest },
    Checkpoint { seq: u64, digest: Digest },
    /// Untrusted state lost in a reboot.
    Reset,
    ViewInstalled { view: u64, primary: ReplicaId, mode: Mode, kind: ViewChangeKind },
    NewTree { counter: CounterValue },
    FallbackReconstructed { counter: CounterValue, secret: Secret },
    Rejoined { counter: CounterValue },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Action {
    Send { to: NodeId, msg: ProtocolMessage, round: Option<RequestId> },
    SetTimer { timer: Timer, after: u64 },
    CancelTimer(Timer),
    Observe(Observation),
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn depth_matches_heap_layout() {
        let mut cfg = ProtocolConfig::new(1);
        assert_eq!(cfg.tree_depth(), 1);
        cfg.f = 2;
        assert_eq!(cfg.tree_depth(), 1);
        cfg.f = 3;
        assert_eq!(cfg.tree_depth(), 2);
        cfg.f = 32;
        assert_eq!(cfg.tree_depth(), 5);
        cfg.branching = 1;
        cfg.f = 4;
        assert_eq!(cfg.tree_depth(), 4);
    }
}
