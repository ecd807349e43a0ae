//! Scenario files: topology, network model, workload, protocol overrides and
//! scripted faults.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::primitives::CryptoBackend;
use crate::protocol::{Behavior, ProtocolConfig};

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("{path}: {message}")]
    Schema { path: String, message: String },
    #[error("invalid scenario: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CryptoChoice {
    /// Keyed-hash stand-ins; fast and deterministic.
    #[default]
    Fast,
    /// Ed25519, X25519 and AES-GCM.
    Real,
}

impl CryptoChoice {
    pub fn backend(self) -> CryptoBackend {
        match self {
            CryptoChoice::Fast => CryptoBackend::Fast,
            CryptoChoice::Real => CryptoBackend::Real,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Network {
    /// Nominal one-hop delay Δ in ticks.
    pub delta: u64,
    /// Delays are drawn from `Δ·[1, 1 + jitter)` after stabilization.
    pub jitter: f64,
    /// Global stabilization time; before it, up to `chaos·Δ` extra delay.
    pub stabilization: u64,
    pub chaos: f64,
}

impl Default for Network {
    fn default() -> Self {
        Network { delta: 100, jitter: 0.0, stabilization: 0, chaos: 0.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Workload {
    pub clients: usize,
    /// Requests per client, issued back to back.
    pub requests: usize,
    /// Size of the key space operations draw from.
    pub keys: usize,
}

impl Default for Workload {
    fn default() -> Self {
        Workload { clients: 1, requests: 10, keys: 4 }
    }
}

/// Optional replacements for the derived protocol timers and thresholds.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProtocolOverrides {
    pub child_timeout: Option<u64>,
    pub suspect_window: Option<u64>,
    pub fallback_threshold: Option<u32>,
    pub fallback_duration: Option<u64>,
    pub checkpoint_interval: Option<u64>,
    pub preprocess_batch: Option<usize>,
    pub request_timeout: Option<u64>,
    pub view_change_timeout: Option<u64>,
    pub retransmit_timeout: Option<u64>,
    pub rejoin_retry: Option<u64>,
    pub probe_timeout: Option<u64>,
    pub client_timeout: Option<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FaultKind {
    /// Stops for good at `start`.
    Crash,
    /// Down from `start` to `end`, then powers back on without a record.
    UnscheduledReboot,
    SilentShares,
    WrongShares,
    /// As primary, tries to bind two requests to one counter value.
    PrimaryEquivocateAttempt,
    /// As primary, ignores client requests.
    PrimarySilent,
    /// Multiplies the delay of every message the target sends by `factor`.
    DelayAmplify,
}

impl FaultKind {
    /// Whether the target's untrusted logic deviates from the protocol.
    pub fn is_byzantine(self) -> bool {
        !matches!(self, FaultKind::Crash | FaultKind::UnscheduledReboot)
    }

    pub(crate) fn apply(self, b: &mut Behavior, on: bool) {
        match self {
            FaultKind::SilentShares => b.silent_shares = on,
            FaultKind::WrongShares => b.wrong_shares = on,
            FaultKind::PrimaryEquivocateAttempt => b.equivocate = on,
            FaultKind::PrimarySilent => b.primary_silent = on,
            _ => {}
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FaultSpec {
    pub target: u32,
    pub kind: FaultKind,
    #[serde(default)]
    pub start: u64,
    /// End of the activation window; open-ended if absent.
    #[serde(default)]
    pub end: Option<u64>,
    /// Delay multiplier for `delay-amplify`.
    #[serde(default)]
    pub factor: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub n: usize,
    pub f: usize,
    #[serde(default = "default_branching")]
    pub branching: usize,
    #[serde(default)]
    pub seed: u64,
    /// Simulated time after which the run stops.
    #[serde(default = "default_horizon")]
    pub horizon: u64,
    #[serde(default)]
    pub crypto: CryptoChoice,
    #[serde(default)]
    pub network: Network,
    #[serde(default)]
    pub workload: Workload,
    #[serde(default)]
    pub protocol: ProtocolOverrides,
    #[serde(default)]
    pub faults: Vec<FaultSpec>,
}

fn default_branching() -> usize {
    crate::topology::DEFAULT_BRANCHING
}

fn default_horizon() -> u64 {
    10_000_000
}

impl Scenario {
    /// A fault-free scenario with defaults for everything else.
    pub fn new(f: usize, seed: u64) -> Self {
        Scenario {
            n: 2 * f + 1,
            f,
            branching: default_branching(),
            seed,
            horizon: default_horizon(),
            crypto: CryptoChoice::default(),
            network: Network::default(),
            workload: Workload::default(),
            protocol: ProtocolOverrides::default(),
            faults: Vec::new(),
        }
    }

    /// Parses and validates a TOML scenario. Schema errors carry the path
    /// of the offending field.
    pub fn from_toml(text: &str) -> Result<Self, ScenarioError> {
        let de = toml::Deserializer::new(text);
        let s: Scenario = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            ScenarioError::Schema { path, message: e.into_inner().message().trim().to_string() }
        })?;
        s.validate()?;
        Ok(s)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("scenario serializes")
    }

    pub fn validate(&self) -> Result<(), ScenarioError> {
        let bad = |m: String| Err(ScenarioError::Invalid(m));
        if self.f == 0 {
            return bad("f must be at least 1".into());
        }
        if self.n != 2 * self.f + 1 {
            return bad(format!("n = 2f + 1 is required (n = {}, f = {})", self.n, self.f));
        }
        if self.branching == 0 {
            return bad("branching must be at least 1".into());
        }
        if self.network.delta == 0 {
            return bad("network.delta must be positive".into());
        }
        if !(self.network.jitter >= 0.0 && self.network.jitter.is_finite()) {
            return bad("network.jitter must be a non-negative number".into());
        }
        if !(self.network.chaos >= 0.0 && self.network.chaos.is_finite()) {
            return bad("network.chaos must be a non-negative number".into());
        }
        if self.workload.clients == 0 || self.workload.keys == 0 {
            return bad("workload needs at least one client and one key".into());
        }
        if self.horizon == 0 {
            return bad("horizon must be positive".into());
        }
        let mut faulty = BTreeSet::new();
        for (i, spec) in self.faults.iter().enumerate() {
            if spec.target as usize >= self.n {
                return bad(format!("faults[{i}].target {} is not a replica", spec.target));
            }
            if spec.start >= self.horizon {
                return bad(format!("faults[{i}] starts after the horizon"));
            }
            if spec.end.is_some_and(|e| e <= spec.start) {
                return bad(format!("faults[{i}].end must be after start"));
            }
            if spec.kind == FaultKind::Crash && spec.end.is_some() {
                return bad(format!("faults[{i}]: a crash has no end; use unscheduled-reboot"));
            }
            match (spec.kind, spec.factor) {
                (FaultKind::DelayAmplify, Some(x)) if x >= 1.0 && x.is_finite() => {}
                (FaultKind::DelayAmplify, _) => {
                    return bad(format!("faults[{i}]: delay-amplify needs factor >= 1"));
                }
                (_, Some(_)) => return bad(format!("faults[{i}]: factor only applies to delay-amplify")),
                _ => {}
            }
            faulty.insert(spec.target);
        }
        if faulty.len() > self.f {
            return bad(format!(
                "at most f = {} replicas may be faulty, got {}",
                self.f,
                faulty.len()
            ));
        }
        Ok(())
    }

    /// Protocol configuration derived from Δ and the workload, with
    /// overrides applied.
    pub fn protocol_config(&self) -> ProtocolConfig {
        let mut cfg = ProtocolConfig::with_delta(self.f, self.network.delta);
        cfg.branching = self.branching;
        cfg.derive_timeouts(self.workload.clients);
        let o = &self.protocol;
        let set = |v: &mut u64, x: Option<u64>| {
            if let Some(x) = x {
                *v = x;
            }
        };
        set(&mut cfg.child_timeout, o.child_timeout);
        set(&mut cfg.suspect_window, o.suspect_window);
        set(&mut cfg.fallback_duration, o.fallback_duration);
        set(&mut cfg.checkpoint_interval, o.checkpoint_interval);
        set(&mut cfg.request_timeout, o.request_timeout);
        set(&mut cfg.view_change_timeout, o.view_change_timeout);
        set(&mut cfg.retransmit_timeout, o.retransmit_timeout);
        set(&mut cfg.rejoin_retry, o.rejoin_retry);
        set(&mut cfg.probe_timeout, o.probe_timeout);
        if let Some(t) = o.fallback_threshold {
            cfg.fallback_threshold = t;
        }
        if let Some(b) = o.preprocess_batch {
            cfg.preprocess_batch = b.max(2);
        }
        cfg
    }

    pub fn client_timeout(&self) -> u64 {
        self.protocol.client_timeout.unwrap_or_else(|| self.protocol_config().client_timeout())
    }

    /// Replicas whose untrusted logic is scripted to misbehave at some point.
    pub fn byzantine(&self) -> BTreeSet<u32> {
        self.faults.iter().filter(|s| s.kind.is_byzantine()).map(|s| s.target).collect()
    }

    /// Replicas that never crash, reboot or misbehave.
    pub fn never_faulty(&self) -> BTreeSet<u32> {
        let faulty: BTreeSet<u32> = self.faults.iter().map(|s| s.target).collect();
        (0..self.n as u32).filter(|r| !faulty.contains(r)).collect()
    }
}
