//! Safety monitors evaluated on every observation.

use std::collections::{BTreeMap, BTreeSet};

use super::metrics::ViolationKind;
use crate::primitives::Digest;
use crate::protocol::{AppResult, Observation};
use crate::{CounterValue, ReplicaId, RequestId};

type Finding = (ViolationKind, String);

pub(crate) struct Monitor {
    /// Replicas whose untrusted logic follows the protocol.
    correct: Vec<bool>,
    positions: Vec<u64>,
    sequence: BTreeMap<u64, (RequestId, Digest)>,
    by_counter: BTreeMap<CounterValue, (RequestId, Digest)>,
    results: BTreeMap<RequestId, BTreeSet<AppResultKey>>,
    checkpoints: BTreeMap<u64, Digest>,
    accepted: BTreeSet<RequestId>,
}

/// Results compared by encoding.
type AppResultKey = Vec<u8>;

fn key(res: &AppResult) -> AppResultKey {
    use crate::codec::Encode;
    res.to_bytes()
}

impl Monitor {
    pub(crate) fn new(correct: Vec<bool>) -> Self {
        let n = correct.len();
        Monitor {
            correct,
            positions: vec![0; n],
            sequence: BTreeMap::new(),
            by_counter: BTreeMap::new(),
            results: BTreeMap::new(),
            checkpoints: BTreeMap::new(),
            accepted: BTreeSet::new(),
        }
    }

    pub(crate) fn observe(&mut self, r: ReplicaId, o: &Observation) -> Result<(), Finding> {
        let i = r.index();
        if !self.correct[i] {
            return Ok(());
        }
        match o {
            Observation::Executed { request, digest, counter, result } => {
                let p = self.positions[i];
                self.positions[i] += 1;
                match self.sequence.get(&p) {
                    Some((other, d)) if d != digest => {
                        return Err((
                            ViolationKind::Prefix,
                            format!("{r} executed {request} at position {p}, another replica {other}"),
                        ));
                    }
                    Some(_) => {}
                    None => {
                        self.sequence.insert(p, (*request, *digest));
                    }
                }
                match self.by_counter.get(counter) {
                    Some((other, d)) if d != digest => {
                        return Err((
                            ViolationKind::Agreement,
                            format!("{r} executed {request} at {counter}, another replica {other}"),
                        ));
                    }
                    Some(_) => {}
                    None => {
                        self.by_counter.insert(*counter, (*request, *digest));
                    }
                }
                self.results.entry(*request).or_default().insert(key(result));
            }
            Observation::Checkpoint { seq, digest } | Observation::StateTransfer { seq, digest } => {
                if let Some(d) = self.checkpoints.get(seq) {
                    if d != digest {
                        return Err((
                            ViolationKind::Prefix,
                            format!("{r} holds a different state after {seq} executions"),
                        ));
                    }
                } else {
                    self.checkpoints.insert(*seq, *digest);
                }
                if matches!(o, Observation::StateTransfer { .. }) {
                    self.positions[i] = *seq;
                }
            }
            Observation::Reset => self.positions[i] = 0,
            _ => {}
        }
        Ok(())
    }

    pub(crate) fn accept(&mut self, request: RequestId, result: &AppResult) -> Result<(), Finding> {
        if !self.accepted.insert(request) {
            return Err((ViolationKind::DuplicateAcceptance, format!("{request} accepted twice")));
        }
        let produced = self.results.get(&request).is_some_and(|s| s.contains(&key(result)));
        if !produced {
            return Err((
                ViolationKind::UnexecutedResult,
                format!("{request} accepted with a result no correct replica produced"),
            ));
        }
        Ok(())
    }
}
