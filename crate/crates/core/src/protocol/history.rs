//! Execution history `O` built from `f + 1` view-change logs.
//!
//! Construction is a pure function of the proofs so the new primary and every
//! replica validating NEW-VIEW arrive at the same list.

use std::collections::{BTreeMap, BTreeSet};

use super::messages::{
    Checkpoint, ClientRegistry, HistoryEntry, LogEntry, Request, ReqViewChange,
};
use crate::primitives::Crypto;
use crate::tee::{BindingKind, CounterAssignment, KeyRegistry};
use crate::{CounterValue, ReplicaId, RequestId};

/// Keys needed to check bindings and client signatures.
#[derive(Clone, Copy)]
pub struct Verifier<'a> {
    pub crypto: &'a Crypto,
    pub registry: &'a KeyRegistry,
    pub clients: &'a ClientRegistry,
}

impl Verifier<'_> {
    fn counter_binding(&self, b: &CounterAssignment) -> bool {
        b.kind == BindingKind::Counter && b.verify(self.crypto, self.registry)
    }

    fn prepared(&self, request: &Request, b: &CounterAssignment) -> bool {
        self.counter_binding(b)
            && b.digest == request.digest()
            && request.verify(self.crypto, self.clients)
    }

    fn committed(&self, e: &HistoryEntry) -> bool {
        let Some((res, b)) = &e.commit else {
            return false;
        };
        self.counter_binding(b)
            && b.issuer == e.prepare.issuer
            && b.counter == e.prepare.counter.next()
            && b.digest == e.request.result_digest(res)
    }

    /// Checks the attestation and that the log accounts for every counter
    /// value the sender's TEE has passed since its checkpoint.
    pub fn request_is_valid(&self, m: &ReqViewChange) -> bool {
        let a = &m.attestation;
        a.kind == BindingKind::Attestation
            && a.verify(self.crypto, self.registry)
            && a.digest
                == ReqViewChange::content_digest(m.target, m.kind, &m.log, m.checkpoint.as_ref())
            && log_covers(&m.log, m.checkpoint.as_ref().map(|c| c.counter), a.counter)
    }
}

/// Counter values a log entry accounts for.
fn covered(e: &LogEntry) -> Vec<CounterValue> {
    match e {
        LogEntry::TreeChange { binding, skipped } => {
            let mut v: Vec<_> = skipped.iter().map(|b| b.counter).collect();
            v.push(binding.counter);
            v
        }
        other => vec![other.counter()],
    }
}

/// True if every counter value `(k, v)` of the attested view with
/// `anchor < (k, v) <= attested` appears in `log`.
pub fn log_covers(log: &[LogEntry], anchor: Option<CounterValue>, attested: CounterValue) -> bool {
    let have: BTreeSet<CounterValue> = log.iter().flat_map(covered).collect();
    (1..=attested.counter)
        .map(|k| CounterValue::new(k, attested.view))
        .filter(|c| anchor.is_none_or(|a| *c > a))
        .all(|c| have.contains(&c))
}

/// The checkpoint with the most executions among the proofs.
pub fn highest_checkpoint(proofs: &[ReqViewChange]) -> Option<&Checkpoint> {
    proofs
        .iter()
        .filter_map(|p| p.checkpoint.as_ref())
        .fold(None, |best: Option<&Checkpoint>, c| match best {
            Some(b) if b.seq >= c.seq => Some(b),
            _ => Some(c),
        })
}

/// Entries of `log` at or above view `floor`, plus the history carried by
/// the start of view `floor` itself.
fn candidates(log: &[LogEntry], floor: u64) -> Vec<HistoryEntry> {
    let mut prepared: BTreeMap<CounterValue, HistoryEntry> = BTreeMap::new();
    let mut out = Vec::new();
    for e in log {
        match e {
            LogEntry::Prepared { request, binding } if binding.counter.view >= floor => {
                prepared.insert(
                    binding.counter,
                    HistoryEntry { request: request.clone(), prepare: binding.clone(), commit: None },
                );
            }
            LogEntry::ViewStart { binding, history } if binding.counter.view == floor => {
                out.extend(history.iter().cloned())
            }
            _ => {}
        }
    }
    for e in log {
        if let LogEntry::Committed { request, result, binding } = e {
            let at = CounterValue::new(binding.counter.counter.wrapping_sub(1), binding.counter.view);
            if let Some(p) = prepared.get_mut(&at) {
                if p.request == *request {
                    p.commit = Some((result.clone(), binding.clone()));
                }
            }
        }
    }
    out.extend(prepared.into_values());
    out
}

/// Latest view any proof shows as installed. Its starting history settles
/// every earlier view.
fn floor_view(proofs: &[ReqViewChange], checkpoint: Option<&Checkpoint>, v: Verifier<'_>) -> u64 {
    let started = proofs
        .iter()
        .flat_map(|p| &p.log)
        .filter_map(|e| match e {
            LogEntry::ViewStart { binding, .. } if v.counter_binding(binding) => Some(binding.counter.view),
            _ => None,
        })
        .max()
        .unwrap_or(0);
    started.max(checkpoint.map_or(0, |c| c.counter.view))
}

/// Builds `O`: every valid prepared or committed request in the proofs'
/// logs above `checkpoint`, one entry per request at the first counter value
/// it was prepared at, in counter order. Entries from views before the
/// latest started one count only through that view's starting history.
pub fn build(
    proofs: &[ReqViewChange],
    checkpoint: Option<&Checkpoint>,
    v: Verifier<'_>,
) -> Vec<HistoryEntry> {
    let anchor = checkpoint.map(|c| c.counter);
    let floor = floor_view(proofs, checkpoint, v);
    let mut all: Vec<(ReplicaId, HistoryEntry)> = Vec::new();
    for p in proofs {
        for mut e in candidates(&p.log, floor) {
            if !v.prepared(&e.request, &e.prepare) {
                continue;
            }
            if e.commit.is_some() && !v.committed(&e) {
                e.commit = None;
            }
            all.push((p.sender(), e));
        }
    }

    // One issuer per view: the one most proof senders vouch for.
    let mut support: BTreeMap<(u64, ReplicaId), BTreeSet<ReplicaId>> = BTreeMap::new();
    for (sender, e) in &all {
        support.entry((e.prepare.counter.view, e.prepare.issuer)).or_default().insert(*sender);
    }
    let mut issuer: BTreeMap<u64, (usize, ReplicaId)> = BTreeMap::new();
    for ((view, who), senders) in &support {
        let slot = issuer.entry(*view).or_insert((0, *who));
        if senders.len() > slot.0 {
            *slot = (senders.len(), *who);
        }
    }

    let mut by_request: BTreeMap<RequestId, Vec<HistoryEntry>> = BTreeMap::new();
    for (_, e) in all {
        let c = e.prepare.counter;
        if issuer[&c.view].1 != e.prepare.issuer || anchor.is_some_and(|a| c <= a) {
            continue;
        }
        if checkpoint.is_some_and(|cp| cp.state.has_executed(e.request.id)) {
            continue;
        }
        by_request.entry(e.request.id).or_default().push(e);
    }

    let mut history: Vec<HistoryEntry> = by_request
        .into_values()
        .map(|mut es| {
            // Replicas skip re-proposals of an executed request, so only the
            // first binding ever took effect.
            es.sort_by_key(|e| (e.prepare.counter, e.commit.is_none()));
            let mut chosen = es[0].clone();
            if chosen.commit.is_none() {
                chosen.commit = es
                    .iter()
                    .find(|e| e.prepare.counter == chosen.prepare.counter && e.commit.is_some())
                    .and_then(|e| e.commit.clone());
            }
            chosen
        })
        .collect();
    history.sort_by_key(|e| e.prepare.counter);
    history
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::primitives::{hash, CryptoBackend};
    use crate::protocol::app::{AppResult, Operation};
    use crate::protocol::messages::ViewChangeKind;
    use crate::tee::provision;
    use crate::ClientId;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    struct Fixture {
        crypto: Crypto,
        registry: std::sync::Arc<KeyRegistry>,
        clients: ClientRegistry,
        tees: Vec<crate::tee::Tee>,
        key: crate::primitives::PrivateKey,
    }

    fn fixture() -> Fixture {
        let crypto = CryptoBackend::Fast.provider();
        let (tees, registry) = provision(3, 1, crypto.clone(), 5);
        let kp = crypto.signing_keypair(&mut ChaCha20Rng::seed_from_u64(2));
        Fixture { crypto, registry, clients: ClientRegistry(vec![kp.public]), tees, key: kp.private }
    }

    fn request(fx: &Fixture, seq: u64) -> Request {
        let id = RequestId { client: ClientId(0), seq };
        Request::new(id, Operation::Increment { key: "k".into(), by: 1 }, &fx.crypto, &fx.key)
    }

    fn proof(fx: &mut Fixture, who: usize, log: Vec<LogEntry>) -> ReqViewChange {
        let digest = ReqViewChange::content_digest(1, ViewChangeKind::Regular, &log, None);
        let attestation = fx.tees[who].attest(digest).unwrap();
        ReqViewChange { target: 1, kind: ViewChangeKind::Regular, log, checkpoint: None, attestation }
    }

    #[test]
    fn coverage_counts_skipped_and_anchor() {
        let mut fx = fixture();
        let b1 = fx.tees[0].request_counter(hash(b"a")).unwrap();
        let b2 = fx.tees[0].request_counter(hash(b"b")).unwrap();
        let b3 = fx.tees[0].request_counter(hash(b"c")).unwrap();
        let tc = LogEntry::TreeChange { binding: b3.clone(), skipped: vec![b1.clone(), b2] };
        assert!(log_covers(&[tc.clone()], None, b3.counter));
        let m = request(&fx, 1);
        let only_first = LogEntry::Prepared { request: m, binding: b1 };
        assert!(!log_covers(&[only_first.clone()], None, b3.counter));
        assert!(log_covers(&[], Some(b3.counter), b3.counter));
        assert!(log_covers(&[only_first], Some(CounterValue::new(3, 0)), CounterValue::new(3, 0)));
    }

    #[test]
    fn merges_logs_and_orders_by_counter() {
        let mut fx = fixture();
        let m1 = request(&fx, 1);
        let m2 = request(&fx, 2);
        let p1 = fx.tees[0].request_counter(m1.digest()).unwrap();
        let res = AppResult { output: Some(1), delta: vec![("k".into(), 1)] };
        let c1 = fx.tees[0].request_counter(m1.result_digest(&res)).unwrap();
        let p2 = fx.tees[0].request_counter(m2.digest()).unwrap();
        let full = vec![
            LogEntry::Prepared { request: m1.clone(), binding: p1.clone() },
            LogEntry::Committed { request: m1.clone(), result: res.clone(), binding: c1.clone() },
            LogEntry::Prepared { request: m2.clone(), binding: p2.clone() },
        ];
        let short = vec![LogEntry::Prepared { request: m1.clone(), binding: p1.clone() }];
        let proofs = vec![proof(&mut fx, 1, short), proof(&mut fx, 2, full)];
        let v = Verifier { crypto: &fx.crypto, registry: &fx.registry, clients: &fx.clients };
        let o = build(&proofs, None, v);
        assert_eq!(o.len(), 2);
        assert_eq!(o[0].request, m1);
        assert_eq!(o[0].commit, Some((res, c1)));
        assert_eq!(o[1].request, m2);
        assert!(o[1].commit.is_none());
    }

    #[test]
    fn drops_forged_and_foreign_bindings() {
        let mut fx = fixture();
        let m1 = request(&fx, 1);
        let p1 = fx.tees[0].request_counter(m1.digest()).unwrap();
        // Replica 1's own TEE can bind anything, but only one issuer per view
        // survives and two senders vouch for replica 0.
        let m7 = request(&fx, 7);
        let rogue = fx.tees[1].request_counter(m7.digest()).unwrap();
        let mut forged = p1.clone();
        forged.digest = hash(b"other");
        let logs = [
            vec![LogEntry::Prepared { request: m1.clone(), binding: p1.clone() }],
            vec![
                LogEntry::Prepared { request: m1.clone(), binding: p1.clone() },
                LogEntry::Prepared { request: request(&fx, 7), binding: rogue },
                LogEntry::Prepared { request: request(&fx, 3), binding: forged },
            ],
        ];
        let proofs: Vec<_> =
            logs.into_iter().enumerate().map(|(i, l)| proof(&mut fx, i + 1, l)).collect();
        let v = Verifier { crypto: &fx.crypto, registry: &fx.registry, clients: &fx.clients };
        let o = build(&proofs, None, v);
        assert_eq!(o.len(), 1);
        assert_eq!(o[0].request, m1);
    }

    #[test]
    fn later_view_start_settles_earlier_views() {
        let mut fx = fixture();
        let (m1, m2, m3) = (request(&fx, 1), request(&fx, 2), request(&fx, 3));
        // View 0: m1 prepared but never committed; a stuck replica also
        // holds m3, which view 1 never adopted.
        let p1 = fx.tees[0].request_counter(m1.digest()).unwrap();
        let p3 = fx.tees[0].request_counter(m3.digest()).unwrap();
        let carried = HistoryEntry { request: m1.clone(), prepare: p1.clone(), commit: None };
        // View 1 starts with m1, then re-proposes it and commits it again.
        let actives = [ReplicaId(1), ReplicaId(2)];
        let tree = crate::topology::TreeTopology::build(ReplicaId(1), &actives, 2).unwrap();
        fx.tees[1].be_primary(&actives, &tree, 1).unwrap();
        let start = fx.tees[1].request_counter(hash(b"view 1")).unwrap();
        let again = fx.tees[1].request_counter(m1.digest()).unwrap();
        let res = AppResult::default();
        let again_c = fx.tees[1].request_counter(m1.result_digest(&res)).unwrap();
        let p2 = fx.tees[1].request_counter(m2.digest()).unwrap();
        let moved = vec![
            LogEntry::ViewStart { binding: start, history: vec![carried] },
            LogEntry::Prepared { request: m1.clone(), binding: again.clone() },
            LogEntry::Committed { request: m1.clone(), result: res, binding: again_c },
            LogEntry::Prepared { request: m2.clone(), binding: p2 },
        ];
        let stuck = vec![
            LogEntry::Prepared { request: m1.clone(), binding: p1.clone() },
            LogEntry::Prepared { request: m3, binding: p3 },
        ];
        let proofs = vec![proof(&mut fx, 2, moved), proof(&mut fx, 0, stuck)];
        let v = Verifier { crypto: &fx.crypto, registry: &fx.registry, clients: &fx.clients };
        let o = build(&proofs, None, v);
        let order: Vec<_> = o.iter().map(|e| (e.request.id.seq, e.prepare.counter)).collect();
        assert_eq!(order, vec![(1, p1.counter), (2, CounterValue::new(4, 1))]);
        assert!(o[0].commit.is_none(), "the re-proposal's commit belongs to a skipped binding");
        assert_ne!(again.counter, p1.counter);
    }

    #[test]
    fn request_validity_checks_attestation_and_log() {
        let mut fx = fixture();
        let m1 = request(&fx, 1);
        let p1 = fx.tees[0].request_counter(m1.digest()).unwrap();
        // Replica 1 mirrors the counter, as it would after verify_counter.
        let good = proof(&mut fx, 0, vec![LogEntry::Prepared { request: m1, binding: p1 }]);
        let empty = proof(&mut fx, 0, vec![]);
        let v = Verifier { crypto: &fx.crypto, registry: &fx.registry, clients: &fx.clients };
        assert!(v.request_is_valid(&good));
        let mut tampered = good.clone();
        tampered.target = 2;
        assert!(!v.request_is_valid(&tampered));
        assert!(!v.request_is_valid(&empty), "TEE at (1,0) but log accounts for nothing");
    }
}
