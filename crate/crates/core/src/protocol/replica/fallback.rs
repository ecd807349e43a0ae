//! Fallback mode: a star over all replicas with Shamir shares; any f + 1
//! valid shares open a secret. Also the probe that leads back to normal mode.

use super::{ActiveRound, LeaderRound, Replica};
use crate::primitives::{commitment_digest, FieldElement, Secret};
use crate::protocol::messages::{LogEntry, Mode, ProtocolMessage, Request};
use crate::protocol::{AppResult, Observation, Timer};
use crate::tee::{CounterAssignment, ReleasedShare};
use crate::{CounterValue, ReplicaId, RequestId};

impl Replica {
    pub(super) fn start_fallback_round(&mut self, m: Request) {
        if !self.ensure_packages() {
            self.leader.as_mut().expect("primary").queue.push_front(m);
            return;
        }
        let Ok(prepare) = self.tee.request_counter(m.digest()) else {
            return;
        };
        let c = prepare.counter;
        self.log.push(LogEntry::Prepared { request: m.clone(), binding: prepare.clone() });
        let msg = ProtocolMessage::FallbackPrepare { request: m.clone(), binding: prepare.clone() };
        self.broadcast(msg, Some(m.id));
        self.leader.as_mut().expect("primary").round =
            Some(LeaderRound { request: m, prepare, commit: None, stalled: false });
        self.collect_own_fallback_share(c);
    }

    pub(super) fn collect_own_fallback_share(&mut self, c: CounterValue) {
        let own = match self.tee.release_own_share(c) {
            Ok(ReleasedShare::Shamir { share, .. }) => vec![(self.id.index(), share.y)],
            _ => vec![],
        };
        self.leader.as_mut().expect("primary").fallback_shares.insert(c, own);
        self.try_reconstruct(c);
    }

    pub(super) fn on_fallback_share(&mut self, j: ReplicaId, c: CounterValue, y: FieldElement) {
        let Some(leader) = self.leader.as_mut() else {
            return;
        };
        let Some(list) = leader.fallback_shares.get_mut(&c) else {
            return;
        };
        if j.index() >= self.cfg.n || list.iter().any(|(i, _)| *i == j.index()) {
            return;
        }
        list.push((j.index(), y));
        self.try_reconstruct(c);
    }

    /// Tries every (f + 1)-subset that contains the newest share; subsets
    /// without it were tried when their own last member arrived.
    fn try_reconstruct(&mut self, c: CounterValue) {
        let f = self.cfg.f;
        let leader = self.leader.as_ref().expect("primary");
        let Some(shares) = leader.fallback_shares.get(&c).cloned() else {
            return;
        };
        let Some(expected) = leader.packages.get(&c).map(|p| p.commitment) else {
            return;
        };
        if shares.len() < f + 1 {
            return;
        }
        let newest = shares.len() - 1;
        let table = self.lagrange().clone();
        let mut found = None;
        for_each_subset(newest, f, &mut |idx| {
            let mut subset: Vec<(usize, FieldElement)> =
                idx.iter().map(|k| shares[*k].clone()).collect();
            subset.push(shares[newest].clone());
            let Ok(v) = table.reconstruct(f, &subset) else {
                return false;
            };
            match table.field().to_secret(&v) {
                Some(s) if commitment_digest(&s, c) == expected => {
                    found = Some(s);
                    true
                }
                _ => false,
            }
        });
        let Some(secret) = found else {
            return;
        };
        self.leader.as_mut().expect("primary").fallback_shares.remove(&c);
        self.observe(Observation::FallbackReconstructed { counter: c, secret });
        self.on_secret(c, secret);
    }

    fn send_fallback_share(&mut self, c: CounterValue, y: FieldElement, round: RequestId) {
        if self.behavior.silent_shares {
            return;
        }
        let y = if self.behavior.wrong_shares {
            let field = self.lagrange().field().clone();
            field.add(&y, &field.one())
        } else {
            y
        };
        self.send(self.primary, ProtocolMessage::FallbackShare { counter: c, y }, Some(round));
    }

    pub(super) fn on_fallback_prepare(&mut self, j: ReplicaId, m: Request, b: CounterAssignment) {
        if j != self.primary || b.issuer != self.primary || self.mode != Mode::Fallback {
            return;
        }
        if !self.tee.holds_view_key() {
            return;
        }
        if !self.prepare_is_valid_fallback(&m, &b) {
            self.request_view_change();
            return;
        }
        let c = b.counter;
        let Some(blob) = self.current_blob(c) else {
            let msg = ProtocolMessage::FallbackPrepare { request: m, binding: b };
            self.awaiting_blob.insert(c, (j.into(), msg));
            return;
        };
        match self.tee.verify_counter(&b, &blob) {
            Ok(ReleasedShare::Shamir { share, commitment, .. }) => {
                self.blobs.remove(&c);
                self.log.push(LogEntry::Prepared { request: m.clone(), binding: b.clone() });
                let id = m.id;
                self.active_round = Some(ActiveRound { request: m, prepare: b, commitment });
                self.send_fallback_share(c, share.y, id);
            }
            _ => self.request_view_change(),
        }
    }

    fn prepare_is_valid_fallback(&self, m: &Request, b: &CounterAssignment) -> bool {
        b.kind == crate::tee::BindingKind::Counter
            && b.digest == m.digest()
            && m.verify(&self.crypto, &self.clients)
    }

    pub(super) fn on_fallback_commit(
        &mut self,
        j: ReplicaId,
        secret: Secret,
        result: AppResult,
        b: CounterAssignment,
    ) {
        if j != self.primary || b.issuer != self.primary || self.mode != Mode::Fallback {
            return;
        }
        if !self.tee.holds_view_key() {
            return;
        }
        let Some(round) = self.commit_is_valid(&secret, &result, &b) else {
            self.request_view_change();
            return;
        };
        let c1 = b.counter;
        let Some(blob) = self.current_blob(c1) else {
            let msg = ProtocolMessage::FallbackCommit { secret, result, binding: b };
            self.awaiting_blob.insert(c1, (j.into(), msg));
            return;
        };
        let Ok(ReleasedShare::Shamir { share, .. }) = self.tee.verify_counter(&b, &blob) else {
            self.request_view_change();
            return;
        };
        self.blobs.remove(&c1);
        let local = self.execute(&round.request, round.prepare.counter);
        if local != result {
            self.request_view_change();
            return;
        }
        let id = round.request.id;
        self.log.push(LogEntry::Committed { request: round.request, result, binding: b });
        self.request_progress(id);
        self.round_complete();
        self.send_fallback_share(c1, share.y, id);
    }

    /// After enough fallback requests, asks whether f peers answer in time.
    pub(super) fn maybe_probe(&mut self) {
        let duration = self.cfg.fallback_duration;
        let leader = self.leader.as_mut().expect("primary");
        if leader.fallback_served < duration || leader.probe.is_some() {
            return;
        }
        leader.probe_nonce += 1;
        let nonce = leader.probe_nonce;
        leader.probe = Some((nonce, Default::default()));
        self.broadcast(ProtocolMessage::Probe { nonce }, None);
        self.set_timer(Timer::Probe, self.cfg.probe_timeout);
    }

    pub(super) fn on_probe_ack(&mut self, j: ReplicaId, nonce: u64) {
        let f = self.cfg.f;
        if self.mode != Mode::Fallback {
            return;
        }
        let Some(leader) = self.leader.as_mut() else {
            return;
        };
        let Some((n, acks)) = leader.probe.as_mut() else {
            return;
        };
        if *n != nonce {
            return;
        }
        acks.insert(j);
        if acks.len() >= f {
            leader.probe = None;
            leader.pending_transition = Some(Mode::Normal);
            self.cancel_timer(Timer::Probe);
            self.try_start_round();
        }
    }

    pub(super) fn on_probe_timeout(&mut self) {
        if let Some(leader) = self.leader.as_mut() {
            if leader.probe.take().is_some() {
                leader.fallback_served = 0;
            }
        }
    }
}

/// Calls `visit` with each `k`-subset of `0..n` in lexicographic order until
/// it returns true.
fn for_each_subset(n: usize, k: usize, visit: &mut dyn FnMut(&[usize]) -> bool) {
    if k > n {
        return;
    }
    let mut idx: Vec<usize> = (0..k).collect();
    loop {
        if visit(&idx) {
            return;
        }
        let Some(pos) = (0..k).rev().find(|&p| idx[p] < n - k + p) else {
            return;
        };
        idx[pos] += 1;
        for q in pos + 1..k {
            idx[q] = idx[q - 1] + 1;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::for_each_subset;

    #[test]
    fn subsets_are_enumerated_once() {
        let mut seen = Vec::new();
        for_each_subset(4, 2, &mut |s| {
            seen.push(s.to_vec());
            false
        });
        assert_eq!(seen.len(), 6);
        assert_eq!(seen[0], vec![0, 1]);
        assert_eq!(seen[5], vec![2, 3]);
        let mut empty = 0;
        for_each_subset(3, 0, &mut |s| {
            empty += 1;
            s.is_empty()
        });
        assert_eq!(empty, 1);
    }
}
