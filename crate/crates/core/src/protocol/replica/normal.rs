//! Normal case: requests, XOR share aggregation, COMMIT and REPLY, SUSPECT
//! handling and NEW-TREE.

use std::collections::BTreeMap;

use rand::Rng;

use super::{ActiveRound, Aggregation, Leader, LeaderRound, Package, Replica, Status};
use crate::primitives::{commitment_digest, share_digest, Digest, Secret};
use crate::protocol::messages::{LogEntry, Mode, NewTree, ProtocolMessage, Reply, Request};
use crate::protocol::{AppResult, Observation, Operation, Timer};
use crate::tee::{BindingKind, CounterAssignment, ReleasedShare, ShareBlob};
use crate::{CounterValue, NodeId, ReplicaId, RequestId};

impl Replica {
    pub(super) fn on_request(&mut self, from: NodeId, m: Request) {
        if !m.verify(&self.crypto, &self.clients) {
            return;
        }
        let c = m.id.client;
        if self.client_requests.get(&c).is_some_and(|old| old.id.seq > m.id.seq) {
            return;
        }
        if self.is_primary() {
            let leader = self.leader.as_ref().expect("primary");
            if let Some(r) = leader.replies.get(&c) {
                if r.request.id == m.id {
                    let msg = ProtocolMessage::Reply(Box::new(r.clone()));
                    self.send(c, msg, Some(m.id));
                    return;
                }
            }
            if self.app.has_executed(m.id) && self.app.cached(m.id).is_none() {
                return;
            }
            self.client_requests.insert(c, m.clone());
            if self.status != Status::Normal || self.behavior.primary_silent {
                return;
            }
            self.enqueue(m);
            self.try_start_round();
        } else if matches!(from, NodeId::Client(_)) {
            // A retransmission of an executed request still means the client
            // has no reply.
            let watch = !self.client_requests.get(&c).is_some_and(|o| o.id == m.id);
            self.client_requests.insert(c, m.clone());
            if self.status == Status::Normal {
                let id = m.id;
                self.send(self.primary, ProtocolMessage::Request(m), Some(id));
                if watch {
                    self.set_timer(Timer::Request(c), self.cfg.request_timeout);
                }
            }
        }
    }

    /// Queues `m` unless it is already queued or in flight.
    pub(super) fn enqueue(&mut self, m: Request) {
        let leader = self.leader.as_mut().expect("primary");
        if leader.round.as_ref().is_some_and(|r| r.request.id == m.id) {
            return;
        }
        if let Some(q) = leader.queue.iter_mut().find(|q| q.id.client == m.id.client) {
            if q.id.seq < m.id.seq {
                *q = m;
            }
            return;
        }
        leader.queue.push_back(m);
    }

    pub(super) fn try_start_round(&mut self) {
        if !self.is_primary() || self.status != Status::Normal {
            return;
        }
        let leader = self.leader.as_mut().expect("primary");
        if leader.round.is_some() {
            return;
        }
        if let Some(mode) = leader.pending_transition.take() {
            self.start_transition(mode);
            return;
        }
        if self.mode == Mode::Fallback {
            self.maybe_probe();
        }
        let leader = self.leader.as_mut().expect("primary");
        let Some(m) = leader.queue.pop_front() else {
            return;
        };
        match self.mode {
            Mode::Normal => self.start_normal_round(m),
            Mode::Fallback => self.start_fallback_round(m),
        }
    }

    /// Makes sure secrets exist for the next two counter values, running a
    /// fresh preprocessing batch if not.
    pub(super) fn ensure_packages(&mut self) -> bool {
        let next = self.tee.latest().next();
        let leader = self.leader.as_ref().expect("primary");
        if leader.packages.contains_key(&next) && leader.packages.contains_key(&next.next()) {
            return true;
        }
        let batch = self.cfg.preprocess_batch.max(2);
        let pkgs = match self.mode {
            Mode::Normal => self.tee.preprocessing(batch),
            Mode::Fallback => self.tee.preprocessing_fallback(batch),
        };
        let Ok(pkgs) = pkgs else {
            return false;
        };
        let mut per: BTreeMap<ReplicaId, Vec<(CounterValue, ShareBlob)>> = BTreeMap::new();
        let leader = self.leader.as_mut().expect("primary");
        leader.packages.clear();
        for p in pkgs {
            for (r, b) in p.blobs {
                per.entry(r).or_default().push((p.counter, b));
            }
            leader
                .packages
                .insert(p.counter, Package { commitment: p.commitment, binding: p.binding });
        }
        let epoch = self.epoch;
        for (r, blobs) in per {
            self.send(r, ProtocolMessage::Preprocess { epoch, blobs }, None);
        }
        true
    }

    fn start_normal_round(&mut self, m: Request) {
        if !self.ensure_packages() {
            self.leader.as_mut().expect("primary").queue.push_front(m);
            return;
        }
        let Ok(prepare) = self.tee.request_counter(m.digest()) else {
            return;
        };
        let c = prepare.counter;
        self.log.push(LogEntry::Prepared { request: m.clone(), binding: prepare.clone() });
        if self.behavior.equivocate {
            self.equivocate(m, prepare);
            return;
        }
        let actives = self.tree.nodes().to_vec();
        let msg = ProtocolMessage::Prepare { request: m.clone(), binding: prepare.clone() };
        self.send_all(&actives, msg, Some(m.id));
        let id = m.id;
        self.leader.as_mut().expect("primary").round =
            Some(LeaderRound { request: m, prepare, commit: None, stalled: false });
        if let Ok(ReleasedShare::Xor { share, child_digests, .. }) = self.tee.release_own_share(c) {
            self.start_aggregation(c, id, share, child_digests);
        }
    }

    /// Byzantine script: binds a tampered request as well, splits the
    /// actives between the two, then stalls.
    fn equivocate(&mut self, m: Request, prepare: CounterAssignment) {
        let mut forged = m.clone();
        forged.op = match &m.op {
            Operation::Put { key, value } => Operation::Put { key: key.clone(), value: value ^ 1 },
            Operation::Get { key } => Operation::Put { key: key.clone(), value: 0 },
            Operation::Increment { key, by } => Operation::Increment { key: key.clone(), by: by + 1 },
        };
        if let Ok(b2) = self.tee.request_counter(forged.digest()) {
            self.log.push(LogEntry::Prepared { request: forged.clone(), binding: b2 });
        }
        let actives: Vec<ReplicaId> =
            self.tree.nodes().iter().copied().filter(|r| *r != self.id).collect();
        let half = actives.len() / 2;
        for (k, r) in actives.into_iter().enumerate() {
            let request = if k < half { m.clone() } else { forged.clone() };
            let msg = ProtocolMessage::Prepare { request, binding: prepare.clone() };
            self.send(r, msg, Some(m.id));
        }
        self.leader.as_mut().expect("primary").round =
            Some(LeaderRound { request: m, prepare, commit: None, stalled: true });
    }

    pub(super) fn start_aggregation(
        &mut self,
        c: CounterValue,
        request: RequestId,
        own: Secret,
        child_digests: Vec<(ReplicaId, Digest)>,
    ) {
        let mut missing = BTreeMap::new();
        for (child, d) in child_digests {
            missing.insert(child, d);
            let h = self.tree.height(child) as u64;
            self.set_timer(Timer::ChildShare { counter: c, child }, self.cfg.child_timeout * (h + 1));
        }
        self.pending.insert(c, Aggregation { request, acc: own, missing, failed: false });
        for (from, s) in self.early_shares.remove(&c).unwrap_or_default() {
            self.on_share(from, c, s);
        }
        self.try_complete(c);
    }

    pub(super) fn on_share(&mut self, j: ReplicaId, c: CounterValue, aggregate: Secret) {
        let Some(a) = self.pending.get_mut(&c) else {
            if c.view == self.view && c > self.tee.latest() {
                self.early_shares.entry(c).or_default().push((j, aggregate));
            }
            return;
        };
        if a.failed {
            return;
        }
        let Some(expect) = a.missing.get(&j).copied() else {
            return;
        };
        if share_digest(&aggregate) != expect {
            self.abandon_aggregation(c);
            self.suspect(j, c);
            return;
        }
        a.acc ^= aggregate;
        a.missing.remove(&j);
        self.cancel_timer(Timer::ChildShare { counter: c, child: j });
        self.try_complete(c);
    }

    /// Stops waiting on the remaining children of `c`.
    fn abandon_aggregation(&mut self, c: CounterValue) {
        let Some(a) = self.pending.get_mut(&c) else {
            return;
        };
        a.failed = true;
        let children: Vec<ReplicaId> = a.missing.keys().copied().collect();
        for child in children {
            self.cancel_timer(Timer::ChildShare { counter: c, child });
        }
    }

    fn drop_aggregation(&mut self, c: CounterValue) {
        self.abandon_aggregation(c);
        self.pending.remove(&c);
    }

    fn try_complete(&mut self, c: CounterValue) {
        let done = self.pending.get(&c).is_some_and(|a| !a.failed && a.missing.is_empty());
        if !done {
            return;
        }
        let a = self.pending.remove(&c).expect("checked");
        if self.is_primary() {
            self.on_secret(c, a.acc);
        } else if let Some(parent) = self.tree.parent(self.id) {
            if self.behavior.silent_shares {
                return;
            }
            let mut aggregate = a.acc;
            if self.behavior.wrong_shares {
                aggregate.0[0] ^= 1;
            }
            self.send(parent, ProtocolMessage::Share { counter: c, aggregate }, Some(a.request));
        }
    }

    pub(super) fn on_child_timeout(&mut self, c: CounterValue, child: ReplicaId) {
        let waiting = self
            .pending
            .get(&c)
            .is_some_and(|a| !a.failed && a.missing.contains_key(&child));
        if waiting && self.status == Status::Normal {
            self.abandon_aggregation(c);
            self.suspect(child, c);
        }
    }

    fn round_request(&self, c: CounterValue) -> Option<RequestId> {
        self.pending.get(&c).map(|a| a.request).or_else(|| {
            self.active_round
                .as_ref()
                .filter(|r| r.prepare.counter == c || r.prepare.counter.next() == c)
                .map(|r| r.request.id)
        })
    }

    fn suspect(&mut self, accused: ReplicaId, round: CounterValue) {
        if self.is_primary() {
            self.record_suspect(accused, self.id, round);
            return;
        }
        let msg = ProtocolMessage::Suspect { accused, accuser: self.id, round };
        let rid = self.round_request(round);
        self.send(self.primary, msg.clone(), rid);
        if let Some(p) = self.tree.parent(self.id) {
            if p != self.primary {
                self.send(p, msg, rid);
            }
        }
    }

    pub(super) fn on_suspect(
        &mut self,
        j: ReplicaId,
        accused: ReplicaId,
        accuser: ReplicaId,
        round: CounterValue,
    ) {
        let from_child = self.pending.get(&round).is_some_and(|a| a.missing.contains_key(&j));
        if from_child {
            // The sender's subtree is broken; do not blame the sender too.
            self.abandon_aggregation(round);
        }
        if self.is_primary() {
            self.record_suspect(accused, accuser, round);
        } else if from_child && accused != self.primary {
            if let Some(p) = self.tree.parent(self.id) {
                let rid = self.round_request(round);
                self.send(p, ProtocolMessage::Suspect { accused, accuser, round }, rid);
            }
        }
    }

    fn record_suspect(&mut self, accused: ReplicaId, accuser: ReplicaId, round: CounterValue) {
        if accused == self.id || !self.tree.contains(accused) || self.mode != Mode::Normal {
            return;
        }
        let leader = self.leader.as_mut().expect("primary");
        let Some(r) = &leader.round else {
            return;
        };
        let current = r.prepare.counter == round
            || r.commit.as_ref().is_some_and(|(_, b, _)| b.counter == round);
        if !current || r.stalled {
            return;
        }
        if !leader.suspects.contains(&(accused, accuser, round)) {
            leader.suspects.push((accused, accuser, round));
        }
        if !leader.window_open {
            leader.window_open = true;
            self.set_timer(Timer::SuspectWindow, self.cfg.suspect_window);
        }
    }

    /// Picks the deepest accused node of the current round and reshapes the
    /// tree around it, or falls back after too many suspects.
    pub(super) fn on_suspect_window(&mut self) {
        if !self.is_primary() || self.status != Status::Normal {
            return;
        }
        let tree = self.tree.clone();
        let leader = self.leader.as_mut().expect("primary");
        leader.window_open = false;
        let suspects = std::mem::take(&mut leader.suspects);
        let Some(r) = &leader.round else {
            return;
        };
        let prepare = r.prepare.counter;
        let commit = r.commit.as_ref().map(|(_, b, _)| b.counter);
        let pick = suspects
            .into_iter()
            .filter(|(a, _, c)| (*c == prepare || Some(*c) == commit) && tree.contains(*a))
            .max_by_key(|(a, _, _)| (tree.level(*a).unwrap_or(0), std::cmp::Reverse(*a)));
        let Some((accused, accuser, _)) = pick else {
            return;
        };
        leader.suspect_count += 1;
        if leader.suspect_count >= self.cfg.fallback_threshold {
            self.start_transition(Mode::Fallback);
            return;
        }
        self.new_tree(accused, accuser);
    }

    fn new_tree(&mut self, accused: ReplicaId, accuser: ReplicaId) {
        let n = self.cfg.n as u32;
        let tree = self.tree.clone();
        let leader = self.leader.as_mut().expect("primary");
        leader.evicted.insert(accused);
        let outside: Vec<ReplicaId> = (0..n).map(ReplicaId).filter(|r| !tree.contains(*r)).collect();
        let fresh: Vec<ReplicaId> =
            outside.iter().copied().filter(|r| !leader.evicted.contains(r)).collect();
        let candidates = if fresh.is_empty() { outside } else { fresh };
        if candidates.is_empty() {
            return;
        }
        let replacement = candidates[self.rng.gen_range(0..candidates.len())];
        let Ok(new) = tree.after_suspect(accused, replacement, accuser) else {
            return;
        };
        let Ok((binding, omegas)) = self.tee.reshape_tree(&new) else {
            return;
        };
        let leader = self.leader.as_mut().expect("primary");
        let round = leader.round.take().expect("suspects need a round");
        let mut skipped = vec![round.prepare.clone()];
        if let Some((_, b, _)) = &round.commit {
            skipped.push(b.clone());
        }
        self.clear_round_state();
        self.log.push(LogEntry::TreeChange { binding: binding.clone(), skipped: skipped.clone() });
        let key = skipped[0].counter;
        let nt = NewTree {
            old: tree,
            new: new.clone(),
            binding: binding.clone(),
            skipped: skipped.clone(),
            omegas: omegas.into_iter().collect(),
            request: Some(round.request.clone()),
        };
        let msg = ProtocolMessage::NewTree(Box::new(nt));
        let leader = self.leader.as_mut().expect("primary");
        leader.retransmit.push((key, msg.clone()));
        leader.packages.clear();
        leader.queue.push_front(round.request.clone());
        self.broadcast(msg, Some(round.request.id));
        self.skipped.extend(skipped.iter().map(|b| b.counter));
        self.tree = new;
        self.epoch = binding.counter;
        self.observe(Observation::NewTree { counter: binding.counter });
        self.try_start_round();
    }

    pub(super) fn on_new_tree(&mut self, j: ReplicaId, nt: NewTree) {
        if j != self.primary || nt.binding.issuer != self.primary || self.is_primary() {
            return;
        }
        if nt.old != self.tree {
            self.request_view_change();
            return;
        }
        let omega = nt.omegas.iter().find(|(r, _)| *r == self.id).map(|(_, ct)| ct.as_slice());
        if self.tee.update_tree(&nt.binding, &nt.skipped, &nt.old, &nt.new, omega).is_err() {
            self.request_view_change();
            return;
        }
        self.clear_round_state();
        self.log.push(LogEntry::TreeChange {
            binding: nt.binding.clone(),
            skipped: nt.skipped.clone(),
        });
        self.skipped.extend(nt.skipped.iter().map(|b| b.counter));
        self.tree = nt.new;
        self.epoch = nt.binding.counter;
        let (e, latest) = (self.epoch, self.tee.latest());
        self.blobs.retain(|_, (ep, _)| *ep >= e);
        self.awaiting_blob.retain(|c, _| *c > latest);
    }

    fn is_active_here(&self) -> bool {
        self.tree.contains(self.id) && self.tee.holds_view_key()
    }

    fn prepare_is_valid(&self, m: &Request, b: &CounterAssignment) -> bool {
        b.kind == BindingKind::Counter
            && b.digest == m.digest()
            && m.verify(&self.crypto, &self.clients)
    }

    pub(super) fn on_prepare(&mut self, j: ReplicaId, m: Request, b: CounterAssignment) {
        if j != self.primary || b.issuer != self.primary || self.mode != Mode::Normal {
            return;
        }
        if !self.is_active_here() {
            return;
        }
        if !self.prepare_is_valid(&m, &b) {
            self.request_view_change();
            return;
        }
        let c = b.counter;
        let Some(blob) = self.current_blob(c) else {
            let msg = ProtocolMessage::Prepare { request: m, binding: b };
            self.awaiting_blob.insert(c, (j.into(), msg));
            return;
        };
        match self.tee.verify_counter(&b, &blob) {
            Ok(ReleasedShare::Xor { share, child_digests, commitment, .. }) => {
                self.blobs.remove(&c);
                self.log.push(LogEntry::Prepared { request: m.clone(), binding: b.clone() });
                let id = m.id;
                self.active_round = Some(ActiveRound { request: m, prepare: b, commitment });
                self.start_aggregation(c, id, share, child_digests);
            }
            _ => self.request_view_change(),
        }
    }

    /// Checks a COMMIT or FALLBACK-COMMIT against the round it closes.
    pub(super) fn commit_is_valid(
        &self,
        secret: &Secret,
        result: &AppResult,
        b: &CounterAssignment,
    ) -> Option<ActiveRound> {
        let round = self.active_round.clone()?;
        let ok = round.prepare.counter.next() == b.counter
            && commitment_digest(secret, round.prepare.counter) == round.commitment
            && b.kind == BindingKind::Counter
            && b.digest == round.request.result_digest(result);
        ok.then_some(round)
    }

    pub(super) fn on_commit(
        &mut self,
        j: ReplicaId,
        secret: Secret,
        result: AppResult,
        b: CounterAssignment,
    ) {
        if j != self.primary || b.issuer != self.primary || self.mode != Mode::Normal {
            return;
        }
        if !self.is_active_here() {
            return;
        }
        let Some(round) = self.commit_is_valid(&secret, &result, &b) else {
            self.request_view_change();
            return;
        };
        let c1 = b.counter;
        let Some(blob) = self.current_blob(c1) else {
            let msg = ProtocolMessage::Commit { secret, result, binding: b };
            self.awaiting_blob.insert(c1, (j.into(), msg));
            return;
        };
        let Ok(ReleasedShare::Xor { share, child_digests, .. }) = self.tee.verify_counter(&b, &blob)
        else {
            self.request_view_change();
            return;
        };
        self.blobs.remove(&c1);
        let local = self.execute(&round.request, round.prepare.counter);
        if local != result {
            self.request_view_change();
            return;
        }
        self.drop_aggregation(round.prepare.counter);
        let id = round.request.id;
        self.log.push(LogEntry::Committed { request: round.request, result, binding: b });
        self.request_progress(id);
        self.round_complete();
        self.start_aggregation(c1, id, share, child_digests);
    }

    /// Primary: an aggregation completed with the opened secret for `c`.
    pub(super) fn on_secret(&mut self, c: CounterValue, secret: Secret) {
        let leader = self.leader.as_ref().expect("primary");
        let Some(round) = leader.round.clone() else {
            return;
        };
        let Some(pkg) = leader.packages.get(&c) else {
            return;
        };
        if commitment_digest(&secret, c) != pkg.commitment {
            return;
        }
        if round.prepare.counter == c && round.commit.is_none() {
            let res = self.execute(&round.request, c);
            let Ok(b2) = self.tee.request_counter(round.request.result_digest(&res)) else {
                return;
            };
            let id = round.request.id;
            self.log.push(LogEntry::Committed {
                request: round.request.clone(),
                result: res.clone(),
                binding: b2.clone(),
            });
            self.leader.as_mut().expect("primary").round.as_mut().expect("round").commit =
                Some((res.clone(), b2.clone(), secret));
            let c1 = b2.counter;
            self.round_complete();
            match self.mode {
                Mode::Normal => {
                    let msg = ProtocolMessage::Commit { secret, result: res, binding: b2 };
                    let actives = self.tree.nodes().to_vec();
                    self.send_all(&actives, msg, Some(id));
                    if let Ok(ReleasedShare::Xor { share, child_digests, .. }) =
                        self.tee.release_own_share(c1)
                    {
                        self.start_aggregation(c1, id, share, child_digests);
                    }
                }
                Mode::Fallback => {
                    let msg = ProtocolMessage::FallbackCommit { secret, result: res, binding: b2 };
                    self.broadcast(msg, Some(id));
                    self.collect_own_fallback_share(c1);
                }
            }
        } else if let Some((res, b2, s_c)) = round.commit.clone().filter(|(_, b, _)| b.counter == c) {
            let leader = self.leader.as_ref().expect("primary");
            let (Some(p0), Some(p1)) =
                (leader.packages.get(&round.prepare.counter), leader.packages.get(&c))
            else {
                return;
            };
            let reply = Reply {
                request: round.request,
                result: res,
                commitment_c: p0.binding.clone(),
                prepare: round.prepare,
                secret_c: s_c,
                commitment_c1: p1.binding.clone(),
                commit: b2,
                secret_c1: secret,
            };
            self.finish_round(reply);
        }
    }

    fn finish_round(&mut self, reply: Reply) {
        let id = reply.request.id;
        let msg = ProtocolMessage::Reply(Box::new(reply.clone()));
        self.send(id.client, msg.clone(), Some(id));
        if self.mode == Mode::Normal {
            let passives: Vec<ReplicaId> = (0..self.cfg.n as u32)
                .map(ReplicaId)
                .filter(|r| !self.tree.contains(*r))
                .collect();
            self.send_all(&passives, msg.clone(), Some(id));
        }
        let mode = self.mode;
        let leader: &mut Leader = self.leader.as_mut().expect("primary");
        if mode == Mode::Normal {
            leader.retransmit.push((reply.prepare.counter, msg));
        } else {
            leader.fallback_served += 1;
        }
        leader.packages.remove(&reply.prepare.counter);
        leader.packages.remove(&reply.commit.counter);
        leader.replies.insert(id.client, reply);
        leader.round = None;
        self.request_progress(id);
        self.try_start_round();
    }

    pub(super) fn on_reply(&mut self, j: ReplicaId, r: Reply) {
        if j != self.primary || self.is_primary() {
            return;
        }
        let p = self.primary;
        let (crypto, registry) = (&self.crypto, &*self.registry);
        let ok = r.prepare.is(BindingKind::Counter, p)
            && r.commit.is(BindingKind::Counter, p)
            && r.commitment_c.is(BindingKind::Commitment, p)
            && r.commitment_c1.is(BindingKind::Commitment, p)
            && r.prepare.digest == r.request.digest()
            && r.commit.digest == r.request.result_digest(&r.result)
            && r.commit.counter == r.prepare.counter.next()
            && r.commitment_c.counter == r.prepare.counter
            && r.commitment_c1.counter == r.commit.counter
            && r.prepare.verify(crypto, registry)
            && r.commit.verify(crypto, registry)
            && r.request.verify(crypto, &self.clients);
        if !ok {
            self.request_view_change();
            return;
        }
        if self.tee.update_counter(&r.secret_c, &r.commitment_c).is_err()
            || self.tee.update_counter(&r.secret_c1, &r.commitment_c1).is_err()
        {
            self.request_view_change();
            return;
        }
        self.apply(&r.request, &r.result, r.prepare.counter);
        let id = r.request.id;
        self.log.push(LogEntry::Prepared { request: r.request.clone(), binding: r.prepare });
        self.log.push(LogEntry::Committed { request: r.request, result: r.result, binding: r.commit });
        self.request_progress(id);
        self.round_complete();
    }
}
