//! View change: REQ-VIEW-CHANGE, NEW-VIEW, VIEW-CHANGE and installation.
//! Mode transitions reuse the same path with the primary unchanged.

use std::collections::{BTreeMap, BTreeSet};

use super::{Leader, Replica, Status, ViewChangeState};
use crate::primitives::Digest;
use crate::protocol::history;
use crate::protocol::messages::{
    LogEntry, Mode, NewView, ProtocolMessage, ReqViewChange, ViewChangeKind,
};
use crate::protocol::{Observation, Timer};
use crate::tee::{BindingKind, CounterAssignment};
use crate::topology::TreeTopology;
use crate::{CounterValue, ReplicaId};

impl Replica {
    /// Reacts to misbehaviour observed in the current view.
    pub(super) fn request_view_change(&mut self) {
        if self.status != Status::Normal {
            return;
        }
        let t = self.next_regular_target(self.view);
        self.start_view_change(ViewChangeKind::Regular, t);
    }

    pub(super) fn start_transition(&mut self, mode: Mode) {
        let t = self.view + 1;
        self.start_view_change(ViewChangeKind::Transition(mode), t);
    }

    /// Smallest view above `after` whose primary is not the current one.
    fn next_regular_target(&self, after: u64) -> u64 {
        let n = self.cfg.n as u64;
        let mut t = after + 1;
        while t % n == self.primary.0 as u64 {
            t += 1;
        }
        t
    }

    /// Stops normal-case processing of the current view.
    fn freeze(&mut self) {
        self.clear_round_state();
        self.awaiting_blob.clear();
        for t in [Timer::SuspectWindow, Timer::Retransmit, Timer::Probe] {
            self.cancel_timer(t);
        }
        self.retransmit_armed = false;
        let clients: Vec<_> = self.client_requests.keys().copied().collect();
        for c in clients {
            self.cancel_timer(Timer::Request(c));
        }
        if let Some(leader) = self.leader.as_mut() {
            leader.window_open = false;
            leader.suspects.clear();
            leader.probe = None;
        }
    }

    fn arm_view_change_timer(&mut self) {
        let after = self.cfg.view_change_timeout << self.vc.attempts.min(8);
        self.vc.attempts += 1;
        self.set_timer(Timer::ViewChange, after);
    }

    pub(super) fn start_view_change(&mut self, kind: ViewChangeKind, target: u64) {
        if self.status == Status::Locked || target <= self.view {
            return;
        }
        if self.vc.requested.is_some_and(|(t, _)| t >= target) {
            return;
        }
        if let Some(p) = &self.vc.pending {
            if p.target >= target {
                return;
            }
        }
        self.freeze();
        self.vc.pending = None;
        self.status = Status::ViewChanging { target };
        let checkpoint = self.checkpoint.clone();
        let digest = ReqViewChange::content_digest(target, kind, &self.log, checkpoint.as_ref());
        let Ok(attestation) = self.tee.attest(digest) else {
            return;
        };
        let m = ReqViewChange { target, kind, log: self.log.clone(), checkpoint, attestation };
        self.vc.requested = Some((target, kind));
        self.vc.requests.entry(target).or_default().insert(self.id, m.clone());
        self.broadcast(ProtocolMessage::ReqViewChange(Box::new(m)), None);
        self.arm_view_change_timer();
        self.check_new_primary(target);
    }

    pub(super) fn on_view_change_timeout(&mut self) {
        match self.status {
            Status::ViewChanging { target } | Status::Installing { target } => {
                let t = self.next_regular_target(target.max(self.view));
                self.start_view_change(ViewChangeKind::Regular, t);
            }
            _ => {}
        }
    }

    pub(super) fn on_req_view_change(&mut self, j: ReplicaId, m: ReqViewChange) {
        if m.sender() != j || m.target <= self.view {
            return;
        }
        if !self.verifier().request_is_valid(&m) {
            return;
        }
        let (target, kind) = (m.target, m.kind);
        self.vc.requests.entry(target).or_default().insert(j, m);
        match kind {
            ViewChangeKind::Transition(mode) => {
                if j == self.primary && target == self.view + 1 {
                    self.start_view_change(ViewChangeKind::Transition(mode), target);
                }
            }
            ViewChangeKind::Regular => {
                let mut best: BTreeMap<ReplicaId, u64> = BTreeMap::new();
                for (t, by) in self.vc.requests.range(self.view + 1..) {
                    for (s, r) in by {
                        if r.kind == ViewChangeKind::Regular {
                            let e = best.entry(*s).or_insert(*t);
                            *e = (*e).max(*t);
                        }
                    }
                }
                let mut ts: Vec<u64> = best.into_values().collect();
                ts.sort_unstable_by(|a, b| b.cmp(a));
                if let Some(&t) = ts.get(self.cfg.f) {
                    self.start_view_change(ViewChangeKind::Regular, t);
                }
            }
        }
        self.check_new_primary(target);
    }

    /// Sends NEW-VIEW once this replica leads `t` and holds f + 1 requests.
    fn check_new_primary(&mut self, t: u64) {
        if self.vc.sent_new_view.contains(&t) || !matches!(self.status, Status::ViewChanging { .. })
        {
            return;
        }
        let Some((mine, kind)) = self.vc.requested else {
            return;
        };
        if mine != t {
            return;
        }
        let leads = match kind {
            ViewChangeKind::Regular => t % self.cfg.n as u64 == self.id.0 as u64,
            ViewChangeKind::Transition(_) => self.primary == self.id && t == self.view + 1,
        };
        if !leads {
            return;
        }
        let Some(by) = self.vc.requests.get(&t) else {
            return;
        };
        let Some(own) = by.get(&self.id) else {
            return;
        };
        let mut proofs = vec![own.clone()];
        proofs.extend(by.iter().filter(|(s, r)| **s != self.id && r.kind == kind).map(|(_, r)| r.clone()));
        if proofs.len() < self.cfg.f + 1 {
            return;
        }
        proofs.truncate(self.cfg.f + 1);
        self.send_new_view(t, kind, proofs);
    }

    fn view_tree(&self, mode: Mode, primary: ReplicaId, proofs: &[ReqViewChange]) -> Option<TreeTopology> {
        match mode {
            Mode::Normal => {
                let mut actives = vec![primary];
                actives.extend(proofs.iter().map(|p| p.sender()).filter(|s| *s != primary));
                actives.truncate(self.cfg.f + 1);
                TreeTopology::build(primary, &actives, self.cfg.branching).ok()
            }
            Mode::Fallback => {
                let all: Vec<ReplicaId> = (0..self.cfg.n as u32).map(ReplicaId).collect();
                TreeTopology::star(primary, &all).ok()
            }
        }
    }

    fn send_new_view(&mut self, t: u64, kind: ViewChangeKind, proofs: Vec<ReqViewChange>) {
        let checkpoint = history::highest_checkpoint(&proofs).cloned();
        let history = history::build(&proofs, checkpoint.as_ref(), self.verifier());
        let mode = match kind {
            ViewChangeKind::Regular => Mode::Normal,
            ViewChangeKind::Transition(m) => m,
        };
        let Some(tree) = self.view_tree(mode, self.id, &proofs) else {
            return;
        };
        let Ok(omegas) = self.tee.be_primary(tree.nodes(), &tree, t) else {
            return;
        };
        let digest = NewView::content_digest(t, mode, &history, &tree);
        let Ok(binding) = self.tee.request_counter(digest) else {
            return;
        };
        let nv = NewView {
            target: t,
            primary: self.id,
            mode,
            history,
            tree,
            binding,
            omegas: omegas.into_iter().collect(),
            proofs,
            checkpoint,
        };
        self.vc.sent_new_view.insert(t);
        self.broadcast(ProtocolMessage::NewView(Box::new(nv.clone())), None);
        self.install(nv);
    }

    fn new_view_is_valid(&self, nv: &NewView) -> bool {
        let f = self.cfg.f;
        let b = &nv.binding;
        let digest = NewView::content_digest(nv.target, nv.mode, &nv.history, &nv.tree);
        if !b.is(BindingKind::Counter, nv.primary)
            || b.counter != CounterValue::new(1, nv.target)
            || b.digest != digest
            || !b.verify(&self.crypto, &self.registry)
        {
            return false;
        }
        let Some(kind) = nv.proofs.first().map(|p| p.kind) else {
            return false;
        };
        let v = self.verifier();
        let mut senders = BTreeSet::new();
        for p in &nv.proofs {
            if p.target != nv.target
                || p.kind != kind
                || !senders.insert(p.sender())
                || !v.request_is_valid(p)
            {
                return false;
            }
        }
        if senders.len() < f + 1 {
            return false;
        }
        let leader_ok = match kind {
            ViewChangeKind::Regular => {
                nv.primary.0 as u64 == nv.target % self.cfg.n as u64 && nv.mode == Mode::Normal
            }
            ViewChangeKind::Transition(m) => {
                nv.mode == m
                    && nv.primary == self.primary
                    && nv.target == self.view + 1
                    && senders.contains(&nv.primary)
            }
        };
        if !leader_ok {
            return false;
        }
        let checkpoint = history::highest_checkpoint(&nv.proofs);
        if checkpoint != nv.checkpoint.as_ref() {
            return false;
        }
        if history::build(&nv.proofs, checkpoint, v) != nv.history {
            return false;
        }
        self.view_tree(nv.mode, nv.primary, &nv.proofs).as_ref() == Some(&nv.tree)
    }

    pub(super) fn on_new_view(&mut self, j: ReplicaId, nv: NewView) {
        if j != nv.primary || nv.target <= self.view {
            return;
        }
        if self.vc.pending.as_ref().is_some_and(|p| p.target >= nv.target) {
            return;
        }
        // A replica that already asked for a later view has executed nothing
        // since freezing, so any valid NEW-VIEW above its own view will do.
        if !self.new_view_is_valid(&nv) {
            return;
        }
        self.freeze();
        let target = nv.target;
        self.status = Status::Installing { target };
        let digest = NewView::content_digest(target, nv.mode, &nv.history, &nv.tree);
        let Ok(attestation) = self.tee.attest(digest) else {
            return;
        };
        self.log.push(LogEntry::ViewStart { binding: nv.binding.clone(), history: nv.history.clone() });
        self.vc.acks.entry((target, digest)).or_default().insert(self.id);
        self.broadcast(ProtocolMessage::ViewChange { target, digest, attestation }, None);
        self.vc.pending = Some(nv);
        self.arm_view_change_timer();
        self.try_install();
    }

    pub(super) fn on_view_change_ack(
        &mut self,
        j: ReplicaId,
        target: u64,
        digest: Digest,
        attestation: CounterAssignment,
    ) {
        if target <= self.view
            || !attestation.is(BindingKind::Attestation, j)
            || attestation.digest != digest
            || !attestation.verify(&self.crypto, &self.registry)
        {
            return;
        }
        self.vc.acks.entry((target, digest)).or_default().insert(j);
        self.try_install();
    }

    fn try_install(&mut self) {
        let Some(nv) = &self.vc.pending else {
            return;
        };
        if self.status != (Status::Installing { target: nv.target }) {
            return;
        }
        let digest = NewView::content_digest(nv.target, nv.mode, &nv.history, &nv.tree);
        let acks = self
            .vc
            .acks
            .get(&(nv.target, digest))
            .map_or(0, |s| s.iter().filter(|r| **r != nv.primary).count());
        if acks >= self.cfg.f {
            let nv = self.vc.pending.take().expect("checked");
            self.install(nv);
        }
    }

    /// Adopts the new view's checkpoint and history and resumes.
    fn install(&mut self, nv: NewView) {
        let as_primary = nv.primary == self.id;
        if !as_primary {
            let omega = nv.omegas.iter().find(|(r, _)| *r == self.id).map(|(_, ct)| ct.as_slice());
            if self.tee.update_view(&nv.binding, omega).is_err() {
                self.status = Status::ViewChanging { target: nv.target };
                return;
            }
        }
        if let Some(cp) = &nv.checkpoint {
            let mine = self.checkpoint.as_ref().map_or(0, |c| c.seq);
            if cp.seq > self.app.executed() {
                self.app = cp.state.clone();
                self.exec_log.clear();
                self.checkpoint = Some(cp.clone());
                self.observe(Observation::StateTransfer { seq: cp.seq, digest: cp.state_digest() });
            } else if cp.seq > mine {
                let drop = ((cp.seq - mine) as usize).min(self.exec_log.len());
                self.exec_log.drain(..drop);
                self.checkpoint = Some(cp.clone());
            }
        }
        for e in &nv.history {
            if !self.app.has_executed(e.request.id) {
                self.execute(&e.request.clone(), e.prepare.counter);
            }
        }
        let t = nv.target;
        let kind = nv.proofs[0].kind;
        self.view = t;
        self.primary = nv.primary;
        self.mode = nv.mode;
        self.tree = nv.tree.clone();
        self.epoch = nv.binding.counter;
        self.log = vec![LogEntry::ViewStart { binding: nv.binding, history: nv.history }];
        self.status = Status::Normal;
        self.skipped.clear();
        self.blobs.retain(|_, (e, _)| e.view >= t);
        self.awaiting_blob.clear();
        let old = std::mem::take(&mut self.vc);
        self.vc = ViewChangeState {
            requests: old.requests.into_iter().filter(|(k, _)| *k > t).collect(),
            acks: old.acks.into_iter().filter(|((k, _), _)| *k > t).collect(),
            sent_new_view: old.sent_new_view,
            ..Default::default()
        };
        self.cancel_timer(Timer::ViewChange);
        self.mark_stable();
        self.observe(Observation::ViewInstalled { view: t, primary: self.primary, mode: self.mode, kind });
        if as_primary {
            let old = self.leader.take().unwrap_or_default();
            let mut leader = Leader { replies: old.replies, ..Default::default() };
            let carried = old
                .round
                .filter(|r| !r.stalled)
                .map(|r| r.request)
                .into_iter()
                .chain(old.queue)
                .chain(self.client_requests.values().cloned())
                .collect::<Vec<_>>();
            self.leader = Some(std::mem::take(&mut leader));
            for m in carried {
                if self.app.has_executed(m.id) && self.app.cached(m.id).is_none() {
                    continue;
                }
                self.enqueue(m);
            }
            self.try_start_round();
        } else {
            self.leader = None;
            let pending: Vec<_> = self.client_requests.values().cloned().collect();
            for m in pending {
                let c = m.id.client;
                let id = m.id;
                self.send(self.primary, ProtocolMessage::Request(m), Some(id));
                self.set_timer(Timer::Request(c), self.cfg.request_timeout);
            }
        }
    }
}
