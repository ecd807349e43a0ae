//! Reboot and rejoin: a rebooted TEE stays locked until f + 1 peers attest
//! to the same counter value and state.

use super::{RejoinState, Replica, Status, ViewChangeState};
use crate::protocol::messages::{ProtocolMessage, RejoinResponse};
use crate::protocol::{KvStore, Observation, Timer};
use crate::tee::{rejoin_digest, RejoinEvidence};
use crate::ReplicaId;

impl Replica {
    pub(super) fn on_reboot(&mut self) {
        self.tee.reboot();
        self.tee.restore(None);
        self.status = Status::Locked;
        self.app = KvStore::default();
        self.checkpoint = None;
        self.exec_log.clear();
        self.log.clear();
        self.blobs.clear();
        self.pending.clear();
        self.early_shares.clear();
        self.stash.clear();
        self.awaiting_blob.clear();
        self.skipped.clear();
        self.retransmit_armed = false;
        self.active_round = None;
        self.client_requests.clear();
        self.leader = None;
        self.vc = ViewChangeState::default();
        self.observe(Observation::Reset);
        self.start_rejoin();
    }

    pub(super) fn start_rejoin(&mut self) {
        let Ok(nonce) = self.tee.rejoin_nonce() else {
            return;
        };
        self.rejoin = Some(RejoinState { nonce, responses: Default::default() });
        self.broadcast(ProtocolMessage::Rejoin { nonce }, None);
        self.set_timer(Timer::Rejoin, self.cfg.rejoin_retry);
    }

    /// Answers with the state at the last round boundary. A rebooted
    /// primary gets no answer.
    pub(super) fn on_rejoin(&mut self, j: ReplicaId, nonce: [u8; 16]) {
        if self.status != Status::Normal || j == self.primary || j == self.id {
            return;
        }
        let st = self.stable.clone();
        let state_digest = RejoinResponse::state_digest(&st.app_digest, st.view, st.mode, &st.tree);
        let Ok(attestation) =
            self.tee.attest_at(rejoin_digest(&nonce, st.primary, &state_digest), st.counter)
        else {
            return;
        };
        let executed = self.exec_log[..st.exec_len.min(self.exec_log.len())].to_vec();
        let log = self.log.iter().filter(|e| e.counter() <= st.counter).cloned().collect();
        let r = RejoinResponse {
            nonce,
            primary: st.primary,
            view: st.view,
            mode: st.mode,
            tree: st.tree,
            checkpoint: self.checkpoint.clone(),
            executed,
            log,
            state_digest,
            attestation,
        };
        self.send(j, ProtocolMessage::RejoinResponse(Box::new(r)), None);
    }

    pub(super) fn on_rejoin_response(&mut self, j: ReplicaId, r: RejoinResponse) {
        let Some(st) = self.rejoin.as_mut() else {
            return;
        };
        if r.nonce != st.nonce || r.attestation.issuer != j || replay(&r).is_none() {
            return;
        }
        st.responses.insert(j, r);
        let evidence: Vec<RejoinEvidence> = st
            .responses
            .values()
            .map(|r| RejoinEvidence {
                primary: r.primary,
                state_digest: r.state_digest,
                attestation: r.attestation.clone(),
            })
            .collect();
        let Ok(chosen) = self.tee.reset_counter(&evidence) else {
            return;
        };
        let st = self.rejoin.take().expect("checked");
        let r = st
            .responses
            .into_values()
            .find(|r| r.attestation == chosen.attestation)
            .expect("chosen evidence came from a response");
        if let Some(cp) = &r.checkpoint {
            self.app = cp.state.clone();
            self.observe(Observation::StateTransfer { seq: cp.seq, digest: cp.state_digest() });
        }
        for (m, res, c) in &r.executed {
            self.apply(m, res, *c);
        }
        self.checkpoint = r.checkpoint;
        self.log = r.log;
        self.view = r.view;
        self.primary = r.primary;
        self.mode = r.mode;
        self.tree = r.tree;
        self.epoch = chosen.attestation.counter;
        self.status = Status::Normal;
        self.cancel_timer(Timer::Rejoin);
        self.mark_stable();
        let counter = self.tee.latest();
        self.observe(Observation::Rejoined { counter });
        self.send(self.primary, ProtocolMessage::Retransmit { after: counter }, None);
    }
}

/// Rebuilds the state a response describes; `None` if it does not match
/// the attested digest.
fn replay(r: &RejoinResponse) -> Option<KvStore> {
    let mut app = r.checkpoint.as_ref().map(|c| c.state.clone()).unwrap_or_default();
    for (m, res, _) in &r.executed {
        app.apply(m.id, res);
    }
    let d = RejoinResponse::state_digest(&app.digest(), r.view, r.mode, &r.tree);
    (d == r.state_digest).then_some(app)
}
