//! Closed-loop client: one pending request at a time, sent to the believed
//! primary first and broadcast to every replica on timeout.

use std::sync::Arc;

use thiserror::Error;

use crate::primitives::{commitment_digest, Crypto, PrivateKey};
use crate::protocol::{AppResult, Operation, ProtocolMessage, Reply, Request, Timer};
use crate::tee::{BindingKind, KeyRegistry};
use crate::{ClientId, ReplicaId, RequestId};

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ClientAction {
    Send { to: ReplicaId, msg: ProtocolMessage, round: RequestId },
    SetTimer { timer: Timer, after: u64 },
    CancelTimer(Timer),
    /// A result passed every REPLY check.
    Accepted { request: RequestId, result: AppResult },
}

/// Why a REPLY was rejected. The numbered variants follow the client's
/// check order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
pub enum ReplyError {
    #[error("no request pending")]
    NotPending,
    #[error("reply is for a different request")]
    WrongRequest,
    #[error("check 1: commitment binding for c is invalid")]
    CommitmentC,
    #[error("check 2: request binding is invalid or not at the commitment's counter")]
    Prepare,
    #[error("check 4: secret does not open the commitment at c")]
    SecretC,
    #[error("check 5: commit binding, commitment or secret at c+1 is invalid")]
    SecretC1,
}

#[derive(Debug)]
struct Pending {
    request: Request,
    attempts: u32,
}

pub struct Client {
    id: ClientId,
    key: PrivateKey,
    crypto: Crypto,
    registry: Arc<KeyRegistry>,
    n: usize,
    primary: ReplicaId,
    base_timeout: u64,
    seq: u64,
    pending: Option<Pending>,
    accepted: Vec<(RequestId, AppResult)>,
}

impl Client {
    pub fn new(
        id: ClientId,
        key: PrivateKey,
        crypto: Crypto,
        registry: Arc<KeyRegistry>,
        n: usize,
        timeout: u64,
    ) -> Self {
        Client {
            id,
            key,
            crypto,
            registry,
            n,
            primary: ReplicaId(0),
            base_timeout: timeout.max(1),
            seq: 0,
            pending: None,
            accepted: Vec::new(),
        }
    }

    pub fn id(&self) -> ClientId {
        self.id
    }

    pub fn is_pending(&self) -> bool {
        self.pending.is_some()
    }

    pub fn accepted(&self) -> &[(RequestId, AppResult)] {
        &self.accepted
    }

    /// Replica the client currently believes is primary.
    pub fn primary_guess(&self) -> ReplicaId {
        self.primary
    }

    /// Issues `op`. Refused while a request is pending.
    pub fn submit(&mut self, op: Operation) -> Option<Vec<ClientAction>> {
        if self.pending.is_some() {
            return None;
        }
        self.seq += 1;
        let id = RequestId { client: self.id, seq: self.seq };
        let request = Request::new(id, op, &self.crypto, &self.key);
        let out = vec![
            ClientAction::Send {
                to: self.primary,
                msg: ProtocolMessage::Request(request.clone()),
                round: id,
            },
            ClientAction::SetTimer { timer: Timer::ClientRetry, after: self.base_timeout },
        ];
        self.pending = Some(Pending { request, attempts: 0 });
        Some(out)
    }

    /// Retry timer: broadcast to every replica and back off.
    pub fn on_timeout(&mut self) -> Vec<ClientAction> {
        let Some(p) = self.pending.as_mut() else {
            return vec![];
        };
        p.attempts += 1;
        let after = self.base_timeout << p.attempts.min(6);
        let id = p.request.id;
        let mut out: Vec<ClientAction> = (0..self.n as u32)
            .map(|r| ClientAction::Send {
                to: ReplicaId(r),
                msg: ProtocolMessage::Request(p.request.clone()),
                round: id,
            })
            .collect();
        out.push(ClientAction::SetTimer { timer: Timer::ClientRetry, after });
        out
    }

    /// Accepts `reply` if it passes every check; otherwise leaves the
    /// request pending.
    pub fn on_reply(&mut self, reply: &Reply) -> Result<Vec<ClientAction>, ReplyError> {
        let p = self.pending.as_ref().ok_or(ReplyError::NotPending)?;
        if reply.request != p.request {
            return Err(ReplyError::WrongRequest);
        }
        self.verify(reply)?;
        let id = reply.request.id;
        self.primary = reply.prepare.issuer;
        self.pending = None;
        self.accepted.push((id, reply.result.clone()));
        Ok(vec![
            ClientAction::CancelTimer(Timer::ClientRetry),
            ClientAction::Accepted { request: id, result: reply.result.clone() },
        ])
    }

    /// The REPLY checks, all against one issuing TEE.
    pub fn verify(&self, r: &Reply) -> Result<(), ReplyError> {
        let issuer = r.prepare.issuer;
        let valid = |b: &crate::tee::CounterAssignment, kind| {
            b.is(kind, issuer) && b.verify(&self.crypto, &self.registry)
        };
        let c = r.prepare.counter;
        if !valid(&r.commitment_c, BindingKind::Commitment) || r.commitment_c.counter != c {
            return Err(ReplyError::CommitmentC);
        }
        if !valid(&r.prepare, BindingKind::Counter) || r.prepare.digest != r.request.digest() {
            return Err(ReplyError::Prepare);
        }
        if commitment_digest(&r.secret_c, c) != r.commitment_c.digest {
            return Err(ReplyError::SecretC);
        }
        let c1 = c.next();
        let ok = valid(&r.commit, BindingKind::Counter)
            && r.commit.counter == c1
            && r.commit.digest == r.request.result_digest(&r.result)
            && valid(&r.commitment_c1, BindingKind::Commitment)
            && r.commitment_c1.counter == c1
            && commitment_digest(&r.secret_c1, c1) == r.commitment_c1.digest;
        if !ok {
            return Err(ReplyError::SecretC1);
        }
        Ok(())
    }
}
