//! Wire messages and their canonical encoding.
//!
//! Every variant starts with a fixed tag octet; the remaining fields follow
//! the conventions of [`crate::codec`].

use std::fmt;

use serde::{Deserialize, Serialize};

use super::app::{AppResult, KvStore, Operation};
use crate::codec::{Decode, DecodeError, Encode, Reader, Writer};
use crate::primitives::{
    hash, Crypto, Digest, FieldElement, PrivateKey, PublicKey, Secret, Signature,
};
use crate::tee::{CounterAssignment, ShareBlob};
use crate::topology::TreeTopology;
use crate::{ClientId, CounterValue, ReplicaId, RequestId};

/// Public keys of the clients, indexed by client id.
#[derive(Debug, Clone, Default)]
pub struct ClientRegistry(pub Vec<PublicKey>);

impl ClientRegistry {
    pub fn key(&self, c: ClientId) -> Option<&PublicKey> {
        self.0.get(c.0 as usize)
    }
}

/// A signed client request `M`.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Request {
    pub id: RequestId,
    pub op: Operation,
    pub signature: Signature,
}

impl Request {
    fn payload(id: RequestId, op: &Operation) -> Vec<u8> {
        let mut w = Writer::default();
        w.raw(b"fastbft/request").put(&id).put(op);
        w.into_bytes()
    }

    pub fn new(id: RequestId, op: Operation, crypto: &Crypto, key: &PrivateKey) -> Self {
        let signature = crypto.sign(key, &Self::payload(id, &op));
        Request { id, op, signature }
    }

    pub fn verify(&self, crypto: &Crypto, clients: &ClientRegistry) -> bool {
        clients
            .key(self.id.client)
            .is_some_and(|pk| crypto.verify(pk, &Self::payload(self.id, &self.op), &self.signature))
    }

    /// `H(M)`.
    pub fn digest(&self) -> Digest {
        hash(&self.to_bytes())
    }

    /// `H(M || res)`.
    pub fn result_digest(&self, res: &AppResult) -> Digest {
        let mut w = Writer::default();
        w.put(self).put(res);
        hash(&w.into_bytes())
    }
}

impl Encode for Request {
    fn encode(&self, w: &mut Writer) {
        w.put(&self.id).put(&self.op).put(&self.signature);
    }
}

impl Decode for Request {
    fn decode(r: &mut Reader<'_>) -> Result<Self, DecodeError> {
        Ok(Request { id: r.get()?, op: r.get()?, signature: r.get()? })
    }
}

/// REPLY: both opened secrets with the four bindings a client checks.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Reply {
    pub request: Request,
    pub result: AppResult,
    /// `⟨h_c, (c, v)⟩`.
    pub commitment_c: CounterAssignment,
    /// `⟨H(M), (c, v)⟩`.
    pub prepare: CounterAssignment,
    pub secret_c: Secret,
    /// `⟨h_{c+1}, (c+1, v)⟩`.
    pub commitment_c1: CounterAssignment,
    /// `⟨H(M || res), (c+1, v)⟩`.
    pub commit: CounterAssignment,
    pub secret_c1: Secret,
}

impl Encode for Reply {
    fn encode(&self, w: &mut Writer) {
        w.put(&self.request)
            .put(&self.result)
            .put(&self.commitment_c)
            .put(&self.prepare)
            .put(&self.secret_c)
            .put(&self.commitment_c1)
            .put(&self.commit)
            .put(&self.secret_c1);
    }
}

impl Decode for Reply {
    fn decode(r: &mut Reader<'_>) -> Result<Self, DecodeError> {
        Ok(Reply {
            request: r.get()?,
            result: r.get()?,
            commitment_c: r.get()?,
            prepare: r.get()?,
            secret_c: r.get()?,
            commitment_c1: r.get()?,
            commit: r.get()?,
            secret_c1: r.get()?,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Mode {
    Normal,
    Fallback,
}

impl Encode for Mode {
    fn encode(&self, w: &mut Writer) {
        w.u8(match self {
            Mode::Normal => 0,
            Mode::Fallback => 1,
        });
    }
}

impl Decode for Mode {
    fn decode(r: &mut Reader<'_>) -> Result<Self, DecodeError> {
        match r.u8()? {
            0 => Ok(Mode::Normal),
            1 => Ok(Mode::Fallback),
            tag => Err(DecodeError::UnknownTag { what: "mode", tag }),
        }
    }
}

/// Why a view change is requested.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ViewChangeKind {
    /// Replace the primary with `target mod n`.
    Regular,
    /// Same primary, switch to the given mode.
    Transition(Mode),
}

impl Encode for ViewChangeKind {
    fn encode(&self, w: &mut Writer) {
        match self {
            ViewChangeKind::Regular => {
                w.u8(0);
            }
            ViewChangeKind::Transition(m) => {
                w.u8(1).put(m);
            }
        }
    }
}

impl Decode for ViewChangeKind {
    fn decode(r: &mut Reader<'_>) -> Result<Self, DecodeError> {
        match r.u8()? {
            0 => Ok(ViewChangeKind::Regular),
            1 => Ok(ViewChangeKind::Transition(r.get()?)),
            tag => Err(DecodeError::UnknownTag { what: "view change kind", tag }),
        }
    }
}

/// Application snapshot taken every K executed requests.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Checkpoint {
    /// Number of requests executed when the snapshot was taken.
    pub seq: u64,
    /// Counter value of the last request covered.
    pub counter: CounterValue,
    pub state: KvStore,
}

impl Checkpoint {
    pub fn state_digest(&self) -> Digest {
        self.state.digest()
    }
}

impl Encode for Checkpoint {
    fn encode(&self, w: &mut Writer) {
        w.u64(self.seq).put(&self.counter).put(&self.state);
    }
}

impl Decode for Checkpoint {
    fn decode(r: &mut Reader<'_>) -> Result<Self, DecodeError> {
        Ok(Checkpoint { seq: r.u64()?, counter: r.get()?, state: r.get()? })
    }
}

/// One request in an execution history `O`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HistoryEntry {
    pub request: Request,
    /// `⟨H(M), (c, v)⟩`.
    pub prepare: CounterAssignment,
    /// The result and `⟨H(M || res), (c+1, v)⟩`, if the request committed.
    pub commit: Option<(AppResult, CounterAssignment)>,
}

impl HistoryEntry {
    pub fn counter(&self) -> CounterValue {
        self.prepare.counter
    }
}

impl Encode for HistoryEntry {
    fn encode(&self, w: &mut Writer) {
        w.put(&self.request).put(&self.prepare);
        match &self.commit {
            None => w.u8(0),
            Some((res, b)) => w.u8(1).put(res).put(b),
        };
    }
}

impl Decode for HistoryEntry {
    fn decode(r: &mut Reader<'_>) -> Result<Self, DecodeError> {
        let request = r.get()?;
        let prepare = r.get()?;
        let commit = match r.u8()? {
            0 => None,
            1 => Some((r.get()?, r.get()?)),
            tag => return Err(DecodeError::UnknownTag { what: "history commit", tag }),
        };
        Ok(HistoryEntry { request, prepare, commit })
    }
}

/// An agreement message recorded in the log `L`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum LogEntry {
    Prepared { request: Request, binding: CounterAssignment },
    Committed { request: Request, result: AppResult, binding: CounterAssignment },
    TreeChange { binding: CounterAssignment, skipped: Vec<CounterAssignment> },
    ViewStart { binding: CounterAssignment, history: Vec<HistoryEntry> },
}

impl LogEntry {
    pub fn binding(&self) -> &CounterAssignment {
        match self {
            LogEntry::Prepared { binding, .. }
            | LogEntry::Committed { binding, .. }
            | LogEntry::TreeChange { binding, .. }
            | LogEntry::ViewStart { binding, .. } => binding,
        }
    }

    pub fn counter(&self) -> CounterValue {
        self.binding().counter
    }
}

impl Encode for LogEntry {
    fn encode(&self, w: &mut Writer) {
        match self {
            LogEntry::Prepared { request, binding } => w.u8(1).put(request).put(binding),
            LogEntry::Committed { request, result, binding } => {
                w.u8(2).put(request).put(result).put(binding)
            }
            LogEntry::TreeChange { binding, skipped } => w.u8(3).put(binding).seq(skipped),
            LogEntry::ViewStart { binding, history } => w.u8(4).put(binding).seq(history),
        };
    }
}

impl Decode for LogEntry {
    fn decode(r: &mut Reader<'_>) -> Result<Self, DecodeError> {
        Ok(match r.u8()? {
            1 => LogEntry::Prepared { request: r.get()?, binding: r.get()? },
            2 => LogEntry::Committed { request: r.get()?, result: r.get()?, binding: r.get()? },
            3 => LogEntry::TreeChange { binding: r.get()?, skipped: r.seq()? },
            4 => LogEntry::ViewStart { binding: r.get()?, history: r.seq()? },
            tag => return Err(DecodeError::UnknownTag { what: "log entry", tag }),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ReqViewChange {
    pub target: u64,
    pub kind: ViewChangeKind,
    pub log: Vec<LogEntry>,
    pub checkpoint: Option<Checkpoint>,
    /// Attestation over [`Self::content_digest`] at the sender's counter.
    pub attestation: CounterAssignment,
}

impl ReqViewChange {
    pub fn content_digest(
        target: u64,
        kind: ViewChangeKind,
        log: &[LogEntry],
        checkpoint: Option<&Checkpoint>,
    ) -> Digest {
        let mut w = Writer::default();
        w.raw(b"fastbft/req-view-change").u64(target).put(&kind).seq(log).opt(checkpoint);
        hash(&w.into_bytes())
    }

    pub fn sender(&self) -> ReplicaId {
        self.attestation.issuer
    }
}

impl Encode for ReqViewChange {
    fn encode(&self, w: &mut Writer) {
        w.u64(self.target)
            .put(&self.kind)
            .seq(&self.log)
            .opt(self.checkpoint.as_ref())
            .put(&self.attestation);
    }
}

impl Decode for ReqViewChange {
    fn decode(r: &mut Reader<'_>) -> Result<Self, DecodeError> {
        Ok(ReqViewChange {
            target: r.u64()?,
            kind: r.get()?,
            log: r.seq()?,
            checkpoint: r.opt()?,
            attestation: r.get()?,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NewView {
    pub target: u64,
    pub primary: ReplicaId,
    pub mode: Mode,
    pub history: Vec<HistoryEntry>,
    pub tree: TreeTopology,
    /// `⟨H(O || T'), (1, v')⟩`.
    pub binding: CounterAssignment,
    pub omegas: Vec<(ReplicaId, Vec<u8>)>,
    pub proofs: Vec<ReqViewChange>,
    pub checkpoint: Option<Checkpoint>,
}

impl NewView {
    /// `H(O || T')`, also covering the target view and mode.
    pub fn content_digest(
        target: u64,
        mode: Mode,
        history: &[HistoryEntry],
        tree: &TreeTopology,
    ) -> Digest {
        let mut w = Writer::default();
        w.raw(b"fastbft/new-view").u64(target).put(&mode).seq(history).put(tree);
        hash(&w.into_bytes())
    }
}

impl Encode for NewView {
    fn encode(&self, w: &mut Writer) {
        w.u64(self.target)
            .put(&self.primary)
            .put(&self.mode)
            .seq(&self.history)
            .put(&self.tree)
            .put(&self.binding);
        w.u32(self.omegas.len() as u32);
        for (r, ct) in &self.omegas {
            w.put(r).bytes(ct);
        }
        w.seq(&self.proofs).opt(self.checkpoint.as_ref());
    }
}

impl Decode for NewView {
    fn decode(r: &mut Reader<'_>) -> Result<Self, DecodeError> {
        let target = r.u64()?;
        let primary = r.get()?;
        let mode = r.get()?;
        let history = r.seq()?;
        let tree = r.get()?;
        let binding = r.get()?;
        let omegas = decode_omegas(r)?;
        Ok(NewView {
            target,
            primary,
            mode,
            history,
            tree,
            binding,
            omegas,
            proofs: r.seq()?,
            checkpoint: r.opt()?,
        })
    }
}

fn decode_omegas(r: &mut Reader<'_>) -> Result<Vec<(ReplicaId, Vec<u8>)>, DecodeError> {
    let n = r.u32()? as usize;
    if n > r.remaining() {
        return Err(DecodeError::UnexpectedEof);
    }
    (0..n).map(|_| Ok((r.get()?, r.bytes()?))).collect()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NewTree {
    pub old: TreeTopology,
    pub new: TreeTopology,
    /// `⟨H(T || T'), (c, v)⟩`.
    pub binding: CounterAssignment,
    /// The primary's bindings for the aborted round.
    pub skipped: Vec<CounterAssignment>,
    pub omegas: Vec<(ReplicaId, Vec<u8>)>,
    /// The request that was in flight; it restarts under the new tree.
    pub request: Option<Request>,
}

impl Encode for NewTree {
    fn encode(&self, w: &mut Writer) {
        w.put(&self.old).put(&self.new).put(&self.binding).seq(&self.skipped);
        w.u32(self.omegas.len() as u32);
        for (r, ct) in &self.omegas {
            w.put(r).bytes(ct);
        }
        w.opt(self.request.as_ref());
    }
}

impl Decode for NewTree {
    fn decode(r: &mut Reader<'_>) -> Result<Self, DecodeError> {
        Ok(NewTree {
            old: r.get()?,
            new: r.get()?,
            binding: r.get()?,
            skipped: r.seq()?,
            omegas: decode_omegas(r)?,
            request: r.opt()?,
        })
    }
}

/// A peer's answer to REJOIN: its view of the system, a checkpoint and the
/// requests executed since, attested under the rejoining TEE's nonce.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RejoinResponse {
    pub nonce: [u8; 16],
    pub primary: ReplicaId,
    pub view: u64,
    pub mode: Mode,
    pub tree: TreeTopology,
    pub checkpoint: Option<Checkpoint>,
    /// Requests executed after the checkpoint, with their prepare counters.
    pub executed: Vec<(Request, AppResult, CounterValue)>,
    pub log: Vec<LogEntry>,
    pub state_digest: Digest,
    pub attestation: CounterAssignment,
}

impl RejoinResponse {
    /// Digest of everything the rejoining replica adopts besides the log.
    pub fn state_digest(
        state: &Digest,
        view: u64,
        mode: Mode,
        tree: &TreeTopology,
    ) -> Digest {
        let mut w = Writer::default();
        w.raw(b"fastbft/rejoin-state").put(state).u64(view).put(&mode).put(tree);
        hash(&w.into_bytes())
    }
}

impl Encode for RejoinResponse {
    fn encode(&self, w: &mut Writer) {
        w.raw(&self.nonce)
            .put(&self.primary)
            .u64(self.view)
            .put(&self.mode)
            .put(&self.tree)
            .opt(self.checkpoint.as_ref());
        w.u32(self.executed.len() as u32);
        for (m, res, c) in &self.executed {
            w.put(m).put(res).put(c);
        }
        w.seq(&self.log).put(&self.state_digest).put(&self.attestation);
    }
}

impl Decode for RejoinResponse {
    fn decode(r: &mut Reader<'_>) -> Result<Self, DecodeError> {
        let nonce = r.raw()?;
        let primary = r.get()?;
        let view = r.u64()?;
        let mode = r.get()?;
        let tree = r.get()?;
        let checkpoint = r.opt()?;
        let n = r.u32()? as usize;
        if n > r.remaining() {
            return Err(DecodeError::UnexpectedEof);
        }
        let mut executed = Vec::with_capacity(n);
        for _ in 0..n {
            executed.push((r.get()?, r.get()?, r.get()?));
        }
        Ok(RejoinResponse {
            nonce,
            primary,
            view,
            mode,
            tree,
            checkpoint,
            executed,
            log: r.seq()?,
            state_digest: r.get()?,
            attestation: r.get()?,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ProtocolMessage {
    Request(Request),
    /// Share blobs for the recipient, one per preprocessed counter value.
    /// `epoch` is the counter value of the binding that installed the tree
    /// the blobs were generated for.
    Preprocess { epoch: CounterValue, blobs: Vec<(CounterValue, ShareBlob)> },
    Prepare { request: Request, binding: CounterAssignment },
    Share { counter: CounterValue, aggregate: Secret },
    Commit { secret: Secret, result: AppResult, binding: CounterAssignment },
    Reply(Box<Reply>),
    Suspect { accused: ReplicaId, accuser: ReplicaId, round: CounterValue },
    NewTree(Box<NewTree>),
    ReqViewChange(Box<ReqViewChange>),
    NewView(Box<NewView>),
    ViewChange { target: u64, digest: Digest, attestation: CounterAssignment },
    Rejoin { nonce: [u8; 16] },
    RejoinResponse(Box<RejoinResponse>),
    /// Ask the primary for REPLY/NEW-TREE messages above `after`.
    Retransmit { after: CounterValue },
    FallbackPrepare { request: Request, binding: CounterAssignment },
    FallbackShare { counter: CounterValue, y: FieldElement },
    FallbackCommit { secret: Secret, result: AppResult, binding: CounterAssignment },
    Probe { nonce: u64 },
    ProbeAck { nonce: u64 },
}

impl ProtocolMessage {
    pub fn tag(&self) -> &'static str {
        match self {
            ProtocolMessage::Request(_) => "REQUEST",
            ProtocolMessage::Preprocess { .. } => "PREPROCESS",
            ProtocolMessage::Prepare { .. } => "PREPARE",
            ProtocolMessage::Share { .. } => "SHARE",
            ProtocolMessage::Commit { .. } => "COMMIT",
            ProtocolMessage::Reply(_) => "REPLY",
            ProtocolMessage::Suspect { .. } => "SUSPECT",
            ProtocolMessage::NewTree(_) => "NEW-TREE",
            ProtocolMessage::ReqViewChange(_) => "REQ-VIEW-CHANGE",
            ProtocolMessage::NewView(_) => "NEW-VIEW",
            ProtocolMessage::ViewChange { .. } => "VIEW-CHANGE",
            ProtocolMessage::Rejoin { .. } => "REJOIN",
            ProtocolMessage::RejoinResponse(_) => "REJOIN-RESPONSE",
            ProtocolMessage::Retransmit { .. } => "RETRANSMIT",
            ProtocolMessage::FallbackPrepare { .. } => "FALLBACK-PREPARE",
            ProtocolMessage::FallbackShare { .. } => "FALLBACK-SHARE",
            ProtocolMessage::FallbackCommit { .. } => "FALLBACK-COMMIT",
            ProtocolMessage::Probe { .. } => "PROBE",
            ProtocolMessage::ProbeAck { .. } => "PROBE-ACK",
        }
    }

    fn wire_tag(&self) -> u8 {
        match self {
            ProtocolMessage::Request(_) => 1,
            ProtocolMessage::Preprocess { .. } => 2,
            ProtocolMessage::Prepare { .. } => 3,
            ProtocolMessage::Share { .. } => 4,
            ProtocolMessage::Commit { .. } => 5,
            ProtocolMessage::Reply(_) => 6,
            ProtocolMessage::Suspect { .. } => 7,
            ProtocolMessage::NewTree(_) => 8,
            ProtocolMessage::ReqViewChange(_) => 9,
            ProtocolMessage::NewView(_) => 10,
            ProtocolMessage::ViewChange { .. } => 11,
            ProtocolMessage::Rejoin { .. } => 12,
            ProtocolMessage::RejoinResponse(_) => 13,
            ProtocolMessage::Retransmit { .. } => 14,
            ProtocolMessage::FallbackPrepare { .. } => 15,
            ProtocolMessage::FallbackShare { .. } => 16,
            ProtocolMessage::FallbackCommit { .. } => 17,
            ProtocolMessage::Probe { .. } => 18,
            ProtocolMessage::ProbeAck { .. } => 19,
        }
    }
}

impl fmt::Display for ProtocolMessage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl Encode for ProtocolMessage {
    fn encode(&self, w: &mut Writer) {
        w.u8(self.wire_tag());
        match self {
            ProtocolMessage::Request(m) => {
                w.put(m);
            }
            ProtocolMessage::Preprocess { epoch, blobs } => {
                w.put(epoch).u32(blobs.len() as u32);
                for (c, b) in blobs {
                    w.put(c).put(b);
                }
            }
            ProtocolMessage::Prepare { request, binding }
            | ProtocolMessage::FallbackPrepare { request, binding } => {
                w.put(request).put(binding);
            }
            ProtocolMessage::Share { counter, aggregate } => {
                w.put(counter).put(aggregate);
            }
            ProtocolMessage::Commit { secret, result, binding }
            | ProtocolMessage::FallbackCommit { secret, result, binding } => {
                w.put(secret).put(result).put(binding);
            }
            ProtocolMessage::Reply(r) => {
                w.put(r.as_ref());
            }
            ProtocolMessage::Suspect { accused, accuser, round } => {
                w.put(accused).put(accuser).put(round);
            }
            ProtocolMessage::NewTree(t) => {
                w.put(t.as_ref());
            }
            ProtocolMessage::ReqViewChange(m) => {
                w.put(m.as_ref());
            }
            ProtocolMessage::NewView(m) => {
                w.put(m.as_ref());
            }
            ProtocolMessage::ViewChange { target, digest, attestation } => {
                w.u64(*target).put(digest).put(attestation);
            }
            ProtocolMessage::Rejoin { nonce } => {
                w.raw(nonce);
            }
            ProtocolMessage::RejoinResponse(m) => {
                w.put(m.as_ref());
            }
            ProtocolMessage::Retransmit { after } => {
                w.put(after);
            }
            ProtocolMessage::FallbackShare { counter, y } => {
                w.put(counter).put(y);
            }
            ProtocolMessage::Probe { nonce } | ProtocolMessage::ProbeAck { nonce } => {
                w.u64(*nonce);
            }
        }
    }
}

impl Decode for ProtocolMessage {
    fn decode(r: &mut Reader<'_>) -> Result<Self, DecodeError> {
        Ok(match r.u8()? {
            1 => ProtocolMessage::Request(r.get()?),
            2 => {
                let epoch = r.get()?;
                let n = r.u32()? as usize;
                if n > r.remaining() {
                    return Err(DecodeError::UnexpectedEof);
                }
                let mut blobs = Vec::with_capacity(n);
                for _ in 0..n {
                    blobs.push((r.get()?, r.get()?));
                }
                ProtocolMessage::Preprocess { epoch, blobs }
            }
            3 => ProtocolMessage::Prepare { request: r.get()?, binding: r.get()? },
            4 => ProtocolMessage::Share { counter: r.get()?, aggregate: r.get()? },
            5 => ProtocolMessage::Commit { secret: r.get()?, result: r.get()?, binding: r.get()? },
            6 => ProtocolMessage::Reply(Box::new(r.get()?)),
            7 => ProtocolMessage::Suspect { accused: r.get()?, accuser: r.get()?, round: r.get()? },
            8 => ProtocolMessage::NewTree(Box::new(r.get()?)),
            9 => ProtocolMessage::ReqViewChange(Box::new(r.get()?)),
            10 => ProtocolMessage::NewView(Box::new(r.get()?)),
            11 => ProtocolMessage::ViewChange {
                target: r.u64()?,
                digest: r.get()?,
                attestation: r.get()?,
            },
            12 => ProtocolMessage::Rejoin { nonce: r.raw()? },
            13 => ProtocolMessage::RejoinResponse(Box::new(r.get()?)),
            14 => ProtocolMessage::Retransmit { after: r.get()? },
            15 => ProtocolMessage::FallbackPrepare { request: r.get()?, binding: r.get()? },
            16 => ProtocolMessage::FallbackShare { counter: r.get()?, y: r.get()? },
            17 => ProtocolMessage::FallbackCommit {
                secret: r.get()?,
                result: r.get()?,
                binding: r.get()?,
            },
            18 => ProtocolMessage::Probe { nonce: r.u64()? },
            19 => ProtocolMessage::ProbeAck { nonce: r.u64()? },
            tag => return Err(DecodeError::UnknownTag { what: "message", tag }),
        })
    }
}
