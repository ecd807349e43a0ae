//! Emulated trusted execution environment.
//!
//! A [`Tee`] owns the replica's signing and decryption keys, the virtual
//! counter `(c, v)`, the per-view share keys and, on the primary, the secrets
//! produced by preprocessing. Untrusted replica logic can only call the
//! methods below; nothing returns private key material.
//!
//! Every signature carries a [`BindingKind`] so that a commitment signed
//! during preprocessing can never be mistaken for a counter assignment over a
//! request at the same `(c, v)`.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use thiserror::Error;

use crate::codec::{Decode, DecodeError, Encode, Reader, Writer};
use crate::primitives::field::PrimeField;
use crate::primitives::{
    commitment_digest, hash, shamir, share_digest, xor, Crypto, Digest, OpCounter, PrivateKey,
    PublicKey, Secret, ShamirShare, Signature, SymKey,
};
use crate::topology::TreeTopology;
use crate::{CounterValue, ReplicaId};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TeeError {
    #[error("invalid signature")]
    InvalidSignature,
    #[error("invalid enc")]
    InvalidEnc,
    #[error("invalid counter value")]
    InvalidCounterValue,
    #[error("invalid counter")]
    InvalidCounter,
    #[error("invalid secret")]
    InvalidSecret,
    #[error("binding does not cover the supplied payload")]
    DigestMismatch,
    #[error("TEE is locked")]
    Locked,
    #[error("TEE holds no primary role")]
    NotPrimary,
    #[error("target view {target} does not advance current view {current}")]
    StaleView { target: u64, current: u64 },
    #[error("tree does not match the active set")]
    BadTree,
    #[error("own share for {0} unavailable")]
    NoOwnShare(CounterValue),
    #[error("insufficient or inconsistent evidence")]
    InsufficientEvidence,
    #[error("TEE is not awaiting a reset")]
    NotLocked,
}

/// Domain separation for signed `(digest, c, v)` tuples.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum BindingKind {
    /// `request_counter`: consumes a counter value.
    Counter,
    /// Commitment `h_c` signed during preprocessing.
    Commitment,
    /// A statement about the current counter value that consumes nothing.
    Attestation,
}

impl BindingKind {
    fn tag(self) -> u8 {
        match self {
            BindingKind::Counter => 1,
            BindingKind::Commitment => 2,
            BindingKind::Attestation => 3,
        }
    }
}

/// A TEE-signed binding of a digest to a counter value.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct CounterAssignment {
    pub kind: BindingKind,
    pub issuer: ReplicaId,
    pub digest: Digest,
    pub counter: CounterValue,
    pub signature: Signature,
}

impl CounterAssignment {
    fn payload(kind: BindingKind, issuer: ReplicaId, digest: &Digest, at: CounterValue) -> Vec<u8> {
        let mut w = Writer::default();
        w.raw(b"fastbft/binding").u8(kind.tag()).put(&issuer).put(digest).put(&at);
        w.into_bytes()
    }

    /// Checks the signature under the issuer's registered key.
    pub fn verify(&self, crypto: &Crypto, registry: &KeyRegistry) -> bool {
        let Some(pk) = registry.signing_key(self.issuer) else {
            return false;
        };
        let payload = Self::payload(self.kind, self.issuer, &self.digest, self.counter);
        crypto.verify(pk, &payload, &self.signature)
    }

    pub fn is(&self, kind: BindingKind, issuer: ReplicaId) -> bool {
        self.kind == kind && self.issuer == issuer
    }
}

impl Encode for CounterAssignment {
    fn encode(&self, w: &mut Writer) {
        w.u8(self.kind.tag())
            .put(&self.issuer)
            .put(&self.digest)
            .put(&self.counter)
            .put(&self.signature);
    }
}

impl Decode for CounterAssignment {
    fn decode(r: &mut Reader<'_>) -> Result<Self, DecodeError> {
        let kind = match r.u8()? {
            1 => BindingKind::Counter,
            2 => BindingKind::Commitment,
            3 => BindingKind::Attestation,
            tag => return Err(DecodeError::UnknownTag { what: "binding kind", tag }),
        };
        Ok(CounterAssignment {
            kind,
            issuer: r.get()?,
            digest: r.get()?,
            counter: r.get()?,
            signature: r.get()?,
        })
    }
}

/// Static table of TEE public keys, standing in for remote attestation.
#[derive(Debug, Clone)]
pub struct KeyRegistry {
    signing: Vec<PublicKey>,
    encryption: Vec<PublicKey>,
}

impl KeyRegistry {
    pub fn len(&self) -> usize {
        self.signing.len()
    }

    pub fn is_empty(&self) -> bool {
        self.signing.is_empty()
    }

    pub fn signing_key(&self, r: ReplicaId) -> Option<&PublicKey> {
        self.signing.get(r.index())
    }

    pub fn encryption_key(&self, r: ReplicaId) -> Option<&PublicKey> {
        self.encryption.get(r.index())
    }
}

/// An encrypted share for one replica and one counter value (`ϱ_c^i`).
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct ShareBlob(pub Vec<u8>);

impl Encode for ShareBlob {
    fn encode(&self, w: &mut Writer) {
        w.bytes(&self.0);
    }
}

impl Decode for ShareBlob {
    fn decode(r: &mut Reader<'_>) -> Result<Self, DecodeError> {
        Ok(ShareBlob(r.bytes()?))
    }
}

/// Output of preprocessing for one counter value.
#[derive(Debug, Clone)]
pub struct SecretPackage {
    pub counter: CounterValue,
    pub commitment: Digest,
    pub binding: CounterAssignment,
    pub blobs: BTreeMap<ReplicaId, ShareBlob>,
}

/// A share released by [`Tee::verify_counter`] or [`Tee::release_own_share`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ReleasedShare {
    Xor {
        counter: CounterValue,
        share: Secret,
        child_digests: Vec<(ReplicaId, Digest)>,
        commitment: Digest,
    },
    Shamir {
        counter: CounterValue,
        share: ShamirShare,
        commitment: Digest,
    },
}

impl ReleasedShare {
    pub fn counter(&self) -> CounterValue {
        match self {
            ReleasedShare::Xor { counter, .. } | ReleasedShare::Shamir { counter, .. } => *counter,
        }
    }

    pub fn commitment(&self) -> Digest {
        match self {
            ReleasedShare::Xor { commitment, .. } | ReleasedShare::Shamir { commitment, .. } => {
                *commitment
            }
        }
    }

    fn encode_for(&self, recipient: ReplicaId, w: &mut Writer) {
        w.put(&recipient);
        match self {
            ReleasedShare::Xor { counter, share, child_digests, commitment } => {
                w.u8(0).put(counter).put(share).u32(child_digests.len() as u32);
                for (c, d) in child_digests {
                    w.put(c).put(d);
                }
                w.put(commitment);
            }
            ReleasedShare::Shamir { counter, share, commitment } => {
                w.u8(1).put(counter).put(share).put(commitment);
            }
        }
    }

    fn decode_for(r: &mut Reader<'_>) -> Result<(ReplicaId, Self), DecodeError> {
        let recipient = r.get()?;
        let share = match r.u8()? {
            0 => {
                let counter = r.get()?;
                let share = r.get()?;
                let k = r.u32()? as usize;
                let mut child_digests = Vec::new();
                for _ in 0..k {
                    child_digests.push((r.get()?, r.get()?));
                }
                ReleasedShare::Xor { counter, share, child_digests, commitment: r.get()? }
            }
            1 => ReleasedShare::Shamir { counter: r.get()?, share: r.get()?, commitment: r.get()? },
            tag => return Err(DecodeError::UnknownTag { what: "share blob", tag }),
        };
        Ok((recipient, share))
    }
}

/// Evidence for [`Tee::reset_counter`]: an attestation by a peer over its
/// view of the system, bound to the rebooted TEE's nonce.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RejoinEvidence {
    pub primary: ReplicaId,
    pub state_digest: Digest,
    pub attestation: CounterAssignment,
}

/// The digest a peer attests to when answering a REJOIN.
pub fn rejoin_digest(nonce: &[u8; 16], primary: ReplicaId, state_digest: &Digest) -> Digest {
    let mut w = Writer::default();
    w.raw(b"fastbft/rejoin").raw(nonce).put(&primary).put(state_digest);
    hash(&w.into_bytes())
}

/// `(C+1, c, v)` as written to untrusted storage.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PersistedRecord {
    pub hardware: u64,
    pub counter: u64,
    pub view: u64,
}

impl PersistedRecord {
    pub const LEN: usize = 24;

    pub fn to_bytes(&self) -> [u8; Self::LEN] {
        let mut out = [0u8; Self::LEN];
        out[..8].copy_from_slice(&self.hardware.to_be_bytes());
        out[8..16].copy_from_slice(&self.counter.to_be_bytes());
        out[16..].copy_from_slice(&self.view.to_be_bytes());
        out
    }

    pub fn from_bytes(b: &[u8; Self::LEN]) -> Self {
        let word = |i: usize| u64::from_be_bytes(b[i..i + 8].try_into().unwrap());
        PersistedRecord { hardware: word(0), counter: word(8), view: word(16) }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TeeStatus {
    Running,
    /// Persisted and stopped; waiting for a reboot.
    Stopped,
    /// Refuses service until [`Tee::reset_counter`] succeeds.
    Locked,
}

/// What the TEE has signed and generated, exposed for the simulator's
/// monitors. Replica logic never reads it.
#[derive(Debug, Default, Clone)]
pub struct TeeAudit {
    pub counter_bindings: BTreeMap<CounterValue, Digest>,
    pub equivocations: u64,
    pub non_monotonic: u64,
    pub last_counter: Option<CounterValue>,
    pub secrets: BTreeMap<CounterValue, Secret>,
}

impl TeeAudit {
    fn record(&mut self, at: CounterValue, digest: Digest) {
        if let Some(prev) = self.counter_bindings.insert(at, digest) {
            if prev != digest {
                self.equivocations += 1;
            }
        }
        if self.last_counter.is_some_and(|last| at <= last) {
            self.non_monotonic += 1;
        }
        self.last_counter = Some(at);
    }
}

#[derive(Debug)]
enum OwnShare {
    Xor(ReleasedShare),
    Shamir(ReleasedShare),
}

#[derive(Debug)]
struct PrimaryRole {
    tree: TreeTopology,
    keys: BTreeMap<ReplicaId, SymKey>,
    own_shares: BTreeMap<CounterValue, OwnShare>,
}

struct Identity {
    signing: PrivateKey,
    encryption: PrivateKey,
}

pub struct Tee {
    id: ReplicaId,
    f: usize,
    crypto: Crypto,
    registry: Arc<KeyRegistry>,
    identity: Identity,
    rng: ChaCha20Rng,
    field: PrimeField,

    latest: CounterValue,
    fresh: bool,
    primary: Option<ReplicaId>,
    role: Option<PrimaryRole>,
    view_key: Option<SymKey>,

    hardware: u64,
    status: TeeStatus,
    rejoin_nonce: Option<[u8; 16]>,

    ops: OpCounter,
    audit: TeeAudit,
}

impl std::fmt::Debug for Tee {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tee")
            .field("id", &self.id)
            .field("latest", &self.latest)
            .field("primary", &self.primary)
            .field("status", &self.status)
            .finish_non_exhaustive()
    }
}

fn tee_rng(seed: u64, id: ReplicaId, purpose: &[u8]) -> ChaCha20Rng {
    let mut w = Writer::default();
    w.raw(b"fastbft/tee-rng").raw(purpose).u64(seed).put(&id);
    ChaCha20Rng::from_seed(hash(&w.into_bytes()).0)
}

/// Creates `n` TEEs with fresh keys and the registry holding their public
/// halves. `f` sets the reset quorum.
pub fn provision(n: usize, f: usize, crypto: Crypto, seed: u64) -> (Vec<Tee>, Arc<KeyRegistry>) {
    let mut identities = Vec::with_capacity(n);
    let mut signing = Vec::with_capacity(n);
    let mut encryption = Vec::with_capacity(n);
    for i in 0..n {
        let mut rng = tee_rng(seed, ReplicaId(i as u32), b"keys");
        let s = crypto.signing_keypair(&mut rng);
        let e = crypto.encryption_keypair(&mut rng);
        signing.push(s.public);
        encryption.push(e.public);
        identities.push(Identity { signing: s.private, encryption: e.private });
    }
    let registry = Arc::new(KeyRegistry { signing, encryption });
    let field = PrimeField::default();
    let tees = identities
        .into_iter()
        .enumerate()
        .map(|(i, identity)| {
            let id = ReplicaId(i as u32);
            Tee {
                id,
                f,
                crypto: crypto.clone(),
                registry: registry.clone(),
                identity,
                rng: tee_rng(seed, id, b"run"),
                field: field.clone(),
                latest: CounterValue::default(),
                fresh: true,
                primary: None,
                role: None,
                view_key: None,
                hardware: 0,
                status: TeeStatus::Running,
                rejoin_nonce: None,
                ops: OpCounter::default(),
                audit: TeeAudit::default(),
            }
        })
        .collect();
    (tees, registry)
}

/// Plaintext of `ω_i`: the view key plus the view and issuer it belongs to.
fn encode_view_key(key: &SymKey, view: u64, issuer: ReplicaId) -> Vec<u8> {
    let mut w = Writer::default();
    w.raw(&key.0).u64(view).put(&issuer);
    w.into_bytes()
}

impl Tee {
    pub fn id(&self) -> ReplicaId {
        self.id
    }

    pub fn latest(&self) -> CounterValue {
        self.latest
    }

    pub fn view(&self) -> u64 {
        self.latest.view
    }

    /// The primary whose bindings this TEE currently accepts.
    pub fn primary(&self) -> Option<ReplicaId> {
        self.primary
    }

    pub fn status(&self) -> TeeStatus {
        self.status
    }

    pub fn holds_view_key(&self) -> bool {
        self.view_key.is_some()
    }

    pub fn is_primary(&self) -> bool {
        self.role.is_some()
    }

    pub fn hardware_counter(&self) -> u64 {
        self.hardware
    }

    pub fn ops(&self) -> OpCounter {
        self.ops
    }

    pub fn audit(&self) -> &TeeAudit {
        &self.audit
    }

    pub fn registry(&self) -> &Arc<KeyRegistry> {
        &self.registry
    }

    fn running(&self) -> Result<(), TeeError> {
        match self.status {
            TeeStatus::Running => Ok(()),
            _ => Err(TeeError::Locked),
        }
    }

    fn sign(&mut self, kind: BindingKind, digest: Digest, at: CounterValue) -> CounterAssignment {
        let payload = CounterAssignment::payload(kind, self.id, &digest, at);
        let signature = self.crypto.sign(&self.identity.signing, &payload);
        if kind == BindingKind::Counter {
            self.audit.record(at, digest);
        }
        CounterAssignment { kind, issuer: self.id, digest, counter: at, signature }
    }

    fn check_from_primary(&self, b: &CounterAssignment, kind: BindingKind) -> Result<(), TeeError> {
        if Some(b.issuer) != self.primary || b.kind != kind {
            return Err(TeeError::InvalidSignature);
        }
        if !b.verify(&self.crypto, &self.registry) {
            return Err(TeeError::InvalidSignature);
        }
        Ok(())
    }

    fn wrap_view_keys(
        &mut self,
        keys: &BTreeMap<ReplicaId, SymKey>,
        only: impl Fn(ReplicaId) -> bool,
    ) -> BTreeMap<ReplicaId, Vec<u8>> {
        let view = self.latest.view;
        let mut out = BTreeMap::new();
        for (r, k) in keys {
            if !only(*r) {
                continue;
            }
            let pk = self.registry.encryption_key(*r).expect("registered replica").clone();
            let ct = self.crypto.pke_encrypt(&pk, &encode_view_key(k, view, self.id), &mut self.rng);
            out.insert(*r, ct);
        }
        out
    }

    fn unwrap_view_key(&self, omega: &[u8], view: u64, issuer: ReplicaId) -> Result<SymKey, TeeError> {
        let pt = self
            .crypto
            .pke_decrypt(&self.identity.encryption, omega)
            .map_err(|_| TeeError::InvalidEnc)?;
        let mut r = Reader::new(&pt);
        let key: [u8; 16] = r.raw().map_err(|_| TeeError::InvalidEnc)?;
        let v = r.u64().map_err(|_| TeeError::InvalidEnc)?;
        let who: ReplicaId = r.get().map_err(|_| TeeError::InvalidEnc)?;
        r.finish().map_err(|_| TeeError::InvalidEnc)?;
        if v != view || who != issuer {
            return Err(TeeError::InvalidEnc);
        }
        Ok(SymKey(key))
    }

    /// Takes the primary role for `target_view` with the given actives and
    /// tree. Returns `ω_i` for every active other than this replica.
    ///
    /// `target_view` must exceed the current view, except on a fresh TEE
    /// bootstrapping view 0.
    pub fn be_primary(
        &mut self,
        actives: &[ReplicaId],
        tree: &TreeTopology,
        target_view: u64,
    ) -> Result<BTreeMap<ReplicaId, Vec<u8>>, TeeError> {
        self.running()?;
        let advances = target_view > self.latest.view || (self.fresh && target_view == 0);
        if !advances {
            return Err(TeeError::StaleView { target: target_view, current: self.latest.view });
        }
        let listed: BTreeSet<_> = actives.iter().copied().collect();
        let in_tree: BTreeSet<_> = tree.nodes().iter().copied().collect();
        if tree.root() != self.id
            || listed != in_tree
            || listed.len() != actives.len()
            || listed.len() <= self.f
        {
            return Err(TeeError::BadTree);
        }
        if actives.iter().any(|r| self.registry.signing_key(*r).is_none()) {
            return Err(TeeError::BadTree);
        }
        self.fresh = false;
        self.latest = CounterValue::new(0, target_view);
        self.primary = Some(self.id);
        self.view_key = None;
        let keys: BTreeMap<_, _> = actives
            .iter()
            .filter(|r| **r != self.id)
            .map(|r| (*r, SymKey::random(&mut self.rng)))
            .collect();
        let omegas = self.wrap_view_keys(&keys, |_| true);
        self.role = Some(PrimaryRole { tree: tree.clone(), keys, own_shares: BTreeMap::new() });
        Ok(omegas)
    }

    /// Installs the view announced by `binding`, which must be the new
    /// primary's first counter value `(1, v')` in a later view.
    pub fn update_view(
        &mut self,
        binding: &CounterAssignment,
        omega: Option<&[u8]>,
    ) -> Result<(), TeeError> {
        self.running()?;
        if binding.kind != BindingKind::Counter || !binding.verify(&self.crypto, &self.registry) {
            return Err(TeeError::InvalidSignature);
        }
        let v = binding.counter.view;
        let advances = v > self.latest.view || (self.fresh && v == 0);
        if !advances || binding.counter.counter != 1 {
            return Err(TeeError::InvalidCounter);
        }
        let key = match omega {
            Some(ct) => Some(self.unwrap_view_key(ct, v, binding.issuer)?),
            None => None,
        };
        self.fresh = false;
        self.latest = binding.counter;
        self.primary = Some(binding.issuer);
        self.role = None;
        self.view_key = key;
        Ok(())
    }

    /// XOR-shares one secret per counter value `c_latest+1 ..= c_latest+m`
    /// over the current tree.
    pub fn preprocessing(&mut self, m: usize) -> Result<Vec<SecretPackage>, TeeError> {
        self.running()?;
        let role = self.role.take().ok_or(TeeError::NotPrimary)?;
        let mut role = role;
        let mut out = Vec::with_capacity(m);
        for a in 1..=m as u64 {
            let at = CounterValue::new(self.latest.counter + a, self.latest.view);
            let pkg = self.xor_package(&mut role, at);
            out.push(pkg);
        }
        self.role = Some(role);
        Ok(out)
    }

    fn xor_package(&mut self, role: &mut PrimaryRole, at: CounterValue) -> SecretPackage {
        let tree = &role.tree;
        let nodes = tree.nodes();
        let secret = Secret::random(&mut self.rng);
        let commitment = commitment_digest(&secret, at);
        self.ops.hashes += 1;
        let shares =
            xor::split(&secret, nodes.len(), &mut self.rng, &mut self.ops).expect("non-empty tree");

        // Subtree aggregates, children before parents.
        let index: BTreeMap<ReplicaId, usize> =
            nodes.iter().enumerate().map(|(k, r)| (*r, k)).collect();
        let mut aggregate = shares.clone();
        for k in (0..nodes.len()).rev() {
            for child in tree.children(nodes[k]) {
                let c = aggregate[index[&child]];
                aggregate[k] ^= c;
                self.ops.xors += 1;
            }
        }
        debug_assert_eq!(aggregate[0], secret);
        let digests: Vec<Digest> = aggregate.iter().map(share_digest).collect();
        self.ops.hashes += nodes.len() as u64 - 1;

        let mut blobs = BTreeMap::new();
        for (k, r) in nodes.iter().enumerate() {
            let child_digests =
                tree.children(*r).into_iter().map(|c| (c, digests[index[&c]])).collect();
            let released =
                ReleasedShare::Xor { counter: at, share: shares[k], child_digests, commitment };
            if k == 0 {
                role.own_shares.insert(at, OwnShare::Xor(released));
            } else {
                let mut w = Writer::default();
                released.encode_for(*r, &mut w);
                let ct = self.crypto.seal(&role.keys[r], &w.into_bytes(), &mut self.rng);
                self.ops.seals += 1;
                blobs.insert(*r, ShareBlob(ct));
            }
        }
        self.audit.secrets.insert(at, secret);
        let binding = self.sign(BindingKind::Commitment, commitment, at);
        SecretPackage { counter: at, commitment, binding, blobs }
    }

    /// Shamir-shares one secret per counter value over every replica in the
    /// current tree (all `n` during fallback), at points `x_i = i + 1`.
    pub fn preprocessing_fallback(&mut self, m: usize) -> Result<Vec<SecretPackage>, TeeError> {
        self.running()?;
        let mut role = self.role.take().ok_or(TeeError::NotPrimary)?;
        let mut out = Vec::with_capacity(m);
        let nodes = role.tree.nodes().to_vec();
        let points: Vec<_> = nodes.iter().map(|r| self.field.elem(r.0 as u64 + 1)).collect();
        for a in 1..=m as u64 {
            let at = CounterValue::new(self.latest.counter + a, self.latest.view);
            let secret = Secret::random(&mut self.rng);
            let commitment = commitment_digest(&secret, at);
            self.ops.hashes += 1;
            let shares = shamir::share(
                &self.field,
                &self.field.from_secret(&secret),
                self.f,
                &points,
                &mut self.rng,
                &mut self.ops,
            )
            .expect("distinct nonzero points");
            let mut blobs = BTreeMap::new();
            for (r, share) in nodes.iter().zip(shares) {
                let released = ReleasedShare::Shamir { counter: at, share, commitment };
                if *r == self.id {
                    role.own_shares.insert(at, OwnShare::Shamir(released));
                } else {
                    let mut w = Writer::default();
                    released.encode_for(*r, &mut w);
                    let ct = self.crypto.seal(&role.keys[r], &w.into_bytes(), &mut self.rng);
                    self.ops.seals += 1;
                    blobs.insert(*r, ShareBlob(ct));
                }
            }
            self.audit.secrets.insert(at, secret);
            let binding = self.sign(BindingKind::Commitment, commitment, at);
            out.push(SecretPackage { counter: at, commitment, binding, blobs });
        }
        self.role = Some(role);
        Ok(out)
    }

    /// The primary's own share for a counter it has already bound. Released
    /// once.
    pub fn release_own_share(&mut self, at: CounterValue) -> Result<ReleasedShare, TeeError> {
        self.running()?;
        let latest = self.latest;
        let role = self.role.as_mut().ok_or(TeeError::NotPrimary)?;
        if at.view != latest.view || at.counter > latest.counter {
            return Err(TeeError::NoOwnShare(at));
        }
        role.own_shares.retain(|c, _| c.view == latest.view);
        match role.own_shares.remove(&at) {
            Some(OwnShare::Xor(s)) | Some(OwnShare::Shamir(s)) => Ok(s),
            None => Err(TeeError::NoOwnShare(at)),
        }
    }

    /// Binds `x` to the next counter value.
    pub fn request_counter(&mut self, x: Digest) -> Result<CounterAssignment, TeeError> {
        self.running()?;
        self.latest = self.latest.next();
        Ok(self.sign(BindingKind::Counter, x, self.latest))
    }

    /// Signs `x` at the current counter value without consuming it.
    pub fn attest(&mut self, x: Digest) -> Result<CounterAssignment, TeeError> {
        self.running()?;
        Ok(self.sign(BindingKind::Attestation, x, self.latest))
    }

    /// Signs `x` at an earlier counter value `at <= c_latest`: a statement
    /// that this TEE has reached at least `at`.
    pub fn attest_at(&mut self, x: Digest, at: CounterValue) -> Result<CounterAssignment, TeeError> {
        self.running()?;
        if at > self.latest {
            return Err(TeeError::InvalidCounter);
        }
        Ok(self.sign(BindingKind::Attestation, x, at))
    }

    /// Opens this replica's share for the primary's next counter value.
    pub fn verify_counter(
        &mut self,
        binding: &CounterAssignment,
        blob: &ShareBlob,
    ) -> Result<ReleasedShare, TeeError> {
        self.running()?;
        self.check_from_primary(binding, BindingKind::Counter)?;
        let key = self.view_key.ok_or(TeeError::InvalidEnc)?;
        let pt = self.crypto.open(&key, &blob.0).map_err(|_| TeeError::InvalidEnc)?;
        let mut r = Reader::new(&pt);
        let (recipient, released) = ReleasedShare::decode_for(&mut r)
            .and_then(|x| r.finish().map(|_| x))
            .map_err(|_| TeeError::InvalidEnc)?;
        if recipient != self.id {
            return Err(TeeError::InvalidEnc);
        }
        if released.counter() != binding.counter || binding.counter != self.latest.next() {
            return Err(TeeError::InvalidCounterValue);
        }
        self.latest = binding.counter;
        Ok(released)
    }

    /// Advances a passive replica's counter given the opened secret.
    pub fn update_counter(
        &mut self,
        secret: &Secret,
        binding: &CounterAssignment,
    ) -> Result<(), TeeError> {
        self.running()?;
        self.check_from_primary(binding, BindingKind::Commitment)?;
        if binding.counter != self.latest.next() {
            return Err(TeeError::InvalidCounter);
        }
        if commitment_digest(secret, binding.counter) != binding.digest {
            return Err(TeeError::InvalidSecret);
        }
        self.latest = binding.counter;
        Ok(())
    }

    /// Primary side of a NEW-TREE: installs `new_tree`, issues view keys to
    /// newcomers and binds `H(T || T')` to the next counter value.
    pub fn reshape_tree(
        &mut self,
        new_tree: &TreeTopology,
    ) -> Result<(CounterAssignment, BTreeMap<ReplicaId, Vec<u8>>), TeeError> {
        self.running()?;
        let mut role = self.role.take().ok_or(TeeError::NotPrimary)?;
        if new_tree.root() != self.id
            || new_tree.nodes().iter().any(|r| self.registry.signing_key(*r).is_none())
        {
            self.role = Some(role);
            return Err(TeeError::BadTree);
        }
        let digest = TreeTopology::change_digest(&role.tree, new_tree);
        role.keys.retain(|r, _| new_tree.contains(*r));
        let mut newcomers = BTreeMap::new();
        for r in new_tree.nodes() {
            if *r != self.id && !role.keys.contains_key(r) {
                let k = SymKey::random(&mut self.rng);
                role.keys.insert(*r, k);
                newcomers.insert(*r, k);
            }
        }
        let omegas = self.wrap_view_keys(&newcomers, |_| true);
        role.tree = new_tree.clone();
        role.own_shares.clear();
        self.role = Some(role);
        let binding = self.request_counter(digest)?;
        Ok((binding, omegas))
    }

    /// Replica side of a NEW-TREE. `skipped` are the primary's bindings for
    /// the aborted round; those above this TEE's counter must chain
    /// consecutively up to `binding`.
    pub fn update_tree(
        &mut self,
        binding: &CounterAssignment,
        skipped: &[CounterAssignment],
        old_tree: &TreeTopology,
        new_tree: &TreeTopology,
        omega: Option<&[u8]>,
    ) -> Result<(), TeeError> {
        self.running()?;
        self.check_from_primary(binding, BindingKind::Counter)?;
        if binding.digest != TreeTopology::change_digest(old_tree, new_tree) {
            return Err(TeeError::DigestMismatch);
        }
        let mut expect = self.latest.next();
        let mut pending: Vec<_> = skipped
            .iter()
            .filter(|b| b.counter.view == self.latest.view && b.counter > self.latest)
            .collect();
        pending.sort_by_key(|b| b.counter);
        for b in pending {
            if b.counter != expect {
                return Err(TeeError::InvalidCounter);
            }
            self.check_from_primary(b, BindingKind::Counter)?;
            expect = expect.next();
        }
        if binding.counter != expect {
            return Err(TeeError::InvalidCounter);
        }
        let key = if !new_tree.contains(self.id) {
            None
        } else if old_tree.contains(self.id) && self.view_key.is_some() {
            self.view_key
        } else {
            let ct = omega.ok_or(TeeError::InvalidEnc)?;
            Some(self.unwrap_view_key(ct, binding.counter.view, binding.issuer)?)
        };
        self.latest = binding.counter;
        self.view_key = key;
        Ok(())
    }

    /// Records `(C+1, c, v)` and stops. Returns the record for untrusted
    /// storage.
    pub fn persist_then_stop(&mut self) -> Result<PersistedRecord, TeeError> {
        self.running()?;
        self.hardware += 1;
        self.status = TeeStatus::Stopped;
        Ok(PersistedRecord {
            hardware: self.hardware,
            counter: self.latest.counter,
            view: self.latest.view,
        })
    }

    /// Power cycle: volatile state is lost and the TEE waits for
    /// [`Self::restore`]. Keys, the hardware counter and the last known
    /// primary survive.
    pub fn reboot(&mut self) {
        self.latest = CounterValue::default();
        self.role = None;
        self.view_key = None;
        self.rejoin_nonce = None;
        self.status = TeeStatus::Locked;
    }

    /// Resumes from `record` iff its hardware value equals the live hardware
    /// counter; otherwise stays locked. A successful restore increments the
    /// hardware counter so the same record cannot be replayed later.
    pub fn restore(&mut self, record: Option<&PersistedRecord>) -> TeeStatus {
        match record {
            Some(rec) if rec.hardware == self.hardware && self.status != TeeStatus::Running => {
                self.latest = CounterValue::new(rec.counter, rec.view);
                self.hardware += 1;
                self.status = TeeStatus::Running;
            }
            _ => {
                self.status = TeeStatus::Locked;
            }
        }
        self.status
    }

    /// Fresh nonce that peers must bind into their REJOIN answers.
    pub fn rejoin_nonce(&mut self) -> Result<[u8; 16], TeeError> {
        if self.status != TeeStatus::Locked {
            return Err(TeeError::NotLocked);
        }
        let mut n = [0u8; 16];
        self.rng.fill_bytes(&mut n);
        self.rejoin_nonce = Some(n);
        Ok(n)
    }

    /// Leaves lockout once `f + 1` distinct registered peers attest to the
    /// same counter value, primary and state digest under the current nonce.
    /// Returns the agreed evidence.
    pub fn reset_counter(
        &mut self,
        evidence: &[RejoinEvidence],
    ) -> Result<RejoinEvidence, TeeError> {
        if self.status != TeeStatus::Locked {
            return Err(TeeError::NotLocked);
        }
        let nonce = self.rejoin_nonce.ok_or(TeeError::InsufficientEvidence)?;
        let mut groups: BTreeMap<(CounterValue, ReplicaId, Digest), BTreeSet<ReplicaId>> =
            BTreeMap::new();
        for e in evidence {
            let a = &e.attestation;
            if a.kind != BindingKind::Attestation
                || a.issuer == self.id
                || a.digest != rejoin_digest(&nonce, e.primary, &e.state_digest)
                || !a.verify(&self.crypto, &self.registry)
            {
                continue;
            }
            groups.entry((a.counter, e.primary, e.state_digest)).or_default().insert(a.issuer);
        }
        let Some(((at, primary, state), _)) =
            groups.into_iter().filter(|(_, who)| who.len() > self.f).max_by_key(|(k, _)| k.0)
        else {
            return Err(TeeError::InsufficientEvidence);
        };
        self.latest = at;
        self.primary = Some(primary);
        self.role = None;
        self.view_key = None;
        self.rejoin_nonce = None;
        self.fresh = false;
        self.status = TeeStatus::Running;
        let chosen = evidence
            .iter()
            .find(|e| e.attestation.counter == at && e.primary == primary && e.state_digest == state)
            .cloned()
            .expect("group came from evidence");
        Ok(chosen)
    }
}
