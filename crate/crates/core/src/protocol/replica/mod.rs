//! Replica state and input dispatch. The per-phase handlers live in the
//! submodules.

mod fallback;
mod normal;
mod rejoin;
mod view_change;

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

use super::history::Verifier;
use super::messages::{
    Checkpoint, ClientRegistry, LogEntry, Mode, NewView, ProtocolMessage, Reply, ReqViewChange,
    Request,
};
use super::{Action, AppResult, Behavior, Input, KvStore, Observation, ProtocolConfig, Timer};
use crate::primitives::{Crypto, Digest, FieldElement, LagrangeTable, PrimeField, Secret};
use crate::tee::{provision, CounterAssignment, KeyRegistry, ShareBlob, Tee};
use crate::topology::TreeTopology;
use crate::{ClientId, CounterValue, NodeId, ReplicaId, RequestId};

/// Where a replica stands in the current view.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    Primary,
    Active,
    Passive,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Status {
    Normal,
    /// Sent REQ-VIEW-CHANGE for `target`; current-view traffic is ignored.
    ViewChanging { target: u64 },
    /// Accepted a NEW-VIEW and waits for VIEW-CHANGE acknowledgements.
    Installing { target: u64 },
    /// Rebooted; waiting for f + 1 peers to vouch for a counter value.
    Locked,
}

/// Last round boundary: what a REJOIN answer describes.
#[derive(Debug, Clone)]
struct Stable {
    counter: CounterValue,
    exec_len: usize,
    app_digest: Digest,
    view: u64,
    mode: Mode,
    tree: TreeTopology,
    primary: ReplicaId,
}

/// A share aggregation in progress for one counter value.
#[derive(Debug, Clone)]
struct Aggregation {
    request: RequestId,
    acc: Secret,
    missing: BTreeMap<ReplicaId, Digest>,
    failed: bool,
}

/// The round an active replica is taking part in.
#[derive(Debug, Clone)]
struct ActiveRound {
    request: Request,
    prepare: CounterAssignment,
    commitment: Digest,
}

#[derive(Debug, Clone)]
struct LeaderRound {
    request: Request,
    prepare: CounterAssignment,
    /// Result, binding and opened secret once the commit phase is done.
    commit: Option<(AppResult, CounterAssignment, Secret)>,
    /// Set once the round has been sabotaged and will not progress.
    stalled: bool,
}

#[derive(Debug, Clone)]
struct Package {
    commitment: Digest,
    binding: CounterAssignment,
}

/// State only the primary keeps.
#[derive(Debug, Default)]
struct Leader {
    queue: VecDeque<Request>,
    round: Option<LeaderRound>,
    packages: BTreeMap<CounterValue, Package>,
    replies: BTreeMap<ClientId, Reply>,
    /// REPLY and NEW-TREE messages of this view, keyed by counter value.
    retransmit: Vec<(CounterValue, ProtocolMessage)>,
    suspects: Vec<(ReplicaId, ReplicaId, CounterValue)>,
    window_open: bool,
    suspect_count: u32,
    evicted: BTreeSet<ReplicaId>,
    fallback_served: u64,
    probe: Option<(u64, BTreeSet<ReplicaId>)>,
    probe_nonce: u64,
    pending_transition: Option<Mode>,
    fallback_shares: BTreeMap<CounterValue, Vec<(usize, FieldElement)>>,
}

#[derive(Debug, Default)]
struct ViewChangeState {
    requested: Option<(u64, super::ViewChangeKind)>,
    attempts: u32,
    requests: BTreeMap<u64, BTreeMap<ReplicaId, ReqViewChange>>,
    acks: BTreeMap<(u64, Digest), BTreeSet<ReplicaId>>,
    pending: Option<NewView>,
    sent_new_view: BTreeSet<u64>,
}

#[derive(Debug)]
struct RejoinState {
    nonce: [u8; 16],
    responses: BTreeMap<ReplicaId, super::messages::RejoinResponse>,
}

/// Outcome of checking a counter-keyed message against the local counter.
enum Gate {
    Process,
    Stash,
    Stale,
}

pub struct Replica {
    id: ReplicaId,
    cfg: ProtocolConfig,
    crypto: Crypto,
    registry: Arc<KeyRegistry>,
    clients: Arc<ClientRegistry>,
    tee: Tee,
    rng: ChaCha20Rng,
    behavior: Behavior,
    lagrange: Option<LagrangeTable>,
    out: Vec<Action>,

    view: u64,
    primary: ReplicaId,
    mode: Mode,
    tree: TreeTopology,
    /// Counter value of the binding that installed the current tree.
    epoch: CounterValue,
    status: Status,

    app: KvStore,
    checkpoint: Option<Checkpoint>,
    exec_log: Vec<(Request, AppResult, CounterValue)>,
    log: Vec<LogEntry>,
    stable: Stable,

    blobs: BTreeMap<CounterValue, (CounterValue, ShareBlob)>,
    pending: BTreeMap<CounterValue, Aggregation>,
    early_shares: BTreeMap<CounterValue, Vec<(ReplicaId, Secret)>>,
    stash: BTreeMap<CounterValue, Vec<(NodeId, ProtocolMessage)>>,
    awaiting_blob: BTreeMap<CounterValue, (NodeId, ProtocolMessage)>,
    skipped: BTreeSet<CounterValue>,
    retransmit_armed: bool,
    active_round: Option<ActiveRound>,
    client_requests: BTreeMap<ClientId, Request>,

    leader: Option<Leader>,
    vc: ViewChangeState,
    rejoin: Option<RejoinState>,
}

/// Provisions `cfg.n` replicas and installs view 0 with replica 0 as
/// primary and replicas `0..=f` as actives.
pub fn genesis(
    cfg: &ProtocolConfig,
    crypto: Crypto,
    clients: Arc<ClientRegistry>,
    seed: u64,
) -> (Vec<Replica>, Arc<KeyRegistry>) {
    let (mut tees, registry) = provision(cfg.n, cfg.f, crypto.clone(), seed);
    let actives: Vec<ReplicaId> = (0..=cfg.f as u32).map(ReplicaId).collect();
    let tree = TreeTopology::build(ReplicaId(0), &actives, cfg.branching).expect("valid genesis tree");
    let omegas = tees[0].be_primary(&actives, &tree, 0).expect("fresh TEE");
    let digest = NewView::content_digest(0, Mode::Normal, &[], &tree);
    let binding = tees[0].request_counter(digest).expect("running TEE");
    for t in tees.iter_mut().skip(1) {
        t.update_view(&binding, omegas.get(&t.id()).map(Vec::as_slice)).expect("genesis binding");
    }
    let replicas = tees
        .into_iter()
        .map(|tee| {
            let id = tee.id();
            let mut r = Replica {
                id,
                cfg: cfg.clone(),
                crypto: crypto.clone(),
                registry: registry.clone(),
                clients: clients.clone(),
                tee,
                rng: ChaCha20Rng::seed_from_u64(seed ^ (0x5eed_0000_0000 + id.0 as u64)),
                behavior: Behavior::default(),
                lagrange: None,
                out: Vec::new(),
                view: 0,
                primary: ReplicaId(0),
                mode: Mode::Normal,
                tree: tree.clone(),
                epoch: binding.counter,
                status: Status::Normal,
                app: KvStore::default(),
                checkpoint: None,
                exec_log: Vec::new(),
                log: vec![LogEntry::ViewStart { binding: binding.clone(), history: vec![] }],
                stable: Stable {
                    counter: binding.counter,
                    exec_len: 0,
                    app_digest: KvStore::default().digest(),
                    view: 0,
                    mode: Mode::Normal,
                    tree: tree.clone(),
                    primary: ReplicaId(0),
                },
                blobs: BTreeMap::new(),
                pending: BTreeMap::new(),
                early_shares: BTreeMap::new(),
                stash: BTreeMap::new(),
                awaiting_blob: BTreeMap::new(),
                skipped: BTreeSet::new(),
                retransmit_armed: false,
                active_round: None,
                client_requests: BTreeMap::new(),
                leader: None,
                vc: ViewChangeState::default(),
                rejoin: None,
            };
            if id == ReplicaId(0) {
                r.leader = Some(Leader::default());
            }
            r
        })
        .collect();
    (replicas, registry)
}

impl Replica {
    pub fn id(&self) -> ReplicaId {
        self.id
    }

    pub fn view(&self) -> u64 {
        self.view
    }

    pub fn primary(&self) -> ReplicaId {
        self.primary
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn status(&self) -> Status {
        self.status
    }

    pub fn tree(&self) -> &TreeTopology {
        &self.tree
    }

    pub fn app(&self) -> &KvStore {
        &self.app
    }

    pub fn log(&self) -> &[LogEntry] {
        &self.log
    }

    pub fn checkpoint(&self) -> Option<&Checkpoint> {
        self.checkpoint.as_ref()
    }

    pub fn tee(&self) -> &Tee {
        &self.tee
    }

    /// Direct TEE access for tests that play a malicious host.
    pub fn tee_mut(&mut self) -> &mut Tee {
        &mut self.tee
    }

    pub fn config(&self) -> &ProtocolConfig {
        &self.cfg
    }

    pub fn behavior(&self) -> Behavior {
        self.behavior
    }

    pub fn set_behavior(&mut self, b: Behavior) {
        self.behavior = b;
    }

    pub fn role(&self) -> Role {
        if self.is_primary() {
            Role::Primary
        } else if self.tree.contains(self.id) && self.tee.holds_view_key() {
            Role::Active
        } else {
            Role::Passive
        }
    }

    fn is_primary(&self) -> bool {
        self.primary == self.id && self.leader.is_some()
    }

    /// Applies one input and returns the resulting actions.
    pub fn handle(&mut self, input: Input) -> Vec<Action> {
        match input {
            Input::Reboot => self.on_reboot(),
            Input::Timer(t) => self.on_timer(t),
            Input::Message { from, msg } => self.on_message(from, msg),
        }
        self.drain_stash();
        std::mem::take(&mut self.out)
    }

    fn on_timer(&mut self, t: Timer) {
        if self.status == Status::Locked {
            if t == Timer::Rejoin {
                self.start_rejoin();
            }
            return;
        }
        match t {
            Timer::ChildShare { counter, child } => self.on_child_timeout(counter, child),
            Timer::SuspectWindow => self.on_suspect_window(),
            Timer::Request(c) => {
                if self.status == Status::Normal
                    && !self.is_primary()
                    && self.client_requests.contains_key(&c)
                {
                    self.request_view_change();
                }
            }
            Timer::ViewChange => self.on_view_change_timeout(),
            Timer::Retransmit => self.on_retransmit_timer(),
            Timer::Probe => self.on_probe_timeout(),
            Timer::Rejoin | Timer::ClientRetry => {}
        }
    }

    fn on_message(&mut self, from: NodeId, msg: ProtocolMessage) {
        if self.status == Status::Locked {
            if let (NodeId::Replica(j), ProtocolMessage::RejoinResponse(r)) = (from, msg) {
                self.on_rejoin_response(j, *r);
            }
            return;
        }
        if let ProtocolMessage::Request(m) = msg {
            self.on_request(from, m);
            return;
        }
        let NodeId::Replica(j) = from else {
            return;
        };
        match msg {
            ProtocolMessage::ReqViewChange(m) => self.on_req_view_change(j, *m),
            ProtocolMessage::NewView(m) => self.on_new_view(j, *m),
            ProtocolMessage::ViewChange { target, digest, attestation } => {
                self.on_view_change_ack(j, target, digest, attestation)
            }
            ProtocolMessage::Rejoin { nonce } => self.on_rejoin(j, nonce),
            ProtocolMessage::RejoinResponse(_) => {}
            ProtocolMessage::Preprocess { epoch, blobs } => self.on_preprocess(j, epoch, blobs),
            msg if self.status != Status::Normal => {
                // Frozen: keep later-view traffic for after the install.
                if let Some(key) = Self::counter_key(&msg) {
                    if key.view > self.view {
                        self.stash.entry(key).or_default().push((from, msg));
                    }
                }
            }
            msg => self.on_normal(j, msg),
        }
    }

    fn on_normal(&mut self, j: ReplicaId, msg: ProtocolMessage) {
        if let Some(key) = self.gate_key(&msg) {
            match self.gate(key) {
                Gate::Process => {}
                Gate::Stash => {
                    let arm = matches!(
                        msg,
                        ProtocolMessage::Reply(_) | ProtocolMessage::NewTree(_)
                    ) && key.view == self.view;
                    self.stash.entry(key).or_default().push((j.into(), msg));
                    if arm && !self.retransmit_armed {
                        self.retransmit_armed = true;
                        self.set_timer(Timer::Retransmit, self.cfg.retransmit_timeout);
                    }
                    return;
                }
                Gate::Stale => {
                    let replayed = matches!(
                        msg,
                        ProtocolMessage::Prepare { .. } | ProtocolMessage::Commit { .. }
                    );
                    if replayed && j == self.primary && !self.skipped.contains(&key) {
                        self.request_view_change();
                    }
                    return;
                }
            }
        }
        match msg {
            ProtocolMessage::Prepare { request, binding } => self.on_prepare(j, request, binding),
            ProtocolMessage::Share { counter, aggregate } => self.on_share(j, counter, aggregate),
            ProtocolMessage::Commit { secret, result, binding } => {
                self.on_commit(j, secret, result, binding)
            }
            ProtocolMessage::Reply(r) => self.on_reply(j, *r),
            ProtocolMessage::Suspect { accused, accuser, round } => {
                self.on_suspect(j, accused, accuser, round)
            }
            ProtocolMessage::NewTree(nt) => self.on_new_tree(j, *nt),
            ProtocolMessage::Retransmit { after } => self.on_retransmit(j, after),
            ProtocolMessage::FallbackPrepare { request, binding } => {
                self.on_fallback_prepare(j, request, binding)
            }
            ProtocolMessage::FallbackShare { counter, y } => self.on_fallback_share(j, counter, y),
            ProtocolMessage::FallbackCommit { secret, result, binding } => {
                self.on_fallback_commit(j, secret, result, binding)
            }
            ProtocolMessage::Probe { nonce } => {
                if j == self.primary {
                    self.send(j, ProtocolMessage::ProbeAck { nonce }, None);
                }
            }
            ProtocolMessage::ProbeAck { nonce } => self.on_probe_ack(j, nonce),
            _ => {}
        }
    }

    /// The counter value a message must wait for, if it is counter-keyed.
    fn counter_key(msg: &ProtocolMessage) -> Option<CounterValue> {
        match msg {
            ProtocolMessage::Prepare { binding, .. }
            | ProtocolMessage::Commit { binding, .. }
            | ProtocolMessage::FallbackPrepare { binding, .. }
            | ProtocolMessage::FallbackCommit { binding, .. } => Some(binding.counter),
            ProtocolMessage::Reply(r) => Some(r.prepare.counter),
            ProtocolMessage::NewTree(nt) => Some(
                nt.skipped
                    .iter()
                    .map(|b| b.counter)
                    .chain(std::iter::once(nt.binding.counter))
                    .min()
                    .expect("non-empty"),
            ),
            _ => None,
        }
    }

    /// Like [`Self::counter_key`], but a NEW-TREE is keyed by the first of
    /// its counter values this replica has not passed yet.
    fn gate_key(&self, msg: &ProtocolMessage) -> Option<CounterValue> {
        match msg {
            ProtocolMessage::NewTree(nt) => {
                let latest = self.tee.latest();
                if nt.binding.counter <= latest {
                    return Some(nt.binding.counter);
                }
                Some(
                    nt.skipped
                        .iter()
                        .map(|b| b.counter)
                        .filter(|c| *c > latest)
                        .chain(std::iter::once(nt.binding.counter))
                        .min()
                        .expect("non-empty"),
                )
            }
            other => Self::counter_key(other),
        }
    }

    fn gate(&self, key: CounterValue) -> Gate {
        let next = self.tee.latest().next();
        if key.view > self.view || (key.view == self.view && key > next) {
            Gate::Stash
        } else if key < next {
            Gate::Stale
        } else {
            Gate::Process
        }
    }

    /// Re-dispatches stashed messages that have become processable.
    fn drain_stash(&mut self) {
        loop {
            if self.status != Status::Normal {
                return;
            }
            let next = self.tee.latest().next();
            self.stash.retain(|k, _| k.view >= self.view);
            let ready: Vec<CounterValue> = self.stash.range(..=next).map(|(k, _)| *k).collect();
            if ready.is_empty() {
                return;
            }
            for k in ready {
                for (from, msg) in self.stash.remove(&k).unwrap_or_default() {
                    self.on_message(from, msg);
                }
            }
        }
    }

    fn on_retransmit_timer(&mut self) {
        self.retransmit_armed = false;
        if self.status != Status::Normal || self.is_primary() {
            return;
        }
        let next = self.tee.latest().next();
        let behind = self.stash.keys().any(|k| k.view == self.view && *k > next);
        if behind {
            let after = self.tee.latest();
            self.send(self.primary, ProtocolMessage::Retransmit { after }, None);
            self.retransmit_armed = true;
            self.set_timer(Timer::Retransmit, self.cfg.retransmit_timeout);
        }
    }

    fn on_retransmit(&mut self, j: ReplicaId, after: CounterValue) {
        let Some(leader) = &self.leader else {
            return;
        };
        if !self.is_primary() || after.view != self.view {
            return;
        }
        let msgs: Vec<ProtocolMessage> =
            leader.retransmit.iter().filter(|(k, _)| *k > after).map(|(_, m)| m.clone()).collect();
        for m in msgs {
            let round = match &m {
                ProtocolMessage::Reply(r) => Some(r.request.id),
                _ => None,
            };
            self.send(j, m, round);
        }
    }

    fn verifier(&self) -> Verifier<'_> {
        Verifier { crypto: &self.crypto, registry: &self.registry, clients: &self.clients }
    }

    fn send(&mut self, to: impl Into<NodeId>, msg: ProtocolMessage, round: Option<RequestId>) {
        self.out.push(Action::Send { to: to.into(), msg, round });
    }

    /// Sends to every other replica.
    fn broadcast(&mut self, msg: ProtocolMessage, round: Option<RequestId>) {
        for r in 0..self.cfg.n as u32 {
            if ReplicaId(r) != self.id {
                self.send(ReplicaId(r), msg.clone(), round);
            }
        }
    }

    fn send_all(&mut self, to: &[ReplicaId], msg: ProtocolMessage, round: Option<RequestId>) {
        for r in to {
            if *r != self.id {
                self.send(*r, msg.clone(), round);
            }
        }
    }

    fn set_timer(&mut self, timer: Timer, after: u64) {
        self.out.push(Action::SetTimer { timer, after });
    }

    fn cancel_timer(&mut self, timer: Timer) {
        self.out.push(Action::CancelTimer(timer));
    }

    fn observe(&mut self, o: Observation) {
        self.out.push(Action::Observe(o));
    }

    /// Executes `m` unless already executed, recording it for rejoin.
    fn execute(&mut self, m: &Request, counter: CounterValue) -> AppResult {
        let (res, fresh) = self.app.execute(m.id, &m.op);
        if fresh {
            self.record_execution(m, &res, counter);
        }
        res
    }

    /// Applies a result computed elsewhere.
    fn apply(&mut self, m: &Request, res: &AppResult, counter: CounterValue) {
        if self.app.apply(m.id, res) {
            self.record_execution(m, res, counter);
        }
    }

    fn record_execution(&mut self, m: &Request, res: &AppResult, counter: CounterValue) {
        self.exec_log.push((m.clone(), res.clone(), counter));
        self.observe(Observation::Executed {
            request: m.id,
            digest: m.digest(),
            counter,
            result: res.clone(),
        });
    }

    /// A request of `id`'s client made progress; stop watching it.
    fn request_progress(&mut self, id: RequestId) {
        if self.client_requests.get(&id.client).is_some_and(|m| m.id.seq <= id.seq) {
            self.client_requests.remove(&id.client);
            self.cancel_timer(Timer::Request(id.client));
        }
    }

    /// Marks a round boundary: updates the stable point and checkpoints
    /// every K executions.
    fn round_complete(&mut self) {
        let seq = self.app.executed();
        let last = self.checkpoint.as_ref().map_or(0, |c| c.seq);
        if seq >= last + self.cfg.checkpoint_interval {
            let counter = self.tee.latest();
            let cp = Checkpoint { seq, counter, state: self.app.clone() };
            let digest = cp.state_digest();
            self.checkpoint = Some(cp);
            self.exec_log.clear();
            self.log.retain(|e| e.counter() > counter);
            self.observe(Observation::Checkpoint { seq, digest });
        }
        self.mark_stable();
    }

    fn mark_stable(&mut self) {
        self.stable = Stable {
            counter: self.tee.latest(),
            exec_len: self.exec_log.len(),
            app_digest: self.app.digest(),
            view: self.view,
            mode: self.mode,
            tree: self.tree.clone(),
            primary: self.primary,
        };
    }

    /// Drops per-round state, e.g. when the tree or the view changes.
    fn clear_round_state(&mut self) {
        let timers: Vec<Timer> = self
            .pending
            .iter()
            .flat_map(|(c, a)| {
                a.missing.keys().map(|child| Timer::ChildShare { counter: *c, child: *child })
            })
            .collect();
        for t in timers {
            self.cancel_timer(t);
        }
        self.pending.clear();
        self.early_shares.clear();
        self.active_round = None;
    }

    fn on_preprocess(
        &mut self,
        j: ReplicaId,
        epoch: CounterValue,
        blobs: Vec<(CounterValue, ShareBlob)>,
    ) {
        if epoch.view < self.view || (epoch.view == self.view && epoch < self.epoch) {
            return;
        }
        if epoch.view == self.view && j != self.primary {
            return;
        }
        for (c, b) in blobs {
            match self.blobs.get(&c) {
                Some((e, _)) if *e > epoch => {}
                _ => {
                    self.blobs.insert(c, (epoch, b));
                }
            }
        }
        let waiting = std::mem::take(&mut self.awaiting_blob);
        for (_, (from, msg)) in waiting {
            self.on_message(from, msg);
        }
    }

    /// The blob for `c` if it belongs to the current tree.
    fn current_blob(&self, c: CounterValue) -> Option<ShareBlob> {
        self.blobs.get(&c).filter(|(e, _)| *e == self.epoch).map(|(_, b)| b.clone())
    }

    fn lagrange(&mut self) -> &LagrangeTable {
        let n = self.cfg.n;
        self.lagrange.get_or_insert_with(|| LagrangeTable::consecutive(PrimeField::default(), n))
    }
}

#[cfg(test)]
mod tests;
