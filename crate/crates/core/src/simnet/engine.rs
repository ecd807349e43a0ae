//! Discrete-event loop.

use std::cmp::{Ordering, Reverse};
use std::collections::{BTreeMap, BTreeSet, BinaryHeap};
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

use super::metrics::{MetricsReport, RequestLatency, Violation, ViolationKind};
use super::monitor::Monitor;
use super::scenario::{FaultKind, Scenario};
use super::trace::{count_messages, PhaseCounts, TraceRecord};
use crate::client::{Client, ClientAction};
use crate::codec::Encode;
use crate::protocol::{
    genesis, Action, ClientRegistry, Input, Mode, Observation, Operation, ProtocolMessage, Replica,
    Timer, ViewChangeKind,
};
use crate::{ClientId, CounterValue, NodeId, ReplicaId, RequestId};

/// Everything a run produces.
pub struct SimOutput {
    pub report: MetricsReport,
    pub trace: Vec<TraceRecord>,
    /// Final replica states.
    pub replicas: Vec<Replica>,
}

enum Kind {
    Deliver { from: NodeId, to: NodeId, msg: ProtocolMessage },
    Timer { node: NodeId, timer: Timer, gen: u64 },
    FaultStart(usize),
    FaultEnd(usize),
    ClientStart(usize),
}

struct Event {
    time: u64,
    seq: u64,
    kind: Kind,
}

impl PartialEq for Event {
    fn eq(&self, o: &Self) -> bool {
        (self.time, self.seq) == (o.time, o.seq)
    }
}
impl Eq for Event {}
impl PartialOrd for Event {
    fn partial_cmp(&self, o: &Self) -> Option<Ordering> {
        Some(self.cmp(o))
    }
}
impl Ord for Event {
    fn cmp(&self, o: &Self) -> Ordering {
        (self.time, self.seq).cmp(&(o.time, o.seq))
    }
}

struct ClientSlot {
    client: Client,
    ops: ChaCha20Rng,
    remaining: usize,
    started: BTreeMap<RequestId, u64>,
}

struct Sim<'a> {
    sc: &'a Scenario,
    hook: &'a mut dyn FnMut(u64, ReplicaId, &Observation),
    now: u64,
    seq: u64,
    events: u64,
    queue: BinaryHeap<Reverse<Event>>,
    net: ChaCha20Rng,
    replicas: Vec<Replica>,
    clients: Vec<ClientSlot>,
    down: Vec<bool>,
    timers: BTreeMap<(NodeId, Timer), u64>,
    trace: Vec<TraceRecord>,
    monitor: Monitor,
    violation: Option<Violation>,
    latencies: Vec<RequestLatency>,
    views: BTreeSet<(u64, ViewChangeKind)>,
    new_trees: BTreeSet<CounterValue>,
    reconstructions: u64,
    rejoins: u64,
    issued: u64,
    completed: Vec<RequestId>,
}

/// Runs `sc` to completion. The output is a pure function of the scenario.
pub fn run(sc: &Scenario) -> SimOutput {
    run_observed(sc, &mut |_, _, _| {})
}

/// As [`run`], also passing every replica observation to `hook` with the
/// simulated time it happened at.
pub fn run_observed(sc: &Scenario, hook: &mut dyn FnMut(u64, ReplicaId, &Observation)) -> SimOutput {
    let mut sim = Sim::new(sc, hook);
    sim.main_loop();
    sim.finish()
}

impl<'a> Sim<'a> {
    fn new(sc: &'a Scenario, hook: &'a mut dyn FnMut(u64, ReplicaId, &Observation)) -> Self {
        let crypto = sc.crypto.backend().provider();
        let mut keys_rng = ChaCha20Rng::seed_from_u64(sc.seed ^ 0xc11e_0000);
        let pairs: Vec<_> =
            (0..sc.workload.clients).map(|_| crypto.signing_keypair(&mut keys_rng)).collect();
        let registry = Arc::new(ClientRegistry(pairs.iter().map(|k| k.public.clone()).collect()));
        let cfg = sc.protocol_config();
        let (replicas, keys) = genesis(&cfg, crypto.clone(), registry, sc.seed);
        let timeout = sc.client_timeout();
        let clients = pairs
            .into_iter()
            .enumerate()
            .map(|(i, kp)| ClientSlot {
                client: Client::new(
                    ClientId(i as u32),
                    kp.private,
                    crypto.clone(),
                    keys.clone(),
                    sc.n,
                    timeout,
                ),
                ops: ChaCha20Rng::seed_from_u64(sc.seed.rotate_left(17) ^ (0x0b5 + i as u64)),
                remaining: sc.workload.requests,
                started: BTreeMap::new(),
            })
            .collect();
        let byz = sc.byzantine();
        let correct = (0..sc.n as u32).map(|r| !byz.contains(&r)).collect();
        let mut sim = Sim {
            sc,
            hook,
            now: 0,
            seq: 0,
            events: 0,
            queue: BinaryHeap::new(),
            net: ChaCha20Rng::seed_from_u64(sc.seed ^ 0x6e37),
            replicas,
            clients,
            down: vec![false; sc.n],
            timers: BTreeMap::new(),
            trace: Vec::new(),
            monitor: Monitor::new(correct),
            violation: None,
            latencies: Vec::new(),
            views: BTreeSet::new(),
            new_trees: BTreeSet::new(),
            reconstructions: 0,
            rejoins: 0,
            issued: 0,
            completed: Vec::new(),
        };
        for (i, spec) in sc.faults.iter().enumerate() {
            sim.push(spec.start, Kind::FaultStart(i));
            let end = match spec.kind {
                FaultKind::UnscheduledReboot => Some(spec.end.unwrap_or(spec.start + 10 * sc.network.delta)),
                FaultKind::Crash => None,
                _ => spec.end,
            };
            if let Some(e) = end {
                sim.push(e, Kind::FaultEnd(i));
            }
        }
        for c in 0..sc.workload.clients {
            sim.push(0, Kind::ClientStart(c));
        }
        sim
    }

    fn push(&mut self, time: u64, kind: Kind) {
        self.seq += 1;
        self.queue.push(Reverse(Event { time, seq: self.seq, kind }));
    }

    fn all_done(&self) -> bool {
        self.clients.iter().all(|c| c.remaining == 0 && !c.client.is_pending())
    }

    fn main_loop(&mut self) {
        let grace = 10 * self.sc.network.delta;
        let mut stop_at: Option<u64> = None;
        while let Some(Reverse(ev)) = self.queue.pop() {
            if ev.time > self.sc.horizon || stop_at.is_some_and(|s| ev.time > s) {
                break;
            }
            self.now = ev.time;
            self.events += 1;
            self.dispatch(ev.kind);
            if self.violation.is_some() {
                return;
            }
            if stop_at.is_none() && self.all_done() {
                stop_at = Some(self.now + grace);
            }
        }
    }

    fn dispatch(&mut self, kind: Kind) {
        match kind {
            Kind::Deliver { from, to, msg } => match to {
                NodeId::Replica(r) => {
                    if !self.down[r.index()] {
                        self.replica_input(r, Input::Message { from, msg });
                    }
                }
                NodeId::Client(c) => {
                    if let ProtocolMessage::Reply(reply) = msg {
                        let out = self.clients[c.0 as usize].client.on_reply(&reply);
                        if let Ok(actions) = out {
                            self.client_actions(c.0 as usize, actions);
                        }
                    }
                }
            },
            Kind::Timer { node, timer, gen } => {
                if self.timers.get(&(node, timer)) != Some(&gen) {
                    return;
                }
                self.timers.remove(&(node, timer));
                match node {
                    NodeId::Replica(r) => {
                        if !self.down[r.index()] {
                            self.replica_input(r, Input::Timer(timer));
                        }
                    }
                    NodeId::Client(c) => {
                        let actions = self.clients[c.0 as usize].client.on_timeout();
                        self.client_actions(c.0 as usize, actions);
                    }
                }
            }
            Kind::FaultStart(i) => self.fault(i, true),
            Kind::FaultEnd(i) => self.fault(i, false),
            Kind::ClientStart(c) => self.next_request(c),
        }
    }

    fn fault(&mut self, i: usize, on: bool) {
        let spec = self.sc.faults[i].clone();
        let r = ReplicaId(spec.target);
        match spec.kind {
            FaultKind::Crash => self.down[r.index()] = true,
            FaultKind::UnscheduledReboot if on => self.down[r.index()] = true,
            FaultKind::UnscheduledReboot => {
                self.down[r.index()] = false;
                let node = NodeId::Replica(r);
                self.timers.retain(|k, _| k.0 != node);
                self.replica_input(r, Input::Reboot);
            }
            FaultKind::DelayAmplify => {}
            kind => {
                let mut b = self.replicas[r.index()].behavior();
                kind.apply(&mut b, on);
                self.replicas[r.index()].set_behavior(b);
            }
        }
    }

    fn next_request(&mut self, c: usize) {
        let slot = &mut self.clients[c];
        if slot.remaining == 0 || slot.client.is_pending() {
            return;
        }
        slot.remaining -= 1;
        let key = format!("k{}", slot.ops.gen_range(0..self.sc.workload.keys));
        let op = match slot.ops.gen_range(0..10) {
            0..=4 => Operation::Increment { key, by: slot.ops.gen_range(1..=9) },
            5..=7 => Operation::Put { key, value: slot.ops.gen_range(0..1000) },
            _ => Operation::Get { key },
        };
        let actions = slot.client.submit(op).expect("client is idle");
        self.issued += 1;
        self.client_actions(c, actions);
    }

    fn client_actions(&mut self, c: usize, actions: Vec<ClientAction>) {
        let node = NodeId::Client(ClientId(c as u32));
        for a in actions {
            match a {
                ClientAction::Send { to, msg, round } => {
                    self.clients[c].started.entry(round).or_insert(self.now);
                    self.send(node, to.into(), msg, Some(round));
                }
                ClientAction::SetTimer { timer, after } => self.set_timer(node, timer, after),
                ClientAction::CancelTimer(timer) => {
                    self.timers.remove(&(node, timer));
                }
                ClientAction::Accepted { request, result } => {
                    if let Err((kind, detail)) = self.monitor.accept(request, &result) {
                        self.flag(kind, detail);
                        return;
                    }
                    let start = self.clients[c].started.get(&request).copied().unwrap_or(self.now);
                    self.latencies.push(RequestLatency {
                        client: request.client.0,
                        seq: request.seq,
                        latency: self.now - start,
                    });
                    self.completed.push(request);
                    self.next_request(c);
                }
            }
        }
    }

    fn replica_input(&mut self, r: ReplicaId, input: Input) {
        let actions = self.replicas[r.index()].handle(input);
        let node = NodeId::Replica(r);
        for a in actions {
            match a {
                Action::Send { to, msg, round } => self.send(node, to, msg, round),
                Action::SetTimer { timer, after } => self.set_timer(node, timer, after),
                Action::CancelTimer(timer) => {
                    self.timers.remove(&(node, timer));
                }
                Action::Observe(o) => {
                    self.observe(r, o);
                    if self.violation.is_some() {
                        return;
                    }
                }
            }
        }
    }

    fn observe(&mut self, r: ReplicaId, o: Observation) {
        (self.hook)(self.now, r, &o);
        if let Err((kind, detail)) = self.monitor.observe(r, &o) {
            self.flag(kind, detail);
            return;
        }
        match o {
            Observation::ViewInstalled { view, kind, .. } => {
                self.views.insert((view, kind));
            }
            Observation::NewTree { counter } => {
                self.new_trees.insert(counter);
            }
            Observation::FallbackReconstructed { counter, secret } => {
                self.reconstructions += 1;
                let expected = self.replicas.iter().find_map(|x| x.tee().audit().secrets.get(&counter));
                if expected != Some(&secret) {
                    self.flag(
                        ViolationKind::Reconstruction,
                        format!("{r} reconstructed a secret at {counter} that was never preprocessed"),
                    );
                }
            }
            Observation::Rejoined { .. } => self.rejoins += 1,
            _ => {}
        }
    }

    fn flag(&mut self, kind: ViolationKind, detail: String) {
        if self.violation.is_none() {
            self.violation = Some(Violation { event: self.events, kind, detail });
        }
    }

    fn set_timer(&mut self, node: NodeId, timer: Timer, after: u64) {
        self.seq += 1;
        let gen = self.seq;
        self.timers.insert((node, timer), gen);
        self.push(self.now + after.max(1), Kind::Timer { node, timer, gen });
    }

    fn send(&mut self, from: NodeId, to: NodeId, msg: ProtocolMessage, round: Option<RequestId>) {
        let net = &self.sc.network;
        let delta = net.delta as f64;
        let mut d = delta;
        if net.jitter > 0.0 {
            d += delta * net.jitter * self.net.gen::<f64>();
        }
        if self.now < net.stabilization && net.chaos > 0.0 {
            d += delta * net.chaos * self.net.gen::<f64>();
        }
        if let NodeId::Replica(r) = from {
            for spec in &self.sc.faults {
                let active = spec.start <= self.now && spec.end.is_none_or(|e| self.now < e);
                if spec.kind == FaultKind::DelayAmplify && spec.target == r.0 && active {
                    d *= spec.factor.unwrap_or(1.0);
                }
            }
        }
        let delay = (d.round() as u64).max(1);
        self.trace.push(TraceRecord {
            time: self.now,
            from,
            to,
            tag: msg.tag(),
            size: msg.to_bytes().len(),
            round,
        });
        self.push(self.now + delay, Kind::Deliver { from, to, msg });
    }

    fn finish(mut self) -> SimOutput {
        if self.violation.is_none() {
            let found = self.replicas.iter().find_map(|r| {
                let a = r.tee().audit();
                if a.equivocations > 0 {
                    Some((ViolationKind::TeeEquivocation, format!("TEE of {} equivocated", r.id())))
                } else if a.non_monotonic > 0 {
                    Some((ViolationKind::TeeNonMonotonic, format!("TEE of {} went backwards", r.id())))
                } else {
                    None
                }
            });
            if let Some((kind, detail)) = found {
                self.flag(kind, detail);
            }
        }
        let safe = self.violation.is_none();
        let live = self.all_done();
        let mut violations: Vec<Violation> = self.violation.take().into_iter().collect();
        if safe && !live {
            let missing = self.issued - self.completed.len() as u64
                + self.clients.iter().map(|c| c.remaining as u64).sum::<u64>();
            violations.push(Violation {
                event: self.events,
                kind: ViolationKind::Liveness,
                detail: format!("{missing} requests unfinished at time {}", self.now),
            });
        }

        let mut by_tag: BTreeMap<String, u64> = BTreeMap::new();
        for t in &self.trace {
            *by_tag.entry(t.tag.to_string()).or_default() += 1;
        }
        let mut phases = PhaseCounts::default();
        let mut per_round: BTreeMap<RequestId, Vec<TraceRecord>> = BTreeMap::new();
        for t in &self.trace {
            if let Some(id) = t.round {
                per_round.entry(id).or_default().push(t.clone());
            }
        }
        for id in &self.completed {
            let c = per_round.get(id).map(|t| count_messages(t, *id)).unwrap_or_default();
            phases.prepare += c.prepare;
            phases.commit_shares += c.commit_shares;
            phases.commit += c.commit;
            phases.reply_shares += c.reply_shares;
            phases.reply += c.reply;
        }
        let completed = self.completed.len() as u64;
        let ratio = |x: u64| if completed == 0 { 0.0 } else { x as f64 / completed as f64 };
        let lat_sum: u64 = self.latencies.iter().map(|l| l.latency).sum();
        let count = |k: ViewChangeKind| self.views.iter().filter(|(_, x)| *x == k).count() as u64;

        let report = MetricsReport {
            n: self.sc.n,
            f: self.sc.f,
            seed: self.sc.seed,
            end_time: self.now,
            events: self.events,
            total_messages: self.trace.len() as u64,
            messages_by_tag: by_tag,
            requests_issued: self.issued,
            requests_completed: completed,
            phase_totals: phases,
            messages_per_request: ratio(phases.total()),
            mean_latency: ratio(lat_sum),
            max_latency: self.latencies.iter().map(|l| l.latency).max().unwrap_or(0),
            latencies: self.latencies,
            view_changes: count(ViewChangeKind::Regular),
            new_trees: self.new_trees.len() as u64,
            fallback_entries: count(ViewChangeKind::Transition(Mode::Fallback)),
            fallback_exits: count(ViewChangeKind::Transition(Mode::Normal)),
            fallback_reconstructions: self.reconstructions,
            rejoins: self.rejoins,
            safe,
            live,
            violations,
        };
        SimOutput { report, trace: self.trace, replicas: self.replicas }
    }
}
