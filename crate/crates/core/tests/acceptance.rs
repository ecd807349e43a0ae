//! Acceptance suite. Each criterion prints one PASS/FAIL line; the test
//! fails if any criterion does.

use std::collections::{BTreeMap, BTreeSet};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use fastbft::primitives::shamir::{self, ShamirShare};
use fastbft::primitives::{xor, CryptoBackend, FieldElement, LagrangeTable, OpCounter, PrimeField, Secret};
use fastbft::protocol::{Mode, Observation, ViewChangeKind};
use fastbft::simnet::{
    count_messages, render, run, run_observed, FaultKind, FaultSpec, MetricsReport, PhaseCounts, Scenario,
};
use fastbft::tee::{provision, rejoin_digest, RejoinEvidence, TeeError, TeeStatus};
use fastbft::topology::TreeTopology;
use fastbft::{CounterValue, NodeId, ReplicaId};
use num_bigint::BigUint;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

type Verdict = Result<String, String>;

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

fn fault(target: u32, kind: FaultKind, start: u64, end: Option<u64>) -> FaultSpec {
    FaultSpec { target, kind, start, end, factor: None }
}

fn complete(r: &MetricsReport) -> bool {
    r.live && r.requests_completed == r.requests_issued
}

// 1 -------------------------------------------------------------------------

fn message_complexity() -> Verdict {
    let start = Instant::now();
    let mut totals = Vec::new();
    for n in [5usize, 9, 17, 33, 65] {
        let f = (n - 1) / 2;
        let mut sc = Scenario::new(f, 1);
        sc.workload.requests = 10;
        let out = run(&sc);
        let r = &out.report;
        ensure(r.clean() && r.requests_completed == 10, || format!("n={n}: {:?}", r.violations))?;
        let f = f as u64;
        let expect = PhaseCounts { prepare: f, commit_shares: f, commit: f, reply_shares: f, reply: f + 1 };
        for l in &r.latencies {
            let id = fastbft::RequestId { client: fastbft::ClientId(l.client), seq: l.seq };
            let got = count_messages(&out.trace, id);
            ensure(got == expect, || format!("n={n} {id}: {got:?}, expected {expect:?}"))?;
        }
        ensure(r.messages_per_request == (5 * f + 1) as f64, || format!("n={n}: mean {}", r.messages_per_request))?;
        totals.push(format!("{n}:{}", 5 * f + 1));
    }
    let took = start.elapsed();
    ensure(took < Duration::from_secs(60), || format!("sweep took {took:?}"))?;
    Ok(format!("per-request totals {} exact, sweep {took:.1?}", totals.join(" ")))
}

// 2 and 3 ------------------------------------------------------------------

/// A seeded fault mix drawn from one of six families.
fn safety_scenario(n: usize, seed: u64) -> Scenario {
    let f = (n - 1) / 2;
    let mut rng = ChaCha20Rng::seed_from_u64(seed.wrapping_mul(0x9e37_79b9) ^ n as u64);
    let mut sc = Scenario::new(f, seed);
    sc.workload.clients = rng.gen_range(1..=3);
    sc.workload.requests = 10;
    sc.network.jitter = rng.gen_range(0.0..1.0);
    if rng.gen_bool(0.25) {
        sc.network.stabilization = rng.gen_range(0..5_000);
        sc.network.chaos = rng.gen_range(0.0..10.0);
    }
    let d = sc.network.delta;
    let when = |rng: &mut ChaCha20Rng| rng.gen_range(0..40 * d);
    let actives: Vec<u32> = (1..=f as u32).collect();
    let mut others: Vec<u32> = (1..n as u32).collect();
    others.shuffle(&mut rng);
    match seed % 6 {
        0 => sc.faults.push(fault(0, FaultKind::Crash, when(&mut rng), None)),
        1 => sc.faults.push(fault(0, FaultKind::PrimaryEquivocateAttempt, when(&mut rng), None)),
        2 => sc.faults.push(fault(0, FaultKind::PrimarySilent, when(&mut rng), None)),
        3 => {
            let k = rng.gen_range(1..=f);
            for &t in actives.choose_multiple(&mut rng, k) {
                let kind = if rng.gen_bool(0.5) { FaultKind::WrongShares } else { FaultKind::SilentShares };
                sc.faults.push(fault(t, kind, when(&mut rng), None));
            }
        }
        4 => {
            let k = rng.gen_range(1..=f);
            let mut targets: Vec<u32> = (0..n as u32).collect();
            targets.shuffle(&mut rng);
            for &t in &targets[..k] {
                let s = when(&mut rng);
                sc.faults.push(fault(t, FaultKind::UnscheduledReboot, s, Some(s + rng.gen_range(1..40) * d)));
            }
        }
        _ => {
            let k = rng.gen_range(1..=f);
            let mut targets = vec![0];
            targets.extend(others.iter().take(k - 1));
            for t in targets {
                let kind = *[
                    FaultKind::Crash,
                    FaultKind::UnscheduledReboot,
                    FaultKind::WrongShares,
                    FaultKind::SilentShares,
                    FaultKind::PrimaryEquivocateAttempt,
                    FaultKind::PrimarySilent,
                ]
                .choose(&mut rng)
                .expect("non-empty");
                let s = when(&mut rng);
                let end = match kind {
                    FaultKind::Crash => None,
                    FaultKind::UnscheduledReboot => Some(s + rng.gen_range(1..40) * d),
                    _ => rng.gen_bool(0.5).then(|| s + rng.gen_range(1..80) * d),
                };
                sc.faults.push(fault(t, kind, s, end));
            }
        }
    }
    sc.validate().expect("generated scenario is valid");
    sc
}

struct SuiteOutcome {
    runs: usize,
    unsafe_runs: Vec<String>,
    stuck_runs: Vec<String>,
    took: Duration,
    view_changes: u64,
    new_trees: u64,
    rejoins: u64,
}

fn safety_suite() -> SuiteOutcome {
    let start = Instant::now();
    let mut o = SuiteOutcome {
        runs: 0,
        unsafe_runs: vec![],
        stuck_runs: vec![],
        took: Duration::ZERO,
        view_changes: 0,
        new_trees: 0,
        rejoins: 0,
    };
    for n in [5usize, 7, 9] {
        for seed in 0..200 {
            let sc = safety_scenario(n, seed);
            let r = run(&sc).report;
            o.runs += 1;
            o.view_changes += r.view_changes;
            o.new_trees += r.new_trees;
            o.rejoins += r.rejoins;
            if !r.safe {
                o.unsafe_runs.push(format!("n={n} seed={seed}: {}", r.violations[0]));
            } else if !complete(&r) || r.requests_completed != (sc.workload.clients * sc.workload.requests) as u64 {
                o.stuck_runs.push(format!("n={n} seed={seed}: {}/{}", r.requests_completed, r.requests_issued));
            }
        }
    }
    o.took = start.elapsed();
    o
}

fn safety(o: &SuiteOutcome) -> Verdict {
    ensure(o.unsafe_runs.is_empty(), || format!("{} unsafe runs, first {}", o.unsafe_runs.len(), o.unsafe_runs[0]))?;
    ensure(o.took < Duration::from_secs(300), || format!("suite took {:?}", o.took))?;
    Ok(format!(
        "{} scenarios, 0 violations, {} view changes, {} NEW-TREEs, {} rejoins, {:.1?}",
        o.runs, o.view_changes, o.new_trees, o.rejoins, o.took
    ))
}

fn liveness(o: &SuiteOutcome) -> Verdict {
    ensure(o.stuck_runs.is_empty(), || format!("{} runs unfinished, first {}", o.stuck_runs.len(), o.stuck_runs[0]))?;
    Ok(format!("every request of {} scenarios completed before the horizon", o.runs))
}

// 4 -------------------------------------------------------------------------

fn one_bad_active() -> Verdict {
    let mut runs = 0;
    for n in [5usize, 7, 9] {
        let f = (n - 1) / 2;
        for kind in [FaultKind::WrongShares, FaultKind::SilentShares] {
            for seed in 0..5 {
                let mut sc = Scenario::new(f, seed);
                let target = 1 + (seed as u32 % f as u32);
                sc.faults.push(fault(target, kind, 0, None));
                let r = run(&sc).report;
                ensure(r.new_trees == 1 && r.view_changes == 0 && complete(&r) && r.safe, || {
                    format!(
                        "n={n} {kind:?} on r{target} seed {seed}: new_trees={} view_changes={} completed={}",
                        r.new_trees, r.view_changes, r.requests_completed
                    )
                })?;
                runs += 1;
            }
        }
    }
    Ok(format!("{runs} runs: 1 NEW-TREE, 0 view changes, all requests complete"))
}

// 5 -------------------------------------------------------------------------

struct Observed {
    report: MetricsReport,
    trace: Vec<fastbft::simnet::TraceRecord>,
    events: Vec<(u64, ReplicaId, Observation)>,
    secrets: BTreeMap<CounterValue, Secret>,
}

fn observe(sc: &Scenario) -> Observed {
    let mut events = Vec::new();
    let out = run_observed(sc, &mut |t, r, o| events.push((t, r, o.clone())));
    let mut secrets = BTreeMap::new();
    for rep in &out.replicas {
        secrets.extend(rep.tee().audit().secrets.iter().map(|(k, v)| (*k, *v)));
    }
    Observed { report: out.report, trace: out.trace, events, secrets }
}

fn first_install(events: &[(u64, ReplicaId, Observation)], kind: ViewChangeKind) -> Option<u64> {
    events.iter().find_map(|(t, _, o)| match o {
        Observation::ViewInstalled { kind: k, .. } if *k == kind => Some(*t),
        _ => None,
    })
}

fn fallback() -> Verdict {
    let to_fallback = ViewChangeKind::Transition(Mode::Fallback);
    let to_normal = ViewChangeKind::Transition(Mode::Normal);

    // Threshold: with threshold 3, two bad actives are replaced; a third
    // suspect switches to fallback instead of a third tree change.
    for bad in [2u32, 3] {
        let mut sc = Scenario::new(3, 4);
        sc.protocol.fallback_threshold = Some(3);
        sc.protocol.fallback_duration = Some(1000);
        for t in 1..=bad {
            sc.faults.push(fault(t, FaultKind::WrongShares, 0, None));
        }
        let o = observe(&sc);
        let entered = first_install(&o.events, to_fallback);
        let trees_before = o
            .events
            .iter()
            .filter(|(t, _, e)| matches!(e, Observation::NewTree { .. }) && entered.is_none_or(|x| *t < x))
            .map(|(_, _, e)| format!("{e:?}"))
            .collect::<BTreeSet<_>>()
            .len();
        ensure(complete(&o.report) && o.report.safe, || format!("{bad} bad actives: {:?}", o.report.violations))?;
        if bad == 2 {
            ensure(entered.is_none() && trees_before == 2, || {
                format!("2 suspects: fallback entered={entered:?}, trees={trees_before}")
            })?;
        } else {
            ensure(entered.is_some() && trees_before == 2, || {
                format!("3 suspects: fallback entered={entered:?}, trees before={trees_before}")
            })?;
        }
    }

    // f crashed replicas: every fallback commit after the crashes uses the
    // f + 1 shares still available.
    let mut f1_commits = 0;
    let mut checked = 0u64;
    let mut mismatched = 0u64;
    for (n, seed) in [(5usize, 1u64), (7, 2), (9, 3)] {
        let f = (n - 1) / 2;
        let d = 100;
        let mut sc = Scenario::new(f, seed);
        sc.workload.requests = 20;
        sc.protocol.fallback_threshold = Some(1);
        sc.protocol.fallback_duration = Some(1000);
        sc.faults.push(fault(1, FaultKind::Crash, 0, None));
        let crash_at = 60 * d;
        let passives: Vec<u32> = (f as u32 + 1..n as u32).collect();
        for &t in passives.iter().take(f - 1) {
            sc.faults.push(fault(t, FaultKind::Crash, crash_at, None));
        }
        let o = observe(&sc);
        ensure(complete(&o.report) && o.report.safe, || {
            format!("n={n} with f crashed: {}/{} {:?}", o.report.requests_completed, o.report.requests_issued, o.report.violations)
        })?;
        let entered = first_install(&o.events, to_fallback).ok_or_else(|| format!("n={n}: fallback never entered"))?;
        let crashed: BTreeSet<NodeId> = sc.faults.iter().map(|s| NodeId::Replica(ReplicaId(s.target))).collect();
        let mut senders: BTreeMap<fastbft::RequestId, BTreeSet<NodeId>> = BTreeMap::new();
        for t in o.trace.iter().filter(|t| t.tag == "FALLBACK-SHARE" && t.time > crash_at.max(entered)) {
            if let Some(id) = t.round {
                senders.entry(id).or_default().insert(t.from);
            }
        }
        for (id, s) in &senders {
            ensure(s.len() == f && s.is_disjoint(&crashed), || {
                format!("n={n} {id}: shares from {s:?}, expected {f} live non-primaries")
            })?;
            f1_commits += 1;
        }
        for (_, _, e) in &o.events {
            if let Observation::FallbackReconstructed { counter, secret } = e {
                checked += 1;
                if o.secrets.get(counter) != Some(secret) {
                    mismatched += 1;
                }
            }
        }
    }
    ensure(f1_commits > 0, || "no fallback commits after the crashes".into())?;

    // Way back: the probe succeeds and normal-case commits resume.
    let mut sc = Scenario::new(2, 9);
    sc.workload.requests = 30;
    sc.protocol.fallback_threshold = Some(1);
    sc.protocol.fallback_duration = Some(5);
    sc.faults.push(fault(1, FaultKind::Crash, 0, None));
    let o = observe(&sc);
    let entered = first_install(&o.events, to_fallback).ok_or("fallback never entered")?;
    let exited = first_install(&o.events, to_normal).ok_or("fallback never exited")?;
    let normal_after = o.trace.iter().filter(|t| t.tag == "COMMIT" && t.time > exited).count();
    ensure(exited > entered && normal_after > 0 && complete(&o.report), || {
        format!("exit at {exited}, {normal_after} normal COMMITs after, completed {}", o.report.requests_completed)
    })?;
    for (_, _, e) in &o.events {
        if let Observation::FallbackReconstructed { counter, secret } = e {
            checked += 1;
            if o.secrets.get(counter) != Some(secret) {
                mismatched += 1;
            }
        }
    }
    ensure(checked > 0 && mismatched == 0, || format!("{mismatched}/{checked} reconstructions differ"))?;
    Ok(format!(
        "entered on the 3rd suspect, {f1_commits} commits from f+1 shares with f crashed, {checked}/{checked} reconstructions exact, exit to normal ok"
    ))
}

// 6 -------------------------------------------------------------------------

fn rollback_and_rejoin() -> Verdict {
    use fastbft::primitives::hash;
    let crypto = CryptoBackend::Fast.provider();

    // Rollback: bind, power-cycle, restore the record taken before binding.
    let (mut tees, _) = provision(3, 1, crypto.clone(), 11);
    let t = &mut tees[1];
    t.request_counter(hash(b"a")).map_err(|e| e.to_string())?;
    let record = t.persist_then_stop().map_err(|e| e.to_string())?;
    t.reboot();
    ensure(t.restore(Some(&record)) == TeeStatus::Running, || "legitimate restore failed".into())?;
    t.request_counter(hash(b"b")).map_err(|e| e.to_string())?;
    t.reboot();
    let status = t.restore(Some(&record));
    ensure(status == TeeStatus::Locked, || format!("stale restore left the TEE {status:?}"))?;
    ensure(matches!(t.request_counter(hash(b"c")), Err(TeeError::Locked)), || "locked TEE still binds".into())?;
    ensure(t.attest(hash(b"d")).is_err(), || "locked TEE still attests".into())?;

    // Rejoin needs f + 1 matching attestations.
    let nonce = tees[1].rejoin_nonce().map_err(|e| e.to_string())?;
    let sd = hash(b"state");
    let digest = rejoin_digest(&nonce, ReplicaId(0), &sd);
    let mut evidence = Vec::new();
    for k in [0usize, 2] {
        let attestation = tees[k].attest(digest).map_err(|e| e.to_string())?;
        evidence.push(RejoinEvidence { primary: ReplicaId(0), state_digest: sd, attestation });
    }
    let short = tees[1].reset_counter(&evidence[..1]);
    ensure(matches!(short, Err(TeeError::InsufficientEvidence)), || format!("f attestations gave {short:?}"))?;
    tees[1].reset_counter(&evidence).map_err(|e| format!("f + 1 attestations refused: {e}"))?;
    ensure(tees[1].status() == TeeStatus::Running, || "still locked after rejoin".into())?;

    // In a running system: a rebooted non-primary rejoins; a rebooted
    // primary gets no answer while it is still primary.
    for n in [5usize, 7, 9] {
        let f = (n - 1) / 2;
        let mut sc = Scenario::new(f, n as u64);
        sc.faults.push(fault(n as u32 - 1, FaultKind::UnscheduledReboot, 300, Some(1_300)));
        let out = run(&sc);
        let r = &out.report;
        ensure(r.rejoins == 1 && complete(r) && r.safe, || format!("n={n} passive reboot: {r:?}"))?;
        let rebooted = &out.replicas[n - 1];
        ensure(rebooted.app().digest() == out.replicas[0].app().digest(), || {
            format!("n={n}: rejoined replica diverged")
        })?;
    }
    let mut sc = Scenario::new(2, 3);
    sc.faults.push(fault(0, FaultKind::UnscheduledReboot, 300, Some(1_300)));
    let o = observe(&sc);
    let replaced = o
        .events
        .iter()
        .find_map(|(t, _, e)| match e {
            Observation::ViewInstalled { primary, .. } if *primary != ReplicaId(0) => Some(*t),
            _ => None,
        })
        .ok_or("no view change after the primary rebooted")?;
    let early = o
        .trace
        .iter()
        .filter(|t| t.tag == "REJOIN-RESPONSE" && t.to == NodeId::Replica(ReplicaId(0)) && t.time < replaced)
        .count();
    let asked = o
        .trace
        .iter()
        .filter(|t| t.tag == "REJOIN" && t.from == NodeId::Replica(ReplicaId(0)) && t.time < replaced)
        .count();
    ensure(asked > 0, || "the rebooted primary never asked to rejoin".into())?;
    ensure(early == 0, || format!("{early} REJOIN answers reached the rebooted primary"))?;
    ensure(o.report.safe && complete(&o.report), || format!("primary reboot: {:?}", o.report.violations))?;
    Ok("stale restore locks out; f+1 attestations rejoin, f do not; passive rejoins; rebooted primary refused".into())
}

// 7 -------------------------------------------------------------------------

/// Lagrange interpolation at zero written directly over big integers.
fn lagrange_at_zero(p: &BigUint, points: &[(BigUint, BigUint)]) -> BigUint {
    let two = BigUint::from(2u8);
    let inv = |a: &BigUint| a.modpow(&(p - &two), p);
    let mut acc = BigUint::from(0u8);
    for (i, (xi, yi)) in points.iter().enumerate() {
        let mut num = BigUint::from(1u8);
        let mut den = BigUint::from(1u8);
        for (j, (xj, _)) in points.iter().enumerate() {
            if i != j {
                num = num * xj % p;
                den = den * ((xj + p - xi) % p) % p;
            }
        }
        acc = (acc + yi * num % p * inv(&den)) % p;
    }
    acc
}

fn subsets(n: usize, k: usize) -> Vec<Vec<usize>> {
    if k == 0 {
        return vec![vec![]];
    }
    if n < k {
        return vec![];
    }
    let mut out = subsets(n - 1, k);
    for mut s in subsets(n - 1, k - 1) {
        s.push(n - 1);
        out.push(s);
    }
    out
}

fn secret_sharing() -> Verdict {
    let mut rng = ChaCha20Rng::seed_from_u64(77);
    let mut ops = OpCounter::default();
    for _ in 0..1000 {
        let s = Secret::random(&mut rng);
        let m = rng.gen_range(1..=64);
        let shares = xor::split(&s, m, &mut rng, &mut ops).map_err(|e| e.to_string())?;
        ensure(xor::combine(&shares) == s, || format!("XOR round trip failed for m={m}"))?;
    }

    let field = PrimeField::default();
    let p = field.modulus().clone();
    let mut subsets_checked = 0;
    for f in 1..=3usize {
        let n = 2 * f + 1;
        let points: Vec<FieldElement> = (1..=n as u64).map(|x| field.elem(x)).collect();
        let table = LagrangeTable::consecutive(field.clone(), n);
        for _ in 0..5 {
            let secret = field.random(&mut rng);
            let shares = shamir::share(&field, &secret, f, &points, &mut rng, &mut ops).map_err(|e| e.to_string())?;
            for set in subsets(n, f + 1) {
                let chosen: Vec<ShamirShare> = set.iter().map(|&i| shares[i].clone()).collect();
                let big: Vec<(BigUint, BigUint)> =
                    chosen.iter().map(|s| (s.x.value().clone(), s.y.value().clone())).collect();
                let oracle = lagrange_at_zero(&p, &big);
                ensure(&oracle == secret.value(), || format!("oracle disagrees for f={f} {set:?}"))?;
                let lib = shamir::reconstruct(&field, f, &chosen).map_err(|e| e.to_string())?;
                ensure(lib.value() == &oracle, || format!("reconstruct differs for f={f} {set:?}"))?;
                let indexed: Vec<(usize, FieldElement)> = set.iter().map(|&i| (i, shares[i].y.clone())).collect();
                let tab = table.reconstruct(f, &indexed).map_err(|e| e.to_string())?;
                ensure(tab.value() == &oracle, || format!("table reconstruct differs for f={f} {set:?}"))?;
                subsets_checked += 1;
            }
        }
    }

    let small = PrimeField::small(257);
    let vector = [
        ShamirShare { x: small.elem(1), y: small.elem(49) },
        ShamirShare { x: small.elem(2), y: small.elem(56) },
    ];
    let s = shamir::reconstruct(&small, 1, &vector).map_err(|e| e.to_string())?;
    ensure(s == small.elem(42), || format!("p=257 vector gave {:?}", s.value()))?;
    let coeffs = [small.elem(42), small.elem(7)];
    let regen = shamir::share_with_coefficients(&small, &coeffs, &[small.elem(1), small.elem(2)], &mut ops)
        .map_err(|e| e.to_string())?;
    ensure(regen == vector, || "polynomial 42 + 7x does not give the vector shares".into())?;
    Ok(format!("1000 XOR round trips, {subsets_checked} Shamir subsets match the oracle, p=257 vector -> 42"))
}

// 8 -------------------------------------------------------------------------

fn share_ops_scaling() -> Verdict {
    let crypto = CryptoBackend::Fast.provider();
    let per = 4usize;
    let mut xor_ratio = Vec::new();
    let mut shamir_ratio = Vec::new();
    for n in [21usize, 41, 81, 161] {
        let f = (n - 1) / 2;
        let (mut tees, _) = provision(n, f, crypto.clone(), n as u64);
        let actives: Vec<ReplicaId> = (0..=f as u32).map(ReplicaId).collect();
        let tree = TreeTopology::build(ReplicaId(0), &actives, 2).map_err(|e| e.to_string())?;
        tees[0].be_primary(&actives, &tree, 0).map_err(|e| e.to_string())?;
        let before = tees[0].ops().share_ops();
        tees[0].preprocessing(per).map_err(|e| e.to_string())?;
        let xor_ops = (tees[0].ops().share_ops() - before) as f64 / per as f64;
        xor_ratio.push(xor_ops / n as f64);

        let all: Vec<ReplicaId> = (0..n as u32).map(ReplicaId).collect();
        let star = TreeTopology::star(ReplicaId(1), &all).map_err(|e| e.to_string())?;
        tees[1].be_primary(&all, &star, 1).map_err(|e| e.to_string())?;
        let before = tees[1].ops().share_ops();
        tees[1].preprocessing_fallback(per).map_err(|e| e.to_string())?;
        let sh_ops = (tees[1].ops().share_ops() - before) as f64 / per as f64;
        shamir_ratio.push(sh_ops / (n * f) as f64);
    }
    let spread = |v: &[f64]| {
        let max = v.iter().cloned().fold(f64::MIN, f64::max);
        let min = v.iter().cloned().fold(f64::MAX, f64::min);
        max / min
    };
    let (sx, ss) = (spread(&xor_ratio), spread(&shamir_ratio));
    ensure(sx <= 1.10 && ss <= 1.10, || {
        format!("ops/n {xor_ratio:?} (spread {sx:.3}), ops/(n f) {shamir_ratio:?} (spread {ss:.3})")
    })?;
    Ok(format!("XOR ops/n spread {sx:.3}, Shamir ops/(n f) spread {ss:.3}"))
}

// 9 -------------------------------------------------------------------------

fn determinism() -> Verdict {
    let mut scenarios = Vec::new();
    for (i, kind) in [None, Some(FaultKind::Crash), Some(FaultKind::WrongShares), Some(FaultKind::UnscheduledReboot)]
        .into_iter()
        .enumerate()
    {
        let mut sc = Scenario::new(2, 40 + i as u64);
        sc.workload.clients = 2;
        sc.network.jitter = 0.7;
        sc.network.stabilization = 2_000;
        sc.network.chaos = 4.0;
        if let Some(k) = kind {
            let target = if k == FaultKind::Crash { 0 } else { 2 };
            let end = (k == FaultKind::UnscheduledReboot).then_some(2_000);
            sc.faults.push(fault(target, k, 500, end));
        }
        scenarios.push(sc);
    }
    let mut bytes = 0;
    for sc in &scenarios {
        let (a, b) = (run(sc), run(sc));
        let (ta, tb) = (render(&a.trace), render(&b.trace));
        ensure(ta == tb && a.report == b.report, || format!("seed {} diverged", sc.seed))?;
        bytes += ta.len();
    }
    let mut other = scenarios[0].clone();
    other.seed += 1000;
    ensure(render(&run(&other).trace) != render(&run(&scenarios[0]).trace), || {
        "different seeds gave the same jittered trace".into()
    })?;
    Ok(format!("{} scenarios re-run byte-identical ({bytes} trace bytes)", scenarios.len()))
}

// ---------------------------------------------------------------------------

fn check(id: u32, name: &str, f: impl FnOnce() -> Verdict) -> bool {
    let v = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
        let msg = p
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_default();
        Err(format!("panicked: {msg}"))
    });
    match &v {
        Ok(d) => println!("criterion {id} PASS {name}: {d}"),
        Err(e) => println!("criterion {id} FAIL {name}: {e}"),
    }
    v.is_ok()
}

#[test]
fn acceptance() {
    let mut ok = true;
    ok &= check(1, "message complexity", message_complexity);
    let suite = safety_suite();
    ok &= check(2, "safety", || safety(&suite));
    ok &= check(3, "liveness", || liveness(&suite));
    ok &= check(4, "one faulty active", one_bad_active);
    ok &= check(5, "fallback", fallback);
    ok &= check(6, "rollback and rejoin", rollback_and_rejoin);
    ok &= check(7, "secret sharing", secret_sharing);
    ok &= check(8, "share_ops scaling", share_ops_scaling);
    ok &= check(9, "determinism", determinism);
    assert!(ok, "acceptance criteria failed; see the lines above");
}
