//! Scenario loading, fault profiles and sweep aggregation behind the
//! `fastbft` binary.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use fastbft::simnet::{run, FaultKind, FaultSpec, MetricsReport, Scenario};
use rayon::prelude::*;
use serde::Serialize;

/// Environment variable that replaces the scenario's seed when `--seed` is
/// not given.
pub const SEED_ENV: &str = "FASTBFT_SEED";

/// Canned fault mixes for sweeps.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Profile {
    None,
    OneWrongShare,
    OneSilentActive,
    CrashPrimary,
    SilentPrimary,
    RebootPassive,
}

impl Profile {
    pub const ALL: [Profile; 6] = [
        Profile::None,
        Profile::OneWrongShare,
        Profile::OneSilentActive,
        Profile::CrashPrimary,
        Profile::SilentPrimary,
        Profile::RebootPassive,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Profile::None => "none",
            Profile::OneWrongShare => "one-wrong-share",
            Profile::OneSilentActive => "one-silent-active",
            Profile::CrashPrimary => "crash-primary",
            Profile::SilentPrimary => "silent-primary",
            Profile::RebootPassive => "reboot-passive",
        }
    }

    /// Fault scripts for a system of `n = 2f + 1` replicas. Replica 0 is the
    /// initial primary, 1..=f the initial actives.
    pub fn faults(self, f: usize, delta: u64) -> Vec<FaultSpec> {
        let spec = |target: usize, kind, start, end| FaultSpec { target: target as u32, kind, start, end, factor: None };
        match self {
            Profile::None => vec![],
            Profile::OneWrongShare => vec![spec(f, FaultKind::WrongShares, 0, None)],
            Profile::OneSilentActive => vec![spec(f, FaultKind::SilentShares, 0, None)],
            Profile::CrashPrimary => vec![spec(0, FaultKind::Crash, 0, None)],
            Profile::SilentPrimary => vec![spec(0, FaultKind::PrimarySilent, 0, None)],
            Profile::RebootPassive => {
                vec![spec(2 * f, FaultKind::UnscheduledReboot, 5 * delta, Some(15 * delta))]
            }
        }
    }
}

impl fmt::Display for Profile {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Profile {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        Profile::ALL.into_iter().find(|p| p.name() == s).ok_or_else(|| {
            let names: Vec<_> = Profile::ALL.iter().map(|p| p.name()).collect();
            format!("unknown fault profile `{s}` (expected one of: {})", names.join(", "))
        })
    }
}

/// Seed precedence: explicit flag, then [`SEED_ENV`], then the scenario file.
pub fn resolve_seed(flag: Option<u64>, env: Option<&str>, file: u64) -> Result<u64, String> {
    if let Some(s) = flag {
        return Ok(s);
    }
    match env {
        Some(v) => v.trim().parse().map_err(|_| format!("{SEED_ENV}={v:?} is not an unsigned integer")),
        None => Ok(file),
    }
}

/// Parses `5,9,17`. An empty list is an error.
pub fn parse_n_list(s: &str) -> Result<Vec<usize>, String> {
    let ns: Vec<usize> = s
        .split(',')
        .map(str::trim)
        .filter(|t| !t.is_empty())
        .map(|t| t.parse().map_err(|_| format!("`{t}` is not a replica count")))
        .collect::<Result<_, _>>()?;
    if ns.is_empty() {
        return Err("--n-list needs at least one replica count".into());
    }
    for &n in &ns {
        if n < 3 || n % 2 == 0 {
            return Err(format!("n = {n} does not satisfy n = 2f + 1 with f >= 1"));
        }
    }
    Ok(ns)
}

/// One aggregated sweep row.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub n: usize,
    pub f: usize,
    pub profile: String,
    pub seeds: usize,
    pub messages_per_request: f64,
    pub mean_latency: f64,
    pub view_changes: f64,
    pub new_trees: f64,
    pub fallback_entries: f64,
    pub completed: u64,
    pub issued: u64,
    pub violations: usize,
}

pub fn sweep_scenario(n: usize, profile: Profile, seed: u64, requests: usize) -> Scenario {
    let f = (n - 1) / 2;
    let mut sc = Scenario::new(f, seed);
    sc.workload.requests = requests;
    sc.faults = profile.faults(f, sc.network.delta);
    sc
}

/// Runs `seeds` scenarios per `n` in parallel and averages them.
pub fn sweep(ns: &[usize], profile: Profile, seeds: usize, base_seed: u64, requests: usize) -> Vec<SweepRow> {
    ns.iter()
        .map(|&n| {
            let reports: Vec<MetricsReport> = (0..seeds as u64)
                .into_par_iter()
                .map(|i| run(&sweep_scenario(n, profile, base_seed.wrapping_add(i), requests)).report)
                .collect();
            aggregate(n, profile, &reports)
        })
        .collect()
}

fn aggregate(n: usize, profile: Profile, reports: &[MetricsReport]) -> SweepRow {
    let k = reports.len().max(1) as f64;
    let mean = |g: &dyn Fn(&MetricsReport) -> f64| reports.iter().map(g).sum::<f64>() / k;
    SweepRow {
        n,
        f: (n - 1) / 2,
        profile: profile.name().to_string(),
        seeds: reports.len(),
        messages_per_request: mean(&|r| r.messages_per_request),
        mean_latency: mean(&|r| r.mean_latency),
        view_changes: mean(&|r| r.view_changes as f64),
        new_trees: mean(&|r| r.new_trees as f64),
        fallback_entries: mean(&|r| r.fallback_entries as f64),
        completed: reports.iter().map(|r| r.requests_completed).sum(),
        issued: reports.iter().map(|r| r.requests_issued).sum(),
        violations: reports.iter().map(|r| r.violations.len()).sum(),
    }
}

pub fn write_csv<W: Write>(rows: &[SweepRow], out: W) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seed_precedence() {
        assert_eq!(resolve_seed(Some(3), Some("4"), 5), Ok(3));
        assert_eq!(resolve_seed(None, Some(" 4 "), 5), Ok(4));
        assert_eq!(resolve_seed(None, None, 5), Ok(5));
        assert!(resolve_seed(None, Some("x"), 5).is_err());
    }

    #[test]
    fn n_list_parsing() {
        assert_eq!(parse_n_list("5, 9,17"), Ok(vec![5, 9, 17]));
        assert!(parse_n_list("").is_err());
        assert!(parse_n_list(" , ").is_err());
        assert!(parse_n_list("4").unwrap_err().contains("2f + 1"));
        assert!(parse_n_list("1").is_err());
        assert!(parse_n_list("5,a").is_err());
    }

    #[test]
    fn profile_names_round_trip() {
        for p in Profile::ALL {
            assert_eq!(p.name().parse::<Profile>(), Ok(p));
        }
        assert!("bogus".parse::<Profile>().unwrap_err().contains("one-wrong-share"));
    }

    #[test]
    fn profiles_validate() {
        for p in Profile::ALL {
            for n in [3, 5, 9] {
                sweep_scenario(n, p, 1, 4).validate().unwrap();
            }
        }
    }
}
