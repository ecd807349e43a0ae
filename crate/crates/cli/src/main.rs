use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use fastbft::simnet::{render, run, Scenario};
use fastbft_cli::{parse_n_list, resolve_seed, sweep, write_csv, Profile, SEED_ENV};

/// Exit status for a run that tripped a monitor.
const VIOLATION: u8 = 1;
/// Exit status for bad input.
const USAGE: u8 = 2;

#[derive(Parser)]
#[command(name = "fastbft", version, about = "Run and sweep simulated replication scenarios")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run one scenario file.
    Run {
        #[arg(long)]
        scenario: PathBuf,
        /// Overrides the scenario's seed (and the environment default).
        #[arg(long)]
        seed: Option<u64>,
        /// Write the message trace here.
        #[arg(long)]
        trace: Option<PathBuf>,
        /// Write the metrics report (JSON) here; stdout if omitted.
        #[arg(long)]
        metrics: Option<PathBuf>,
    },
    /// Average fault-profile runs across seeds for several system sizes.
    Sweep {
        /// Comma-separated replica counts, e.g. 5,9,17.
        #[arg(long)]
        n_list: String,
        #[arg(long, default_value = "none")]
        faults: String,
        #[arg(long, default_value_t = 10)]
        seeds: usize,
        /// First seed; consecutive seeds follow.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value_t = 10)]
        requests: usize,
        /// CSV destination; stdout if omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let env = std::env::var(SEED_ENV).ok();
    let result = match cli.cmd {
        Cmd::Run { scenario, seed, trace, metrics } => cmd_run(&scenario, seed, env.as_deref(), trace, metrics),
        Cmd::Sweep { n_list, faults, seeds, seed, requests, out } => {
            cmd_sweep(&n_list, &faults, seeds, seed, env.as_deref(), requests, out)
        }
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(msg) => {
            eprintln!("error: {msg}");
            ExitCode::from(USAGE)
        }
    }
}

fn cmd_run(
    path: &PathBuf,
    seed: Option<u64>,
    env: Option<&str>,
    trace: Option<PathBuf>,
    metrics: Option<PathBuf>,
) -> Result<u8, String> {
    let text = fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
    let mut sc = Scenario::from_toml(&text).map_err(|e| format!("{}: {e}", path.display()))?;
    sc.seed = resolve_seed(seed, env, sc.seed)?;
    let out = run(&sc);
    if let Some(p) = trace {
        fs::write(&p, render(&out.trace)).map_err(|e| format!("{}: {e}", p.display()))?;
    }
    let json = serde_json::to_string_pretty(&out.report).map_err(|e| e.to_string())? + "\n";
    match metrics {
        Some(p) => fs::write(&p, json).map_err(|e| format!("{}: {e}", p.display()))?,
        None => print!("{json}"),
    }
    for v in &out.report.violations {
        eprintln!("violation: {v}");
    }
    Ok(if out.report.clean() { 0 } else { VIOLATION })
}

fn cmd_sweep(
    n_list: &str,
    faults: &str,
    seeds: usize,
    seed: Option<u64>,
    env: Option<&str>,
    requests: usize,
    out: Option<PathBuf>,
) -> Result<u8, String> {
    let ns = parse_n_list(n_list)?;
    let profile: Profile = faults.parse()?;
    if seeds == 0 {
        return Err("--seeds must be at least 1".into());
    }
    let base = resolve_seed(seed, env, 0)?;
    let rows = sweep(&ns, profile, seeds, base, requests);
    let mut buf = Vec::new();
    write_csv(&rows, &mut buf).map_err(|e| e.to_string())?;
    match out {
        Some(p) => fs::write(&p, buf).map_err(|e| format!("{}: {e}", p.display()))?,
        None => print!("{}", String::from_utf8_lossy(&buf)),
    }
    let bad: usize = rows.iter().map(|r| r.violations).sum();
    if bad > 0 {
        eprintln!("violation: {bad} runs reported monitor failures");
        return Ok(VIOLATION);
    }
    Ok(0)
}
