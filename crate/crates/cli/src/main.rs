//! `seqpaxos`: run scenarios, fuzz them and explore small models.
//!
//! Exit status is 0 when every applicable check passes, 1 on a check
//! failure and 2 when the scenario itself is invalid. Artifacts go under
//! `$SEQPAXOS_OUT` (default `seqpaxos-out`).

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use seqpaxos::checker::explore::{explore, ExploreParams, ExploreVerdict};
use seqpaxos::checker::{check_text, CheckOptions};
use seqpaxos::paxos::Mutation;
use seqpaxos::runner::{fuzz, fuzz_scenario, run_scenario, write_artifacts};
use seqpaxos::scenario::Scenario;
use seqpaxos::simnet::SimOptions;

const OUT_VAR: &str = "SEQPAXOS_OUT";

#[derive(Parser)]
#[command(name = "seqpaxos", version, about = "Sequence Paxos scenario runner")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Simulate a scenario, check its trace and write artifacts.
    Run {
        file: PathBuf,
        /// Override the scenario's seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Write the trace here instead of the artifact directory.
        #[arg(long)]
        trace: Option<PathBuf>,
        /// Skip the checker.
        #[arg(long)]
        no_check: bool,
    },
    /// Run seeded variations of a scenario and check each one.
    Fuzz {
        file: PathBuf,
        #[arg(long, default_value_t = 100)]
        runs: u64,
        #[arg(long, default_value_t = 0)]
        seed0: u64,
    },
    /// Exhaustively explore a small cluster up to a depth bound.
    Explore {
        #[arg(long, default_value_t = 3)]
        procs: usize,
        #[arg(long, default_value_t = 2)]
        cmds: usize,
        #[arg(long, default_value_t = 1)]
        crashes: u8,
        #[arg(long, default_value_t = 1)]
        drops: u8,
        #[arg(long, default_value_t = 2)]
        elections: u8,
        #[arg(long, default_value_t = 12)]
        depth: usize,
        #[arg(long, default_value_t = 20_000_000)]
        max_states: usize,
        /// Also propose a stop-sign.
        #[arg(long)]
        stop: bool,
        /// Run a deliberately broken protocol variant.
        #[arg(long)]
        mutation: Option<String>,
    },
    /// Check an existing trace file against the scenario that produced it.
    Check { trace: PathBuf, scenario: PathBuf },
}

/// Failures that map to exit status 2.
#[derive(Debug)]
struct InvalidScenario(String);

impl std::fmt::Display for InvalidScenario {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for InvalidScenario {}

fn main() -> ExitCode {
    match real_main(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) if e.is::<InvalidScenario>() => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn out_root() -> PathBuf {
    std::env::var_os(OUT_VAR).map_or_else(|| PathBuf::from("seqpaxos-out"), PathBuf::from)
}

fn stem(file: &Path) -> String {
    file.file_stem().map_or_else(|| "scenario".into(), |s| s.to_string_lossy().into_owned())
}

fn load(file: &Path) -> Result<Scenario> {
    let text = fs::read_to_string(file).with_context(|| format!("reading {}", file.display()))?;
    let sc = Scenario::parse(&text)
        .and_then(|sc| sc.validate().map(|()| sc))
        .map_err(|e| InvalidScenario(format!("{}: {e}", file.display())))?;
    Ok(sc)
}

fn parse_mutation(name: &str) -> Result<Mutation> {
    match Mutation::ALL.into_iter().find(|m| m.name() == name) {
        Some(m) => Ok(m),
        None => {
            let known: Vec<&str> = Mutation::ALL.iter().map(|m| m.name()).collect();
            bail!("unknown mutation `{name}` (known: {})", known.join(", "))
        }
    }
}

fn real_main(cli: Cli) -> Result<bool> {
    match cli.cmd {
        Cmd::Run { file, seed, trace, no_check } => {
            let mut sc = load(&file)?;
            if let Some(seed) = seed {
                sc.seed = seed;
            }
            let out = run_scenario(&sc, SimOptions::default(), !no_check)?;
            let dir = out_root().join(stem(&file));
            write_artifacts(&dir, &out).with_context(|| format!("writing artifacts to {}", dir.display()))?;
            if let Some(path) = trace {
                fs::write(&path, out.sim.trace.to_text()).with_context(|| format!("writing {}", path.display()))?;
            }
            match &out.report {
                Some(r) => print!("{r}"),
                None => println!("verdict=unchecked"),
            }
            println!("artifacts: {}", dir.display());
            Ok(out.passed())
        }
        Cmd::Fuzz { file, runs, seed0 } => {
            let base = load(&file)?;
            let dir = out_root().join(format!("fuzz-{}", stem(&file)));
            let mut write_err = None;
            let summary = fuzz(&base, runs, seed0, |seed, out| {
                if !out.passed() {
                    let d = dir.join(format!("seed-{seed}"));
                    let res = write_artifacts(&d, out)
                        .and_then(|()| fs::write(d.join("scenario"), fuzz_scenario(&base, seed).to_string()));
                    if let Err(e) = res {
                        write_err.get_or_insert(e);
                    }
                }
            })?;
            if let Some(e) = write_err {
                return Err(e).context("writing failing-seed artifacts");
            }
            for (seed, line) in &summary.failures {
                println!("FAIL seed={seed} {line}");
            }
            println!(
                "runs={} passed={} liveness_checked={} failed={}",
                summary.runs,
                summary.passed,
                summary.live,
                summary.failures.len()
            );
            if !summary.ok() {
                println!("replay: seqpaxos run {}/seed-<N>/scenario", dir.display());
            }
            Ok(summary.ok())
        }
        Cmd::Explore { procs, cmds, crashes, drops, elections, depth, max_states, stop, mutation } => {
            if !(1..=3).contains(&procs) || cmds > 2 || crashes > 1 || drops > 1 {
                bail!("explore is bounded to 3 processes, 2 commands, 1 crash and 1 session drop");
            }
            let mutation = mutation.as_deref().map(parse_mutation).transpose()?;
            let params =
                ExploreParams { procs, cmds, crashes, drops, elections, stop, depth, max_states, mutation, ..Default::default() };
            let report = explore(params);
            print!("{report}");
            Ok(!matches!(report.verdict, ExploreVerdict::Counterexample { .. }))
        }
        Cmd::Check { trace, scenario } => {
            let sc = load(&scenario)?;
            let text = fs::read_to_string(&trace).with_context(|| format!("reading {}", trace.display()))?;
            let report = check_text(&text, &CheckOptions::from_scenario(&sc))
                .with_context(|| format!("parsing {}", trace.display()))?;
            print!("{report}");
            Ok(report.passed())
        }
    }
}
