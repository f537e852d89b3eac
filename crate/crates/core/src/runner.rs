//! Scenario runs, artifacts and fuzz campaigns.

use std::fmt::Write as _;
use std::fs;
use std::io;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::checker::{check, CheckOptions, Report};
use crate::error::Result;
use crate::scenario::{Directive, Scenario, Target, TimedDirective};
use crate::simnet::{SimOptions, SimResult, Simulation};
use crate::types::ProcessId;

/// Length of the fault-free tail of generated fuzz scenarios.
pub const STABLE_TAIL: u64 = 200;

#[derive(Debug)]
pub struct RunOutcome {
    pub sim: SimResult,
    pub report: Option<Report>,
}

impl RunOutcome {
    pub fn passed(&self) -> bool {
        self.report.as_ref().is_none_or(Report::passed)
    }
}

/// Simulates `sc` and, when `checked`, runs the trace checker over it.
pub fn run_scenario(sc: &Scenario, opts: SimOptions, checked: bool) -> Result<RunOutcome> {
    let sim = Simulation::run(sc.clone(), opts)?;
    let report = checked.then(|| check(&sim.trace, &CheckOptions::from_scenario(sc)));
    Ok(RunOutcome { sim, report })
}

/// Text dump of one process's final state: decided sequences per
/// configuration and the key-value store.
pub fn replica_state(sim: &SimResult, p: ProcessId) -> String {
    let mut s = String::new();
    let f = &sim.finals[&p];
    let _ = writeln!(s, "process {p}");
    let _ = writeln!(s, "alive {}", f.alive);
    let Some(h) = &f.host else { return s };
    let _ = writeln!(s, "applied {}", h.rsm().applied());
    let _ = writeln!(s, "kv_digest {:016x}", h.rsm().digest());
    for c in h.configs() {
        if let Some((start, entries)) = h.decided(c) {
            let _ = writeln!(s, "config {c} start {start} decided {}", start + entries.len() as u64);
            for (i, e) in entries.iter().enumerate() {
                let _ = writeln!(s, "{} {e}", start + i as u64);
            }
        }
    }
    for (k, v) in h.rsm().kv() {
        let _ = writeln!(s, "kv {k} {}", crate::message::hex(v));
    }
    s
}

/// Writes `trace.log`, `report.txt` and `replicas/<p>.state` under `dir`.
pub fn write_artifacts(dir: &Path, out: &RunOutcome) -> io::Result<()> {
    fs::create_dir_all(dir.join("replicas"))?;
    fs::write(dir.join("trace.log"), out.sim.trace.to_text())?;
    let report = match &out.report {
        Some(r) => r.to_string(),
        None => "verdict=unchecked\n".to_string(),
    };
    fs::write(dir.join("report.txt"), report)?;
    for &p in out.sim.finals.keys() {
        fs::write(dir.join("replicas").join(format!("{p}.state")), replica_state(&out.sim, p))?;
    }
    Ok(())
}

/// A seeded variation of `base`.
///
/// A base without directives gets a generated fault schedule: leader
/// crashes with recoveries, session drops and one partition that heals,
/// all before `end - STABLE_TAIL`, after which every crashed process is
/// recovered and the run is left alone. A base with directives keeps them
/// and only changes the seed, which moves jitter, drop suffixes and the
/// workload.
pub fn fuzz_scenario(base: &Scenario, seed: u64) -> Scenario {
    let mut sc = base.clone();
    sc.seed = seed;
    if !base.directives.is_empty() {
        return sc;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_f00d);
    let stable = sc.end.saturating_sub(STABLE_TAIL);
    sc.stable_from = Some(stable);
    let lo = sc.client_start + 10;
    let hi = stable.saturating_sub(40);
    if hi <= lo {
        return sc;
    }
    let procs: Vec<ProcessId> = sc.processes.iter().copied().collect();
    let mut ds: Vec<(u64, Directive)> = Vec::new();
    let crashes = rng.gen_range(1..=2);
    let slot = (hi - lo) / crashes;
    for k in 0..crashes {
        let t = lo + k * slot + rng.gen_range(0..slot / 2 + 1);
        ds.push((t, Directive::Crash(Target::Leader)));
        ds.push(((t + rng.gen_range(10..=slot / 2 + 10)).min(hi), Directive::Recover(Target::Crashed)));
    }
    for _ in 0..rng.gen_range(1..=3) {
        let t = rng.gen_range(lo..hi);
        let pair: Vec<ProcessId> = procs.choose_multiple(&mut rng, 2).copied().collect();
        if pair.len() == 2 {
            let a = if rng.gen_bool(0.5) { Target::Leader } else { Target::Process(pair[0]) };
            ds.push((t, Directive::Drop(a, Target::Process(pair[1]))));
        }
    }
    if procs.len() > 1 {
        let t = rng.gen_range(lo..hi);
        let mut shuffled = procs.clone();
        shuffled.shuffle(&mut rng);
        let minority = rng.gen_range(1..=(procs.len() - 1) / 2 + usize::from(procs.len() == 2));
        let mut a: Vec<ProcessId> = shuffled[..minority].to_vec();
        let mut b: Vec<ProcessId> = shuffled[minority..].to_vec();
        a.sort();
        b.sort();
        ds.push((t, Directive::Partition(vec![a, b])));
        ds.push(((t + rng.gen_range(10..=80)).min(hi), Directive::Heal));
    }
    ds.sort_by_key(|(t, _)| *t);
    ds.push((hi + 10, Directive::Heal));
    ds.push((hi + 20, Directive::Recover(Target::All)));
    sc.directives = ds.into_iter().map(|(t, directive)| TimedDirective { t, directive, line: 0 }).collect();
    sc
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct FuzzSummary {
    pub runs: u64,
    pub passed: u64,
    /// Runs where the liveness check applied and passed.
    pub live: u64,
    /// Failing seeds with the report summary line.
    pub failures: Vec<(u64, String)>,
}

impl FuzzSummary {
    pub fn ok(&self) -> bool {
        self.failures.is_empty()
    }
}

/// Runs `runs` variations of `base` with seeds `seed0..seed0+runs`.
pub fn fuzz(base: &Scenario, runs: u64, seed0: u64, mut each: impl FnMut(u64, &RunOutcome)) -> Result<FuzzSummary> {
    let mut summary = FuzzSummary::default();
    for seed in seed0..seed0 + runs {
        let sc = fuzz_scenario(base, seed);
        let out = run_scenario(&sc, SimOptions::default(), true)?;
        let report = out.report.as_ref().expect("checked run");
        summary.runs += 1;
        if report.passed() {
            summary.passed += 1;
            if report.liveness == crate::checker::Verdict::Pass {
                summary.live += 1;
            }
        } else {
            summary.failures.push((seed, report.summary_line()));
        }
        each(seed, &out);
    }
    Ok(summary)
}
