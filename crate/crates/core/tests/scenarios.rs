use std::fs;
use std::path::PathBuf;

use proptest::prelude::*;

use seqpaxos::checker::{check, check_text, CheckOptions, Verdict};
use seqpaxos::runner::{fuzz_scenario, run_scenario};
use seqpaxos::scenario::Scenario;
use seqpaxos::simnet::{simulate, SimOptions};

fn dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../scenarios")
}

fn load(name: &str) -> Scenario {
    Scenario::parse(&fs::read_to_string(dir().join(format!("{name}.scenario"))).unwrap()).unwrap()
}

const VALID: [&str; 9] = [
    "basic_3node",
    "leader_crash",
    "chaos_3node",
    "chaos_5node",
    "reconfig",
    "reconfig_disjoint",
    "edge_case_1000",
    "compaction",
    "dedup",
];

#[test]
fn bundled_scenarios_pass() {
    for name in VALID {
        let sc = load(name);
        sc.validate().unwrap();
        let out = run_scenario(&sc, SimOptions::default(), true).unwrap();
        let report = out.report.unwrap();
        assert!(report.passed(), "{name}: {report}");
        if sc.stable_from.is_some() {
            assert_eq!(report.liveness, Verdict::Pass, "{name}");
        }
    }
}

#[test]
fn unordered_scenario_is_rejected_with_its_line() {
    let text = fs::read_to_string(dir().join("unordered.scenario")).unwrap();
    let err = Scenario::parse(&text).and_then(|sc| sc.validate()).unwrap_err();
    assert_eq!(err.line, 6);
}

#[test]
fn checking_the_text_form_gives_the_same_report() {
    for name in VALID {
        let sc = load(name);
        let out = simulate(&sc).unwrap();
        let opts = CheckOptions::from_scenario(&sc);
        let direct = check(&out.trace, &opts);
        let text = check_text(&out.trace.to_text(), &opts).unwrap();
        assert_eq!(direct, text, "{name}");
    }
}

#[test]
fn scenario_text_round_trips() {
    for name in VALID {
        let sc = load(name);
        let again = Scenario::parse(&sc.to_string()).unwrap();
        assert_eq!(again.to_string(), sc.to_string(), "{name}");
        assert_eq!(again.directives.len(), sc.directives.len(), "{name}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn fuzzed_runs_are_safe_and_live(seed in any::<u64>(), five in any::<bool>()) {
        let base = load(if five { "chaos_5node" } else { "chaos_3node" });
        let sc = fuzz_scenario(&base, seed);
        let out = run_scenario(&sc, SimOptions::default(), true).unwrap();
        let report = out.report.unwrap();
        prop_assert!(report.passed(), "seed {}: {}", seed, report);
        prop_assert_eq!(report.liveness, Verdict::Pass);
    }

    #[test]
    fn replays_are_identical(seed in any::<u64>()) {
        let sc = fuzz_scenario(&load("chaos_3node"), seed);
        let a = simulate(&sc).unwrap().trace.to_text();
        let b = simulate(&sc).unwrap().trace.to_text();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn reconfiguration_under_faults_is_safe(seed in 0u64..10_000) {
        let mut sc = load("reconfig");
        sc.seed = seed;
        sc.jitter = 2;
        let out = run_scenario(&sc, SimOptions::default(), true).unwrap();
        let report = out.report.unwrap();
        prop_assert!(report.passed(), "seed {}: {}", seed, report);
    }
}
