//! Post-hoc verification of simulator traces.
//!
//! [`check_safety`] walks a trace once and stops at the first violated
//! property. [`check_liveness`] looks at the stable tail of a run. The
//! bounded model checker in [`explore`] is the independent small-model
//! oracle for the same properties.

pub mod explore;

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;

use crate::compaction::is_marker_client;
use crate::message::Message;
use crate::scenario::Scenario;
use crate::trace::{Event, PersistNote, Trace, TraceParseError, TraceRecord};
use crate::types::{ClientId, ConfigId, LogEntry, ProcessId, Round, StopSign};

/// A checked property.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Property {
    /// Only proposed commands are decided.
    Sc1,
    /// No command is decided twice when the duplicate-free append is used.
    Sc1Dedup,
    /// Decided sequences agree at every global index.
    Sc2,
    /// A process's decided sequence only grows, one index at a time.
    Sc3,
    /// Commands retried during the stable tail get decided.
    Sc4,
    /// Leader events of one process carry increasing ballots.
    Ble3,
    /// Nothing follows a stop-sign.
    StopFinality,
    /// State is durable before any message that depends on it is sent.
    PersistOrder,
    /// A promise from an acceptor with an older accepted round carries no
    /// suffix.
    StaleSuffix,
    /// A configuration starts exactly where the previous one stopped.
    Continuity,
    /// Once chosen, a prefix is never replaced.
    ChosenStable,
    /// The implementation reported an internal error.
    RuntimeError,
}

impl Property {
    pub fn id(self) -> &'static str {
        match self {
            Property::Sc1 => "SC1",
            Property::Sc1Dedup => "SC1-dedup",
            Property::Sc2 => "SC2",
            Property::Sc3 => "SC3",
            Property::Sc4 => "SC4",
            Property::Ble3 => "BLE3",
            Property::StopFinality => "stop-finality",
            Property::PersistOrder => "persist-order",
            Property::StaleSuffix => "stale-suffix",
            Property::Continuity => "continuity",
            Property::ChosenStable => "chosen-stable",
            Property::RuntimeError => "runtime-error",
        }
    }
}

impl fmt::Display for Property {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.id())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Violation {
    pub property: Property,
    pub detail: String,
    /// The offending records, by position in the trace.
    pub window: Vec<(usize, TraceRecord)>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Verdict {
    Pass,
    NotApplicable(String),
    Fail(Violation),
}

impl Verdict {
    pub fn is_fail(&self) -> bool {
        matches!(self, Verdict::Fail(_))
    }

    pub fn violation(&self) -> Option<&Violation> {
        match self {
            Verdict::Fail(v) => Some(v),
            _ => None,
        }
    }

    fn word(&self) -> &'static str {
        match self {
            Verdict::Pass => "pass",
            Verdict::NotApplicable(_) => "n/a",
            Verdict::Fail(_) => "fail",
        }
    }
}

/// What the checker needs to know about the run besides its trace.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CheckOptions {
    pub dedup: bool,
    pub config0: BTreeSet<ProcessId>,
    pub stable_from: Option<u64>,
}

impl CheckOptions {
    pub fn from_scenario(sc: &Scenario) -> Self {
        CheckOptions { dedup: sc.dedup, config0: sc.config0.clone(), stable_from: sc.stable_from }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Report {
    pub safety: Verdict,
    pub liveness: Verdict,
}

impl Report {
    /// True when no applicable check failed.
    pub fn passed(&self) -> bool {
        !self.safety.is_fail() && !self.liveness.is_fail()
    }

    /// One `key=value` line for scripts.
    pub fn summary_line(&self) -> String {
        let failed = self.safety.violation().or(self.liveness.violation());
        let mut s = format!(
            "verdict={} safety={} liveness={}",
            if self.passed() { "pass" } else { "fail" },
            self.safety.word(),
            self.liveness.word()
        );
        if let Some(v) = failed {
            let at: Vec<String> = v.window.iter().map(|(i, _)| i.to_string()).collect();
            s.push_str(&format!(" property={} records={}", v.property, at.join(",")));
        }
        s
    }
}

impl fmt::Display for Report {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{}", self.summary_line())?;
        for (name, v) in [("safety", &self.safety), ("liveness", &self.liveness)] {
            match v {
                Verdict::Pass => writeln!(f, "{name}: pass")?,
                Verdict::NotApplicable(why) => writeln!(f, "{name}: not applicable ({why})")?,
                Verdict::Fail(v) => {
                    writeln!(f, "{name}: {} violated: {}", v.property, v.detail)?;
                    for (i, r) in &v.window {
                        writeln!(f, "  #{i} {r}")?;
                    }
                }
            }
        }
        Ok(())
    }
}

/// Runs both checks.
pub fn check(trace: &Trace, opts: &CheckOptions) -> Report {
    Report { safety: check_safety(trace, opts), liveness: check_liveness(trace, opts) }
}

/// Parses a trace file and checks it.
pub fn check_text(text: &str, opts: &CheckOptions) -> Result<Report, TraceParseError> {
    Ok(check(&Trace::parse(text)?, opts))
}

/// Entries compare by content, including command payloads.
fn same_entry(a: &LogEntry, b: &LogEntry) -> bool {
    match (a, b) {
        (LogEntry::Normal(x), LogEntry::Normal(y)) => x == y && x.op == y.op,
        _ => a == b,
    }
}

/// The checker's model of one replica's storage.
#[derive(Debug, Clone)]
struct Disk {
    n_prom: Round,
    n_a: Round,
    len: u64,
    l_d: u64,
    ends_in_stop: bool,
}

#[derive(Default)]
struct Safety<'a> {
    records: Vec<&'a TraceRecord>,
    /// First decision at each global index: entry and record position.
    decided: BTreeMap<u64, (LogEntry, usize)>,
    /// Global index of each configuration's stop-sign.
    stops: BTreeMap<ConfigId, (u64, usize)>,
    next: HashMap<ProcessId, u64>,
    disk: HashMap<(ProcessId, ConfigId), Disk>,
    /// `na` of the Prepare each process received in round `n`.
    prepares: HashMap<(ProcessId, ConfigId, Round), Round>,
    incarnation: HashMap<ProcessId, u64>,
    ballots: HashMap<(ProcessId, ConfigId, u64), (crate::types::Ballot, usize)>,
    sent: HashMap<(ClientId, u64), Vec<u8>>,
    proposed_markers: HashMap<(ClientId, u64), usize>,
    reconfigs: Vec<StopSign>,
    ids: HashMap<(ClientId, u64), u64>,
}

fn fail(property: Property, detail: impl Into<String>, at: &[usize], records: &[&TraceRecord]) -> Verdict {
    let mut at = at.to_vec();
    at.sort_unstable();
    at.dedup();
    Verdict::Fail(Violation {
        property,
        detail: detail.into(),
        window: at.into_iter().map(|i| (i, records[i].clone())).collect(),
    })
}

/// Checks agreement, prefix growth, proposed-only contents, the duplicate
/// clause when `opts.dedup` is on, stop-sign finality, persistence ordering,
/// per-incarnation ballot monotonicity and configuration continuity.
pub fn check_safety(trace: &Trace, opts: &CheckOptions) -> Verdict {
    let mut s = Safety { records: trace.iter().collect(), ..Default::default() };
    for i in 0..s.records.len() {
        if let Err(v) = s.step(i, opts) {
            return v;
        }
    }
    Verdict::Pass
}

impl<'a> Safety<'a> {
    fn fail(&self, property: Property, detail: impl Into<String>, at: &[usize]) -> Result<(), Verdict> {
        Err(fail(property, detail, at, &self.records))
    }

    fn step(&mut self, i: usize, opts: &CheckOptions) -> Result<(), Verdict> {
        let rec = self.records[i];
        match &rec.event {
            Event::Error { msg, .. } => return self.fail(Property::RuntimeError, msg.clone(), &[i]),
            Event::ClientSend { cmd, .. } => {
                self.sent.insert((cmd.client, cmd.seq), cmd.op.clone());
            }
            Event::Propose { entry: LogEntry::Normal(cmd), .. } if is_marker_client(cmd.client) => {
                self.proposed_markers.insert((cmd.client, cmd.seq), i);
            }
            Event::Reconfigure { ss, .. } => self.reconfigs.push(ss.clone()),
            Event::Crash { p } => {
                *self.incarnation.entry(*p).or_insert(0) += 1;
                self.next.remove(p);
            }
            Event::Recover { p, decided } => {
                self.next.remove(p);
                for (c, l) in decided {
                    if let Some(d) = self.disk.get(&(*p, *c)) {
                        if *l < d.l_d {
                            let detail = format!("{p} recovered {c} with l_d={l} but {} was made durable", d.l_d);
                            return self.fail(Property::PersistOrder, detail, &[i]);
                        }
                    }
                }
            }
            Event::Leader { p, config, ballot, .. } => {
                let inc = self.incarnation.get(p).copied().unwrap_or(0);
                if let Some(&(prev, at)) = self.ballots.get(&(*p, *config, inc)) {
                    if *ballot <= prev {
                        let detail = format!("{p} announced ballot {ballot} after {prev} in {config}");
                        return self.fail(Property::Ble3, detail, &[at, i]);
                    }
                }
                self.ballots.insert((*p, *config, inc), (*ballot, i));
            }
            Event::Persist { p, config, note } => self.persist(i, *p, *config, note)?,
            Event::Recv { to, config, msg: Message::Prepare { n, na, .. }, .. } => {
                self.prepares.insert((*to, *config, *n), *na);
            }
            Event::Send { from, config, msg, .. } => self.send(i, *from, *config, msg)?,
            Event::Deliver { p, config, index, entry, replay } => {
                self.deliver(i, *p, *config, *index, entry, *replay, opts)?
            }
            Event::Start { p, config, sigma_len, .. } => {
                if config.0 > 0 {
                    if let Some(&(s, at)) = self.stops.get(&ConfigId(config.0 - 1)) {
                        if *sigma_len != s + 1 {
                            let detail = format!("{p} started {config} at {sigma_len}, previous stop is at {s}");
                            return self.fail(Property::Continuity, detail, &[at, i]);
                        }
                    }
                }
            }
            Event::Fetched { p, config, package, .. } => {
                self.next.remove(p);
                if !package.stop.processes.contains(p) {
                    return self.fail(Property::Continuity, format!("{p} fetched {config} without being a member"), &[i]);
                }
                if package.stop.next_config != *config {
                    return self.fail(Property::Continuity, format!("{p} fetched a package for another configuration"), &[i]);
                }
                let first = package.sigma_len - package.entries.len() as u64;
                for (k, e) in package.entries.iter().enumerate() {
                    let index = first + k as u64;
                    if let Some((d, at)) = self.decided.get(&index) {
                        if !same_entry(d, e) {
                            let detail = format!("{p} fetched {e} at {index} where {d} was decided");
                            return self.fail(Property::Continuity, detail, &[*at, i]);
                        }
                    }
                }
                if let Some(&(s, at)) = self.stops.get(&ConfigId(config.0 - 1)) {
                    if package.sigma_len != s + 1 {
                        let detail = format!("{p} fetched a final sequence of length {}, stop is at {s}", package.sigma_len);
                        return self.fail(Property::Continuity, detail, &[at, i]);
                    }
                }
            }
            Event::Cleanup { p, config, rejected: None } => {
                self.disk.remove(&(*p, *config));
            }
            _ => {}
        }
        Ok(())
    }

    fn persist(&mut self, i: usize, p: ProcessId, config: ConfigId, note: &PersistNote) -> Result<(), Verdict> {
        let stop = self.stops.get(&config).copied();
        if let PersistNote::Init { sigma_len } = note {
            let n = Round::initial(config);
            let d = Disk { n_prom: n, n_a: n, len: *sigma_len, l_d: *sigma_len, ends_in_stop: false };
            self.disk.insert((p, config), d);
            return Ok(());
        }
        let Some(d) = self.disk.get_mut(&(p, config)) else {
            return Ok(());
        };
        match note {
            PersistNote::Init { .. } => unreachable!(),
            PersistNote::Promise { n } => {
                if *n < d.n_prom {
                    let detail = format!("{p} lowered its promise from {} to {n}", d.n_prom);
                    return self.fail(Property::PersistOrder, detail, &[i]);
                }
                d.n_prom = *n;
            }
            PersistNote::Accept { n_a, cut, len, stop: ends } => {
                if *len > 0 {
                    d.ends_in_stop = *ends;
                } else if *cut != d.len {
                    d.ends_in_stop = false;
                }
                d.n_a = *n_a;
                d.len = cut + len;
                if let Some((s, at)) = stop {
                    if d.len > s + 1 {
                        let detail = format!("{p} accepted {} entries in {config} whose stop is at {s}", d.len);
                        return self.fail(Property::StopFinality, detail, &[at, i]);
                    }
                }
            }
            PersistNote::Append { entry } => {
                if d.ends_in_stop {
                    let detail = format!("{p} appended {entry} after a stop-sign in {config}");
                    return self.fail(Property::StopFinality, detail, &[i]);
                }
                d.len += 1;
                d.ends_in_stop = entry.is_stop();
                if let Some((s, at)) = stop {
                    if d.len > s + 1 {
                        let detail = format!("{p} appended {entry} past the decided stop of {config}");
                        return self.fail(Property::StopFinality, detail, &[at, i]);
                    }
                }
            }
            PersistNote::Decide { l_d } => {
                if *l_d < d.l_d {
                    let detail = format!("{p} lowered l_d from {} to {l_d} in {config}", d.l_d);
                    return self.fail(Property::Sc3, detail, &[i]);
                }
                if *l_d > d.len {
                    let detail = format!("{p} decided {l_d} in {config} with only {} accepted", d.len);
                    return self.fail(Property::PersistOrder, detail, &[i]);
                }
                d.l_d = *l_d;
            }
            PersistNote::Snapshot { .. } | PersistNote::Truncate { .. } => {}
        }
        Ok(())
    }

    fn send(&mut self, i: usize, from: ProcessId, config: ConfigId, msg: &Message) -> Result<(), Verdict> {
        let d = self.disk.get(&(from, config));
        match msg {
            Message::Promise { n, n_a, suffix, .. } => {
                if let Some(d) = d {
                    if d.n_prom < *n {
                        let detail = format!("{from} promised {n} while only {} is durable", d.n_prom);
                        return self.fail(Property::PersistOrder, detail, &[i]);
                    }
                }
                if let Some(na_l) = self.prepares.get(&(from, config, *n)) {
                    if n_a < na_l && !suffix.is_empty() {
                        let detail =
                            format!("{from} sent {} entries with n_a={n_a} to a leader with n_a={na_l}", suffix.len());
                        return self.fail(Property::StaleSuffix, detail, &[i]);
                    }
                }
            }
            Message::Accepted { n, la } => {
                if let Some(d) = d {
                    if d.len < *la || d.n_a < *n {
                        let detail =
                            format!("{from} acknowledged {la} in {n} with {} entries in {} durable", d.len, d.n_a);
                        return self.fail(Property::PersistOrder, detail, &[i]);
                    }
                }
            }
            _ => {}
        }
        Ok(())
    }

    #[allow(clippy::too_many_arguments)]
    fn deliver(
        &mut self,
        i: usize,
        p: ProcessId,
        config: ConfigId,
        index: u64,
        entry: &LogEntry,
        replay: bool,
        opts: &CheckOptions,
    ) -> Result<(), Verdict> {
        if let Some(d) = self.disk.get(&(p, config)) {
            if d.l_d <= index {
                let detail = format!("{p} delivered {index} in {config} with l_d={} durable", d.l_d);
                return self.fail(Property::PersistOrder, detail, &[i]);
            }
        }
        if let Some(&n) = self.next.get(&p) {
            if index != n && !replay {
                let detail = format!("{p} delivered index {index}, expected {n}");
                return self.fail(Property::Sc3, detail, &[i]);
            }
        }
        self.next.insert(p, index + 1);

        if let Some((d, at)) = self.decided.get(&index) {
            if !same_entry(d, entry) {
                let detail = format!("{p} decided {entry} at {index} where {d} was decided");
                return self.fail(Property::Sc2, detail, &[*at, i]);
            }
        } else {
            match entry {
                LogEntry::Normal(cmd) if is_marker_client(cmd.client) => {
                    if !self.proposed_markers.contains_key(&(cmd.client, cmd.seq)) {
                        return self.fail(Property::Sc1, format!("marker {cmd} was never proposed"), &[i]);
                    }
                }
                LogEntry::Normal(cmd) => match self.sent.get(&(cmd.client, cmd.seq)) {
                    Some(op) if *op == cmd.op => {}
                    _ => return self.fail(Property::Sc1, format!("{cmd} was never submitted"), &[i]),
                },
                LogEntry::Stop(ss) => {
                    if !self.reconfigs.contains(ss) {
                        return self.fail(Property::Sc1, format!("stop-sign {ss} was never requested"), &[i]);
                    }
                }
            }
            if opts.dedup {
                if let LogEntry::Normal(cmd) = entry {
                    if let Some(prev) = self.ids.insert((cmd.client, cmd.seq), index) {
                        let at = self.decided[&prev].1;
                        return self.fail(Property::Sc1Dedup, format!("{cmd} decided at {prev} and {index}"), &[at, i]);
                    }
                }
            }
            self.decided.insert(index, (entry.clone(), i));
        }

        if let Some(&(s, at)) = self.stops.get(&config) {
            if index > s {
                let detail = format!("{p} delivered {index} in {config} after its stop at {s}");
                return self.fail(Property::StopFinality, detail, &[at, i]);
            }
        }
        if entry.is_stop() {
            self.stops.entry(config).or_insert((index, i));
        }
        Ok(())
    }
}

/// Checks that commands still pending when the run became stable, and
/// retried during the stable tail, were decided at every live member of the
/// active configuration.
///
/// Not applicable when `stable_from` is unset, when faults happen after it,
/// when a partition is still in place, or when the active configuration has
/// no live majority at the end.
pub fn check_liveness(trace: &Trace, opts: &CheckOptions) -> Verdict {
    let Some(stable) = opts.stable_from else {
        return Verdict::NotApplicable("no stable_from".into());
    };
    let records: Vec<&TraceRecord> = trace.iter().collect();
    let mut partitioned = false;
    let mut members: BTreeMap<ConfigId, BTreeSet<ProcessId>> = BTreeMap::from([(ConfigId(0), opts.config0.clone())]);
    let mut first_send: BTreeMap<(ClientId, u64), usize> = BTreeMap::new();
    let mut retried: BTreeSet<(ClientId, u64)> = BTreeSet::new();
    let mut done: BTreeMap<(ClientId, u64), u64> = BTreeMap::new();
    let mut decided: BTreeMap<(ClientId, u64), u64> = BTreeMap::new();
    let mut reach: BTreeMap<ProcessId, u64> = BTreeMap::new();
    let mut finals = Vec::new();
    for (i, r) in records.iter().enumerate() {
        if r.t >= stable && r.event.is_fault() {
            return Verdict::NotApplicable(format!("fault at t={} inside the stable tail", r.t));
        }
        match &r.event {
            Event::Partition { .. } => partitioned = true,
            Event::Heal => partitioned = false,
            Event::Reconfigure { ss, .. } => {
                members.insert(ss.next_config, ss.processes.clone());
            }
            Event::ClientSend { cmd, .. } => {
                first_send.entry((cmd.client, cmd.seq)).or_insert(i);
                if r.t >= stable {
                    retried.insert((cmd.client, cmd.seq));
                }
            }
            Event::ClientDone { client, seq } => {
                done.insert((*client, *seq), r.t);
            }
            Event::Deliver { p, index, entry, .. } => {
                if let LogEntry::Normal(cmd) = entry {
                    decided.entry((cmd.client, cmd.seq)).or_insert(*index);
                }
                let e = reach.entry(*p).or_insert(0);
                *e = (*e).max(index + 1);
            }
            Event::Fetched { p, package, .. } => {
                let e = reach.entry(*p).or_insert(0);
                *e = (*e).max(package.sigma_len);
            }
            Event::Final { p, alive, active, .. } => finals.push((i, *p, *alive, *active)),
            _ => {}
        }
    }
    if partitioned {
        return Verdict::NotApplicable("partition never healed".into());
    }
    let Some(active) = finals.iter().filter(|f| f.2).filter_map(|f| f.3).max() else {
        return Verdict::NotApplicable("no live process".into());
    };
    let Some(m) = members.get(&active) else {
        return Verdict::NotApplicable(format!("membership of {active} unknown"));
    };
    let live: Vec<(usize, ProcessId)> = finals.iter().filter(|f| f.2 && m.contains(&f.1)).map(|f| (f.0, f.1)).collect();
    if live.len() <= m.len() / 2 {
        return Verdict::NotApplicable(format!("no live majority of {active}"));
    }
    for (&(client, seq), &at) in &first_send {
        let pending = records[at].t < stable && !done.get(&(client, seq)).is_some_and(|&t| t < stable);
        if !pending || !retried.contains(&(client, seq)) {
            continue;
        }
        let Some(&index) = decided.get(&(client, seq)) else {
            return fail(Property::Sc4, format!("{client}:{seq} was never decided"), &[at], &records);
        };
        for &(fi, p) in &live {
            if reach.get(&p).copied().unwrap_or(0) <= index {
                let detail = format!("{client}:{seq} (index {index}) not decided at live {p}");
                return fail(Property::Sc4, detail, &[at, fi], &records);
            }
        }
    }
    Verdict::Pass
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simnet::simulate;
    use crate::types::Command;

    fn run(text: &str) -> (Trace, CheckOptions) {
        let sc = Scenario::parse(text).unwrap();
        (simulate(&sc).unwrap().trace, CheckOptions::from_scenario(&sc))
    }

    #[test]
    fn fault_free_run_passes() {
        let (t, o) = run("processes = 3\nclients = 2\ncommands = 10\nstable_from = 10\nend = 500\n");
        let r = check(&t, &o);
        assert_eq!(r.safety, Verdict::Pass);
        assert_eq!(r.liveness, Verdict::Pass);
    }

    #[test]
    fn single_node_passes() {
        let (t, o) = run("processes = 1\nclients = 1\ncommands = 5\nend = 200\n");
        assert_eq!(check_safety(&t, &o), Verdict::Pass);
    }

    #[test]
    fn quiescent_run_is_vacuously_live() {
        let (t, o) = run("processes = 3\nstable_from = 50\nend = 200\n");
        assert_eq!(check_liveness(&t, &o), Verdict::Pass);
    }

    #[test]
    fn forged_conflicting_decision_breaks_agreement() {
        let (mut t, o) = run("processes = 3\nclients = 1\ncommands = 6\nend = 400\n");
        let pos = t.records.iter().rposition(|r| matches!(r.event, Event::Deliver { index: 2, .. })).unwrap();
        let mut forged = t.records[pos].clone();
        if let Event::Deliver { entry, .. } = &mut forged.event {
            *entry = LogEntry::Normal(Command::new(ClientId(1), 99, b"x".to_vec()));
        }
        t.records.insert(pos + 1, forged);
        let v = check_safety(&t, &o);
        let v = v.violation().expect("must fail");
        assert!(matches!(v.property, Property::Sc2 | Property::Sc3), "{v:?}");
    }

    #[test]
    fn permanent_partition_is_not_applicable() {
        let (t, o) = run("processes = 3\nclients = 1\ncommands = 5\nstable_from = 100\nend = 400\n@50 partition 1 | 2 | 3\n");
        assert!(matches!(check_liveness(&t, &o), Verdict::NotApplicable(_)));
    }

    #[test]
    fn leader_crash_with_stable_tail_is_live() {
        let (t, o) = run("processes = 3\nclients = 2\ncommands = 20\nstable_from = 60\nend = 800\n@50 crash leader\n");
        let r = check(&t, &o);
        assert!(r.passed(), "{r}");
        assert_eq!(r.liveness, Verdict::Pass);
    }

    #[test]
    fn error_lines_fail() {
        let (mut t, o) = run("processes = 3\nend = 50\n");
        t.push(50, Event::Error { p: None, msg: "boom".into() }, 0);
        assert_eq!(check_safety(&t, &o).violation().unwrap().property, Property::RuntimeError);
    }
}
