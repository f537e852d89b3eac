//! Bounded exhaustive exploration of a small cluster.
//!
//! The model drives [`Replica`] state machines directly. Every reachable
//! interleaving of message deliveries, elections, proposals, crashes and
//! session drops up to a depth bound is visited, with a visited set keyed by
//! a digest of the whole state (replicas, link queues, storage contents and
//! the ghost decided sequence). An election hands a fresh ballot to the
//! elected process only; everyone else learns of it through its Prepare, so
//! a deposed leader keeps acting until a higher round reaches it.

use std::collections::hash_map::DefaultHasher;
use std::collections::{BTreeSet, HashMap, VecDeque};
use std::fmt;
use std::hash::{Hash, Hasher};

use crate::message::Message;
use crate::paxos::{Durable, Effect, Mutation, PersistAction, Replica, ReplicaConfig};
use crate::types::{Ballot, ClientId, Command, ConfigId, LogEntry, ProcessId, Round, StopSign, BALLOT_CAP};

use super::Property;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ExploreParams {
    pub procs: usize,
    pub cmds: usize,
    pub crashes: u8,
    pub drops: u8,
    pub elections: u8,
    /// Also propose a stop-sign, right after the first command.
    pub stop: bool,
    pub depth: usize,
    pub max_states: usize,
    pub dedup: bool,
    pub mutation: Option<Mutation>,
}

impl Default for ExploreParams {
    fn default() -> Self {
        ExploreParams {
            procs: 3,
            cmds: 2,
            crashes: 1,
            drops: 1,
            elections: 2,
            stop: false,
            depth: 40,
            max_states: 3_000_000,
            dedup: false,
            mutation: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Action {
    Elect(ProcessId),
    Propose(ProcessId, LogEntry),
    Deliver { from: ProcessId, to: ProcessId, msg: Message },
    Crash(ProcessId),
    Recover(ProcessId),
    Drop(ProcessId, ProcessId),
    Reconnect(ProcessId, ProcessId),
}

impl fmt::Display for Action {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Action::Elect(p) => write!(f, "elect {p}"),
            Action::Propose(p, e) => write!(f, "propose {e} at {p}"),
            Action::Deliver { from, to, msg } => write!(f, "{from}->{to} {msg}"),
            Action::Crash(p) => write!(f, "crash {p}"),
            Action::Recover(p) => write!(f, "recover {p}"),
            Action::Drop(a, b) => write!(f, "drop {a}-{b}"),
            Action::Reconnect(a, b) => write!(f, "reconnect {a}-{b}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ExploreVerdict {
    /// Every state within the bounds was visited without a violation.
    Pass,
    Counterexample { property: Property, detail: String, schedule: Vec<Action> },
    /// The state budget ran out first.
    Partial,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExploreReport {
    pub verdict: ExploreVerdict,
    pub states: usize,
    pub transitions: u64,
    /// Some path was cut by the depth bound.
    pub depth_limited: bool,
}

impl fmt::Display for ExploreReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let word = match &self.verdict {
            ExploreVerdict::Pass => "pass",
            ExploreVerdict::Counterexample { .. } => "fail",
            ExploreVerdict::Partial => "partial",
        };
        writeln!(
            f,
            "verdict={word} states={} transitions={} depth_limited={}",
            self.states, self.transitions, self.depth_limited
        )?;
        if let ExploreVerdict::Counterexample { property, detail, schedule } = &self.verdict {
            writeln!(f, "{property} violated: {detail}")?;
            for (i, a) in schedule.iter().enumerate() {
                writeln!(f, "  {:>2}. {a}", i + 1)?;
            }
        }
        Ok(())
    }
}

#[derive(Clone, Hash, PartialEq, Eq)]
struct State {
    reps: Vec<Option<Replica>>,
    disk: Vec<Durable>,
    /// Indexed by `from * n + to`.
    queues: Vec<VecDeque<Message>>,
    up: Vec<bool>,
    elections: u8,
    crashes: u8,
    drops: u8,
    next_prop: usize,
    decided: Vec<LogEntry>,
}

type Found = (Property, String);

struct Explorer {
    params: ExploreParams,
    members: BTreeSet<ProcessId>,
    proposals: Vec<LogEntry>,
    visited: HashMap<u64, usize>,
    transitions: u64,
    depth_limited: bool,
    exhausted: bool,
    path: Vec<Action>,
}

fn pid(i: usize) -> ProcessId {
    ProcessId(i as u64 + 1)
}

fn ix(p: ProcessId) -> usize {
    p.0 as usize - 1
}

fn digest(s: &State) -> u64 {
    let mut h = DefaultHasher::new();
    s.hash(&mut h);
    h.finish()
}

/// Explores every interleaving within `params` and reports the first
/// violation found.
pub fn explore(params: ExploreParams) -> ExploreReport {
    let members: BTreeSet<ProcessId> = (0..params.procs).map(pid).collect();
    let mut proposals: Vec<LogEntry> =
        (1..=params.cmds as u64).map(|s| LogEntry::Normal(Command::new(ClientId(1), s, vec![s as u8]))).collect();
    if params.stop {
        let at = proposals.len().min(1);
        proposals.insert(at, LogEntry::Stop(StopSign::new(ConfigId(1), members.iter().copied())));
    }
    let mut ex = Explorer {
        params,
        members,
        proposals,
        visited: HashMap::new(),
        transitions: 0,
        depth_limited: false,
        exhausted: false,
        path: Vec::new(),
    };
    let init = ex.initial();
    let verdict = match ex.dfs(&init, 0) {
        Some((property, detail)) => {
            ExploreVerdict::Counterexample { property, detail, schedule: std::mem::take(&mut ex.path) }
        }
        None if ex.exhausted => ExploreVerdict::Partial,
        None => ExploreVerdict::Pass,
    };
    ExploreReport { verdict, states: ex.visited.len(), transitions: ex.transitions, depth_limited: ex.depth_limited }
}

impl Explorer {
    fn n(&self) -> usize {
        self.params.procs
    }

    fn cfg(&self, i: usize) -> ReplicaConfig {
        ReplicaConfig {
            config: ConfigId(0),
            me: pid(i),
            members: self.members.clone(),
            sigma_len: 0,
            dedup: self.params.dedup,
            cap: BALLOT_CAP,
        }
    }

    fn initial(&self) -> State {
        let n = self.n();
        State {
            reps: (0..n).map(|i| Some(Replica::new(self.cfg(i)).with_mutation(self.params.mutation))).collect(),
            disk: (0..n).map(|_| Durable::initial(ConfigId(0), 0)).collect(),
            queues: vec![VecDeque::new(); n * n],
            up: vec![true; n * n],
            elections: 0,
            crashes: 0,
            drops: 0,
            next_prop: 0,
            decided: Vec::new(),
        }
    }

    fn actions(&self, s: &State) -> Vec<Action> {
        let n = self.n();
        let mut out = Vec::new();
        let alive = |i: usize| s.reps[i].is_some();
        for from in 0..n {
            for to in 0..n {
                if let Some(msg) = s.queues[from * n + to].front() {
                    out.push(Action::Deliver { from: pid(from), to: pid(to), msg: msg.clone() });
                }
            }
        }
        if s.next_prop < self.proposals.len() {
            for i in 0..n {
                if s.reps[i].as_ref().is_some_and(Replica::is_leader) {
                    out.push(Action::Propose(pid(i), self.proposals[s.next_prop].clone()));
                }
            }
        }
        if s.elections < self.params.elections {
            out.extend((0..n).filter(|&i| alive(i)).map(|i| Action::Elect(pid(i))));
        }
        for a in 0..n {
            for b in a + 1..n {
                if !alive(a) || !alive(b) {
                    continue;
                }
                if s.up[a * n + b] && s.drops < self.params.drops {
                    out.push(Action::Drop(pid(a), pid(b)));
                } else if !s.up[a * n + b] {
                    out.push(Action::Reconnect(pid(a), pid(b)));
                }
            }
        }
        for i in 0..n {
            if alive(i) && s.crashes < self.params.crashes {
                out.push(Action::Crash(pid(i)));
            } else if !alive(i) {
                out.push(Action::Recover(pid(i)));
            }
        }
        out
    }

    fn dfs(&mut self, s: &State, depth: usize) -> Option<Found> {
        if self.visited.len() >= self.params.max_states {
            self.exhausted = true;
            return None;
        }
        let h = digest(s);
        match self.visited.get(&h) {
            Some(&d) if d <= depth => return None,
            _ => {
                self.visited.insert(h, depth);
            }
        }
        let actions = self.actions(s);
        if depth >= self.params.depth {
            if !actions.is_empty() {
                self.depth_limited = true;
            }
            return None;
        }
        for a in actions {
            self.transitions += 1;
            let mut next = s.clone();
            self.path.push(a.clone());
            let res = self.apply(&mut next, &a).and_then(|()| self.check_state(&next));
            if let Err(found) = res {
                return Some(found);
            }
            if let Some(found) = self.dfs(&next, depth + 1) {
                return Some(found);
            }
            self.path.pop();
            if self.exhausted {
                return None;
            }
        }
        None
    }

    fn apply(&self, s: &mut State, a: &Action) -> Result<(), Found> {
        let n = self.n();
        match a {
            Action::Elect(p) => {
                s.elections += 1;
                let ballot = Ballot::new(u64::from(s.elections), *p, BALLOT_CAP).expect("small ids");
                let eff = s.reps[ix(*p)].as_mut().expect("alive").on_leader(*p, ballot);
                self.run(s, ix(*p), eff, None)?;
            }
            Action::Propose(p, entry) => {
                s.next_prop += 1;
                let eff = s.reps[ix(*p)].as_mut().expect("alive leader").on_propose(entry.clone());
                self.run(s, ix(*p), eff, None)?;
            }
            Action::Deliver { from, to, msg } => {
                s.queues[ix(*from) * n + ix(*to)].pop_front();
                let stale = match msg {
                    Message::Prepare { na, .. } => Some(*na),
                    _ => None,
                };
                let eff = s.reps[ix(*to)].as_mut().expect("queues to dead processes are empty").on_message(*from, msg.clone());
                self.run(s, ix(*to), eff, stale)?;
            }
            Action::Crash(p) => {
                let i = ix(*p);
                s.crashes += 1;
                s.reps[i] = None;
                for q in 0..n {
                    s.queues[i * n + q].clear();
                    s.queues[q * n + i].clear();
                    s.up[i.min(q) * n + i.max(q)] = false;
                }
                for q in 0..n {
                    if let Some(r) = s.reps[q].as_mut() {
                        r.on_connection_lost(*p);
                    }
                }
            }
            Action::Recover(p) => {
                let i = ix(*p);
                s.reps[i] = Some(Replica::recover(self.cfg(i), s.disk[i].clone()).with_mutation(self.params.mutation));
                let peers: Vec<usize> = (0..n).filter(|&q| q != i && s.reps[q].is_some()).collect();
                for q in peers {
                    s.up[i.min(q) * n + i.max(q)] = true;
                    self.session_up(s, i, q)?;
                }
            }
            Action::Drop(a, b) => {
                let (a, b) = (ix(*a), ix(*b));
                s.drops += 1;
                s.up[a * n + b] = false;
                s.queues[a * n + b].clear();
                s.queues[b * n + a].clear();
                s.reps[a].as_mut().expect("alive").on_connection_lost(pid(b));
                s.reps[b].as_mut().expect("alive").on_connection_lost(pid(a));
            }
            Action::Reconnect(a, b) => {
                let (a, b) = (ix(*a), ix(*b));
                s.up[a * n + b] = true;
                self.session_up(s, a, b)?;
            }
        }
        Ok(())
    }

    fn session_up(&self, s: &mut State, a: usize, b: usize) -> Result<(), Found> {
        for (x, y) in [(a, b), (b, a)] {
            if let Some(r) = s.reps[x].as_mut() {
                let eff = r.on_session_up(pid(y));
                self.run(s, x, Ok(eff), None)?;
            }
        }
        Ok(())
    }

    /// Executes effects in order, checking the per-transition properties.
    /// `stale` is the leader's accepted round when the input was a Prepare.
    fn run(&self, s: &mut State, i: usize, eff: crate::Result<Vec<Effect>>, stale: Option<Round>) -> Result<(), Found> {
        let n = self.n();
        let me = pid(i);
        let eff = eff.map_err(|e| (Property::RuntimeError, format!("{me}: {e}")))?;
        for e in eff {
            match e {
                Effect::Persist(action) => {
                    let d = &mut s.disk[i];
                    match action {
                        PersistAction::Promise(n) => d.n_prom = n,
                        PersistAction::Accept { n_a, cut, suffix } => {
                            d.log.replace_from(cut, &suffix).map_err(|e| (Property::RuntimeError, e.to_string()))?;
                            d.n_a = n_a;
                        }
                        PersistAction::Append(entry) => d.log.push_unchecked(entry),
                        PersistAction::Decide(l) => d.l_d = l,
                    }
                }
                Effect::Send { to, msg } => {
                    let d = &s.disk[i];
                    match &msg {
                        Message::Promise { n, n_a, suffix, .. } => {
                            if d.n_prom < *n {
                                return Err((Property::PersistOrder, format!("{me} promised {n} with {} durable", d.n_prom)));
                            }
                            if stale.is_some_and(|na_l| *n_a < na_l) && !suffix.is_empty() {
                                let detail = format!("{me} returned {} entries accepted in the older round {n_a}", suffix.len());
                                return Err((Property::StaleSuffix, detail));
                            }
                        }
                        Message::Accepted { n, la } if d.log.len() < *la || d.n_a < *n => {
                            let detail = format!("{me} acknowledged {la} in {n} with {} durable", d.log.len());
                            return Err((Property::PersistOrder, detail));
                        }
                        _ => {}
                    }
                    let t = ix(to);
                    if s.up[i.min(t) * n + i.max(t)] && s.reps[t].is_some() {
                        s.queues[i * n + t].push_back(msg);
                    }
                }
                Effect::Deliver { index, entry } => {
                    if s.disk[i].l_d <= index {
                        return Err((Property::PersistOrder, format!("{me} delivered {index} before making it durable")));
                    }
                    let at = index as usize;
                    match s.decided.get(at) {
                        Some(d) if *d != entry || d.as_command().map(|c| &c.op) != entry.as_command().map(|c| &c.op) => {
                            return Err((Property::Sc2, format!("{me} decided {entry} at {index} where {d} was decided")));
                        }
                        Some(_) => {}
                        None if at == s.decided.len() => {
                            if !self.proposals[..s.next_prop].contains(&entry) {
                                return Err((Property::Sc1, format!("{me} decided unproposed {entry}")));
                            }
                            if self.params.dedup && s.decided.contains(&entry) {
                                return Err((Property::Sc1Dedup, format!("{entry} decided twice")));
                            }
                            s.decided.push(entry);
                        }
                        None => return Err((Property::Sc3, format!("{me} decided {index} past a gap"))),
                    }
                }
                Effect::Stopped(_) => {}
            }
        }
        Ok(())
    }

    fn check_state(&self, s: &State) -> Result<(), Found> {
        let logs = s
            .reps
            .iter()
            .enumerate()
            .filter_map(|(i, r)| r.as_ref().map(|r| (i, r.log(), r.l_d(), "memory")))
            .chain(s.disk.iter().enumerate().map(|(i, d)| (i, &d.log, d.l_d, "storage")));
        for (i, log, l_d, place) in logs {
            let entries = log.entries();
            if let Some(k) = entries.iter().position(LogEntry::is_stop) {
                if k + 1 < entries.len() {
                    return Err((Property::StopFinality, format!("{} has {} after a stop-sign in {place}", pid(i), entries[k + 1])));
                }
            }
            let l = l_d as usize;
            if l > s.decided.len() || entries.len() < l || entries[..l] != s.decided[..l] {
                return Err((Property::ChosenStable, format!("{}'s decided prefix in {place} differs from the decided sequence", pid(i))));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(cmds: usize, crashes: u8, drops: u8) -> ExploreParams {
        ExploreParams { cmds, crashes, drops, depth: 30, ..ExploreParams::default() }
    }

    #[test]
    fn one_command_no_faults_passes_fully() {
        let r = explore(ExploreParams { elections: 1, ..small(1, 0, 0) });
        assert_eq!(r.verdict, ExploreVerdict::Pass, "{r}");
        assert!(!r.depth_limited);
    }

    #[test]
    fn skipped_promise_persistence_is_found() {
        let r = explore(ExploreParams { mutation: Some(Mutation::SkipPromisePersist), ..small(1, 0, 0) });
        match r.verdict {
            ExploreVerdict::Counterexample { property, .. } => assert_eq!(property, Property::PersistOrder),
            v => panic!("{v:?}"),
        }
    }
}
