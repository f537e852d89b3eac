//! The reconfigurable Sequence Paxos replica.
//!
//! A [`Replica`] is a pure state machine: every handler takes one input and
//! returns an ordered list of [`Effect`]s. The host must execute them in
//! order, because the order encodes the durability contract: a `Persist`
//! always comes before the `Send` or `Deliver` that depends on it.
//!
//! Log indices are global. A replica of configuration `i` starts with the
//! final sequence of `i - 1` already decided, so its log, `l_d`, `las` and
//! `l_c` all start at `sigma_len`.

use std::collections::{BTreeMap, BTreeSet};

use crate::error::{Error, Result};
use crate::log::{max_promise, Log, PromiseRecord};
use crate::message::Message;
use crate::types::{Ballot, ConfigId, LogEntry, ProcessId, Round, StopSign};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Role {
    Leader,
    Follower,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Phase {
    None,
    Prepare,
    Accept,
    Recover,
}

/// Deliberate protocol bugs, used to show that the checkers catch them.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Mutation {
    /// Promise without making `n_prom` durable first.
    SkipPromisePersist,
    /// Accept entries from rounds below the promised one.
    AcceptLowerRound,
    /// Return the suffix in a Promise even when `n_a` is older than the
    /// leader's.
    SkipStaleSuffixGuard,
    /// Keep appending after a stop-sign.
    ExtendPastStop,
}

impl Mutation {
    pub const ALL: [Mutation; 4] = [
        Mutation::SkipPromisePersist,
        Mutation::AcceptLowerRound,
        Mutation::SkipStaleSuffixGuard,
        Mutation::ExtendPastStop,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Mutation::SkipPromisePersist => "skip-promise-persist",
            Mutation::AcceptLowerRound => "accept-lower-round",
            Mutation::SkipStaleSuffixGuard => "skip-stale-suffix-guard",
            Mutation::ExtendPastStop => "extend-past-stop",
        }
    }
}

/// A write to durable storage.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum PersistAction {
    Promise(Round),
    /// `n_a ← n_a; v_a ← prefix(v_a, cut) ++ suffix`.
    Accept { n_a: Round, cut: u64, suffix: Vec<LogEntry> },
    Append(LogEntry),
    Decide(u64),
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum Effect {
    Persist(PersistAction),
    Send { to: ProcessId, msg: Message },
    /// Entry `index` of the global sequence is decided.
    Deliver { index: u64, entry: LogEntry },
    /// The stop-sign of this configuration was just delivered.
    Stopped(StopSign),
}

/// Static parameters of one replica.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct ReplicaConfig {
    pub config: ConfigId,
    pub me: ProcessId,
    pub members: BTreeSet<ProcessId>,
    /// Length of the previous configuration's final sequence.
    pub sigma_len: u64,
    /// Use the duplicate-free append.
    pub dedup: bool,
    pub cap: u64,
}

/// The four durable variables.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Durable {
    pub n_prom: Round,
    pub n_a: Round,
    pub log: Log,
    pub l_d: u64,
}

impl Durable {
    pub fn initial(config: ConfigId, sigma_len: u64) -> Durable {
        Durable {
            n_prom: Round::initial(config),
            n_a: Round::initial(config),
            log: Log::with_offset(sigma_len),
            l_d: sigma_len,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Replica {
    cfg: ReplicaConfig,
    mutation: Option<Mutation>,
    role: Role,
    phase: Phase,
    leader: Option<(ProcessId, Ballot)>,
    // proposer
    n_l: Round,
    promises: BTreeMap<ProcessId, (Round, Vec<LogEntry>)>,
    las: BTreeMap<ProcessId, u64>,
    lds: BTreeMap<ProcessId, u64>,
    prop_cmds: Vec<LogEntry>,
    l_c: u64,
    // acceptor and learner
    n_prom: Round,
    n_a: Round,
    log: Log,
    l_d: u64,
}

impl Replica {
    /// A replica starting from scratch in phase `None`.
    pub fn new(cfg: ReplicaConfig) -> Replica {
        let durable = Durable::initial(cfg.config, cfg.sigma_len);
        Replica::build(cfg, durable, Phase::None)
    }

    /// A replica restored from durable state; it waits in the recover phase
    /// for a leader before taking part again.
    pub fn recover(cfg: ReplicaConfig, durable: Durable) -> Replica {
        Replica::build(cfg, durable, Phase::Recover)
    }

    fn build(cfg: ReplicaConfig, d: Durable, phase: Phase) -> Replica {
        let las = cfg.members.iter().map(|&p| (p, cfg.sigma_len)).collect();
        Replica {
            n_l: Round::initial(cfg.config),
            l_c: cfg.sigma_len,
            mutation: None,
            role: Role::Follower,
            phase,
            leader: None,
            promises: BTreeMap::new(),
            las,
            lds: BTreeMap::new(),
            prop_cmds: Vec::new(),
            n_prom: d.n_prom,
            n_a: d.n_a,
            log: d.log,
            l_d: d.l_d,
            cfg,
        }
    }

    pub fn with_mutation(mut self, mutation: Option<Mutation>) -> Self {
        self.mutation = mutation;
        self
    }

    pub fn config(&self) -> ConfigId {
        self.cfg.config
    }

    pub fn me(&self) -> ProcessId {
        self.cfg.me
    }

    pub fn members(&self) -> &BTreeSet<ProcessId> {
        &self.cfg.members
    }

    pub fn sigma_len(&self) -> u64 {
        self.cfg.sigma_len
    }

    pub fn role(&self) -> Role {
        self.role
    }

    pub fn phase(&self) -> Phase {
        self.phase
    }

    pub fn leader(&self) -> Option<(ProcessId, Ballot)> {
        self.leader
    }

    pub fn is_leader(&self) -> bool {
        self.role == Role::Leader
    }

    pub fn n_l(&self) -> Round {
        self.n_l
    }

    pub fn n_prom(&self) -> Round {
        self.n_prom
    }

    pub fn n_a(&self) -> Round {
        self.n_a
    }

    pub fn log(&self) -> &Log {
        &self.log
    }

    pub fn l_d(&self) -> u64 {
        self.l_d
    }

    pub fn l_c(&self) -> u64 {
        self.l_c
    }

    pub fn las(&self) -> &BTreeMap<ProcessId, u64> {
        &self.las
    }

    pub fn durable(&self) -> Durable {
        Durable { n_prom: self.n_prom, n_a: self.n_a, log: self.log.clone(), l_d: self.l_d }
    }

    /// True when the accepted sequence ends in a stop-sign.
    pub fn stopped(&self) -> bool {
        self.log.is_stopped()
    }

    fn majority(&self) -> usize {
        self.cfg.members.len() / 2 + 1
    }

    fn others(&self) -> impl Iterator<Item = ProcessId> + '_ {
        let me = self.cfg.me;
        self.cfg.members.iter().copied().filter(move |&p| p != me)
    }

    fn synced_others(&self) -> Vec<(ProcessId, u64)> {
        let me = self.cfg.me;
        self.lds.iter().filter(|(&p, _)| p != me).map(|(&p, &l)| (p, l)).collect()
    }

    fn prepare_msg(&self) -> Message {
        Message::Prepare { n: self.n_l, ld: self.l_d, na: self.n_a }
    }

    /// Leader event from this configuration's election.
    pub fn on_leader(&mut self, leader: ProcessId, ballot: Ballot) -> Result<Vec<Effect>> {
        let n = Round::new(self.cfg.config, ballot);
        self.leader = Some((leader, ballot));
        let mut out = Vec::new();
        if leader == self.cfg.me && n > self.n_l && n > self.n_prom {
            self.n_l = n;
            self.n_prom = n;
            out.push(Effect::Persist(PersistAction::Promise(n)));
            let own = self.log.suffix(self.l_d)?.to_vec();
            self.promises = BTreeMap::from([(self.cfg.me, (self.n_a, own))]);
            self.las = self.cfg.members.iter().map(|&p| (p, self.cfg.sigma_len)).collect();
            self.lds = BTreeMap::from([(self.cfg.me, self.l_d)]);
            self.l_c = self.cfg.sigma_len;
            self.role = Role::Leader;
            self.phase = Phase::Prepare;
            let prepare = self.prepare_msg();
            out.extend(self.others().map(|to| Effect::Send { to, msg: prepare.clone() }));
            if self.promises.len() >= self.majority() {
                self.adopt(&mut out)?;
            }
        } else if self.phase == Phase::Recover {
            self.role = Role::Follower;
            if leader != self.cfg.me {
                out.push(Effect::Send { to: leader, msg: Message::PrepareReq });
            }
        } else {
            self.role = Role::Follower;
        }
        Ok(out)
    }

    /// Dispatches a protocol message. Heartbeats and state transfer belong to
    /// other components and are ignored here.
    pub fn on_message(&mut self, from: ProcessId, msg: Message) -> Result<Vec<Effect>> {
        if !self.cfg.members.contains(&from) {
            return Ok(Vec::new());
        }
        match msg {
            Message::Prepare { n, ld, na } => self.on_prepare(from, n, ld, na),
            Message::Promise { n, n_a, suffix, ld } => self.on_promise(from, n, n_a, suffix, ld),
            Message::AcceptSync { n, suffix, ld } => self.on_accept_sync(from, n, suffix, ld),
            Message::Accept { n, entry } => self.on_accept(from, n, entry),
            Message::Accepted { n, la } => self.on_accepted(from, n, la),
            Message::Decide { l, n } => self.on_decide(l, n),
            Message::PrepareReq => Ok(self.on_prepare_req(from)),
            _ => Ok(Vec::new()),
        }
    }

    pub fn on_prepare(&mut self, from: ProcessId, n: Round, ld: u64, na_l: Round) -> Result<Vec<Effect>> {
        let resync = self.n_prom == n && self.phase == Phase::Recover;
        if !(self.n_prom < n || resync) {
            return Ok(Vec::new());
        }
        let mut out = Vec::new();
        self.n_prom = n;
        if self.mutation != Some(Mutation::SkipPromisePersist) {
            out.push(Effect::Persist(PersistAction::Promise(n)));
        }
        self.role = Role::Follower;
        self.phase = Phase::Prepare;
        let guard = self.mutation != Some(Mutation::SkipStaleSuffixGuard);
        let suffix = if self.n_a >= na_l || !guard { self.log.suffix(ld)?.to_vec() } else { Vec::new() };
        out.push(Effect::Send { to: from, msg: Message::Promise { n, n_a: self.n_a, suffix, ld: self.l_d } });
        Ok(out)
    }

    pub fn on_promise(
        &mut self,
        from: ProcessId,
        n: Round,
        n_a: Round,
        suffix: Vec<LogEntry>,
        ld: u64,
    ) -> Result<Vec<Effect>> {
        if n != self.n_l || self.role != Role::Leader {
            return Ok(Vec::new());
        }
        let mut out = Vec::new();
        match self.phase {
            Phase::Prepare => {
                self.promises.insert(from, (n_a, suffix));
                self.lds.insert(from, ld);
                if self.promises.len() >= self.majority() {
                    self.adopt(&mut out)?;
                }
            }
            Phase::Accept => {
                self.lds.insert(from, ld);
                let sync = Message::AcceptSync { n: self.n_l, suffix: self.log.suffix(ld)?.to_vec(), ld };
                out.push(Effect::Send { to: from, msg: sync });
                if self.l_c != self.cfg.sigma_len {
                    out.push(Effect::Send { to: from, msg: Message::Decide { l: self.l_c, n: self.n_l } });
                }
            }
            Phase::None | Phase::Recover => {}
        }
        Ok(out)
    }

    /// Majority of promises reached: adopt the best suffix, append buffered
    /// proposals and synchronise every promised follower.
    fn adopt(&mut self, out: &mut Vec<Effect>) -> Result<()> {
        let records: Vec<PromiseRecord> = self
            .promises
            .iter()
            .map(|(&from, (n_a, suffix))| PromiseRecord { from, n_a: *n_a, suffix: suffix.clone() })
            .collect();
        let best = max_promise(&records)?.suffix.clone();
        self.log.replace_from(self.l_d, &best)?;
        let pending = std::mem::take(&mut self.prop_cmds);
        if !self.log.is_stopped() {
            let (stops, cmds): (Vec<_>, Vec<_>) = pending.into_iter().partition(LogEntry::is_stop);
            for c in cmds {
                self.log.append(c, self.cfg.dedup)?;
            }
            if let Some(ss) = stops.into_iter().next() {
                self.log.append(ss, self.cfg.dedup)?;
            }
        }
        self.n_a = self.n_l;
        out.push(Effect::Persist(PersistAction::Accept {
            n_a: self.n_l,
            cut: self.l_d,
            suffix: self.log.suffix(self.l_d)?.to_vec(),
        }));
        self.las.insert(self.cfg.me, self.log.len());
        self.phase = Phase::Accept;
        for (to, ld) in self.synced_others() {
            let msg = Message::AcceptSync { n: self.n_l, suffix: self.log.suffix(ld)?.to_vec(), ld };
            out.push(Effect::Send { to, msg });
        }
        self.advance_chosen(out)
    }

    pub fn on_accept_sync(&mut self, from: ProcessId, n: Round, suffix: Vec<LogEntry>, ld: u64) -> Result<Vec<Effect>> {
        if self.role != Role::Follower || self.phase != Phase::Prepare || n != self.n_prom {
            return Ok(Vec::new());
        }
        if ld > self.log.len() {
            return Err(Error::IndexOutOfRange { index: ld, len: self.log.len() });
        }
        self.log.replace_from(ld, &suffix)?;
        self.n_a = n;
        self.phase = Phase::Accept;
        Ok(vec![
            Effect::Persist(PersistAction::Accept { n_a: n, cut: ld, suffix }),
            Effect::Send { to: from, msg: Message::Accepted { n, la: self.log.len() } },
        ])
    }

    pub fn on_accept(&mut self, from: ProcessId, n: Round, entry: LogEntry) -> Result<Vec<Effect>> {
        let round_ok = match self.mutation {
            Some(Mutation::AcceptLowerRound) => n <= self.n_prom,
            _ => n == self.n_prom,
        };
        if self.role != Role::Follower || self.phase != Phase::Accept || !round_ok {
            return Ok(Vec::new());
        }
        let mut out = Vec::new();
        let appended = if self.log.is_stopped() && self.mutation == Some(Mutation::ExtendPastStop) {
            self.log.push_unchecked(entry.clone());
            true
        } else {
            self.log.append(entry.clone(), self.cfg.dedup)?
        };
        if appended {
            out.push(Effect::Persist(PersistAction::Append(entry)));
        }
        out.push(Effect::Send { to: from, msg: Message::Accepted { n, la: self.log.len() } });
        Ok(out)
    }

    pub fn on_accepted(&mut self, from: ProcessId, n: Round, la: u64) -> Result<Vec<Effect>> {
        if n != self.n_l || self.role != Role::Leader || self.phase != Phase::Accept {
            return Ok(Vec::new());
        }
        self.las.insert(from, la);
        let mut out = Vec::new();
        self.advance_chosen(&mut out)?;
        Ok(out)
    }

    /// Longest length accepted by a majority in the current round.
    pub fn chosen_len(&self) -> u64 {
        chosen_length(self.las.values().copied(), self.majority())
    }

    fn advance_chosen(&mut self, out: &mut Vec<Effect>) -> Result<()> {
        let chosen = self.chosen_len();
        if chosen <= self.l_c {
            return Ok(());
        }
        self.l_c = chosen;
        let decide = Message::Decide { l: chosen, n: self.n_l };
        for (to, _) in self.synced_others() {
            out.push(Effect::Send { to, msg: decide.clone() });
        }
        out.extend(self.on_decide(chosen, self.n_l)?);
        Ok(())
    }

    pub fn on_decide(&mut self, l: u64, n: Round) -> Result<Vec<Effect>> {
        if n != self.n_prom || self.phase != Phase::Accept || l <= self.l_d {
            return Ok(Vec::new());
        }
        if l > self.log.len() {
            return Err(Error::IndexOutOfRange { index: l, len: self.log.len() });
        }
        let mut out = vec![Effect::Persist(PersistAction::Decide(l))];
        let mut stop = None;
        while self.l_d < l {
            let entry = self.log.get(self.l_d)?.clone();
            if let LogEntry::Stop(ss) = &entry {
                stop = Some(ss.clone());
            }
            out.push(Effect::Deliver { index: self.l_d, entry });
            self.l_d += 1;
        }
        if let Some(ss) = stop {
            out.push(Effect::Stopped(ss));
        }
        Ok(out)
    }

    /// Client command or stop-sign. Only the leader acts on it.
    pub fn on_propose(&mut self, entry: LogEntry) -> Result<Vec<Effect>> {
        let mut out = Vec::new();
        if self.role != Role::Leader {
            return Ok(out);
        }
        match self.phase {
            Phase::Prepare => {
                if !self.prop_cmds.contains(&entry) {
                    self.prop_cmds.push(entry);
                }
            }
            Phase::Accept => {
                let appended = if !self.log.is_stopped() {
                    self.log.append(entry.clone(), self.cfg.dedup)?
                } else if self.mutation == Some(Mutation::ExtendPastStop) {
                    self.log.push_unchecked(entry.clone());
                    true
                } else {
                    false
                };
                if !appended {
                    return Ok(out);
                }
                out.push(Effect::Persist(PersistAction::Append(entry.clone())));
                self.las.insert(self.cfg.me, self.log.len());
                let accept = Message::Accept { n: self.n_l, entry };
                for (to, _) in self.synced_others() {
                    out.push(Effect::Send { to, msg: accept.clone() });
                }
                self.advance_chosen(&mut out)?;
            }
            Phase::None | Phase::Recover => {}
        }
        Ok(out)
    }

    pub fn on_prepare_req(&mut self, from: ProcessId) -> Vec<Effect> {
        if self.role != Role::Leader {
            return Vec::new();
        }
        vec![Effect::Send { to: from, msg: self.prepare_msg() }]
    }

    /// The link session to `peer` was lost.
    ///
    /// A follower also treats the owner of its promised round as its leader,
    /// because the election may not have told it about that leader yet.
    pub fn on_connection_lost(&mut self, peer: ProcessId) {
        if self.role == Role::Leader {
            // Messages to `peer` may have been lost: it must promise again
            // before it gets more accepts.
            if peer != self.cfg.me {
                self.lds.remove(&peer);
            }
            return;
        }
        if self.role != Role::Follower {
            return;
        }
        let trusted = self.leader.is_some_and(|(l, _)| l == peer);
        let promised_to = self.n_prom.ballot != Ballot(0) && self.n_prom.ballot.pid(self.cfg.cap) == peer;
        if trusted || promised_to {
            self.phase = Phase::Recover;
        }
    }

    /// A fresh session to `peer` is up. A recovering follower asks its
    /// leader for a new Prepare; a leader re-sends Prepare to a peer that has
    /// not promised yet, since the first one may have been lost.
    pub fn on_session_up(&mut self, peer: ProcessId) -> Vec<Effect> {
        match self.role {
            Role::Follower if self.phase == Phase::Recover && self.leader.is_some_and(|(l, _)| l == peer) => {
                vec![Effect::Send { to: peer, msg: Message::PrepareReq }]
            }
            Role::Leader if !self.lds.contains_key(&peer) && self.cfg.members.contains(&peer) => {
                vec![Effect::Send { to: peer, msg: self.prepare_msg() }]
            }
            _ => Vec::new(),
        }
    }

    /// Drops log entries below `up_to` after the host made the truncation
    /// durable.
    pub fn truncate(&mut self, up_to: u64) -> Result<()> {
        if up_to > self.l_d {
            return Err(Error::IndexOutOfRange { index: up_to, len: self.l_d });
        }
        self.log.truncate(up_to)
    }
}

/// Largest `l` such that at least `majority` of the `las` values are `>= l`.
pub fn chosen_length(las: impl IntoIterator<Item = u64>, majority: usize) -> u64 {
    let mut v: Vec<u64> = las.into_iter().collect();
    if majority == 0 || v.len() < majority {
        return 0;
    }
    v.sort_unstable_by(|a, b| b.cmp(a));
    v[majority - 1]
}
