//! One process: a replica, an election and a snapshot ledger per
//! configuration, a single key-value store, and the glue to storage.
//!
//! The host is driven by its environment (the simulator) through
//! `on_*` calls and answers with [`Output`]s: messages to send, timers to
//! arm and observations for the trace. Configuration `i + 1` starts either
//! locally when this process decides the stop-sign of `i`, or by fetching
//! the final sequence of `i` from a holder with the
//! StateOffer/StateRequest/StateChunk/StateAck exchange.

use std::collections::{BTreeMap, BTreeSet};

use crate::ble::{Ble, LeaderEvent};
use crate::compaction::{SnapshotLedger, SnapshotMarker};
use crate::error::{invalid, Error, Result};
use crate::message::{Message, TransferPackage};
use crate::paxos::{Durable, Effect, Mutation, Phase, Replica, ReplicaConfig};
use crate::rsm::{Applied, KvStore, Response, RsmSnapshot};
use crate::storage::{PersistentState, Record, Storage, StoredSnapshot};
use crate::types::{Ballot, ClientId, Command, ConfigId, LogEntry, ProcessId, StopSign};

/// Time a message for an unknown configuration waits before a fetch.
pub const FETCH_AFTER: u64 = 100;
const FETCH_BACKOFF: u64 = 50;
const FETCH_BACKOFF_MAX: u64 = 400;
const BUFFER_CAP: usize = 4096;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HostConfig {
    pub me: ProcessId,
    /// Every process that may ever take part; fetch targets come from here.
    pub universe: BTreeSet<ProcessId>,
    pub dedup: bool,
    pub delta: u64,
    /// Snapshot every this many applied entries; `None` disables compaction.
    pub snapshot_every: Option<u64>,
    pub cap: u64,
    pub mutation: Option<Mutation>,
    pub fetch_after: u64,
}

impl HostConfig {
    pub fn new(me: ProcessId, universe: BTreeSet<ProcessId>) -> Self {
        HostConfig {
            me,
            universe,
            dedup: false,
            delta: crate::ble::DEFAULT_DELTA,
            snapshot_every: None,
            cap: crate::types::BALLOT_CAP,
            mutation: None,
            fetch_after: FETCH_AFTER,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Timer {
    Ble(ConfigId),
    Fetch(ConfigId),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StartKind {
    /// Configuration 0 at first boot.
    Initial,
    /// This process decided the previous stop-sign itself.
    Local,
    /// The final sequence came from another process.
    Fetched(ProcessId),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Output {
    Send { to: ProcessId, config: ConfigId, msg: Message },
    SetTimer { after: u64, timer: Timer },
    Persist { config: ConfigId, record: Record },
    /// `replay` marks entries re-applied from storage after a restart.
    Deliver { config: ConfigId, index: u64, entry: LogEntry, replay: bool },
    Leader { config: ConfigId, event: LeaderEvent },
    Proposed { config: ConfigId, entry: LogEntry },
    Started { config: ConfigId, sigma_len: u64, kind: StartKind },
    Fetched { config: ConfigId, from: ProcessId, package: TransferPackage },
    Reply { client: ClientId, seq: u64, response: Response },
    CleanedUp { config: ConfigId },
    Recovered { decided: Vec<(ConfigId, u64)> },
    Note(String),
    Error(String),
    /// The persist budget ran out: the environment must crash this process
    /// now, before anything else it would have done.
    Crashed,
}

#[derive(Debug, Clone)]
struct Instance {
    replica: Replica,
    ble: Ble,
    ledger: SnapshotLedger,
    stop: Option<StopSign>,
    confirmed: bool,
    snapshot: Option<StoredSnapshot>,
}

#[derive(Debug, Clone, Default)]
struct Fetch {
    attempt: u32,
    offers: Vec<ProcessId>,
    armed: bool,
}

#[derive(Debug, Clone)]
pub struct ProcessHost {
    cfg: HostConfig,
    instances: BTreeMap<ConfigId, Instance>,
    rsm: KvStore,
    last_snapshot: u64,
    buffered: BTreeMap<ConfigId, Vec<(ProcessId, Message)>>,
    fetching: BTreeMap<ConfigId, Fetch>,
    markers: Vec<(ConfigId, Command)>,
    persist_budget: Option<u64>,
    dead: bool,
    out: Vec<Output>,
}

impl ProcessHost {
    /// Starts a process. With stored state this is a recovery; otherwise a
    /// member of `config0` starts configuration 0 with the empty sequence
    /// and anyone else waits to be brought in by a reconfiguration.
    pub fn boot(
        cfg: HostConfig,
        config0: &BTreeSet<ProcessId>,
        storage: &mut dyn Storage,
        persist_budget: Option<u64>,
    ) -> (ProcessHost, Vec<Output>) {
        let mut h = ProcessHost {
            cfg,
            instances: BTreeMap::new(),
            rsm: KvStore::new(),
            last_snapshot: 0,
            buffered: BTreeMap::new(),
            fetching: BTreeMap::new(),
            markers: Vec::new(),
            persist_budget,
            dead: false,
            out: Vec::new(),
        };
        let result = match storage.configs() {
            Ok(configs) if !configs.is_empty() => h.recover(storage, &configs),
            Ok(_) if config0.contains(&h.cfg.me) => {
                h.start_instance(storage, ConfigId(0), config0.clone(), 0, None, StartKind::Initial)
            }
            Ok(_) => Ok(()),
            Err(e) => Err(e.into()),
        };
        h.finish(result, storage);
        let out = std::mem::take(&mut h.out);
        (h, out)
    }

    fn recover(&mut self, storage: &mut dyn Storage, configs: &[ConfigId]) -> Result<()> {
        let mut decided = Vec::new();
        let mut highest = None;
        for &c in configs {
            let Some(state) = storage.load(c)? else { continue };
            let rc = self.replica_config(c, state.members.clone(), state.sigma_len);
            let seed = state.durable.n_prom.ballot;
            let offset = state.durable.log.offset();
            let replica = Replica::recover(rc, state.durable.clone()).with_mutation(self.cfg.mutation);
            let ble = Ble::new(self.cfg.me, state.members.clone(), self.cfg.delta, seed, self.cfg.cap)?;
            let stop = decided_stop(&replica);
            decided.push((c, replica.l_d()));
            let inst = Instance {
                ledger: SnapshotLedger::new(state.members.clone(), offset),
                replica,
                ble,
                stop,
                confirmed: false,
                snapshot: state.snapshot.clone(),
            };
            self.instances.insert(c, inst);
            highest = Some(c);
        }
        self.out.push(Output::Recovered { decided });
        let Some(h) = highest else { return Ok(()) };
        for c in self.instances.keys().copied().collect::<Vec<_>>() {
            if self.instances[&c].stop.is_none() {
                self.arm_ble(c);
            }
        }
        // Rebuild the store from the newest configuration's snapshot and its
        // decided log.
        let inst = &self.instances[&h];
        let (l_k, snap) = match &inst.snapshot {
            Some(s) => (s.l_k, RsmSnapshot::from_blob(0, s.l_k, &s.blob).map_err(|e| invalid(e.to_string()))?),
            None => (0, KvStore::new().take_snapshot(0)?),
        };
        let log = inst.replica.log();
        let l_d = inst.replica.l_d();
        let entries = if l_k < l_d { log.suffix(l_k)?[..(l_d - l_k) as usize].to_vec() } else { Vec::new() };
        self.rsm = KvStore::restore(&snap, &[], l_k)?;
        self.last_snapshot = l_k;
        for (i, e) in entries.into_iter().enumerate() {
            let index = l_k + i as u64;
            self.out.push(Output::Deliver { config: h, index, entry: e.clone(), replay: true });
            self.rsm.apply(&e, index)?;
        }
        // A crash between deciding a stop-sign and starting the next
        // configuration: start it now.
        if let Some(ss) = self.instances[&h].stop.clone() {
            self.after_stop(storage, h, ss)?;
        }
        Ok(())
    }

    fn replica_config(&self, config: ConfigId, members: BTreeSet<ProcessId>, sigma_len: u64) -> ReplicaConfig {
        ReplicaConfig { config, me: self.cfg.me, members, sigma_len, dedup: self.cfg.dedup, cap: self.cfg.cap }
    }

    pub fn me(&self) -> ProcessId {
        self.cfg.me
    }

    pub fn config(&self) -> &HostConfig {
        &self.cfg
    }

    pub fn is_dead(&self) -> bool {
        self.dead
    }

    /// Highest started configuration, stopped or not.
    pub fn newest(&self) -> Option<ConfigId> {
        self.instances.keys().next_back().copied()
    }

    /// Highest started configuration that has not decided its stop-sign.
    pub fn active(&self) -> Option<ConfigId> {
        self.newest().filter(|c| self.instances[c].stop.is_none())
    }

    pub fn configs(&self) -> Vec<ConfigId> {
        self.instances.keys().copied().collect()
    }

    pub fn replica(&self, config: ConfigId) -> Option<&Replica> {
        self.instances.get(&config).map(|i| &i.replica)
    }

    pub fn ble(&self, config: ConfigId) -> Option<&Ble> {
        self.instances.get(&config).map(|i| &i.ble)
    }

    pub fn rsm(&self) -> &KvStore {
        &self.rsm
    }

    /// Decided entries of `config` that are still in the log.
    pub fn decided(&self, config: ConfigId) -> Option<(u64, Vec<LogEntry>)> {
        let r = self.replica(config)?;
        let log = r.log();
        let start = log.offset().min(r.l_d());
        let entries = log.suffix(start).ok()?;
        Some((start, entries[..(r.l_d() - start) as usize].to_vec()))
    }

    /// Cheap fingerprint of the protocol state, printed on trace lines.
    pub fn digest(&self) -> u64 {
        let mut w = crate::codec::Writer::new();
        for (c, i) in &self.instances {
            let r = &i.replica;
            w.u64(c.0).u64(r.n_prom().ballot.0).u64(r.n_a().ballot.0).u64(r.log().len()).u64(r.l_d());
        }
        w.u64(self.rsm.applied());
        crate::fnv64(&w.into_bytes())
    }

    fn finish(&mut self, result: Result<()>, storage: &mut dyn Storage) {
        let mut result = result;
        while result.is_ok() && !self.dead && !self.markers.is_empty() {
            let markers = std::mem::take(&mut self.markers);
            for (config, cmd) in markers {
                result = self.propose_marker(storage, config, cmd);
                if result.is_err() || self.dead {
                    break;
                }
            }
        }
        if let Err(e) = result {
            self.out.push(Output::Error(e.to_string()));
        }
    }

    fn done(&mut self, result: Result<()>, storage: &mut dyn Storage) -> Vec<Output> {
        self.finish(result, storage);
        std::mem::take(&mut self.out)
    }

    fn persist(&mut self, storage: &mut dyn Storage, config: ConfigId, record: Record) -> Result<bool> {
        if self.dead {
            return Ok(false);
        }
        if let Some(b) = self.persist_budget.as_mut() {
            if *b == 0 {
                self.dead = true;
                self.out.push(Output::Crashed);
                return Ok(false);
            }
            *b -= 1;
        }
        storage.write(config, &record)?;
        self.out.push(Output::Persist { config, record });
        Ok(true)
    }

    fn arm_ble(&mut self, config: ConfigId) {
        if let Some(i) = self.instances.get(&config) {
            self.out.push(Output::SetTimer { after: i.ble.delay(), timer: Timer::Ble(config) });
        }
    }

    fn start_instance(
        &mut self,
        storage: &mut dyn Storage,
        config: ConfigId,
        members: BTreeSet<ProcessId>,
        sigma_len: u64,
        base: Option<StoredSnapshot>,
        kind: StartKind,
    ) -> Result<()> {
        let state = PersistentState {
            config,
            members: members.clone(),
            sigma_len,
            durable: Durable::initial(config, sigma_len),
            snapshot: base.clone(),
        };
        if !self.persist(storage, config, Record::Init(state))? {
            return Ok(());
        }
        let rc = self.replica_config(config, members.clone(), sigma_len);
        let replica = match kind {
            StartKind::Initial => Replica::new(rc),
            _ => Replica::recover(rc, Durable::initial(config, sigma_len)),
        }
        .with_mutation(self.cfg.mutation);
        let ble = Ble::new(self.cfg.me, members.clone(), self.cfg.delta, Ballot(0), self.cfg.cap)?;
        let inst = Instance {
            replica,
            ble,
            ledger: SnapshotLedger::new(members, sigma_len),
            stop: None,
            confirmed: false,
            snapshot: base,
        };
        self.instances.insert(config, inst);
        self.fetching.remove(&config);
        self.out.push(Output::Started { config, sigma_len, kind });
        self.arm_ble(config);
        for (from, msg) in self.buffered.remove(&config).unwrap_or_default() {
            self.route(storage, from, config, msg)?;
            if self.dead {
                break;
            }
        }
        // Older buffers can never be served now.
        self.buffered.retain(|c, _| *c > config);
        Ok(())
    }

    /// Runs replica effects in order.
    fn exec(&mut self, storage: &mut dyn Storage, config: ConfigId, effects: Vec<Effect>) -> Result<()> {
        for e in effects {
            if self.dead {
                return Ok(());
            }
            match e {
                Effect::Persist(a) => {
                    if let crate::paxos::PersistAction::Promise(n) = &a {
                        if let Some(i) = self.instances.get_mut(&config) {
                            i.ble.observe(n.ballot);
                        }
                    }
                    self.persist(storage, config, a.into())?;
                }
                Effect::Send { to, msg } => self.out.push(Output::Send { to, config, msg }),
                Effect::Deliver { index, entry } => self.deliver(storage, config, index, entry)?,
                Effect::Stopped(ss) => self.on_stop_decided(storage, config, ss)?,
            }
        }
        Ok(())
    }

    fn deliver(&mut self, storage: &mut dyn Storage, config: ConfigId, index: u64, entry: LogEntry) -> Result<()> {
        self.out.push(Output::Deliver { config, index, entry: entry.clone(), replay: false });
        if index < self.rsm.applied() {
            // Already covered by a fetched snapshot.
            return Ok(());
        }
        let applied = self.rsm.apply(&entry, index)?;
        let leading = self.instances.get(&config).is_some_and(|i| i.replica.is_leader() && i.replica.phase() == Phase::Accept);
        if let (LogEntry::Normal(cmd), Some(resp)) = (&entry, applied.response()) {
            if leading {
                self.out.push(Output::Reply { client: cmd.client, seq: cmd.seq, response: resp.clone() });
            }
        }
        if let LogEntry::Normal(cmd) = &entry {
            if let Some(m) = SnapshotMarker::from_command(cmd) {
                self.on_marker(storage, config, m)?;
            }
        }
        if matches!(applied, Applied::Skipped) && entry.is_stop() {
            return Ok(());
        }
        if let Some(every) = self.cfg.snapshot_every {
            if self.rsm.applied() >= self.last_snapshot + every {
                self.take_snapshot(storage, config)?;
            }
        }
        Ok(())
    }

    fn take_snapshot(&mut self, storage: &mut dyn Storage, config: ConfigId) -> Result<()> {
        let l_k = self.rsm.applied();
        let snap = self.rsm.take_snapshot(l_k)?;
        let stored = StoredSnapshot { l_k, blob: snap.to_blob() };
        if !self.persist(storage, config, Record::Snapshot(stored.clone()))? {
            return Ok(());
        }
        self.last_snapshot = l_k;
        if let Some(i) = self.instances.get_mut(&config) {
            i.snapshot = Some(stored);
        }
        let marker = SnapshotMarker { replica: self.cfg.me, k: l_k, l_k };
        self.markers.push((config, marker.to_command()));
        Ok(())
    }

    fn propose_marker(&mut self, storage: &mut dyn Storage, config: ConfigId, cmd: Command) -> Result<()> {
        let Some(inst) = self.instances.get_mut(&config) else { return Ok(()) };
        if inst.stop.is_some() {
            return Ok(());
        }
        let entry = LogEntry::Normal(cmd);
        if inst.replica.is_leader() {
            let effects = inst.replica.on_propose(entry.clone())?;
            self.out.push(Output::Proposed { config, entry });
            self.exec(storage, config, effects)
        } else if let Some((leader, _)) = inst.replica.leader() {
            self.out.push(Output::Proposed { config, entry: entry.clone() });
            self.out.push(Output::Send { to: leader, config, msg: Message::Forward { entry } });
            Ok(())
        } else {
            Ok(())
        }
    }

    fn on_marker(&mut self, storage: &mut dyn Storage, config: ConfigId, m: SnapshotMarker) -> Result<()> {
        let Some(inst) = self.instances.get_mut(&config) else { return Ok(()) };
        let Some(t) = inst.ledger.on_snapshot_decided(m.replica, m.k, m.l_k) else { return Ok(()) };
        if t > inst.replica.l_d() || t <= inst.replica.log().offset() {
            return Ok(());
        }
        if self.persist(storage, config, Record::Truncate(t))? {
            if let Some(inst) = self.instances.get_mut(&config) {
                inst.replica.truncate(t)?;
            }
        }
        Ok(())
    }

    fn on_stop_decided(&mut self, storage: &mut dyn Storage, config: ConfigId, ss: StopSign) -> Result<()> {
        let sigma_len = match self.instances.get_mut(&config) {
            Some(inst) => {
                inst.stop = Some(ss.clone());
                inst.replica.l_d()
            }
            None => return Ok(()),
        };
        if self.cfg.snapshot_every.is_some() && self.rsm.applied() == sigma_len && self.last_snapshot < sigma_len {
            let stored = StoredSnapshot { l_k: sigma_len, blob: self.rsm.state_blob() };
            if !self.persist(storage, config, Record::Snapshot(stored.clone()))? {
                return Ok(());
            }
            self.last_snapshot = sigma_len;
            if let Some(i) = self.instances.get_mut(&config) {
                i.snapshot = Some(stored);
            }
        }
        self.after_stop(storage, config, ss)
    }

    /// Local hand-off to the next configuration and offers to joiners.
    fn after_stop(&mut self, storage: &mut dyn Storage, config: ConfigId, ss: StopSign) -> Result<()> {
        let next = ss.next_config;
        let members = self.instances[&config].replica.members().clone();
        let sigma_len = self.instances[&config].replica.l_d();
        if ss.processes.contains(&self.cfg.me) && self.newest().is_some_and(|n| n < next) {
            if self.rsm.applied() != sigma_len {
                return Err(invalid(format!("store applied {} entries at stop {sigma_len}", self.rsm.applied())));
            }
            let base = StoredSnapshot { l_k: sigma_len, blob: self.rsm.state_blob() };
            self.start_instance(storage, next, ss.processes.clone(), sigma_len, Some(base), StartKind::Local)?;
            if let Some(i) = self.instances.get_mut(&config) {
                i.confirmed = true;
            }
        }
        for &j in ss.processes.difference(&members) {
            if j != self.cfg.me {
                self.out.push(Output::Send { to: j, config: next, msg: Message::StateOffer { config: next } });
            }
        }
        Ok(())
    }

    fn package(&self, config: ConfigId) -> Result<Option<TransferPackage>> {
        let Some(prev) = config.0.checked_sub(1).map(ConfigId) else { return Ok(None) };
        let Some(inst) = self.instances.get(&prev) else { return Ok(None) };
        let Some(stop) = inst.stop.clone().filter(|s| s.next_config == config) else { return Ok(None) };
        let sigma_len = inst.replica.l_d();
        let (l_k, base) = match &inst.snapshot {
            Some(s) => (s.l_k, Some((s.l_k, s.blob.clone()))),
            None => (0, None),
        };
        let entries = inst.replica.log().suffix(l_k)?[..(sigma_len - l_k) as usize].to_vec();
        Ok(Some(TransferPackage { sigma_len, stop, base, entries }))
    }

    fn install(&mut self, storage: &mut dyn Storage, from: ProcessId, config: ConfigId, p: TransferPackage) -> Result<()> {
        p.validate()?;
        let (l_k, snap) = match &p.base {
            Some((lk, blob)) => (*lk, RsmSnapshot::from_blob(0, *lk, blob).map_err(|e| invalid(e.to_string()))?),
            None => (0, KvStore::new().take_snapshot(0)?),
        };
        let rsm = KvStore::restore(&snap, &p.entries, l_k)?;
        self.out.push(Output::Fetched { config, from, package: p.clone() });
        let base = StoredSnapshot { l_k: p.sigma_len, blob: rsm.state_blob() };
        self.rsm = rsm;
        self.last_snapshot = p.sigma_len;
        self.start_instance(storage, config, p.stop.processes.clone(), p.sigma_len, Some(base), StartKind::Fetched(from))?;
        if !self.dead {
            self.out.push(Output::Send { to: from, config, msg: Message::StateAck { config } });
        }
        Ok(())
    }

    fn wants(&self, config: ConfigId) -> bool {
        !self.instances.contains_key(&config) && self.newest().is_none_or(|n| config > n)
    }

    fn arm_fetch(&mut self, config: ConfigId, after: u64) {
        let f = self.fetching.entry(config).or_default();
        if !f.armed {
            f.armed = true;
            self.out.push(Output::SetTimer { after, timer: Timer::Fetch(config) });
        }
    }

    pub fn on_message(&mut self, storage: &mut dyn Storage, from: ProcessId, config: ConfigId, msg: Message) -> Vec<Output> {
        if self.dead {
            return Vec::new();
        }
        if !self.cfg.universe.contains(&from) {
            self.out.push(Output::Note(format!("dropped message from unknown process {from}")));
            return std::mem::take(&mut self.out);
        }
        let r = self.route(storage, from, config, msg);
        self.done(r, storage)
    }

    fn route(&mut self, storage: &mut dyn Storage, from: ProcessId, config: ConfigId, msg: Message) -> Result<()> {
        match msg {
            Message::StateOffer { config: c } => {
                if self.wants(c) {
                    let f = self.fetching.entry(c).or_default();
                    f.offers.retain(|&p| p != from);
                    f.offers.insert(0, from);
                    self.out.push(Output::Send { to: from, config: c, msg: Message::StateRequest { config: c } });
                    let after = self.cfg.fetch_after;
                    self.arm_fetch(c, after);
                }
                return Ok(());
            }
            Message::StateRequest { config: c } => {
                if let Some(package) = self.package(c)? {
                    self.out.push(Output::Send { to: from, config: c, msg: Message::StateChunk { config: c, package } });
                }
                return Ok(());
            }
            Message::StateChunk { config: c, package } => {
                if self.wants(c) && package.stop.next_config == c && package.stop.processes.contains(&self.cfg.me) {
                    self.install(storage, from, c, package)?;
                }
                return Ok(());
            }
            Message::StateAck { config: c } => {
                if let Some(i) = c.0.checked_sub(1).and_then(|p| self.instances.get_mut(&ConfigId(p))) {
                    i.confirmed = true;
                }
                return Ok(());
            }
            _ => {}
        }
        let Some(inst) = self.instances.get_mut(&config) else {
            if self.wants(config) {
                let buf = self.buffered.entry(config).or_default();
                if buf.len() < BUFFER_CAP {
                    buf.push((from, msg));
                }
                let after = self.cfg.fetch_after;
                self.arm_fetch(config, after);
            } else {
                self.out.push(Output::Note(format!("dropped {} for retired configuration {config}", msg.name())));
            }
            return Ok(());
        };
        match msg {
            Message::HeartbeatRequest { round, max_ballot } => {
                if inst.ble.processes_contains(from) {
                    let (to, reply) = inst.ble.on_heartbeat_request(from, round, max_ballot);
                    self.out.push(Output::Send { to, config, msg: reply });
                }
                Ok(())
            }
            Message::HeartbeatReply { round, ballot } => {
                if inst.ble.processes_contains(from) {
                    inst.ble.on_heartbeat_reply(from, round, ballot);
                }
                Ok(())
            }
            Message::Forward { entry } => {
                if inst.stop.is_none() && inst.replica.is_leader() {
                    let effects = inst.replica.on_propose(entry)?;
                    self.exec(storage, config, effects)?;
                }
                Ok(())
            }
            msg => {
                let effects = inst.replica.on_message(from, msg)?;
                self.exec(storage, config, effects)
            }
        }
    }

    pub fn on_timer(&mut self, storage: &mut dyn Storage, timer: Timer) -> Vec<Output> {
        if self.dead {
            return Vec::new();
        }
        let r = match timer {
            Timer::Ble(c) => self.ble_timeout(storage, c),
            Timer::Fetch(c) => {
                self.fetch_timeout(c);
                Ok(())
            }
        };
        self.done(r, storage)
    }

    fn ble_timeout(&mut self, storage: &mut dyn Storage, config: ConfigId) -> Result<()> {
        let Some(inst) = self.instances.get_mut(&config) else { return Ok(()) };
        if inst.stop.is_some() {
            return Ok(());
        }
        let (reqs, event) = inst.ble.on_timeout();
        for (to, msg) in reqs {
            self.out.push(Output::Send { to, config, msg });
        }
        self.arm_ble(config);
        if let Some(ev) = event {
            self.out.push(Output::Leader { config, event: ev });
            let inst = self.instances.get_mut(&config).expect("instance checked above");
            let effects = inst.replica.on_leader(ev.process, ev.ballot)?;
            self.exec(storage, config, effects)?;
        }
        Ok(())
    }

    fn fetch_timeout(&mut self, config: ConfigId) {
        if !self.wants(config) {
            self.fetching.remove(&config);
            return;
        }
        let me = self.cfg.me;
        let f = self.fetching.entry(config).or_default();
        let mut candidates = f.offers.clone();
        candidates.extend(self.cfg.universe.iter().copied().filter(|p| *p != me && !f.offers.contains(p)));
        if candidates.is_empty() {
            f.armed = false;
            return;
        }
        let to = candidates[f.attempt as usize % candidates.len()];
        let backoff = (FETCH_BACKOFF << f.attempt.min(8)).min(FETCH_BACKOFF_MAX);
        f.attempt += 1;
        self.out.push(Output::Send { to, config, msg: Message::StateRequest { config } });
        self.out.push(Output::SetTimer { after: backoff, timer: Timer::Fetch(config) });
    }

    pub fn on_connection_lost(&mut self, peer: ProcessId) -> Vec<Output> {
        if self.dead {
            return Vec::new();
        }
        for inst in self.instances.values_mut() {
            if inst.replica.members().contains(&peer) {
                inst.replica.on_connection_lost(peer);
            }
        }
        std::mem::take(&mut self.out)
    }

    pub fn on_session_up(&mut self, storage: &mut dyn Storage, peer: ProcessId) -> Vec<Output> {
        if self.dead {
            return Vec::new();
        }
        let mut r = Ok(());
        for c in self.configs() {
            let inst = self.instances.get_mut(&c).expect("listed config");
            if inst.replica.members().contains(&peer) {
                let effects = inst.replica.on_session_up(peer);
                r = self.exec(storage, c, effects);
                if r.is_err() {
                    break;
                }
            }
            let inst = &self.instances[&c];
            if let Some(ss) = &inst.stop {
                if ss.processes.contains(&peer) && !inst.replica.members().contains(&peer) {
                    let next = ss.next_config;
                    self.out.push(Output::Send { to: peer, config: next, msg: Message::StateOffer { config: next } });
                }
            }
        }
        self.done(r, storage)
    }

    /// Client command. Only the leader of the active configuration acts;
    /// a retry of an already decided command is answered from the client
    /// table.
    pub fn propose(&mut self, storage: &mut dyn Storage, cmd: Command) -> Vec<Output> {
        if self.dead {
            return Vec::new();
        }
        let Some(config) = self.active() else { return Vec::new() };
        let inst = self.instances.get_mut(&config).expect("active instance");
        if !inst.replica.is_leader() {
            return Vec::new();
        }
        if let Some(rec) = self.rsm.clients().get(&cmd.client) {
            if rec.seq == cmd.seq {
                if inst.replica.phase() == Phase::Accept {
                    self.out.push(Output::Reply { client: cmd.client, seq: cmd.seq, response: rec.response.clone() });
                }
                return std::mem::take(&mut self.out);
            }
            if rec.seq > cmd.seq {
                return Vec::new();
            }
        }
        let r = inst.replica.on_propose(LogEntry::Normal(cmd));
        let r = r.and_then(|effects| self.exec(storage, config, effects));
        self.done(r, storage)
    }

    /// Proposes the stop-sign that ends the active configuration.
    pub fn propose_stop(&mut self, storage: &mut dyn Storage, ss: StopSign) -> Vec<Output> {
        if self.dead {
            return Vec::new();
        }
        let Some(config) = self.active() else { return Vec::new() };
        if ss.next_config != config.next() {
            return Vec::new();
        }
        let inst = self.instances.get_mut(&config).expect("active instance");
        if !inst.replica.is_leader() {
            return Vec::new();
        }
        let entry = LogEntry::Stop(ss);
        let r = inst.replica.on_propose(entry.clone());
        self.out.push(Output::Proposed { config, entry });
        let r = r.and_then(|effects| self.exec(storage, config, effects));
        self.done(r, storage)
    }

    /// Tears down a stopped configuration once its final sequence is known
    /// to have reached the next one.
    pub fn cleanup(&mut self, storage: &mut dyn Storage, config: ConfigId) -> Result<Vec<Output>> {
        if self.dead {
            return Ok(Vec::new());
        }
        let inst = self.instances.get(&config).ok_or_else(|| invalid(format!("no instance for {config}")))?;
        if self.active() == Some(config) {
            return Err(invalid(format!("{config} is the active configuration")));
        }
        let superseded = self.newest().is_some_and(|n| n > config);
        if !superseded && !(inst.stop.is_some() && inst.confirmed) {
            return Err(invalid(format!("{config} has no confirmed successor yet")));
        }
        storage.destroy(config).map_err(Error::from)?;
        self.instances.remove(&config);
        self.out.push(Output::CleanedUp { config });
        Ok(std::mem::take(&mut self.out))
    }
}

fn decided_stop(r: &Replica) -> Option<StopSign> {
    let l_d = r.l_d();
    if l_d == 0 || l_d <= r.log().offset() {
        return None;
    }
    r.log().get(l_d - 1).ok().and_then(|e| e.as_stop().cloned())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::storage::VolatileStorage;

    fn procs(ids: &[u64]) -> BTreeSet<ProcessId> {
        ids.iter().map(|&i| ProcessId(i)).collect()
    }

    fn host(me: u64, ids: &[u64], storage: &mut VolatileStorage) -> (ProcessHost, Vec<Output>) {
        ProcessHost::boot(HostConfig::new(ProcessId(me), procs(&[1, 2, 3, 4])), &procs(ids), storage, None)
    }

    #[test]
    fn member_of_config0_starts_with_empty_sequence() {
        let mut s = VolatileStorage::new();
        let (h, out) = host(1, &[1, 2, 3], &mut s);
        assert!(out.contains(&Output::Started { config: ConfigId(0), sigma_len: 0, kind: StartKind::Initial }));
        assert_eq!(h.active(), Some(ConfigId(0)));
        assert_eq!(h.replica(ConfigId(0)).unwrap().l_d(), 0);
    }

    #[test]
    fn outsider_waits_and_buffers() {
        let mut s = VolatileStorage::new();
        let (mut h, out) = host(4, &[1, 2, 3], &mut s);
        assert!(out.is_empty());
        let n = crate::types::Round::new(ConfigId(1), Ballot(1025));
        let out = h.on_message(&mut s, ProcessId(1), ConfigId(1), Message::Prepare { n, ld: 0, na: n });
        assert_eq!(out, vec![Output::SetTimer { after: FETCH_AFTER, timer: Timer::Fetch(ConfigId(1)) }]);
        let out = h.on_timer(&mut s, Timer::Fetch(ConfigId(1)));
        assert!(out.iter().any(|o| matches!(o, Output::Send { msg: Message::StateRequest { .. }, .. })));
    }

    #[test]
    fn unknown_sender_is_dropped() {
        let mut s = VolatileStorage::new();
        let (mut h, _) = host(1, &[1, 2, 3], &mut s);
        let out = h.on_message(&mut s, ProcessId(9), ConfigId(0), Message::PrepareReq);
        assert!(matches!(out.as_slice(), [Output::Note(_)]));
    }

    #[test]
    fn cleanup_of_active_is_rejected() {
        let mut s = VolatileStorage::new();
        let (mut h, _) = host(1, &[1, 2, 3], &mut s);
        assert!(h.cleanup(&mut s, ConfigId(0)).is_err());
    }

    #[test]
    fn single_node_decides_stop_and_hands_off_locally() {
        let mut s = VolatileStorage::new();
        let (mut h, _) = host(1, &[1], &mut s);
        let out = h.on_timer(&mut s, Timer::Ble(ConfigId(0)));
        assert!(out.iter().any(|o| matches!(o, Output::Leader { .. })));
        let cmd = Command::new(ClientId(1), 1, crate::rsm::KvOp::put("k", b"v".to_vec()).encode());
        let out = h.propose(&mut s, cmd);
        assert!(out.iter().any(|o| matches!(o, Output::Reply { seq: 1, .. })));
        let out = h.propose_stop(&mut s, StopSign::new(ConfigId(1), procs(&[1, 2])));
        assert!(out.contains(&Output::Started { config: ConfigId(1), sigma_len: 2, kind: StartKind::Local }));
        assert!(out.contains(&Output::Send { to: ProcessId(2), config: ConfigId(1), msg: Message::StateOffer { config: ConfigId(1) } }));
        let r = h.replica(ConfigId(1)).unwrap();
        assert_eq!((r.l_d(), r.n_prom()), (2, crate::types::Round::initial(ConfigId(1))));
        assert_eq!(h.active(), Some(ConfigId(1)));
        // The old instance still serves the final sequence.
        let out = h.on_message(&mut s, ProcessId(2), ConfigId(1), Message::StateRequest { config: ConfigId(1) });
        let Some(Output::Send { msg: Message::StateChunk { package, .. }, .. }) = out.first() else { panic!("{out:?}") };
        assert_eq!(package.sigma_len, 2);
        assert_eq!(package.entries.len(), 2);
        assert!(h.cleanup(&mut s, ConfigId(0)).is_ok());
    }

    #[test]
    fn restart_replays_decided_entries_into_the_store() {
        let mut s = VolatileStorage::new();
        let (mut h, _) = host(1, &[1], &mut s);
        h.on_timer(&mut s, Timer::Ble(ConfigId(0)));
        for i in 1..=3 {
            let cmd = Command::new(ClientId(1), i, crate::rsm::KvOp::put(format!("k{i}"), vec![i as u8]).encode());
            h.propose(&mut s, cmd);
        }
        let digest = h.rsm().digest();
        let (h2, out) = host(1, &[1], &mut s);
        assert!(out.contains(&Output::Recovered { decided: vec![(ConfigId(0), 3)] }));
        assert_eq!(h2.rsm().digest(), digest);
        assert_eq!(h2.replica(ConfigId(0)).unwrap().phase(), Phase::Recover);
    }

    #[test]
    fn persist_budget_crashes_before_the_write() {
        let mut s = VolatileStorage::new();
        let (h, out) = ProcessHost::boot(HostConfig::new(ProcessId(1), procs(&[1])), &procs(&[1]), &mut s, Some(0));
        assert!(h.is_dead());
        assert_eq!(out, vec![Output::Crashed]);
        assert!(s.configs().unwrap().is_empty());
    }
}
