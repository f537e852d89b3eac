//! Deterministic discrete-event simulation of a cluster.
//!
//! Events are processed in `(time, sequence)` order from a single queue, so
//! a run is a pure function of the scenario and its seed. Links between
//! processes are FIFO sessions: a message is delivered in order unless its
//! session is cut by a drop, a crash or a partition, in which case a
//! seeded-random suffix of the in-flight messages is lost.

use std::cmp::Reverse;
use std::collections::{BTreeMap, BTreeSet, BinaryHeap, VecDeque};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{invalid, Error, Result};
use crate::message::Message;
use crate::orchestrator::{HostConfig, Output, ProcessHost, Timer};
use crate::rsm::{KvOp, Response};
use crate::scenario::{ClientOp, Directive, Scenario, StorageKind, Target};
use crate::storage::{FileStorage, Storage, VolatileStorage};
use crate::trace::{Event, PersistNote, Trace};
use crate::types::{ClientId, Command, ConfigId, LogEntry, ProcessId, StopSign};

const STOP_RETRY: u64 = 20;

/// Crash one process right before its `persists`-th storage write
/// (counting from zero) and bring it back `recover_after` units later.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CrashPoint {
    pub process: ProcessId,
    pub persists: u64,
    pub recover_after: u64,
}

#[derive(Debug, Clone, Default)]
pub struct SimOptions {
    pub crash_point: Option<CrashPoint>,
}

#[derive(Debug)]
enum Ev {
    Net { from: ProcessId, to: ProcessId, id: u64 },
    Timer { p: ProcessId, inc: u64, timer: Timer },
    Reconnect { a: ProcessId, b: ProcessId },
    Directive(usize),
    AutoRecover(ProcessId),
    ClientRequest { to: ProcessId, cmd: Command },
    ClientReply { from: ProcessId, client: ClientId, seq: u64, response: Response },
    ClientRetry { client: ClientId, seq: u64 },
    ClientDup { client: ClientId, seq: u64 },
    ClientStart,
    StopRetry,
}

#[derive(Debug)]
struct Queued {
    t: u64,
    seq: u64,
    ev: Ev,
}

impl PartialEq for Queued {
    fn eq(&self, o: &Self) -> bool {
        (self.t, self.seq) == (o.t, o.seq)
    }
}
impl Eq for Queued {}
impl PartialOrd for Queued {
    fn partial_cmp(&self, o: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(o))
    }
}
impl Ord for Queued {
    fn cmp(&self, o: &Self) -> std::cmp::Ordering {
        (self.t, self.seq).cmp(&(o.t, o.seq))
    }
}

struct Slot {
    host: Option<ProcessHost>,
    storage: Box<dyn Storage>,
    inc: u64,
}

#[derive(Default)]
struct Link {
    up: bool,
    blocked: bool,
    session: u64,
    inflight: [VecDeque<(u64, ConfigId, Message)>; 2],
    last: [u64; 2],
}

fn key(a: ProcessId, b: ProcessId) -> ((ProcessId, ProcessId), usize) {
    if a < b {
        ((a, b), 0)
    } else {
        ((b, a), 1)
    }
}

struct Client {
    queue: VecDeque<Vec<u8>>,
    seq: u64,
    pending: Option<Command>,
    seen: BTreeMap<u64, Response>,
}

/// State of one process when the run ended.
#[derive(Debug, Clone)]
pub struct FinalState {
    pub alive: bool,
    pub host: Option<ProcessHost>,
}

#[derive(Debug)]
pub struct SimResult {
    pub trace: Trace,
    pub finals: BTreeMap<ProcessId, FinalState>,
    /// Commands each client completed.
    pub completed: BTreeMap<ClientId, u64>,
}

pub struct Simulation {
    sc: Scenario,
    opts: SimOptions,
    rng: ChaCha8Rng,
    now: u64,
    seq: u64,
    queue: BinaryHeap<Reverse<Queued>>,
    slots: BTreeMap<ProcessId, Slot>,
    links: BTreeMap<(ProcessId, ProcessId), Link>,
    next_msg: u64,
    clients: BTreeMap<ClientId, Client>,
    crashed: Vec<ProcessId>,
    reconfigs: u64,
    pending_stop: Option<StopSign>,
    stops_decided: BTreeSet<ConfigId>,
    completed: BTreeMap<ClientId, u64>,
    trace: Trace,
}

impl Simulation {
    pub fn new(sc: Scenario, opts: SimOptions) -> Result<Simulation> {
        sc.validate().map_err(|e| invalid(e.to_string()))?;
        let mut slots = BTreeMap::new();
        for &p in &sc.processes {
            let storage: Box<dyn Storage> = match &sc.storage {
                StorageKind::Volatile => Box::new(VolatileStorage::new()),
                StorageKind::File(root) => {
                    let dir = root.join(format!("p{}", p.0));
                    if dir.exists() {
                        std::fs::remove_dir_all(&dir).map_err(|e| invalid(format!("{}: {e}", dir.display())))?;
                    }
                    Box::new(FileStorage::open(dir)?)
                }
            };
            slots.insert(p, Slot { host: None, storage, inc: 0 });
        }
        let mut links = BTreeMap::new();
        for &a in &sc.processes {
            for &b in &sc.processes {
                if a < b {
                    links.insert((a, b), Link::default());
                }
            }
        }
        Ok(Simulation {
            rng: ChaCha8Rng::seed_from_u64(sc.seed),
            sc,
            opts,
            now: 0,
            seq: 0,
            queue: BinaryHeap::new(),
            slots,
            links,
            next_msg: 0,
            clients: BTreeMap::new(),
            crashed: Vec::new(),
            reconfigs: 0,
            pending_stop: None,
            stops_decided: BTreeSet::new(),
            completed: BTreeMap::new(),
            trace: Trace::new(),
        })
    }

    /// Runs a scenario to its end.
    pub fn run(sc: Scenario, opts: SimOptions) -> Result<SimResult> {
        let mut sim = Simulation::new(sc, opts)?;
        sim.start();
        while sim.step() {}
        Ok(sim.finish())
    }

    fn schedule(&mut self, at: u64, ev: Ev) {
        self.seq += 1;
        self.queue.push(Reverse(Queued { t: at, seq: self.seq, ev }));
    }

    fn host_cfg(&self, p: ProcessId) -> HostConfig {
        HostConfig {
            me: p,
            universe: self.sc.processes.clone(),
            dedup: self.sc.dedup,
            delta: self.sc.delta,
            snapshot_every: self.sc.snapshot_every,
            cap: crate::types::BALLOT_CAP,
            mutation: self.sc.mutation,
            fetch_after: crate::orchestrator::FETCH_AFTER,
        }
    }

    fn alive(&self, p: ProcessId) -> bool {
        self.slots.get(&p).is_some_and(|s| s.host.is_some())
    }

    fn push(&mut self, event: Event, digest: u64) {
        self.trace.push(self.now, event, digest);
    }

    /// Boots every process, opens all sessions and queues the script.
    pub fn start(&mut self) {
        self.generate_workload();
        let procs: Vec<ProcessId> = self.sc.processes.iter().copied().collect();
        for &p in &procs {
            let budget = self.opts.crash_point.filter(|c| c.process == p).map(|c| c.persists);
            self.boot(p, budget);
        }
        let pairs: Vec<(ProcessId, ProcessId)> = self.links.keys().copied().collect();
        for (a, b) in pairs {
            self.open_session(a, b);
        }
        for i in 0..self.sc.directives.len() {
            let t = self.sc.directives[i].t;
            self.schedule(t, Ev::Directive(i));
        }
        if !self.clients.is_empty() {
            self.schedule(self.sc.client_start, Ev::ClientStart);
        }
    }

    fn generate_workload(&mut self) {
        let n = self.sc.clients;
        for c in 1..=n {
            self.clients.insert(ClientId(c), Client { queue: VecDeque::new(), seq: 0, pending: None, seen: BTreeMap::new() });
        }
        for i in 0..self.sc.commands {
            let c = ClientId(i % n + 1);
            let key = format!("k{}", self.rng.gen_range(0..self.sc.keys));
            let op = if self.rng.gen_bool(self.sc.get_rate) {
                KvOp::get(key)
            } else {
                KvOp::put(key, format!("{}.{}", c.0, i).into_bytes())
            };
            self.clients.get_mut(&c).expect("client exists").queue.push_back(op.encode());
        }
    }

    fn boot(&mut self, p: ProcessId, budget: Option<u64>) {
        let cfg = self.host_cfg(p);
        let config0 = self.sc.config0.clone();
        let slot = self.slots.get_mut(&p).expect("known process");
        if let Err(e) = slot.storage.reopen() {
            self.push(Event::Error { p: Some(p), msg: format!("storage reopen failed: {e}") }, 0);
            return;
        }
        let (host, out) = ProcessHost::boot(cfg, &config0, slot.storage.as_mut(), budget);
        slot.host = Some(host);
        self.apply(p, out);
    }

    /// Processes the next event. Returns false when the run is over.
    pub fn step(&mut self) -> bool {
        let Some(Reverse(q)) = self.queue.pop() else { return false };
        if q.t > self.sc.end {
            return false;
        }
        self.now = q.t;
        match q.ev {
            Ev::Net { from, to, id } => self.on_net(from, to, id),
            Ev::Timer { p, inc, timer } => {
                let slot = self.slots.get_mut(&p).expect("known process");
                if slot.inc == inc {
                    if let Some(h) = slot.host.as_mut() {
                        let out = h.on_timer(slot.storage.as_mut(), timer);
                        self.apply(p, out);
                    }
                }
            }
            Ev::Reconnect { a, b } => self.reconnect(a, b),
            Ev::Directive(i) => self.directive(i),
            Ev::AutoRecover(p) => self.recover(p),
            Ev::ClientRequest { to, cmd } => {
                let slot = self.slots.get_mut(&to).expect("known process");
                if let Some(h) = slot.host.as_mut() {
                    let out = h.propose(slot.storage.as_mut(), cmd);
                    self.apply(to, out);
                }
            }
            Ev::ClientReply { from, client, seq, response } => self.on_reply(from, client, seq, response),
            Ev::ClientRetry { client, seq } => {
                if self.clients[&client].pending.as_ref().is_some_and(|c| c.seq == seq) {
                    self.send_pending(client, true);
                }
            }
            Ev::ClientDup { client, seq } => {
                if self.clients[&client].pending.as_ref().is_some_and(|c| c.seq == seq) {
                    self.send_pending(client, false);
                }
            }
            Ev::ClientStart => {
                let ids: Vec<ClientId> = self.clients.keys().copied().collect();
                for c in ids {
                    self.next_command(c);
                }
            }
            Ev::StopRetry => self.retry_stop(),
        }
        true
    }

    /// Appends the final state lines and returns the result.
    pub fn finish(mut self) -> SimResult {
        self.now = self.sc.end;
        let mut finals = BTreeMap::new();
        let procs: Vec<ProcessId> = self.sc.processes.iter().copied().collect();
        for p in procs {
            let host = self.slots[&p].host.clone();
            let (event, digest) = match &host {
                Some(h) => {
                    let decided = h.configs().into_iter().map(|c| (c, h.replica(c).map_or(0, |r| r.l_d()))).collect();
                    (
                        Event::Final {
                            p,
                            alive: true,
                            active: h.newest(),
                            decided,
                            applied: h.rsm().applied(),
                            kv: h.rsm().digest(),
                        },
                        h.digest(),
                    )
                }
                None => (Event::Final { p, alive: false, active: None, decided: Vec::new(), applied: 0, kv: 0 }, 0),
            };
            self.push(event, digest);
            finals.insert(p, FinalState { alive: host.is_some(), host });
        }
        SimResult { trace: self.trace, finals, completed: self.completed }
    }

    fn digest(&self, p: ProcessId) -> u64 {
        self.slots[&p].host.as_ref().map_or(0, ProcessHost::digest)
    }

    fn apply(&mut self, p: ProcessId, out: Vec<Output>) {
        let d = self.digest(p);
        let mut crashed = false;
        for o in out {
            match o {
                Output::Send { to, config, msg } => self.send(p, to, config, msg, d),
                Output::SetTimer { after, timer } => {
                    let inc = self.slots[&p].inc;
                    self.schedule(self.now + after, Ev::Timer { p, inc, timer });
                }
                Output::Persist { config, record } => {
                    self.push(Event::Persist { p, config, note: PersistNote::from(&record) }, d)
                }
                Output::Deliver { config, index, entry, replay } => {
                    if let LogEntry::Stop(_) = &entry {
                        self.stops_decided.insert(config);
                    }
                    self.push(Event::Deliver { p, config, index, entry, replay }, d)
                }
                Output::Leader { config, event } => {
                    self.push(Event::Leader { p, config, leader: event.process, ballot: event.ballot }, d)
                }
                Output::Proposed { config, entry } => self.push(Event::Propose { p, config, entry }, d),
                Output::Started { config, sigma_len, kind } => self.push(Event::Start { p, config, sigma_len, kind }, d),
                Output::Fetched { config, from, package } => self.push(Event::Fetched { p, config, from, package }, d),
                Output::Reply { client, seq, response } => {
                    let at = self.now + self.sc.latency;
                    self.schedule(at, Ev::ClientReply { from: p, client, seq, response });
                }
                Output::CleanedUp { .. } => {}
                Output::Recovered { decided } => self.push(Event::Recover { p, decided }, d),
                Output::Note(msg) => self.push(Event::Note { p: Some(p), msg }, d),
                Output::Error(msg) => self.push(Event::Error { p: Some(p), msg }, d),
                Output::Crashed => crashed = true,
            }
        }
        if crashed {
            self.crash(p);
            if let Some(cp) = self.opts.crash_point.filter(|c| c.process == p) {
                self.schedule(self.now + cp.recover_after, Ev::AutoRecover(p));
            }
        }
    }

    fn send(&mut self, from: ProcessId, to: ProcessId, config: ConfigId, msg: Message, d: u64) {
        self.push(Event::Send { from, to, config, msg: msg.clone() }, d);
        let (k, dir) = key(from, to);
        let jitter = if self.sc.jitter > 0 { self.rng.gen_range(0..=self.sc.jitter) } else { 0 };
        let at = self.now + self.sc.latency + jitter;
        let Some(link) = self.links.get_mut(&k).filter(|l| l.up) else {
            self.push(Event::Lost { from, to, config, msg }, d);
            return;
        };
        let at = at.max(link.last[dir]);
        link.last[dir] = at;
        self.next_msg += 1;
        let id = self.next_msg;
        link.inflight[dir].push_back((id, config, msg));
        self.schedule(at, Ev::Net { from, to, id });
    }

    fn on_net(&mut self, from: ProcessId, to: ProcessId, id: u64) {
        let (k, dir) = key(from, to);
        let link = self.links.get_mut(&k).expect("link exists");
        if link.inflight[dir].front().map(|m| m.0) != Some(id) {
            return;
        }
        let (_, config, msg) = link.inflight[dir].pop_front().expect("front checked");
        if !self.alive(to) {
            self.push(Event::Lost { from, to, config, msg }, 0);
            return;
        }
        let d = self.digest(to);
        self.push(Event::Recv { from, to, config, msg: msg.clone() }, d);
        let slot = self.slots.get_mut(&to).expect("known process");
        let h = slot.host.as_mut().expect("alive");
        let out = h.on_message(slot.storage.as_mut(), from, config, msg);
        self.apply(to, out);
    }

    /// Delivers what is left in flight on a session that just ended, so an
    /// endpoint never hears from the old session after learning it is gone.
    /// Replies go nowhere since the link is already down.
    fn flush(&mut self, from: ProcessId, to: ProcessId) {
        let (k, dir) = key(from, to);
        while let Some(&(id, _, _)) = self.links[&k].inflight[dir].front() {
            self.on_net(from, to, id);
        }
    }

    /// Discards a seeded suffix of one direction's in-flight queue.
    fn drop_suffix(&mut self, from: ProcessId, to: ProcessId, all: bool) -> u64 {
        let (k, dir) = key(from, to);
        let len = self.links[&k].inflight[dir].len();
        let n = if all || len == 0 { len } else { self.rng.gen_range(0..=len) };
        let link = self.links.get_mut(&k).expect("link exists");
        let lost: Vec<_> = link.inflight[dir].split_off(len - n).into_iter().collect();
        for (_, config, msg) in lost {
            self.push(Event::Lost { from, to, config, msg }, 0);
        }
        n as u64
    }

    fn cut_session(&mut self, a: ProcessId, b: ProcessId, reconnect: bool) {
        let (k, _) = key(a, b);
        if !self.links[&k].up {
            return;
        }
        let lost = self.drop_suffix(a, b, false) + self.drop_suffix(b, a, false);
        self.links.get_mut(&k).expect("link exists").up = false;
        self.push(Event::SessionDrop { a, b, lost }, 0);
        self.flush(a, b);
        self.flush(b, a);
        for (x, y) in [(a, b), (b, a)] {
            if let Some(h) = self.slots.get_mut(&x).and_then(|s| s.host.as_mut()) {
                let out = h.on_connection_lost(y);
                self.apply(x, out);
            }
        }
        if reconnect && !self.links[&k].blocked {
            self.schedule(self.now + self.sc.reconnect, Ev::Reconnect { a, b });
        }
    }

    fn open_session(&mut self, a: ProcessId, b: ProcessId) {
        let (k, _) = key(a, b);
        if !self.alive(a) || !self.alive(b) || self.links[&k].up || self.links[&k].blocked {
            return;
        }
        let link = self.links.get_mut(&k).expect("link exists");
        link.up = true;
        link.session += 1;
        self.push(Event::SessionUp { a, b }, 0);
        for (x, y) in [(a, b), (b, a)] {
            let slot = self.slots.get_mut(&x).expect("known process");
            if let Some(h) = slot.host.as_mut() {
                let out = h.on_session_up(slot.storage.as_mut(), y);
                self.apply(x, out);
            }
        }
    }

    fn reconnect(&mut self, a: ProcessId, b: ProcessId) {
        self.open_session(a, b);
    }

    fn crash(&mut self, p: ProcessId) {
        let slot = self.slots.get_mut(&p).expect("known process");
        if slot.host.take().is_none() {
            return;
        }
        slot.inc += 1;
        self.crashed.push(p);
        self.push(Event::Crash { p }, 0);
        let peers: Vec<ProcessId> = self.sc.processes.iter().copied().filter(|&q| q != p).collect();
        for q in &peers {
            let (k, _) = key(p, *q);
            if !self.links[&k].up {
                continue;
            }
            let lost = self.drop_suffix(*q, p, true) + self.drop_suffix(p, *q, false);
            self.links.get_mut(&k).expect("link exists").up = false;
            self.push(Event::SessionDrop { a: p, b: *q, lost }, 0);
            self.flush(p, *q);
        }
        for q in peers {
            if let Some(h) = self.slots.get_mut(&q).and_then(|s| s.host.as_mut()) {
                let out = h.on_connection_lost(p);
                self.apply(q, out);
            }
        }
    }

    fn recover(&mut self, p: ProcessId) {
        if self.alive(p) {
            return;
        }
        self.crashed.retain(|&q| q != p);
        self.boot(p, None);
        let peers: Vec<ProcessId> = self.sc.processes.iter().copied().filter(|&q| q != p).collect();
        for q in peers {
            self.open_session(p.min(q), p.max(q));
        }
    }

    fn leader(&self) -> Option<ProcessId> {
        self.slots
            .iter()
            .filter_map(|(&p, s)| {
                let h = s.host.as_ref()?;
                let r = h.replica(h.newest()?)?;
                r.is_leader().then(|| (r.n_l(), p))
            })
            .max()
            .map(|(_, p)| p)
    }

    fn resolve(&mut self, t: Target) -> Vec<ProcessId> {
        match t {
            Target::Process(p) => vec![p],
            Target::Leader => self.leader().into_iter().collect(),
            Target::Crashed => self.crashed.first().copied().into_iter().collect(),
            Target::All => self.crashed.clone(),
        }
    }

    fn directive(&mut self, i: usize) {
        let d = self.sc.directives[i].directive.clone();
        match d {
            Directive::Crash(t) => {
                let targets = self.resolve(t);
                if targets.is_empty() {
                    self.push(Event::Note { p: None, msg: format!("crash {t}: no such process") }, 0);
                }
                for p in targets {
                    if self.alive(p) {
                        self.crash(p);
                    } else {
                        self.push(Event::Error { p: None, msg: format!("script: crash of crashed process {p}") }, 0);
                    }
                }
            }
            Directive::Recover(t) => {
                let targets = self.resolve(t);
                if targets.is_empty() {
                    self.push(Event::Note { p: None, msg: format!("recover {t}: nothing to recover") }, 0);
                }
                for p in targets {
                    if self.alive(p) {
                        self.push(Event::Error { p: None, msg: format!("script: recover of live process {p}") }, 0);
                    } else {
                        self.recover(p);
                    }
                }
            }
            Directive::Drop(a, b) => {
                let (a, b) = (self.resolve(a).first().copied(), self.resolve(b).first().copied());
                match (a, b) {
                    (Some(a), Some(b)) if a != b => self.cut_session(a.min(b), a.max(b), true),
                    _ => self.push(Event::Note { p: None, msg: "drop: no such session".into() }, 0),
                }
            }
            Directive::Partition(mut groups) => {
                let listed: BTreeSet<ProcessId> = groups.iter().flatten().copied().collect();
                let rest: Vec<ProcessId> = self.sc.processes.difference(&listed).copied().collect();
                if !rest.is_empty() {
                    groups.push(rest);
                }
                self.push(Event::Partition { groups: groups.clone() }, 0);
                let group_of: BTreeMap<ProcessId, usize> =
                    groups.iter().enumerate().flat_map(|(i, g)| g.iter().map(move |&p| (p, i))).collect();
                let pairs: Vec<(ProcessId, ProcessId)> = self.links.keys().copied().collect();
                for (a, b) in pairs {
                    if group_of[&a] != group_of[&b] {
                        self.links.get_mut(&(a, b)).expect("link exists").blocked = true;
                        self.cut_session(a, b, false);
                    }
                }
            }
            Directive::Heal => {
                self.push(Event::Heal, 0);
                let pairs: Vec<(ProcessId, ProcessId)> = self.links.keys().copied().collect();
                for (a, b) in pairs {
                    let link = self.links.get_mut(&(a, b)).expect("link exists");
                    if link.blocked {
                        link.blocked = false;
                        self.open_session(a, b);
                    }
                }
            }
            Directive::Propose { client, op } => {
                let op = match op {
                    ClientOp::Put { key, value } => KvOp::put(key, value.into_bytes()),
                    ClientOp::Get { key } => KvOp::get(key),
                };
                let c = self.clients.entry(client).or_insert_with(|| Client {
                    queue: VecDeque::new(),
                    seq: 0,
                    pending: None,
                    seen: BTreeMap::new(),
                });
                c.queue.push_back(op.encode());
                if c.pending.is_none() {
                    self.next_command(client);
                }
            }
            Directive::Submit { client, at, count } => {
                for seq in 1..=count {
                    let op = KvOp::put(format!("s{seq}"), format!("{}.{seq}", client.0).into_bytes());
                    let cmd = Command::new(client, seq, op.encode());
                    self.push(Event::ClientSend { client, cmd: cmd.clone() }, 0);
                    if self.alive(at) {
                        self.schedule(self.now + self.sc.latency, Ev::ClientRequest { to: at, cmd });
                    }
                }
            }
            Directive::Reconfigure(set) => {
                self.reconfigs += 1;
                let ss = StopSign::new(ConfigId(self.reconfigs), set);
                self.push(Event::Reconfigure { config: ConfigId(self.reconfigs - 1), ss: ss.clone() }, 0);
                self.pending_stop = Some(ss);
                self.retry_stop();
            }
            Directive::Cleanup { config, at } => {
                let targets: Vec<ProcessId> = match at {
                    Some(p) => vec![p],
                    None => self.sc.processes.iter().copied().collect(),
                };
                for p in targets {
                    let slot = self.slots.get_mut(&p).expect("known process");
                    let Some(h) = slot.host.as_mut() else { continue };
                    if !h.configs().contains(&config) && at.is_none() {
                        continue;
                    }
                    let d = h.digest();
                    match h.cleanup(slot.storage.as_mut(), config) {
                        Ok(out) => {
                            self.push(Event::Cleanup { p, config, rejected: None }, d);
                            self.apply(p, out);
                        }
                        Err(e) => self.push(Event::Cleanup { p, config, rejected: Some(e.to_string()) }, d),
                    }
                }
            }
            Directive::End => {}
        }
    }

    fn retry_stop(&mut self) {
        let Some(ss) = self.pending_stop.clone() else { return };
        let config = ConfigId(ss.next_config.0 - 1);
        if self.stops_decided.contains(&config) {
            self.pending_stop = None;
            return;
        }
        let procs: Vec<ProcessId> = self.sc.processes.iter().copied().collect();
        for p in procs {
            let slot = self.slots.get_mut(&p).expect("known process");
            if let Some(h) = slot.host.as_mut() {
                let out = h.propose_stop(slot.storage.as_mut(), ss.clone());
                self.apply(p, out);
            }
        }
        self.schedule(self.now + STOP_RETRY, Ev::StopRetry);
    }

    fn next_command(&mut self, client: ClientId) {
        let c = self.clients.get_mut(&client).expect("client exists");
        let Some(op) = c.queue.pop_front() else { return };
        c.seq += 1;
        c.pending = Some(Command::new(client, c.seq, op));
        self.send_pending(client, true);
    }

    /// Broadcasts the pending command; `arm` schedules the retry timeout
    /// and possibly a spontaneous duplicate.
    fn send_pending(&mut self, client: ClientId, arm: bool) {
        let cmd = self.clients[&client].pending.clone().expect("pending command");
        self.push(Event::ClientSend { client, cmd: cmd.clone() }, 0);
        let procs: Vec<ProcessId> = self.sc.processes.iter().copied().collect();
        for p in procs {
            if self.alive(p) {
                self.schedule(self.now + self.sc.latency, Ev::ClientRequest { to: p, cmd: cmd.clone() });
            }
        }
        if arm {
            self.schedule(self.now + self.sc.retry, Ev::ClientRetry { client, seq: cmd.seq });
            if self.sc.dup_rate > 0.0 && self.rng.gen_bool(self.sc.dup_rate) {
                let after = self.rng.gen_range(1..=3);
                self.schedule(self.now + after, Ev::ClientDup { client, seq: cmd.seq });
            }
        }
    }

    fn on_reply(&mut self, from: ProcessId, client: ClientId, seq: u64, response: Response) {
        self.push(Event::ClientReply { client, from, seq, response: response.clone() }, 0);
        let Some(c) = self.clients.get_mut(&client) else { return };
        if let Some(prev) = c.seen.get(&seq) {
            if *prev != response {
                let msg = format!("{client} got {prev} and then {response} for seq {seq}");
                self.push(Event::Error { p: None, msg }, 0);
            }
            return;
        }
        c.seen.insert(seq, response);
        if c.pending.as_ref().is_some_and(|p| p.seq == seq) {
            c.pending = None;
            *self.completed.entry(client).or_insert(0) += 1;
            self.push(Event::ClientDone { client, seq }, 0);
            self.next_command(client);
        }
    }
}

/// Runs a scenario and reports storage or validation failures as errors.
pub fn simulate(sc: &Scenario) -> Result<SimResult, Error> {
    Simulation::run(sc.clone(), SimOptions::default())
}
