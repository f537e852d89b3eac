//! Simulation traces: one record per observable event.
//!
//! Text form, one line per record:
//!
//! ```text
//! t=<time> <kind> <subject> <config> <payload> | <digest>
//! ```
//!
//! `subject` is `p1->p2`, `p1`, `k3` or `-`; `config` is `c0` or `-`;
//! `digest` is 16 hex digits fingerprinting the acting process after the
//! event (zero for events without one). Payloads reuse the message and entry
//! text forms; command payload bytes appear only on `client-send` lines.

use std::fmt;
use std::str::FromStr;

use crate::error::{invalid, Error, Result};
use crate::message::{hex, parse_entries, unhex, write_entries, Fields, Message, TransferPackage};
use crate::orchestrator::StartKind;
use crate::rsm::Response;
use crate::storage::Record;
use crate::types::{Ballot, ClientId, Command, ConfigId, LogEntry, ProcessId, Round, StopSign};

/// Storage write as shown in traces.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum PersistNote {
    Init { sigma_len: u64 },
    Promise { n: Round },
    /// `len` entries replaced everything from `cut`; `stop` if they end in a
    /// stop-sign.
    Accept { n_a: Round, cut: u64, len: u64, stop: bool },
    Append { entry: LogEntry },
    Decide { l_d: u64 },
    Snapshot { l_k: u64 },
    Truncate { up_to: u64 },
}

impl From<&Record> for PersistNote {
    fn from(r: &Record) -> Self {
        match r {
            Record::Init(s) => PersistNote::Init { sigma_len: s.sigma_len },
            Record::Promise(n) => PersistNote::Promise { n: *n },
            Record::Accept { n_a, cut, suffix } => PersistNote::Accept {
                n_a: *n_a,
                cut: *cut,
                len: suffix.len() as u64,
                stop: suffix.last().is_some_and(LogEntry::is_stop),
            },
            Record::Append(e) => PersistNote::Append { entry: e.clone() },
            Record::Decide(l) => PersistNote::Decide { l_d: *l },
            Record::Snapshot(s) => PersistNote::Snapshot { l_k: s.l_k },
            Record::Truncate(t) => PersistNote::Truncate { up_to: *t },
        }
    }
}

impl fmt::Display for PersistNote {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PersistNote::Init { sigma_len } => write!(f, "init{{len={sigma_len}}}"),
            PersistNote::Promise { n } => write!(f, "promise{{n={n}}}"),
            PersistNote::Accept { n_a, cut, len, stop } => {
                write!(f, "accept{{na={n_a},cut={cut},len={len},stop={}}}", u8::from(*stop))
            }
            PersistNote::Append { entry } => write!(f, "append{{e={entry}}}"),
            PersistNote::Decide { l_d } => write!(f, "decide{{ld={l_d}}}"),
            PersistNote::Snapshot { l_k } => write!(f, "snapshot{{lk={l_k}}}"),
            PersistNote::Truncate { up_to } => write!(f, "truncate{{upto={up_to}}}"),
        }
    }
}

impl FromStr for PersistNote {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (name, body) = crate::message::split_named(s)?;
        let f = Fields::parse(body)?;
        Ok(match name {
            "init" => PersistNote::Init { sigma_len: f.get("len")? },
            "promise" => PersistNote::Promise { n: f.get("n")? },
            "accept" => PersistNote::Accept {
                n_a: f.get("na")?,
                cut: f.get("cut")?,
                len: f.get("len")?,
                stop: f.get::<u8>("stop")? == 1,
            },
            "append" => PersistNote::Append { entry: f.get("e")? },
            "decide" => PersistNote::Decide { l_d: f.get("ld")? },
            "snapshot" => PersistNote::Snapshot { l_k: f.get("lk")? },
            "truncate" => PersistNote::Truncate { up_to: f.get("upto")? },
            other => return Err(invalid(format!("unknown persist record `{other}`"))),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Event {
    Send { from: ProcessId, to: ProcessId, config: ConfigId, msg: Message },
    Recv { from: ProcessId, to: ProcessId, config: ConfigId, msg: Message },
    /// Discarded by a session drop, a crash or a down link.
    Lost { from: ProcessId, to: ProcessId, config: ConfigId, msg: Message },
    Persist { p: ProcessId, config: ConfigId, note: PersistNote },
    Deliver { p: ProcessId, config: ConfigId, index: u64, entry: LogEntry, replay: bool },
    Propose { p: ProcessId, config: ConfigId, entry: LogEntry },
    Leader { p: ProcessId, config: ConfigId, leader: ProcessId, ballot: Ballot },
    Start { p: ProcessId, config: ConfigId, sigma_len: u64, kind: StartKind },
    Fetched { p: ProcessId, config: ConfigId, from: ProcessId, package: TransferPackage },
    Cleanup { p: ProcessId, config: ConfigId, rejected: Option<String> },
    Crash { p: ProcessId },
    Recover { p: ProcessId, decided: Vec<(ConfigId, u64)> },
    SessionDrop { a: ProcessId, b: ProcessId, lost: u64 },
    SessionUp { a: ProcessId, b: ProcessId },
    Partition { groups: Vec<Vec<ProcessId>> },
    Heal,
    ClientSend { client: ClientId, cmd: Command },
    ClientReply { client: ClientId, from: ProcessId, seq: u64, response: Response },
    ClientDone { client: ClientId, seq: u64 },
    Reconfigure { config: ConfigId, ss: StopSign },
    Error { p: Option<ProcessId>, msg: String },
    Note { p: Option<ProcessId>, msg: String },
    Final { p: ProcessId, alive: bool, active: Option<ConfigId>, decided: Vec<(ConfigId, u64)>, applied: u64, kv: u64 },
}

impl Event {
    pub fn kind(&self) -> &'static str {
        match self {
            Event::Send { .. } => "send",
            Event::Recv { .. } => "recv",
            Event::Lost { .. } => "lost",
            Event::Persist { .. } => "persist",
            Event::Deliver { replay: false, .. } => "deliver",
            Event::Deliver { replay: true, .. } => "replay",
            Event::Propose { .. } => "propose",
            Event::Leader { .. } => "leader",
            Event::Start { .. } => "start",
            Event::Fetched { .. } => "fetched",
            Event::Cleanup { .. } => "cleanup",
            Event::Crash { .. } => "crash",
            Event::Recover { .. } => "recover",
            Event::SessionDrop { .. } => "sessiondrop",
            Event::SessionUp { .. } => "sessionup",
            Event::Partition { .. } => "partition",
            Event::Heal => "heal",
            Event::ClientSend { .. } => "client-send",
            Event::ClientReply { .. } => "client-reply",
            Event::ClientDone { .. } => "client-done",
            Event::Reconfigure { .. } => "reconfigure",
            Event::Error { .. } => "error",
            Event::Note { .. } => "note",
            Event::Final { .. } => "final",
        }
    }

    /// True for crash, session and partition events.
    pub fn is_fault(&self) -> bool {
        matches!(
            self,
            Event::Crash { .. } | Event::Recover { .. } | Event::SessionDrop { .. } | Event::Partition { .. }
        )
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TraceRecord {
    pub t: u64,
    pub event: Event,
    pub digest: u64,
}

fn opt_p(p: &Option<ProcessId>) -> String {
    p.map_or_else(|| "-".to_string(), |p| p.to_string())
}

fn decided_list(d: &[(ConfigId, u64)]) -> String {
    if d.is_empty() {
        return "-".into();
    }
    d.iter().map(|(c, l)| format!("{c}:{l}")).collect::<Vec<_>>().join("+")
}

fn parse_decided(s: &str) -> Result<Vec<(ConfigId, u64)>> {
    if s == "-" {
        return Ok(Vec::new());
    }
    s.split('+')
        .map(|part| {
            let (c, l) = part.split_once(':').ok_or_else(|| invalid(format!("bad decided list `{s}`")))?;
            Ok((c.parse()?, l.parse().map_err(|_| invalid(format!("bad decided list `{s}`")))?))
        })
        .collect()
}

struct Package<'a>(&'a TransferPackage);

impl fmt::Display for Package<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let p = self.0;
        write!(f, "len={},stop={},base=", p.sigma_len, p.stop)?;
        match &p.base {
            Some((lk, blob)) => write!(f, "{lk}:{}", hex(blob))?,
            None => f.write_str("-")?,
        }
        f.write_str(",sfx=")?;
        write_entries(f, &p.entries)?;
        // Operation bytes, one `.`-separated hex field per entry.
        if p.entries.iter().any(|e| e.as_command().is_some_and(|c| !c.op.is_empty())) {
            let ops: Vec<String> = p.entries.iter().map(|e| e.as_command().map_or_else(String::new, |c| hex(&c.op))).collect();
            write!(f, ",ops={}", ops.join("."))?;
        }
        Ok(())
    }
}

impl fmt::Display for TraceRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "t={} {} ", self.t, self.event.kind())?;
        match &self.event {
            Event::Send { from, to, config, msg } | Event::Recv { from, to, config, msg } | Event::Lost { from, to, config, msg } => {
                write!(f, "{from}->{to} {config} {msg}")?
            }
            Event::Persist { p, config, note } => write!(f, "{p} {config} {note}")?,
            Event::Deliver { p, config, index, entry, .. } => {
                write!(f, "{p} {config} i={index},e={entry}")?;
                if let Some(c) = entry.as_command().filter(|c| !c.op.is_empty()) {
                    write!(f, ",op={}", hex(&c.op))?;
                }
            }
            Event::Propose { p, config, entry } => write!(f, "{p} {config} e={entry}")?,
            Event::Leader { p, config, leader, ballot } => write!(f, "{p} {config} l={leader},b={ballot}")?,
            Event::Start { p, config, sigma_len, kind } => {
                let via = match kind {
                    StartKind::Initial => "initial".to_string(),
                    StartKind::Local => "local".to_string(),
                    StartKind::Fetched(q) => format!("fetch:{q}"),
                };
                write!(f, "{p} {config} len={sigma_len},via={via}")?
            }
            Event::Fetched { p, config, from, package } => write!(f, "{p} {config} from={from},{}", Package(package))?,
            Event::Cleanup { p, config, rejected } => match rejected {
                None => write!(f, "{p} {config} ok")?,
                Some(r) => write!(f, "{p} {config} rejected: {r}")?,
            },
            Event::Crash { p } => write!(f, "{p} - -")?,
            Event::Recover { p, decided } => write!(f, "{p} - {}", decided_list(decided))?,
            Event::SessionDrop { a, b, lost } => write!(f, "{a}->{b} - lost={lost}")?,
            Event::SessionUp { a, b } => write!(f, "{a}->{b} - -")?,
            Event::Partition { groups } => {
                let g: Vec<String> =
                    groups.iter().map(|g| g.iter().map(|p| p.0.to_string()).collect::<Vec<_>>().join("+")).collect();
                write!(f, "- - {}", g.join("/"))?
            }
            Event::Heal => f.write_str("- - -")?,
            Event::ClientSend { client, cmd } => write!(f, "{client} - cmd={cmd},op={}", hex(&cmd.op))?,
            Event::ClientReply { client, from, seq, response } => write!(f, "{from}->{client} - seq={seq},r={response}")?,
            Event::ClientDone { client, seq } => write!(f, "{client} - seq={seq}")?,
            Event::Reconfigure { config, ss } => write!(f, "- {config} ss={ss}")?,
            Event::Error { p, msg } | Event::Note { p, msg } => write!(f, "{} - {msg}", opt_p(p))?,
            Event::Final { p, alive, active, decided, applied, kv } => write!(
                f,
                "{p} - alive={},active={},ld={},applied={applied},kv={kv:016x}",
                u8::from(*alive),
                active.map_or_else(|| "-".to_string(), |c| c.to_string()),
                decided_list(decided)
            )?,
        }
        write!(f, " | {:016x}", self.digest)
    }
}

fn pair(s: &str) -> Result<(&str, &str)> {
    s.split_once("->").ok_or_else(|| invalid(format!("expected `a->b`, got `{s}`")))
}

fn pid(s: &str) -> Result<ProcessId> {
    s.parse()
}

fn cfg(s: &str) -> Result<ConfigId> {
    s.parse()
}

fn num(s: &str) -> Result<u64> {
    s.parse().map_err(|_| invalid(format!("bad number `{s}`")))
}

impl FromStr for TraceRecord {
    type Err = Error;

    fn from_str(line: &str) -> Result<Self> {
        let (body, digest) = line.rsplit_once(" | ").ok_or_else(|| invalid("missing ` | <digest>`"))?;
        let digest = u64::from_str_radix(digest.trim(), 16).map_err(|_| invalid(format!("bad digest `{digest}`")))?;
        let mut parts = body.splitn(5, ' ');
        let mut next = |what: &str| parts.next().ok_or_else(|| invalid(format!("missing {what}")));
        let t = num(next("time")?.strip_prefix("t=").ok_or_else(|| invalid("line must start with `t=`"))?)?;
        let kind = next("kind")?;
        let subject = next("subject")?;
        let config = next("config")?;
        let payload = next("payload")?;
        let event = match kind {
            "send" | "recv" | "lost" => {
                let (a, b) = pair(subject)?;
                let (from, to, config, msg) = (pid(a)?, pid(b)?, cfg(config)?, payload.parse()?);
                match kind {
                    "send" => Event::Send { from, to, config, msg },
                    "recv" => Event::Recv { from, to, config, msg },
                    _ => Event::Lost { from, to, config, msg },
                }
            }
            "persist" => Event::Persist { p: pid(subject)?, config: cfg(config)?, note: payload.parse()? },
            "deliver" | "replay" => {
                let f = Fields::parse(payload)?;
                let mut entry: LogEntry = f.get("e")?;
                if let (LogEntry::Normal(c), Ok(op)) = (&mut entry, f.raw("op")) {
                    c.op = unhex(op)?;
                }
                Event::Deliver { p: pid(subject)?, config: cfg(config)?, index: f.get("i")?, entry, replay: kind == "replay" }
            }
            "propose" => Event::Propose { p: pid(subject)?, config: cfg(config)?, entry: Fields::parse(payload)?.get("e")? },
            "leader" => {
                let f = Fields::parse(payload)?;
                Event::Leader { p: pid(subject)?, config: cfg(config)?, leader: pid(f.raw("l")?)?, ballot: Ballot(f.get("b")?) }
            }
            "start" => {
                let f = Fields::parse(payload)?;
                let kind = match f.raw("via")? {
                    "initial" => StartKind::Initial,
                    "local" => StartKind::Local,
                    v => StartKind::Fetched(pid(
                        v.strip_prefix("fetch:").ok_or_else(|| invalid(format!("bad start kind `{v}`")))?,
                    )?),
                };
                Event::Start { p: pid(subject)?, config: cfg(config)?, sigma_len: f.get("len")?, kind }
            }
            "fetched" => {
                let f = Fields::parse(payload)?;
                let stop = match f.get::<LogEntry>("stop")? {
                    LogEntry::Stop(ss) => ss,
                    LogEntry::Normal(_) => return Err(invalid("fetched stop is not a stop-sign")),
                };
                let base = match f.raw("base")? {
                    "-" => None,
                    b => {
                        let (lk, blob) = b.split_once(':').ok_or_else(|| invalid(format!("bad base `{b}`")))?;
                        Some((num(lk)?, unhex(blob)?))
                    }
                };
                let mut entries = parse_entries(f.raw("sfx")?)?;
                if let Ok(ops) = f.raw("ops") {
                    let ops: Vec<&str> = ops.split('.').collect();
                    if ops.len() != entries.len() {
                        return Err(invalid("fetched ops do not match its entries"));
                    }
                    for (e, op) in entries.iter_mut().zip(ops) {
                        if let LogEntry::Normal(c) = e {
                            c.op = unhex(op)?;
                        }
                    }
                }
                let package = TransferPackage { sigma_len: f.get("len")?, stop, base, entries };
                Event::Fetched { p: pid(subject)?, config: cfg(config)?, from: pid(f.raw("from")?)?, package }
            }
            "cleanup" => Event::Cleanup {
                p: pid(subject)?,
                config: cfg(config)?,
                rejected: payload.strip_prefix("rejected: ").map(str::to_string),
            },
            "crash" => Event::Crash { p: pid(subject)? },
            "recover" => Event::Recover { p: pid(subject)?, decided: parse_decided(payload)? },
            "sessiondrop" => {
                let (a, b) = pair(subject)?;
                let lost = num(payload.strip_prefix("lost=").ok_or_else(|| invalid("expected lost=<n>"))?)?;
                Event::SessionDrop { a: pid(a)?, b: pid(b)?, lost }
            }
            "sessionup" => {
                let (a, b) = pair(subject)?;
                Event::SessionUp { a: pid(a)?, b: pid(b)? }
            }
            "partition" => {
                let groups = payload
                    .split('/')
                    .map(|g| g.split('+').map(|p| num(p).map(ProcessId)).collect::<Result<Vec<_>>>())
                    .collect::<Result<_>>()?;
                Event::Partition { groups }
            }
            "heal" => Event::Heal,
            "client-send" => {
                let f = Fields::parse(payload)?;
                let (c, s) = f.raw("cmd")?.split_once(':').ok_or_else(|| invalid("bad command id"))?;
                let cmd = Command::new(ClientId(num(c)?), num(s)?, unhex(f.raw("op")?)?);
                Event::ClientSend { client: subject.parse()?, cmd }
            }
            "client-reply" => {
                let (a, b) = pair(subject)?;
                let f = Fields::parse(payload)?;
                Event::ClientReply { client: b.parse()?, from: pid(a)?, seq: f.get("seq")?, response: f.get("r")? }
            }
            "client-done" => Event::ClientDone {
                client: subject.parse()?,
                seq: num(payload.strip_prefix("seq=").ok_or_else(|| invalid("expected seq=<n>"))?)?,
            },
            "reconfigure" => {
                let ss = match payload.strip_prefix("ss=").ok_or_else(|| invalid("expected ss="))?.parse()? {
                    LogEntry::Stop(ss) => ss,
                    LogEntry::Normal(_) => return Err(invalid("reconfigure needs a stop-sign")),
                };
                Event::Reconfigure { config: cfg(config)?, ss }
            }
            "error" | "note" => {
                let p = if subject == "-" { None } else { Some(pid(subject)?) };
                let msg = payload.to_string();
                if kind == "error" {
                    Event::Error { p, msg }
                } else {
                    Event::Note { p, msg }
                }
            }
            "final" => {
                let f = Fields::parse(payload)?;
                let active = match f.raw("active")? {
                    "-" => None,
                    c => Some(cfg(c)?),
                };
                Event::Final {
                    p: pid(subject)?,
                    alive: f.get::<u8>("alive")? == 1,
                    active,
                    decided: parse_decided(f.raw("ld")?)?,
                    applied: f.get("applied")?,
                    kv: u64::from_str_radix(f.raw("kv")?, 16).map_err(|_| invalid("bad kv digest"))?,
                }
            }
            other => return Err(invalid(format!("unknown event kind `{other}`"))),
        };
        Ok(TraceRecord { t, event, digest })
    }
}

/// Error from [`Trace::parse`], with a 1-based line number.
#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("trace line {line}: {source}")]
pub struct TraceParseError {
    pub line: usize,
    pub source: Error,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Trace {
    pub records: Vec<TraceRecord>,
}

impl Trace {
    pub fn new() -> Self {
        Trace::default()
    }

    pub fn push(&mut self, t: u64, event: Event, digest: u64) {
        self.records.push(TraceRecord { t, event, digest });
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &TraceRecord> {
        self.records.iter()
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for r in &self.records {
            use std::fmt::Write;
            writeln!(s, "{r}").expect("writing to a String cannot fail");
        }
        s
    }

    /// Parses the text form; blank lines are skipped.
    pub fn parse(text: &str) -> Result<Trace, TraceParseError> {
        let mut records = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let r = line.parse().map_err(|source| TraceParseError { line: i + 1, source })?;
            records.push(r);
        }
        Ok(Trace { records })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn p(i: u64) -> ProcessId {
        ProcessId(i)
    }

    fn samples() -> Vec<Event> {
        let n = Round::new(ConfigId(0), Ballot(1025));
        let ss = StopSign::new(ConfigId(1), [p(1), p(2), p(4)]);
        let e = LogEntry::Normal(Command::new(ClientId(1), 2, Vec::new()));
        vec![
            Event::Send { from: p(1), to: p(2), config: ConfigId(0), msg: Message::Prepare { n, ld: 0, na: n } },
            Event::Recv { from: p(1), to: p(2), config: ConfigId(0), msg: Message::Accept { n, entry: e.clone() } },
            Event::Lost { from: p(2), to: p(1), config: ConfigId(0), msg: Message::PrepareReq },
            Event::Persist { p: p(1), config: ConfigId(0), note: PersistNote::Accept { n_a: n, cut: 3, len: 2, stop: true } },
            Event::Persist { p: p(1), config: ConfigId(0), note: PersistNote::Append { entry: e.clone() } },
            Event::Persist { p: p(1), config: ConfigId(1), note: PersistNote::Init { sigma_len: 7 } },
            Event::Deliver { p: p(3), config: ConfigId(0), index: 4, entry: e.clone(), replay: true },
            Event::Deliver {
                p: p(2),
                config: ConfigId(0),
                index: 5,
                entry: LogEntry::Normal(Command::new(ClientId(2), 1, vec![0xab, 0])),
                replay: false,
            },
            Event::Propose { p: p(3), config: ConfigId(0), entry: LogEntry::Stop(ss.clone()) },
            Event::Leader { p: p(1), config: ConfigId(0), leader: p(3), ballot: Ballot(2051) },
            Event::Start { p: p(4), config: ConfigId(1), sigma_len: 9, kind: StartKind::Fetched(p(2)) },
            Event::Fetched {
                p: p(4),
                config: ConfigId(1),
                from: p(2),
                package: TransferPackage { sigma_len: 2, stop: ss.clone(), base: Some((1, vec![0xab])), entries: vec![LogEntry::Stop(ss.clone())] },
            },
            Event::Fetched {
                p: p(4),
                config: ConfigId(1),
                from: p(3),
                package: TransferPackage {
                    sigma_len: 3,
                    stop: ss.clone(),
                    base: None,
                    entries: vec![
                        LogEntry::Normal(Command::new(ClientId(1), 1, vec![7, 0])),
                        e.clone(),
                        LogEntry::Stop(ss.clone()),
                    ],
                },
            },
            Event::Cleanup { p: p(1), config: ConfigId(0), rejected: Some("c0 is the active configuration".into()) },
            Event::Cleanup { p: p(1), config: ConfigId(0), rejected: None },
            Event::Crash { p: p(2) },
            Event::Recover { p: p(2), decided: vec![(ConfigId(0), 3), (ConfigId(1), 5)] },
            Event::Recover { p: p(2), decided: vec![] },
            Event::SessionDrop { a: p(1), b: p(2), lost: 3 },
            Event::SessionUp { a: p(1), b: p(2) },
            Event::Partition { groups: vec![vec![p(1), p(2)], vec![p(3)]] },
            Event::Heal,
            Event::ClientSend { client: ClientId(1), cmd: Command::new(ClientId(1), 2, vec![1, 2]) },
            Event::ClientReply { client: ClientId(1), from: p(2), seq: 2, response: Response::Value(Some(vec![7])) },
            Event::ClientDone { client: ClientId(1), seq: 2 },
            Event::Reconfigure { config: ConfigId(0), ss },
            Event::Error { p: Some(p(1)), msg: "log is stopped".into() },
            Event::Note { p: None, msg: "scenario end".into() },
            Event::Final { p: p(1), alive: true, active: Some(ConfigId(1)), decided: vec![(ConfigId(0), 3)], applied: 3, kv: 0xdead },
        ]
    }

    #[test]
    fn every_event_kind_round_trips_through_text() {
        let mut trace = Trace::new();
        for (i, e) in samples().into_iter().enumerate() {
            trace.push(i as u64, e, i as u64 * 7919);
        }
        let text = trace.to_text();
        assert_eq!(Trace::parse(&text).unwrap(), trace);
    }

    #[test]
    fn line_layout_is_pinned() {
        let r = TraceRecord { t: 12, event: samples().remove(0), digest: 0xff };
        assert_eq!(r.to_string(), "t=12 send p1->p2 c0 Prepare{n=0.1025,ld=0,na=0.1025} | 00000000000000ff");
    }

    #[test]
    fn parse_errors_carry_line_numbers() {
        let err = Trace::parse("t=1 heal - - - | 0\n\nt=2 bogus - - - | 0\n").unwrap_err();
        assert_eq!(err.line, 3);
        assert!(Trace::parse("t=1 heal - - -").is_err());
    }
}
