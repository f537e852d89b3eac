//! Scenario scripts: `key = value` headers followed by timed directives.
//!
//! ```text
//! # three replicas, one leader crash
//! processes = 3
//! seed = 7
//! commands = 20
//! stable_from = 300
//!
//! @50 crash leader
//! @120 recover crashed
//! @500 end
//! ```
//!
//! Blank lines and `#` comments are ignored. Directives must appear in
//! non-decreasing time order.

use std::collections::BTreeSet;
use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use crate::paxos::Mutation;
use crate::types::{ClientId, ConfigId, ProcessId};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("line {line}: {msg}")]
pub struct ScenarioError {
    pub line: usize,
    pub msg: String,
}

fn err<T>(line: usize, msg: impl Into<String>) -> Result<T, ScenarioError> {
    Err(ScenarioError { line, msg: msg.into() })
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum StorageKind {
    Volatile,
    /// One subdirectory per process under this root.
    File(PathBuf),
}

/// Which process a fault directive hits.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Target {
    Process(ProcessId),
    /// The process leading the newest configuration at that moment.
    Leader,
    /// The process that has been down the longest.
    Crashed,
    /// Every crashed process (recover only).
    All,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ClientOp {
    Put { key: String, value: String },
    Get { key: String },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Directive {
    Crash(Target),
    Recover(Target),
    Drop(Target, Target),
    Partition(Vec<Vec<ProcessId>>),
    Heal,
    Propose { client: ClientId, op: ClientOp },
    /// `count` one-shot puts from `client` handed to process `at` only,
    /// without waiting for replies or retrying.
    Submit { client: ClientId, at: ProcessId, count: u64 },
    Reconfigure(BTreeSet<ProcessId>),
    Cleanup { config: ConfigId, at: Option<ProcessId> },
    End,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TimedDirective {
    pub t: u64,
    pub directive: Directive,
    pub line: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub processes: BTreeSet<ProcessId>,
    pub config0: BTreeSet<ProcessId>,
    pub latency: u64,
    pub jitter: u64,
    pub delta: u64,
    pub dedup: bool,
    pub snapshot_every: Option<u64>,
    pub storage: StorageKind,
    pub seed: u64,
    pub stable_from: Option<u64>,
    pub reconnect: u64,
    pub clients: u64,
    pub commands: u64,
    pub retry: u64,
    pub dup_rate: f64,
    pub get_rate: f64,
    pub keys: u64,
    pub client_start: u64,
    pub mutation: Option<Mutation>,
    pub end: u64,
    pub directives: Vec<TimedDirective>,
}

impl Default for Scenario {
    fn default() -> Self {
        let procs: BTreeSet<ProcessId> = (1..=3).map(ProcessId).collect();
        Scenario {
            config0: procs.clone(),
            processes: procs,
            latency: 1,
            jitter: 0,
            delta: crate::ble::DEFAULT_DELTA,
            dedup: false,
            snapshot_every: None,
            storage: StorageKind::Volatile,
            seed: 0,
            stable_from: None,
            reconnect: 5,
            clients: 0,
            commands: 0,
            retry: 30,
            dup_rate: 0.0,
            get_rate: 0.2,
            keys: 8,
            client_start: 10,
            mutation: None,
            end: 1000,
            directives: Vec::new(),
        }
    }
}

fn parse_set(s: &str, line: usize) -> Result<BTreeSet<ProcessId>, ScenarioError> {
    let set: BTreeSet<ProcessId> = s
        .split(',')
        .map(str::trim)
        .filter(|x| !x.is_empty())
        .map(|x| parse_pid(x, line))
        .collect::<Result<_, _>>()?;
    if set.is_empty() {
        return err(line, "membership must not be empty");
    }
    Ok(set)
}

fn parse_pid(s: &str, line: usize) -> Result<ProcessId, ScenarioError> {
    let digits = s.strip_prefix('p').unwrap_or(s);
    match digits.parse::<u64>() {
        Ok(n) if n > 0 => Ok(ProcessId(n)),
        _ => err(line, format!("bad process id `{s}`")),
    }
}

fn parse_target(s: Option<&str>, line: usize) -> Result<Target, ScenarioError> {
    match s {
        Some("leader") => Ok(Target::Leader),
        Some("crashed") => Ok(Target::Crashed),
        Some("all") => Ok(Target::All),
        Some(p) => Ok(Target::Process(parse_pid(p, line)?)),
        None => err(line, "missing target"),
    }
}

fn num<T: FromStr>(v: &str, key: &str, line: usize) -> Result<T, ScenarioError> {
    v.parse().map_err(|_| ScenarioError { line, msg: format!("bad value `{v}` for `{key}`") })
}

fn on_off(v: &str, key: &str, line: usize) -> Result<bool, ScenarioError> {
    match v {
        "on" | "true" | "yes" => Ok(true),
        "off" | "false" | "no" => Ok(false),
        _ => err(line, format!("`{key}` must be on or off")),
    }
}

impl Scenario {
    pub fn parse(text: &str) -> Result<Scenario, ScenarioError> {
        let mut s = Scenario::default();
        let mut config0 = None;
        let mut explicit_end = None;
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let l = raw.split('#').next().unwrap_or("").trim();
            if l.is_empty() {
                continue;
            }
            if let Some(rest) = l.strip_prefix('@') {
                let (t, cmd) = rest.split_once(char::is_whitespace).unwrap_or((rest, ""));
                let t: u64 = num(t, "time", line)?;
                let directive = parse_directive(cmd.trim(), line)?;
                if let Some(prev) = s.directives.last() {
                    if t < prev.t {
                        return err(line, format!("directive at {t} comes after one at {}", prev.t));
                    }
                }
                if directive == Directive::End {
                    explicit_end = Some(t);
                }
                s.directives.push(TimedDirective { t, directive, line });
                continue;
            }
            if !s.directives.is_empty() {
                return err(line, "headers must come before directives");
            }
            let Some((k, v)) = l.split_once('=') else { return err(line, format!("expected `key = value`, got `{l}`")) };
            let (k, v) = (k.trim(), v.trim());
            match k {
                "processes" => {
                    s.processes = if v.contains(',') {
                        parse_set(v, line)?
                    } else {
                        let n: u64 = num(v, k, line)?;
                        if n == 0 {
                            return err(line, "processes must be positive");
                        }
                        (1..=n).map(ProcessId).collect()
                    }
                }
                "config0" => config0 = Some(parse_set(v, line)?),
                "latency" => s.latency = num(v, k, line)?,
                "jitter" => s.jitter = num(v, k, line)?,
                "delta" => s.delta = num(v, k, line)?,
                "dedup" => s.dedup = on_off(v, k, line)?,
                "snapshot_every" => {
                    let n: u64 = num(v, k, line)?;
                    s.snapshot_every = (n > 0).then_some(n);
                }
                "storage" => {
                    s.storage = match v {
                        "volatile" => StorageKind::Volatile,
                        f => match f.strip_prefix("file:") {
                            Some(path) if !path.is_empty() => StorageKind::File(PathBuf::from(path)),
                            _ => return err(line, "storage must be `volatile` or `file:<dir>`"),
                        },
                    }
                }
                "seed" => s.seed = num(v, k, line)?,
                "stable_from" => s.stable_from = Some(num(v, k, line)?),
                "reconnect" => s.reconnect = num(v, k, line)?,
                "clients" => s.clients = num(v, k, line)?,
                "commands" => s.commands = num(v, k, line)?,
                "retry" => s.retry = num(v, k, line)?,
                "dup_rate" => s.dup_rate = num(v, k, line)?,
                "get_rate" => s.get_rate = num(v, k, line)?,
                "keys" => s.keys = num(v, k, line)?,
                "client_start" => s.client_start = num(v, k, line)?,
                "end" => s.end = num(v, k, line)?,
                "mutation" => {
                    s.mutation = match v {
                        "none" => None,
                        m => Some(
                            Mutation::ALL
                                .into_iter()
                                .find(|x| x.name() == m)
                                .ok_or_else(|| ScenarioError { line, msg: format!("unknown mutation `{m}`") })?,
                        ),
                    }
                }
                other => return err(line, format!("unknown header `{other}`")),
            }
        }
        s.config0 = config0.unwrap_or_else(|| s.processes.clone());
        if let Some(t) = explicit_end {
            s.end = t;
        }
        s.validate()?;
        Ok(s)
    }

    /// Checks cross-field rules; errors point at the offending directive or
    /// at line 0 for header problems.
    pub fn validate(&self) -> Result<(), ScenarioError> {
        if !self.config0.is_subset(&self.processes) {
            return err(0, "config0 names processes outside `processes`");
        }
        if self.latency == 0 {
            return err(0, "latency must be positive");
        }
        if self.delta == 0 {
            return err(0, "delta must be positive");
        }
        if !(0.0..=1.0).contains(&self.dup_rate) || !(0.0..=1.0).contains(&self.get_rate) {
            return err(0, "rates must lie in [0, 1]");
        }
        if self.keys == 0 {
            return err(0, "keys must be positive");
        }
        if self.dedup && self.snapshot_every.is_some() {
            return err(0, "dedup and snapshot_every cannot be combined");
        }
        if self.commands > 0 && self.clients == 0 {
            return err(0, "commands need at least one client");
        }
        let check = |t: Target, line: usize| match t {
            Target::Process(p) if !self.processes.contains(&p) => err(line, format!("unknown process {p}")),
            _ => Ok(()),
        };
        for d in &self.directives {
            if d.t > self.end {
                return err(d.line, format!("directive at {} is after the end at {}", d.t, self.end));
            }
            match &d.directive {
                Directive::Crash(Target::All) => return err(d.line, "crash needs a single target"),
                Directive::Crash(t) | Directive::Recover(t) => check(*t, d.line)?,
                Directive::Drop(a, b) => {
                    check(*a, d.line)?;
                    check(*b, d.line)?;
                }
                Directive::Partition(groups) => {
                    for p in groups.iter().flatten() {
                        check(Target::Process(*p), d.line)?;
                    }
                }
                Directive::Reconfigure(set) => {
                    if !set.is_subset(&self.processes) {
                        return err(d.line, "reconfigure names unknown processes");
                    }
                }
                Directive::Cleanup { at: Some(p), .. } | Directive::Submit { at: p, .. } => {
                    check(Target::Process(*p), d.line)?
                }
                _ => {}
            }
        }
        Ok(())
    }

    pub fn majority(&self) -> usize {
        self.config0.len() / 2 + 1
    }
}

fn parse_directive(cmd: &str, line: usize) -> Result<Directive, ScenarioError> {
    let mut words = cmd.split_whitespace();
    let verb = words.next().unwrap_or("");
    let d = match verb {
        "crash" => Directive::Crash(parse_target(words.next(), line)?),
        "recover" => Directive::Recover(parse_target(words.next(), line)?),
        "drop" => Directive::Drop(parse_target(words.next(), line)?, parse_target(words.next(), line)?),
        "partition" => {
            let rest: Vec<&str> = words.by_ref().collect();
            let groups = rest
                .join(" ")
                .split('|')
                .map(|g| parse_set(g.trim(), line).map(|s| s.into_iter().collect()))
                .collect::<Result<Vec<Vec<ProcessId>>, _>>()?;
            if groups.len() < 2 {
                return err(line, "partition needs at least two groups separated by `|`");
            }
            Directive::Partition(groups)
        }
        "heal" => Directive::Heal,
        "propose" => {
            let client = words.next().ok_or_else(|| ScenarioError { line, msg: "missing client".into() })?;
            let client = ClientId(num(client.strip_prefix('k').unwrap_or(client), "client", line)?);
            let op = match (words.next(), words.next(), words.next()) {
                (Some("put"), Some(k), Some(v)) => ClientOp::Put { key: k.into(), value: v.into() },
                (Some("get"), Some(k), None) => ClientOp::Get { key: k.into() },
                _ => return err(line, "expected `propose k<N> put <key> <value>` or `propose k<N> get <key>`"),
            };
            Directive::Propose { client, op }
        }
        "submit" => {
            let client = words.next().ok_or_else(|| ScenarioError { line, msg: "missing client".into() })?;
            let client = ClientId(num(client.strip_prefix('k').unwrap_or(client), "client", line)?);
            let at = parse_pid(words.next().unwrap_or(""), line)?;
            let count = num(words.next().unwrap_or(""), "count", line)?;
            Directive::Submit { client, at, count }
        }
        "reconfigure" => Directive::Reconfigure(parse_set(&words.by_ref().collect::<Vec<_>>().join(""), line)?),
        "cleanup" => {
            let c = words.next().ok_or_else(|| ScenarioError { line, msg: "missing configuration".into() })?;
            let config = ConfigId(num(c.strip_prefix('c').unwrap_or(c), "configuration", line)?);
            let at = words.next().map(|p| parse_pid(p, line)).transpose()?;
            Directive::Cleanup { config, at }
        }
        "end" => Directive::End,
        "" => return err(line, "missing directive"),
        other => return err(line, format!("unknown directive `{other}`")),
    };
    if words.next().is_some() {
        return err(line, format!("trailing words after `{verb}`"));
    }
    Ok(d)
}

impl fmt::Display for Target {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Target::Process(p) => write!(f, "{p}"),
            Target::Leader => f.write_str("leader"),
            Target::Crashed => f.write_str("crashed"),
            Target::All => f.write_str("all"),
        }
    }
}

fn join(set: impl IntoIterator<Item = ProcessId>) -> String {
    set.into_iter().map(|p| p.0.to_string()).collect::<Vec<_>>().join(",")
}

impl fmt::Display for Directive {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Directive::Crash(t) => write!(f, "crash {t}"),
            Directive::Recover(t) => write!(f, "recover {t}"),
            Directive::Drop(a, b) => write!(f, "drop {a} {b}"),
            Directive::Partition(groups) => {
                let g: Vec<String> = groups.iter().map(|g| join(g.iter().copied())).collect();
                write!(f, "partition {}", g.join(" | "))
            }
            Directive::Heal => f.write_str("heal"),
            Directive::Propose { client, op: ClientOp::Put { key, value } } => write!(f, "propose {client} put {key} {value}"),
            Directive::Propose { client, op: ClientOp::Get { key } } => write!(f, "propose {client} get {key}"),
            Directive::Submit { client, at, count } => write!(f, "submit {client} {at} {count}"),
            Directive::Reconfigure(set) => write!(f, "reconfigure {}", join(set.iter().copied())),
            Directive::Cleanup { config, at } => match at {
                Some(p) => write!(f, "cleanup {config} {p}"),
                None => write!(f, "cleanup {config}"),
            },
            Directive::End => f.write_str("end"),
        }
    }
}

impl fmt::Display for Scenario {
    /// Renders a script that parses back to the same scenario.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "processes = {}", join(self.processes.iter().copied()))?;
        writeln!(f, "config0 = {}", join(self.config0.iter().copied()))?;
        writeln!(f, "latency = {}", self.latency)?;
        writeln!(f, "jitter = {}", self.jitter)?;
        writeln!(f, "delta = {}", self.delta)?;
        writeln!(f, "dedup = {}", if self.dedup { "on" } else { "off" })?;
        writeln!(f, "snapshot_every = {}", self.snapshot_every.unwrap_or(0))?;
        match &self.storage {
            StorageKind::Volatile => writeln!(f, "storage = volatile")?,
            StorageKind::File(p) => writeln!(f, "storage = file:{}", p.display())?,
        }
        writeln!(f, "seed = {}", self.seed)?;
        if let Some(t) = self.stable_from {
            writeln!(f, "stable_from = {t}")?;
        }
        writeln!(f, "reconnect = {}", self.reconnect)?;
        writeln!(f, "clients = {}", self.clients)?;
        writeln!(f, "commands = {}", self.commands)?;
        writeln!(f, "retry = {}", self.retry)?;
        writeln!(f, "dup_rate = {}", self.dup_rate)?;
        writeln!(f, "get_rate = {}", self.get_rate)?;
        writeln!(f, "keys = {}", self.keys)?;
        writeln!(f, "client_start = {}", self.client_start)?;
        writeln!(f, "mutation = {}", self.mutation.map_or("none", Mutation::name))?;
        writeln!(f, "end = {}", self.end)?;
        for d in &self.directives {
            writeln!(f, "@{} {}", d.t, d.directive)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const SAMPLE: &str = "\
# comment
processes = 5
config0 = 1,2,3
dedup = on
clients = 2
commands = 10
stable_from = 300

@10 crash p2
@20 recover crashed
@30 drop leader p3
@40 partition 1,2 | 3,4,5
@50 heal
@60 propose k9 put a b
@65 submit k8 p4 3
@70 reconfigure 1,2,4
@80 cleanup c0 p1
@400 end
";

    #[test]
    fn parses_headers_and_directives() {
        let s = Scenario::parse(SAMPLE).unwrap();
        assert_eq!(s.processes.len(), 5);
        assert_eq!(s.config0.len(), 3);
        assert!(s.dedup);
        assert_eq!(s.end, 400);
        assert_eq!(s.directives.len(), 10);
        assert_eq!(s.directives[0].directive, Directive::Crash(Target::Process(ProcessId(2))));
        assert_eq!(s.directives[3].directive, Directive::Partition(vec![
            vec![ProcessId(1), ProcessId(2)],
            vec![ProcessId(3), ProcessId(4), ProcessId(5)],
        ]));
    }

    #[test]
    fn display_round_trips() {
        let s = Scenario::parse(SAMPLE).unwrap();
        let mut again = Scenario::parse(&s.to_string()).unwrap();
        for (a, b) in again.directives.iter_mut().zip(&s.directives) {
            a.line = b.line;
        }
        assert_eq!(again, s);
    }

    #[test]
    fn unordered_directives_are_rejected_with_line() {
        let e = Scenario::parse("processes = 3\n@50 heal\n@40 heal\n").unwrap_err();
        assert_eq!(e.line, 3);
    }

    #[test]
    fn bad_inputs() {
        assert_eq!(Scenario::parse("processes = 3\nbogus = 1\n").unwrap_err().line, 2);
        assert_eq!(Scenario::parse("config0 = \n").unwrap_err().line, 1);
        assert_eq!(Scenario::parse("@5 crash p9\n").unwrap_err().line, 1);
        assert_eq!(Scenario::parse("@5 explode\n").unwrap_err().line, 1);
        assert!(Scenario::parse("dedup = on\nsnapshot_every = 32\n").is_err());
        assert_eq!(Scenario::parse("@5 heal\nlatency = 2\n").unwrap_err().line, 2);
    }
}
