//! Identifiers, ballots, rounds and log entries shared by every module.
//!
//! Every type here has a canonical text form used in traces. The forms are
//! stable: the checker and the golden tests parse them back.
//!
//! | type        | text            |
//! |-------------|-----------------|
//! | `ProcessId` | `p3`            |
//! | `ConfigId`  | `c1`            |
//! | `ReplicaId` | `r1.3`          |
//! | `ClientId`  | `k7`            |
//! | `Round`     | `1.2051`        |
//! | `Command`   | `7:12`          |
//! | `StopSign`  | `SS@1{1+2+4}`   |

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::hash::{Hash, Hasher};
use std::str::FromStr;

use crate::error::{invalid, Error, Result};

/// Upper bound on process ids used to fold `(s, pid)` into a single ballot.
pub const BALLOT_CAP: u64 = 1024;

macro_rules! prefixed_id {
    ($(#[$doc:meta])* $name:ident, $prefix:literal) => {
        $(#[$doc])*
        #[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
        pub struct $name(pub u64);

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                write!(f, concat!($prefix, "{}"), self.0)
            }
        }

        impl FromStr for $name {
            type Err = Error;

            fn from_str(s: &str) -> Result<Self> {
                s.strip_prefix($prefix)
                    .and_then(|rest| rest.parse().ok())
                    .map($name)
                    .ok_or_else(|| invalid(format!(concat!("expected `", $prefix, "<n>`, got `{}`"), s)))
            }
        }
    };
}

prefixed_id!(
    /// A process, unique for the whole lifetime of the system.
    ProcessId,
    "p"
);
prefixed_id!(
    /// Configuration number `i` of configuration `c_i`.
    ConfigId,
    "c"
);
prefixed_id!(
    /// A client submitting commands sequentially.
    ClientId,
    "k"
);

impl ConfigId {
    pub fn next(self) -> ConfigId {
        ConfigId(self.0 + 1)
    }
}

/// The replica a process runs inside one configuration.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ReplicaId {
    pub config: ConfigId,
    pub process: ProcessId,
}

impl ReplicaId {
    pub fn new(config: ConfigId, process: ProcessId) -> Self {
        ReplicaId { config, process }
    }
}

impl fmt::Display for ReplicaId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "r{}.{}", self.config.0, self.process.0)
    }
}

/// A ballot `s * cap + pid`, globally unique and locally increasing.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct Ballot(pub u64);

impl Ballot {
    /// Folds a sequence number and a process id into one ballot value.
    pub fn new(seq: u64, pid: ProcessId, cap: u64) -> Result<Ballot> {
        if pid.0 >= cap {
            return Err(invalid(format!("{pid} does not fit under ballot cap {cap}")));
        }
        seq.checked_mul(cap)
            .and_then(|v| v.checked_add(pid.0))
            .map(Ballot)
            .ok_or_else(|| invalid("ballot overflow"))
    }

    pub fn seq(self, cap: u64) -> u64 {
        self.0 / cap
    }

    pub fn pid(self, cap: u64) -> ProcessId {
        ProcessId(self.0 % cap)
    }

    /// The next ballot of the same owner.
    pub fn increment(self, cap: u64) -> Ballot {
        Ballot(self.0 + cap)
    }
}

impl fmt::Display for Ballot {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// A protocol round `(configuration, ballot)`.
///
/// The derived ordering is lexicographic on the fields in declaration order,
/// so every round of configuration `i + 1` is above every round of `i`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct Round {
    pub config: ConfigId,
    pub ballot: Ballot,
}

impl Round {
    pub fn new(config: ConfigId, ballot: Ballot) -> Self {
        Round { config, ballot }
    }

    /// `(i, 0)`: the round every replica of configuration `i` starts in.
    pub fn initial(config: ConfigId) -> Self {
        Round { config, ballot: Ballot(0) }
    }
}

impl fmt::Display for Round {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}.{}", self.config.0, self.ballot.0)
    }
}

impl FromStr for Round {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (c, b) = s
            .split_once('.')
            .ok_or_else(|| invalid(format!("expected `<config>.<ballot>`, got `{s}`")))?;
        let config = c.parse().map_err(|_| invalid(format!("bad round `{s}`")))?;
        let ballot = b.parse().map_err(|_| invalid(format!("bad round `{s}`")))?;
        Ok(Round::new(ConfigId(config), Ballot(ballot)))
    }
}

/// A client command. The payload is opaque to consensus.
///
/// Two commands are equal when they carry the same `(client, seq)` pair;
/// the payload does not take part in equality or hashing.
#[derive(Debug, Clone)]
pub struct Command {
    pub client: ClientId,
    pub seq: u64,
    pub op: Vec<u8>,
}

impl Command {
    pub fn new(client: ClientId, seq: u64, op: impl Into<Vec<u8>>) -> Self {
        Command { client, seq, op: op.into() }
    }
}

impl PartialEq for Command {
    fn eq(&self, other: &Self) -> bool {
        self.client == other.client && self.seq == other.seq
    }
}

impl Eq for Command {}

impl Hash for Command {
    fn hash<H: Hasher>(&self, state: &mut H) {
        self.client.hash(state);
        self.seq.hash(state);
    }
}

impl fmt::Display for Command {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.client.0, self.seq)
    }
}

/// The final command of a configuration; describes the next one.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct StopSign {
    pub next_config: ConfigId,
    pub processes: BTreeSet<ProcessId>,
    pub replica_map: BTreeMap<ProcessId, ReplicaId>,
}

impl StopSign {
    pub fn new(next_config: ConfigId, processes: impl IntoIterator<Item = ProcessId>) -> Self {
        let processes: BTreeSet<_> = processes.into_iter().collect();
        let replica_map = processes
            .iter()
            .map(|&p| (p, ReplicaId::new(next_config, p)))
            .collect();
        StopSign { next_config, processes, replica_map }
    }

    /// Checks that the replica map covers exactly the member set.
    pub fn validate(&self) -> Result<()> {
        if self.processes.is_empty() {
            return Err(invalid("stop-sign names no processes"));
        }
        let mapped: BTreeSet<_> = self.replica_map.keys().copied().collect();
        if mapped != self.processes {
            return Err(invalid("stop-sign replica map does not match its process set"));
        }
        if self.replica_map.iter().any(|(p, r)| r.process != *p || r.config != self.next_config) {
            return Err(invalid("stop-sign replica map names a foreign replica"));
        }
        Ok(())
    }
}

impl fmt::Display for StopSign {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "SS@{}{{", self.next_config.0)?;
        for (i, p) in self.processes.iter().enumerate() {
            if i > 0 {
                f.write_str("+")?;
            }
            write!(f, "{}", p.0)?;
        }
        f.write_str("}")
    }
}

/// One position of the replicated log.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum LogEntry {
    Normal(Command),
    Stop(StopSign),
}

impl LogEntry {
    pub fn is_stop(&self) -> bool {
        matches!(self, LogEntry::Stop(_))
    }

    pub fn as_command(&self) -> Option<&Command> {
        match self {
            LogEntry::Normal(c) => Some(c),
            LogEntry::Stop(_) => None,
        }
    }

    pub fn as_stop(&self) -> Option<&StopSign> {
        match self {
            LogEntry::Stop(ss) => Some(ss),
            LogEntry::Normal(_) => None,
        }
    }
}

impl From<Command> for LogEntry {
    fn from(c: Command) -> Self {
        LogEntry::Normal(c)
    }
}

impl From<StopSign> for LogEntry {
    fn from(ss: StopSign) -> Self {
        LogEntry::Stop(ss)
    }
}

impl fmt::Display for LogEntry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LogEntry::Normal(c) => c.fmt(f),
            LogEntry::Stop(ss) => ss.fmt(f),
        }
    }
}

/// Parses the text form. Command payloads are not part of the text form and
/// come back empty.
impl FromStr for LogEntry {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if let Some(rest) = s.strip_prefix("SS@") {
            let (cfg, members) = rest
                .split_once('{')
                .ok_or_else(|| invalid(format!("bad stop-sign `{s}`")))?;
            let members = members
                .strip_suffix('}')
                .ok_or_else(|| invalid(format!("bad stop-sign `{s}`")))?;
            let next = cfg.parse().map_err(|_| invalid(format!("bad stop-sign `{s}`")))?;
            let procs = members
                .split('+')
                .filter(|m| !m.is_empty())
                .map(|m| m.parse().map(ProcessId))
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|_| invalid(format!("bad stop-sign `{s}`")))?;
            return Ok(LogEntry::Stop(StopSign::new(ConfigId(next), procs)));
        }
        let (client, seq) = s
            .split_once(':')
            .ok_or_else(|| invalid(format!("bad entry `{s}`")))?;
        let client = client.parse().map_err(|_| invalid(format!("bad entry `{s}`")))?;
        let seq = seq.parse().map_err(|_| invalid(format!("bad entry `{s}`")))?;
        Ok(LogEntry::Normal(Command::new(ClientId(client), seq, Vec::new())))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::cmp::Ordering;

    fn round(c: u64, b: u64) -> Round {
        Round::new(ConfigId(c), Ballot(b))
    }

    #[test]
    fn ballot_make_examples() {
        assert_eq!(Ballot::new(0, ProcessId(2), 3).unwrap(), Ballot(2));
        assert_eq!(Ballot::new(2, ProcessId(1), 3).unwrap(), Ballot(7));
        assert!(matches!(
            Ballot::new(1, ProcessId(5), 3),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn ballot_decodes_and_increments() {
        let b = Ballot::new(4, ProcessId(9), BALLOT_CAP).unwrap();
        assert_eq!(b.seq(BALLOT_CAP), 4);
        assert_eq!(b.pid(BALLOT_CAP), ProcessId(9));
        let n = b.increment(BALLOT_CAP);
        assert_eq!(n.seq(BALLOT_CAP), 5);
        assert_eq!(n.pid(BALLOT_CAP), ProcessId(9));
    }

    #[test]
    fn round_cmp_examples() {
        assert_eq!(round(0, 9).cmp(&round(1, 0)), Ordering::Less);
        assert_eq!(round(1, 3).cmp(&round(1, 3)), Ordering::Equal);
        assert_eq!(round(2, 1).cmp(&round(2, 0)), Ordering::Greater);
    }

    #[test]
    fn command_equality_ignores_payload() {
        let a = Command::new(ClientId(1), 4, b"put x 1".to_vec());
        let b = Command::new(ClientId(1), 4, b"something else".to_vec());
        assert_eq!(a, b);
        assert_ne!(a, Command::new(ClientId(1), 5, b"put x 1".to_vec()));
    }

    #[test]
    fn text_forms_round_trip() {
        assert_eq!(round(0, 7).to_string(), "0.7");
        assert_eq!("3.2051".parse::<Round>().unwrap(), round(3, 2051));
        assert_eq!("p12".parse::<ProcessId>().unwrap(), ProcessId(12));
        assert!("x12".parse::<ProcessId>().is_err());

        let ss = StopSign::new(ConfigId(1), [ProcessId(4), ProcessId(1), ProcessId(2)]);
        assert_eq!(ss.to_string(), "SS@1{1+2+4}");
        let entry: LogEntry = "SS@1{1+2+4}".parse().unwrap();
        assert_eq!(entry, LogEntry::Stop(ss));

        let cmd: LogEntry = "7:12".parse().unwrap();
        assert_eq!(cmd.to_string(), "7:12");
    }

    #[test]
    fn stop_sign_validation() {
        let mut ss = StopSign::new(ConfigId(2), [ProcessId(1), ProcessId(2)]);
        assert!(ss.validate().is_ok());
        ss.replica_map.remove(&ProcessId(2));
        assert!(ss.validate().is_err());
        assert!(StopSign::new(ConfigId(1), []).validate().is_err());
    }
}
