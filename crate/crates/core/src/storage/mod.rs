//! Durable state of one process: the four protocol variables per
//! configuration, plus the application snapshot that allows truncation.
//!
//! Backends only need to store [`Record`]s and replay them. The shared
//! [`PersistentState::apply`] gives both backends identical semantics.

mod file;
mod volatile;

use std::collections::BTreeSet;

use thiserror::Error;

use crate::codec::{Decode, DecodeError, Encode, Reader, Writer};
use crate::log::Log;
use crate::paxos::{Durable, PersistAction};
use crate::types::{ConfigId, LogEntry, ProcessId, Round};

pub use file::FileStorage;
pub use volatile::VolatileStorage;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum StorageError {
    #[error("i/o error: {0}")]
    Io(String),
    #[error("corrupt storage: {0}")]
    Corrupt(String),
    #[error("rejected write: {0}")]
    Rejected(String),
    #[error("no state for configuration {0}")]
    Missing(ConfigId),
}

impl From<std::io::Error> for StorageError {
    fn from(e: std::io::Error) -> Self {
        StorageError::Io(e.to_string())
    }
}

impl From<DecodeError> for StorageError {
    fn from(e: DecodeError) -> Self {
        StorageError::Corrupt(e.to_string())
    }
}

/// Application snapshot covering the first `l_k` entries of the sequence.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct StoredSnapshot {
    pub l_k: u64,
    pub blob: Vec<u8>,
}

/// Everything a process keeps about one configuration.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct PersistentState {
    pub config: ConfigId,
    pub members: BTreeSet<ProcessId>,
    pub sigma_len: u64,
    pub durable: Durable,
    pub snapshot: Option<StoredSnapshot>,
}

impl PersistentState {
    pub fn initial(config: ConfigId, members: BTreeSet<ProcessId>, sigma_len: u64) -> Self {
        PersistentState {
            config,
            members,
            sigma_len,
            durable: Durable::initial(config, sigma_len),
            snapshot: None,
        }
    }

    /// Applies one record, enforcing the monotonicity rules.
    pub fn apply(&mut self, record: &Record) -> Result<(), StorageError> {
        let d = &mut self.durable;
        let reject = |m: String| Err(StorageError::Rejected(m));
        match record {
            Record::Init(state) => *self = state.clone(),
            Record::Promise(n) => {
                if *n < d.n_prom {
                    return reject(format!("promise {n} below {}", d.n_prom));
                }
                d.n_prom = *n;
            }
            Record::Accept { n_a, cut, suffix } => {
                if *cut > d.log.len() {
                    return reject(format!("accept cut {cut} past log length {}", d.log.len()));
                }
                d.log.replace_from(*cut, suffix).map_err(|e| StorageError::Rejected(e.to_string()))?;
                d.n_a = *n_a;
            }
            Record::Append(entry) => d.log.push_unchecked(entry.clone()),
            Record::Decide(l) => {
                if *l < d.l_d || *l > d.log.len() {
                    return reject(format!("decide {l} outside [{}, {}]", d.l_d, d.log.len()));
                }
                d.l_d = *l;
            }
            Record::Snapshot(s) => {
                if self.snapshot.as_ref().is_some_and(|old| old.l_k > s.l_k) {
                    return reject(format!("snapshot at {} older than the stored one", s.l_k));
                }
                self.snapshot = Some(s.clone());
            }
            Record::Truncate(up_to) => {
                if *up_to > d.l_d {
                    return reject(format!("truncate to {up_to} past decided length {}", d.l_d));
                }
                d.log.truncate(*up_to).map_err(|e| StorageError::Rejected(e.to_string()))?;
            }
        }
        Ok(())
    }
}

/// One durable write.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Record {
    Init(PersistentState),
    Promise(Round),
    Accept { n_a: Round, cut: u64, suffix: Vec<LogEntry> },
    Append(LogEntry),
    Decide(u64),
    Snapshot(StoredSnapshot),
    Truncate(u64),
}

impl Record {
    pub fn tag(&self) -> u8 {
        match self {
            Record::Init(_) => 1,
            Record::Promise(_) => 2,
            Record::Accept { .. } => 3,
            Record::Append(_) => 4,
            Record::Decide(_) => 5,
            Record::Snapshot(_) => 6,
            Record::Truncate(_) => 7,
        }
    }

    pub fn encode_payload(&self) -> Vec<u8> {
        let mut w = Writer::new();
        match self {
            Record::Init(s) => w.put(s),
            Record::Promise(n) => w.put(n),
            Record::Accept { n_a, cut, suffix } => w.put(n_a).u64(*cut).seq(suffix),
            Record::Append(e) => w.put(e),
            Record::Decide(l) => w.u64(*l),
            Record::Snapshot(s) => w.u64(s.l_k).bytes(&s.blob),
            Record::Truncate(t) => w.u64(*t),
        };
        w.into_bytes()
    }

    pub fn decode_payload(tag: u8, payload: &[u8]) -> Result<Record, DecodeError> {
        let mut r = Reader::new(payload);
        let rec = match tag {
            1 => Record::Init(r.get()?),
            2 => Record::Promise(r.get()?),
            3 => Record::Accept { n_a: r.get()?, cut: r.u64()?, suffix: r.seq()? },
            4 => Record::Append(r.get()?),
            5 => Record::Decide(r.u64()?),
            6 => Record::Snapshot(StoredSnapshot { l_k: r.u64()?, blob: r.bytes()? }),
            7 => Record::Truncate(r.u64()?),
            t => return Err(DecodeError::Tag { what: "record", tag: t, at: 0 }),
        };
        r.finish()?;
        Ok(rec)
    }
}

impl From<PersistAction> for Record {
    fn from(a: PersistAction) -> Self {
        match a {
            PersistAction::Promise(n) => Record::Promise(n),
            PersistAction::Accept { n_a, cut, suffix } => Record::Accept { n_a, cut, suffix },
            PersistAction::Append(e) => Record::Append(e),
            PersistAction::Decide(l) => Record::Decide(l),
        }
    }
}

impl Encode for PersistentState {
    fn encode(&self, w: &mut Writer) {
        w.put(&self.config).u32(self.members.len() as u32);
        for p in &self.members {
            w.put(p);
        }
        let d = &self.durable;
        w.u64(self.sigma_len)
            .put(&d.n_prom)
            .put(&d.n_a)
            .u64(d.log.offset())
            .seq(d.log.entries())
            .u64(d.l_d);
        match &self.snapshot {
            Some(s) => w.u8(1).u64(s.l_k).bytes(&s.blob),
            None => w.u8(0),
        };
    }
}

impl Decode for PersistentState {
    fn decode(r: &mut Reader<'_>) -> Result<Self, DecodeError> {
        let config = r.get()?;
        let n = r.u32()?;
        let mut members = BTreeSet::new();
        for _ in 0..n {
            members.insert(r.get()?);
        }
        let sigma_len = r.u64()?;
        let n_prom = r.get()?;
        let n_a = r.get()?;
        let offset = r.u64()?;
        let entries = r.seq()?;
        let l_d = r.u64()?;
        let snapshot = match r.u8()? {
            0 => None,
            1 => Some(StoredSnapshot { l_k: r.u64()?, blob: r.bytes()? }),
            t => return Err(r.tag_error("snapshot flag", t)),
        };
        Ok(PersistentState {
            config,
            members,
            sigma_len,
            durable: Durable { n_prom, n_a, log: Log::from_parts(offset, entries), l_d },
            snapshot,
        })
    }
}

/// Durable storage for all configurations of one process.
pub trait Storage {
    /// Configurations with stored state, ascending.
    fn configs(&self) -> Result<Vec<ConfigId>, StorageError>;

    /// Last fully written state of `config`, or `None` if never initialised.
    fn load(&self, config: ConfigId) -> Result<Option<PersistentState>, StorageError>;

    fn write(&mut self, config: ConfigId, record: &Record) -> Result<(), StorageError>;

    /// Removes every trace of `config`.
    fn destroy(&mut self, config: ConfigId) -> Result<(), StorageError>;

    /// Drops cached state and re-reads the medium, as a restarted process would.
    fn reopen(&mut self) -> Result<(), StorageError> {
        Ok(())
    }

    fn persist_init(&mut self, state: &PersistentState) -> Result<(), StorageError> {
        self.write(state.config, &Record::Init(state.clone()))
    }

    fn persist_promise(&mut self, config: ConfigId, n: Round) -> Result<(), StorageError> {
        self.write(config, &Record::Promise(n))
    }

    fn persist_accept(&mut self, config: ConfigId, n_a: Round, cut: u64, suffix: &[LogEntry]) -> Result<(), StorageError> {
        self.write(config, &Record::Accept { n_a, cut, suffix: suffix.to_vec() })
    }

    fn persist_append(&mut self, config: ConfigId, entry: &LogEntry) -> Result<(), StorageError> {
        self.write(config, &Record::Append(entry.clone()))
    }

    fn persist_decide(&mut self, config: ConfigId, l_d: u64) -> Result<(), StorageError> {
        self.write(config, &Record::Decide(l_d))
    }

    fn persist_snapshot(&mut self, config: ConfigId, l_k: u64, blob: &[u8]) -> Result<(), StorageError> {
        self.write(config, &Record::Snapshot(StoredSnapshot { l_k, blob: blob.to_vec() }))
    }

    fn persist_truncate(&mut self, config: ConfigId, up_to: u64) -> Result<(), StorageError> {
        self.write(config, &Record::Truncate(up_to))
    }
}

impl<S: Storage + ?Sized> Storage for Box<S> {
    fn configs(&self) -> Result<Vec<ConfigId>, StorageError> {
        (**self).configs()
    }
    fn load(&self, config: ConfigId) -> Result<Option<PersistentState>, StorageError> {
        (**self).load(config)
    }
    fn write(&mut self, config: ConfigId, record: &Record) -> Result<(), StorageError> {
        (**self).write(config, record)
    }
    fn destroy(&mut self, config: ConfigId) -> Result<(), StorageError> {
        (**self).destroy(config)
    }
    fn reopen(&mut self) -> Result<(), StorageError> {
        (**self).reopen()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::{Ballot, ClientId, Command};
    use proptest::prelude::*;

    pub(super) fn cmd(s: u64) -> LogEntry {
        LogEntry::Normal(Command::new(ClientId(1), s, vec![s as u8]))
    }

    pub(super) fn init() -> PersistentState {
        PersistentState::initial(ConfigId(0), [ProcessId(1), ProcessId(2), ProcessId(3)].into(), 0)
    }

    /// A valid record sequence driven by small integers.
    pub(super) fn script(ops: &[(u8, u64)]) -> Vec<Record> {
        let mut state = init();
        let mut out = vec![Record::Init(state.clone())];
        let mut next = 0;
        for &(op, v) in ops {
            let d = &state.durable;
            let rec = match op % 6 {
                0 => Record::Promise(Round::new(ConfigId(0), Ballot(d.n_prom.ballot.0 + v % 3))),
                1 => {
                    let cut = d.l_d.max(d.log.offset()) + v % (d.log.len() - d.l_d.max(d.log.offset()) + 1);
                    let suffix = (0..v % 4).map(|_| { next += 1; cmd(next) }).collect();
                    Record::Accept { n_a: d.n_prom, cut, suffix }
                }
                2 => { next += 1; Record::Append(cmd(next)) }
                3 => Record::Decide(d.l_d + v % (d.log.len() - d.l_d + 1)),
                4 => Record::Snapshot(StoredSnapshot { l_k: d.l_d, blob: vec![v as u8; 3] }),
                _ => Record::Truncate(d.log.offset() + v % (d.l_d - d.log.offset() + 1)),
            };
            state.apply(&rec).unwrap();
            out.push(rec);
        }
        out
    }

    pub(super) fn fold(records: &[Record]) -> Option<PersistentState> {
        let mut it = records.iter();
        let mut state = match it.next()? {
            Record::Init(s) => s.clone(),
            _ => return None,
        };
        for r in it {
            state.apply(r).unwrap();
        }
        Some(state)
    }

    #[test]
    fn truncate_example() {
        let mut s = init();
        for i in 0..7 {
            s.apply(&Record::Append(cmd(i))).unwrap();
        }
        s.apply(&Record::Decide(5)).unwrap();
        s.apply(&Record::Truncate(3)).unwrap();
        assert_eq!(s.durable.log.offset(), 3);
        assert_eq!(s.durable.log.entries().len(), 4);
    }

    #[test]
    fn monotonicity_is_enforced() {
        let mut s = init();
        s.apply(&Record::Promise(Round::new(ConfigId(0), Ballot(5)))).unwrap();
        assert!(s.apply(&Record::Promise(Round::new(ConfigId(0), Ballot(4)))).is_err());
        assert!(s.apply(&Record::Decide(1)).is_err());
        assert!(s.apply(&Record::Truncate(1)).is_err());
    }

    #[test]
    fn record_payloads_round_trip() {
        for rec in script(&[(0, 1), (1, 3), (2, 0), (3, 2), (4, 1), (5, 1), (1, 2)]) {
            let back = Record::decode_payload(rec.tag(), &rec.encode_payload()).unwrap();
            assert_eq!(back, rec);
        }
    }

    proptest! {
        #[test]
        fn truncation_preserves_reads(ops in prop::collection::vec((0u8..6, 0u64..8), 0..40)) {
            let records = script(&ops);
            let mut plain = init();
            let mut truncating = init();
            for r in &records[1..] {
                truncating.apply(r).unwrap();
                if !matches!(r, Record::Truncate(_)) {
                    plain.apply(r).unwrap();
                }
            }
            let t = &truncating.durable.log;
            prop_assert_eq!(t.len(), plain.durable.log.len());
            for g in t.offset()..t.len() {
                prop_assert_eq!(t.get(g).unwrap(), plain.durable.log.get(g).unwrap());
            }
        }
    }
}
