//! The accepted sequence `v_a`, stored behind a truncation offset.
//!
//! All indices in this module are *global*: entry `g` of the sequence lives at
//! `entries[g - offset]`. Truncation drops a prefix and raises the offset, so
//! global indices keep their meaning for the rest of the run.

use crate::error::{Error, Result};
use crate::types::{LogEntry, ProcessId, Round};

/// First `min(l, len)` elements of a sequence.
pub fn prefix<T>(v: &[T], l: u64) -> &[T] {
    &v[..clamp(l, v.len())]
}

/// Elements from index `min(l, len)` onward.
pub fn suffix<T>(v: &[T], l: u64) -> &[T] {
    &v[clamp(l, v.len())..]
}

fn clamp(l: u64, len: usize) -> usize {
    usize::try_from(l).map_or(len, |l| l.min(len))
}

/// The append operator `⊕`.
///
/// With `dedup` set an entry already present in `seq` is not appended again.
/// Appending after a stop-sign is refused.
pub fn append(seq: &mut Vec<LogEntry>, entry: LogEntry, dedup: bool) -> Result<bool> {
    if seq.last().is_some_and(LogEntry::is_stop) {
        return Err(Error::LogStopped);
    }
    if dedup && seq.contains(&entry) {
        return Ok(false);
    }
    seq.push(entry);
    Ok(true)
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Hash)]
pub struct Log {
    offset: u64,
    entries: Vec<LogEntry>,
}

impl Log {
    pub fn new() -> Self {
        Log::default()
    }

    /// An empty log whose first `offset` positions are already compacted away.
    pub fn with_offset(offset: u64) -> Self {
        Log { offset, entries: Vec::new() }
    }

    pub fn from_parts(offset: u64, entries: Vec<LogEntry>) -> Self {
        Log { offset, entries }
    }

    pub fn offset(&self) -> u64 {
        self.offset
    }

    /// Global length: truncated entries plus retained ones.
    pub fn len(&self) -> u64 {
        self.offset + self.entries.len() as u64
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Retained entries, starting at global index `offset`.
    pub fn entries(&self) -> &[LogEntry] {
        &self.entries
    }

    pub fn last(&self) -> Option<&LogEntry> {
        self.entries.last()
    }

    /// True when the last retained entry is a stop-sign.
    pub fn is_stopped(&self) -> bool {
        self.entries.last().is_some_and(LogEntry::is_stop)
    }

    /// Translates a global index into a position in `entries`.
    pub fn local_index(&self, global: u64) -> Result<usize> {
        if global < self.offset {
            return Err(Error::TruncationViolated { index: global, offset: self.offset });
        }
        Ok((global - self.offset) as usize)
    }

    pub fn get(&self, global: u64) -> Result<&LogEntry> {
        let local = self.local_index(global)?;
        self.entries
            .get(local)
            .ok_or(Error::IndexOutOfRange { index: global, len: self.len() })
    }

    /// Entries from global index `l` onward (clamped at the end).
    pub fn suffix(&self, l: u64) -> Result<&[LogEntry]> {
        if l < self.offset {
            return Err(Error::TruncationViolated { index: l, offset: self.offset });
        }
        Ok(suffix(&self.entries, l - self.offset))
    }

    /// Retained entries below global index `l` (clamped at the end).
    pub fn prefix(&self, l: u64) -> Result<&[LogEntry]> {
        if l < self.offset {
            return Err(Error::TruncationViolated { index: l, offset: self.offset });
        }
        Ok(prefix(&self.entries, l - self.offset))
    }

    /// `v_a ⊕ entry`. Returns whether the entry was appended.
    pub fn append(&mut self, entry: LogEntry, dedup: bool) -> Result<bool> {
        append(&mut self.entries, entry, dedup)
    }

    /// Pushes without the stop-sign check. Only reachable from protocol
    /// mutations that deliberately break the algorithm.
    pub(crate) fn push_unchecked(&mut self, entry: LogEntry) {
        self.entries.push(entry);
    }

    /// `v_a ← prefix(v_a, cut) ++ tail`.
    pub fn replace_from(&mut self, cut: u64, tail: &[LogEntry]) -> Result<()> {
        if cut < self.offset {
            return Err(Error::TruncationViolated { index: cut, offset: self.offset });
        }
        let keep = clamp(cut - self.offset, self.entries.len());
        self.entries.truncate(keep);
        self.entries.extend_from_slice(tail);
        Ok(())
    }

    /// Drops every entry below global index `up_to` and raises the offset.
    pub fn truncate(&mut self, up_to: u64) -> Result<()> {
        if up_to <= self.offset {
            return Ok(());
        }
        if up_to > self.len() {
            return Err(Error::IndexOutOfRange { index: up_to, len: self.len() });
        }
        let drop = (up_to - self.offset) as usize;
        self.entries.drain(..drop);
        self.offset = up_to;
        Ok(())
    }
}

/// A promise collected by a leader during its prepare phase.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct PromiseRecord {
    pub from: ProcessId,
    pub n_a: Round,
    pub suffix: Vec<LogEntry>,
}

/// The promise to adopt: highest accepted round, then longest suffix, then
/// lowest process id.
pub fn max_promise(promises: &[PromiseRecord]) -> Result<&PromiseRecord> {
    promises
        .iter()
        .max_by(|a, b| {
            a.n_a
                .cmp(&b.n_a)
                .then(a.suffix.len().cmp(&b.suffix.len()))
                .then(b.from.cmp(&a.from))
        })
        .ok_or_else(|| crate::error::invalid("max_promise over an empty promise set"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::{Ballot, ClientId, Command, ConfigId, StopSign};
    use proptest::prelude::*;

    fn cmd(c: u64, s: u64) -> LogEntry {
        LogEntry::Normal(Command::new(ClientId(c), s, Vec::new()))
    }

    fn round(c: u64, b: u64) -> Round {
        Round::new(ConfigId(c), Ballot(b))
    }

    fn stop() -> LogEntry {
        LogEntry::Stop(StopSign::new(ConfigId(1), [ProcessId(1)]))
    }

    #[test]
    fn append_examples() {
        let (c1, c2) = (cmd(1, 1), cmd(1, 2));

        let mut v = vec![c1.clone(), c2.clone()];
        assert!(!append(&mut v, c1.clone(), true).unwrap());
        assert_eq!(v, vec![c1.clone(), c2.clone()]);

        let mut v = vec![c1.clone(), c2.clone()];
        assert!(append(&mut v, c1.clone(), false).unwrap());
        assert_eq!(v, vec![c1.clone(), c2.clone(), c1.clone()]);

        let mut v = Vec::new();
        append(&mut v, c1.clone(), true).unwrap();
        assert_eq!(v, vec![c1]);
    }

    #[test]
    fn append_after_stop_is_refused() {
        let mut v = vec![cmd(1, 1), stop()];
        assert_eq!(append(&mut v, cmd(1, 2), false), Err(Error::LogStopped));
        assert_eq!(append(&mut v, cmd(1, 2), true), Err(Error::LogStopped));
    }

    #[test]
    fn prefix_suffix_examples() {
        let v = ['a', 'b', 'c'];
        assert_eq!(prefix(&v, 2), &['a', 'b']);
        assert_eq!(suffix(&v, 2), &['c']);
        assert!(suffix(&['a'], 5).is_empty());
    }

    #[test]
    fn truncated_log_translates_indices() {
        let mut log = Log::from_parts(0, (0..7).map(|s| cmd(1, s)).collect());
        log.truncate(3).unwrap();
        assert_eq!(log.offset(), 3);
        assert_eq!(log.entries().len(), 4);
        assert_eq!(log.len(), 7);
        assert_eq!(log.get(3).unwrap(), &cmd(1, 3));
        assert_eq!(log.get(2), Err(Error::TruncationViolated { index: 2, offset: 3 }));
        assert_eq!(log.suffix(5).unwrap(), &[cmd(1, 5), cmd(1, 6)]);
        assert!(matches!(log.suffix(1), Err(Error::TruncationViolated { .. })));
        assert!(matches!(log.replace_from(2, &[]), Err(Error::TruncationViolated { .. })));
    }

    #[test]
    fn replace_from_cuts_and_extends() {
        let mut log = Log::from_parts(0, (0..5).map(|s| cmd(1, s)).collect());
        log.replace_from(3, &[cmd(2, 0), cmd(2, 1), cmd(2, 2)]).unwrap();
        assert_eq!(log.len(), 6);
        assert_eq!(log.get(3).unwrap(), &cmd(2, 0));
    }

    #[test]
    fn max_promise_examples() {
        let x = cmd(9, 1);
        let y = cmd(9, 2);
        let p = |from: u64, r: Round, s: Vec<LogEntry>| PromiseRecord { from: ProcessId(from), n_a: r, suffix: s };

        let set = [p(1, round(0, 2), vec![x.clone()]), p(2, round(0, 3), vec![])];
        assert!(max_promise(&set).unwrap().suffix.is_empty());

        let set = [p(1, round(0, 2), vec![x.clone()]), p(2, round(0, 2), vec![x.clone(), y.clone()])];
        assert_eq!(max_promise(&set).unwrap().suffix, vec![x.clone(), y]);

        let set = [p(1, round(0, 1), vec![])];
        assert!(max_promise(&set).unwrap().suffix.is_empty());

        assert!(max_promise(&[]).is_err());
    }

    #[test]
    fn max_promise_tie_breaks_on_lowest_process() {
        let x = cmd(9, 1);
        let set = [
            PromiseRecord { from: ProcessId(3), n_a: round(0, 5), suffix: vec![x.clone()] },
            PromiseRecord { from: ProcessId(2), n_a: round(0, 5), suffix: vec![cmd(8, 8)] },
        ];
        assert_eq!(max_promise(&set).unwrap().from, ProcessId(2));
    }

    proptest! {
        #[test]
        fn prefix_and_suffix_concatenate(v in prop::collection::vec(any::<u8>(), 0..20), l in 0u64..25) {
            let mut joined = prefix(&v, l).to_vec();
            joined.extend_from_slice(suffix(&v, l));
            prop_assert_eq!(joined, v);
        }

        #[test]
        fn dedup_append_is_idempotent(seqs in prop::collection::vec(0u64..6, 0..12), extra in 0u64..6) {
            let mut once: Vec<LogEntry> = Vec::new();
            for s in &seqs {
                append(&mut once, cmd(1, *s), true).unwrap();
            }
            append(&mut once, cmd(1, extra), true).unwrap();
            let mut twice = once.clone();
            append(&mut twice, cmd(1, extra), true).unwrap();
            prop_assert_eq!(once, twice);
        }

        #[test]
        fn max_promise_matches_sorted_maximum(
            raw in prop::collection::vec((1u64..6, 0u64..3, 0u64..4, 0usize..4), 1..8)
        ) {
            let promises: Vec<PromiseRecord> = raw
                .iter()
                .map(|&(from, c, b, len)| PromiseRecord {
                    from: ProcessId(from),
                    n_a: round(c, b),
                    suffix: (0..len as u64).map(|s| cmd(from, s)).collect(),
                })
                .collect();
            let mut sorted = promises.clone();
            sorted.sort_by(|a, b| {
                (a.n_a, a.suffix.len(), std::cmp::Reverse(a.from))
                    .cmp(&(b.n_a, b.suffix.len(), std::cmp::Reverse(b.from)))
            });
            let best = sorted.last().unwrap();
            let picked = max_promise(&promises).unwrap();
            prop_assert_eq!((picked.n_a, picked.suffix.len(), picked.from), (best.n_a, best.suffix.len(), best.from));
        }

        #[test]
        fn truncation_preserves_content(len in 0u64..30, cut in 0u64..30) {
            let full = Log::from_parts(0, (0..len).map(|s| cmd(1, s)).collect());
            let mut cut_log = full.clone();
            let cut = cut.min(len);
            cut_log.truncate(cut).unwrap();
            for g in cut..len {
                prop_assert_eq!(cut_log.get(g).unwrap(), full.get(g).unwrap());
            }
        }
    }
}
