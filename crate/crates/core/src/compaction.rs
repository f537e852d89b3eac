//! Log truncation driven by decided snapshot markers.
//!
//! A replica that has taken a snapshot covering `l_k` entries proposes a
//! marker command. Because markers travel through the decided sequence,
//! every replica sees them in the same order and computes the same
//! truncation point: the smallest `l_k` reported by any member.

use std::collections::{BTreeMap, BTreeSet};

use crate::codec::{Reader, Writer};
use crate::error::{Error, Result};
use crate::types::{ClientId, Command, ProcessId};

const MARKER_BIT: u64 = 1 << 63;
const MARKER_TAG: u8 = b'S';

/// Client ids with the top bit set are reserved for snapshot markers.
pub fn is_marker_client(client: ClientId) -> bool {
    client.0 & MARKER_BIT != 0
}

/// Decoded payload of a snapshot marker command.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct SnapshotMarker {
    pub replica: ProcessId,
    pub k: u64,
    pub l_k: u64,
}

impl SnapshotMarker {
    /// Op layout: `'S' | j u64 | k u64 | l_k u64`, all little-endian.
    pub fn encode(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.u8(MARKER_TAG).u64(self.replica.0).u64(self.k).u64(self.l_k);
        w.into_bytes()
    }

    pub fn to_command(&self) -> Command {
        Command::new(ClientId(MARKER_BIT | self.replica.0), self.k, self.encode())
    }

    /// Returns `None` for ordinary client commands.
    pub fn from_command(cmd: &Command) -> Option<SnapshotMarker> {
        if !is_marker_client(cmd.client) {
            return None;
        }
        let mut r = Reader::new(&cmd.op);
        if r.u8().ok()? != MARKER_TAG {
            return None;
        }
        let m = SnapshotMarker { replica: ProcessId(r.u64().ok()?), k: r.u64().ok()?, l_k: r.u64().ok()? };
        r.finish().ok()?;
        (cmd.client.0 == MARKER_BIT | m.replica.0 && cmd.seq == m.k).then_some(m)
    }
}

/// Per-configuration record of the largest decided `l_k` of each member.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct SnapshotLedger {
    members: BTreeSet<ProcessId>,
    reported: BTreeMap<ProcessId, u64>,
    truncated: u64,
}

impl SnapshotLedger {
    /// `floor` is where the configuration's indices begin.
    pub fn new(members: BTreeSet<ProcessId>, floor: u64) -> Self {
        SnapshotLedger { members, reported: BTreeMap::new(), truncated: floor }
    }

    pub fn truncated(&self) -> u64 {
        self.truncated
    }

    pub fn reported(&self, j: ProcessId) -> Option<u64> {
        self.reported.get(&j).copied()
    }

    /// Records a decided marker. Returns the new truncation point when the
    /// minimum over all members moves past the previous one.
    pub fn on_snapshot_decided(&mut self, j: ProcessId, _k: u64, l_k: u64) -> Option<u64> {
        if !self.members.contains(&j) {
            return None;
        }
        let slot = self.reported.entry(j).or_insert(0);
        *slot = (*slot).max(l_k);
        if self.reported.len() < self.members.len() {
            return None;
        }
        let min = self.reported.values().copied().min()?;
        if min > self.truncated {
            self.truncated = min;
            Some(min)
        } else {
            None
        }
    }
}

/// Local position of a global index in a log truncated at `offset`.
pub fn translate(global: u64, offset: u64) -> Result<u64> {
    global.checked_sub(offset).ok_or(Error::TruncationViolated { index: global, offset })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn members(n: u64) -> BTreeSet<ProcessId> {
        (1..=n).map(ProcessId).collect()
    }

    #[test]
    fn all_members_must_report() {
        let mut l = SnapshotLedger::new(members(3), 0);
        assert_eq!(l.on_snapshot_decided(ProcessId(1), 1, 32), None);
        assert_eq!(l.on_snapshot_decided(ProcessId(2), 1, 32), None);
        assert_eq!(l.on_snapshot_decided(ProcessId(3), 1, 32), Some(32));
        assert_eq!(l.on_snapshot_decided(ProcessId(3), 2, 16), None);
        assert_eq!(l.truncated(), 32);
    }

    #[test]
    fn outsiders_are_ignored() {
        let mut l = SnapshotLedger::new(members(1), 0);
        assert_eq!(l.on_snapshot_decided(ProcessId(9), 1, 5), None);
        assert_eq!(l.on_snapshot_decided(ProcessId(1), 1, 5), Some(5));
    }

    #[test]
    fn translate_examples() {
        assert_eq!(translate(7, 3).unwrap(), 4);
        assert_eq!(translate(3, 3).unwrap(), 0);
        assert!(matches!(translate(2, 3), Err(Error::TruncationViolated { index: 2, offset: 3 })));
    }

    #[test]
    fn marker_layout_is_pinned() {
        let m = SnapshotMarker { replica: ProcessId(2), k: 3, l_k: 64 };
        let mut expected = vec![b'S'];
        for v in [2u64, 3, 64] {
            expected.extend_from_slice(&v.to_le_bytes());
        }
        assert_eq!(m.encode(), expected);
        let c = m.to_command();
        assert_eq!(c.client, ClientId(MARKER_BIT | 2));
        assert_eq!(SnapshotMarker::from_command(&c), Some(m));
        assert_eq!(SnapshotMarker::from_command(&Command::new(ClientId(2), 3, expected)), None);
    }

    proptest! {
        #[test]
        fn truncation_point_is_min_of_latest_reports(
            reports in prop::collection::vec((1u64..4, 0u64..200), 0..40)
        ) {
            let mut l = SnapshotLedger::new(members(3), 0);
            let mut best = BTreeMap::new();
            let mut last = 0;
            for (j, lk) in reports {
                let out = l.on_snapshot_decided(ProcessId(j), 0, lk);
                let e = best.entry(j).or_insert(0u64);
                *e = (*e).max(lk);
                let expect = if best.len() == 3 { *best.values().min().unwrap() } else { 0 };
                prop_assert_eq!(l.truncated(), expect.max(last));
                if let Some(t) = out {
                    prop_assert!(t > last);
                    last = t;
                }
                prop_assert!(l.truncated() <= best.values().copied().min().unwrap_or(0) || best.len() < 3);
            }
        }
    }
}
