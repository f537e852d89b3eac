//! Gossip-based ballot leader election.
//!
//! Every `delay` time units a process closes the current heartbeat round. If
//! it heard from a majority (itself included) it looks at the highest ballot
//! among the replies and either trusts that process or, when that ballot is
//! below the largest one it has seen anywhere, raises its own ballot and
//! waits for a later round. Late replies stretch the delay by `delta`.
//!
//! The state machine does no I/O. The host schedules the next timeout after
//! [`Ble::delay`] and sends the returned heartbeats.

use std::collections::BTreeSet;

use crate::error::{invalid, Result};
use crate::message::Message;
use crate::types::{Ballot, ProcessId};

/// Default heartbeat delay increment in simulated time units.
pub const DEFAULT_DELTA: u64 = 10;

/// A leader announcement: `process` is trusted with `ballot`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct LeaderEvent {
    pub process: ProcessId,
    pub ballot: Ballot,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Ble {
    me: ProcessId,
    processes: BTreeSet<ProcessId>,
    cap: u64,
    round: u64,
    ballots: BTreeSet<(Ballot, ProcessId)>,
    own: Ballot,
    leader: Option<LeaderEvent>,
    max_ballot: Ballot,
    delay: u64,
    delta: u64,
}

impl Ble {
    /// `seed` is the ballot of the persisted promise when recovering, or
    /// `Ballot(0)` on first boot. A recovering process starts with its own
    /// ballot above `seed`, so re-electing itself opens a fresh round.
    pub fn new(me: ProcessId, processes: BTreeSet<ProcessId>, delta: u64, seed: Ballot, cap: u64) -> Result<Ble> {
        if !processes.contains(&me) {
            return Err(invalid(format!("{me} is not one of the election's processes")));
        }
        if delta == 0 {
            return Err(invalid("heartbeat delta must be positive"));
        }
        let mut own = Ballot::new(0, me, cap)?;
        while own <= seed {
            own = own.increment(cap);
        }
        Ok(Ble {
            me,
            processes,
            cap,
            round: 0,
            ballots: BTreeSet::new(),
            own,
            leader: None,
            max_ballot: own.max(seed),
            delay: delta,
            delta,
        })
    }

    pub fn me(&self) -> ProcessId {
        self.me
    }

    pub fn round(&self) -> u64 {
        self.round
    }

    pub fn own_ballot(&self) -> Ballot {
        self.own
    }

    pub fn max_ballot(&self) -> Ballot {
        self.max_ballot
    }

    pub fn leader(&self) -> Option<LeaderEvent> {
        self.leader
    }

    /// Time until the next timeout should fire.
    pub fn delay(&self) -> u64 {
        self.delay
    }

    pub fn processes_contains(&self, p: ProcessId) -> bool {
        self.processes.contains(&p)
    }

    pub fn collected(&self) -> usize {
        self.ballots.len()
    }

    fn majority(&self) -> usize {
        self.processes.len() / 2 + 1
    }

    /// Closes the current round. Returns the heartbeat requests for the next
    /// one and a leader event if the trusted leader changed.
    pub fn on_timeout(&mut self) -> (Vec<(ProcessId, Message)>, Option<LeaderEvent>) {
        let event = if self.ballots.len() + 1 >= self.majority() { self.check_leader() } else { None };
        self.ballots.clear();
        self.round += 1;
        let req = Message::HeartbeatRequest { round: self.round, max_ballot: self.max_ballot };
        let out = self
            .processes
            .iter()
            .filter(|&&p| p != self.me)
            .map(|&p| (p, req.clone()))
            .collect();
        (out, event)
    }

    /// Leader check over the ballots collected this round plus our own.
    pub fn check_leader(&mut self) -> Option<LeaderEvent> {
        let (top_ballot, top_process) = self
            .ballots
            .iter()
            .copied()
            .chain(std::iter::once((self.own, self.me)))
            .max()
            .expect("own ballot is always a candidate");
        if top_ballot < self.max_ballot {
            while self.own <= self.max_ballot {
                self.own = self.own.increment(self.cap);
            }
            self.leader = None;
            return None;
        }
        let top = LeaderEvent { process: top_process, ballot: top_ballot };
        if self.leader != Some(top) {
            self.max_ballot = top_ballot;
            self.leader = Some(top);
            return Some(top);
        }
        None
    }

    pub fn on_heartbeat_request(&mut self, from: ProcessId, round: u64, max_ballot: Ballot) -> (ProcessId, Message) {
        self.observe(max_ballot);
        (from, Message::HeartbeatReply { round, ballot: self.own })
    }

    pub fn on_heartbeat_reply(&mut self, from: ProcessId, round: u64, ballot: Ballot) {
        if round == self.round {
            self.ballots.insert((ballot, from));
        } else {
            self.delay += self.delta;
        }
    }

    /// Raises the largest seen ballot, e.g. from a promise made by the
    /// co-located replica.
    pub fn observe(&mut self, ballot: Ballot) {
        if ballot > self.max_ballot {
            self.max_ballot = ballot;
        }
    }
}
