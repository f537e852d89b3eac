//! Reconfigurable Sequence Paxos with ballot leader election, crash
//! recovery, log compaction and a deterministic simulation harness.
//!
//! The protocol pieces ([`ble`], [`paxos`], [`rsm`], [`compaction`]) are pure
//! state machines that return effects. [`orchestrator`] wires them to
//! [`storage`] for one process, and [`simnet`] runs many processes over
//! simulated links. [`checker`] verifies the resulting traces.

pub mod ble;
pub mod checker;
pub mod codec;
pub mod compaction;
pub mod error;
pub mod log;
pub mod message;
pub mod orchestrator;
pub mod paxos;
pub mod rsm;
pub mod runner;
pub mod scenario;
pub mod simnet;
pub mod storage;
pub mod trace;
pub mod types;

pub use error::{Error, Result};
pub use types::{Ballot, ClientId, Command, ConfigId, LogEntry, ProcessId, ReplicaId, Round, StopSign, BALLOT_CAP};

/// FNV-1a over `bytes`; used for state digests in traces.
pub fn fnv64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}
