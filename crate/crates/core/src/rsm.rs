//! Key-value state machine applied on top of the decided sequence.
//!
//! Clients are sequential, so their sequence numbers only grow. The client
//! table stores the last command and its response per client; a repeat of
//! it returns the stored response without executing again, and an older
//! command (a late retry) is skipped.

use std::collections::BTreeMap;
use std::fmt;

use crate::codec::{Decode, DecodeError, Reader, Writer};
use crate::compaction::is_marker_client;
use crate::error::{invalid, Result};
use crate::types::{ClientId, Command, LogEntry};

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum KvOp {
    Put { key: String, value: Vec<u8> },
    Get { key: String },
}

impl KvOp {
    pub fn put(key: impl Into<String>, value: impl Into<Vec<u8>>) -> KvOp {
        KvOp::Put { key: key.into(), value: value.into() }
    }

    pub fn get(key: impl Into<String>) -> KvOp {
        KvOp::Get { key: key.into() }
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut w = Writer::new();
        match self {
            KvOp::Put { key, value } => w.u8(1).bytes(key.as_bytes()).bytes(value),
            KvOp::Get { key } => w.u8(2).bytes(key.as_bytes()),
        };
        w.into_bytes()
    }

    pub fn decode(buf: &[u8]) -> Result<KvOp, DecodeError> {
        let mut r = Reader::new(buf);
        let key = |r: &mut Reader<'_>| -> Result<String, DecodeError> {
            let k = String::from_utf8(r.bytes()?).map_err(|_| DecodeError::Malformed("key is not utf-8".into()))?;
            if k.is_empty() {
                return Err(DecodeError::Malformed("empty key".into()));
            }
            Ok(k)
        };
        let op = match r.u8()? {
            1 => KvOp::Put { key: key(&mut r)?, value: r.bytes()? },
            2 => KvOp::Get { key: key(&mut r)? },
            t => return Err(r.tag_error("kv op", t)),
        };
        r.finish()?;
        Ok(op)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum Response {
    Written,
    Value(Option<Vec<u8>>),
    /// The payload did not decode as a [`KvOp`].
    Invalid,
}

impl fmt::Display for Response {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Response::Written => f.write_str("ok"),
            Response::Value(None) => f.write_str("none"),
            Response::Value(Some(v)) => write!(f, "v{}", crate::message::hex(v)),
            Response::Invalid => f.write_str("invalid"),
        }
    }
}

impl std::str::FromStr for Response {
    type Err = crate::error::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ok" => Ok(Response::Written),
            "none" => Ok(Response::Value(None)),
            "invalid" => Ok(Response::Invalid),
            v => match v.strip_prefix('v') {
                Some(h) => Ok(Response::Value(Some(crate::message::unhex(h)?))),
                None => Err(invalid(format!("bad response `{s}`"))),
            },
        }
    }
}

fn put_response(w: &mut Writer, r: &Response) {
    match r {
        Response::Written => w.u8(0),
        Response::Value(None) => w.u8(1),
        Response::Value(Some(v)) => w.u8(2).bytes(v),
        Response::Invalid => w.u8(3),
    };
}

fn get_response(r: &mut Reader<'_>) -> Result<Response, DecodeError> {
    Ok(match r.u8()? {
        0 => Response::Written,
        1 => Response::Value(None),
        2 => Response::Value(Some(r.bytes()?)),
        3 => Response::Invalid,
        t => return Err(r.tag_error("response", t)),
    })
}

/// Last decided command of one client and what it returned.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct ClientRecord {
    pub seq: u64,
    pub response: Response,
}

/// Captured state after `l_k` applied entries.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct RsmSnapshot {
    pub k: u64,
    pub l_k: u64,
    pub kv: BTreeMap<String, Vec<u8>>,
    pub clients: BTreeMap<ClientId, ClientRecord>,
}

impl RsmSnapshot {
    /// Deterministic encoding: sorted key/value pairs, then the client table.
    pub fn to_blob(&self) -> Vec<u8> {
        encode_state(&self.kv, &self.clients)
    }

    pub fn from_blob(k: u64, l_k: u64, blob: &[u8]) -> Result<RsmSnapshot, DecodeError> {
        let mut r = Reader::new(blob);
        let n = r.u32()?;
        let mut kv = BTreeMap::new();
        for _ in 0..n {
            let key = String::from_utf8(r.bytes()?).map_err(|_| DecodeError::Malformed("key is not utf-8".into()))?;
            kv.insert(key, r.bytes()?);
        }
        let n = r.u32()?;
        let mut clients = BTreeMap::new();
        for _ in 0..n {
            let client = ClientId::decode(&mut r)?;
            let seq = r.u64()?;
            clients.insert(client, ClientRecord { seq, response: get_response(&mut r)? });
        }
        r.finish()?;
        Ok(RsmSnapshot { k, l_k, kv, clients })
    }
}

fn encode_state(kv: &BTreeMap<String, Vec<u8>>, clients: &BTreeMap<ClientId, ClientRecord>) -> Vec<u8> {
    let mut w = Writer::new();
    w.u32(kv.len() as u32);
    for (k, v) in kv {
        w.bytes(k.as_bytes()).bytes(v);
    }
    w.u32(clients.len() as u32);
    for (c, rec) in clients {
        w.u64(c.0).u64(rec.seq);
        put_response(&mut w, &rec.response);
    }
    w.into_bytes()
}

/// Outcome of applying one entry.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Applied {
    /// Stop-signs, snapshot markers and stale client commands do not
    /// touch the store.
    Skipped,
    Executed(Response),
    /// A repeat of the client's last command; the stored response.
    Duplicate(Response),
}

impl Applied {
    pub fn response(&self) -> Option<&Response> {
        match self {
            Applied::Skipped => None,
            Applied::Executed(r) | Applied::Duplicate(r) => Some(r),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Hash)]
pub struct KvStore {
    kv: BTreeMap<String, Vec<u8>>,
    clients: BTreeMap<ClientId, ClientRecord>,
    applied: u64,
    snapshots_taken: u64,
}

impl KvStore {
    pub fn new() -> Self {
        KvStore::default()
    }

    /// Number of entries applied, i.e. the next expected global index.
    pub fn applied(&self) -> u64 {
        self.applied
    }

    pub fn kv(&self) -> &BTreeMap<String, Vec<u8>> {
        &self.kv
    }

    pub fn clients(&self) -> &BTreeMap<ClientId, ClientRecord> {
        &self.clients
    }

    pub fn apply(&mut self, entry: &LogEntry, index: u64) -> Result<Applied> {
        if index != self.applied {
            return Err(invalid(format!("entry {index} applied out of order, expected {}", self.applied)));
        }
        self.applied += 1;
        let cmd = match entry {
            LogEntry::Stop(_) => return Ok(Applied::Skipped),
            LogEntry::Normal(c) if is_marker_client(c.client) => return Ok(Applied::Skipped),
            LogEntry::Normal(c) => c,
        };
        Ok(self.execute(cmd))
    }

    fn execute(&mut self, cmd: &Command) -> Applied {
        if let Some(rec) = self.clients.get(&cmd.client) {
            if rec.seq == cmd.seq {
                return Applied::Duplicate(rec.response.clone());
            }
            if cmd.seq < rec.seq {
                return Applied::Skipped;
            }
        }
        let response = match KvOp::decode(&cmd.op) {
            Ok(KvOp::Put { key, value }) => {
                self.kv.insert(key, value);
                Response::Written
            }
            Ok(KvOp::Get { key }) => Response::Value(self.kv.get(&key).cloned()),
            Err(_) => Response::Invalid,
        };
        self.clients.insert(cmd.client, ClientRecord { seq: cmd.seq, response: response.clone() });
        Applied::Executed(response)
    }

    /// Snapshot of the state after exactly `covered_l` applied entries.
    pub fn take_snapshot(&mut self, covered_l: u64) -> Result<RsmSnapshot> {
        if covered_l != self.applied {
            return Err(invalid(format!(
                "snapshot requested at {covered_l} but {} entries are applied",
                self.applied
            )));
        }
        self.snapshots_taken += 1;
        Ok(RsmSnapshot { k: self.snapshots_taken, l_k: covered_l, kv: self.kv.clone(), clients: self.clients.clone() })
    }

    /// State blob equal to what a snapshot taken now would hold.
    pub fn state_blob(&self) -> Vec<u8> {
        encode_state(&self.kv, &self.clients)
    }

    /// Rebuilds the state from a snapshot and the entries that follow it.
    pub fn restore(snapshot: &RsmSnapshot, suffix: &[LogEntry], start: u64) -> Result<KvStore> {
        if start != snapshot.l_k {
            return Err(invalid(format!("suffix starts at {start}, snapshot covers {}", snapshot.l_k)));
        }
        let mut s = KvStore {
            kv: snapshot.kv.clone(),
            clients: snapshot.clients.clone(),
            applied: snapshot.l_k,
            snapshots_taken: snapshot.k,
        };
        for (i, e) in suffix.iter().enumerate() {
            s.apply(e, start + i as u64)?;
        }
        Ok(s)
    }

    /// Replays a whole sequence from the empty state.
    pub fn replay(entries: &[LogEntry]) -> Result<KvStore> {
        let mut s = KvStore::new();
        for (i, e) in entries.iter().enumerate() {
            s.apply(e, i as u64)?;
        }
        Ok(s)
    }

    /// 64-bit digest of the store and client table.
    pub fn digest(&self) -> u64 {
        crate::fnv64(&self.state_blob())
    }
}
