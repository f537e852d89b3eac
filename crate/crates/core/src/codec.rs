//! Little-endian binary encoding shared by the file backend, snapshot blobs,
//! state transfer and message size measurement.
//!
//! Integers are fixed width (`u8`, `u32`, `u64`), byte strings and sequences
//! carry a `u32` length prefix. There is no versioning: the format is
//! pinned by golden tests instead.

use std::collections::BTreeSet;

use thiserror::Error;

use crate::types::{Ballot, ClientId, Command, ConfigId, LogEntry, ProcessId, Round, StopSign};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum DecodeError {
    #[error("unexpected end of input at byte {0}")]
    Eof(usize),
    #[error("unknown {what} tag {tag} at byte {at}")]
    Tag { what: &'static str, tag: u8, at: usize },
    #[error("{0} trailing bytes after the value")]
    Trailing(usize),
    #[error("malformed value: {0}")]
    Malformed(String),
}

#[derive(Debug, Default, Clone)]
pub struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    pub fn new() -> Self {
        Writer::default()
    }

    pub fn into_bytes(self) -> Vec<u8> {
        self.buf
    }

    pub fn u8(&mut self, v: u8) -> &mut Self {
        self.buf.push(v);
        self
    }

    pub fn u32(&mut self, v: u32) -> &mut Self {
        self.buf.extend_from_slice(&v.to_le_bytes());
        self
    }

    pub fn u64(&mut self, v: u64) -> &mut Self {
        self.buf.extend_from_slice(&v.to_le_bytes());
        self
    }

    pub fn bytes(&mut self, v: &[u8]) -> &mut Self {
        self.u32(len32(v.len()));
        self.buf.extend_from_slice(v);
        self
    }

    pub fn put<T: Encode + ?Sized>(&mut self, v: &T) -> &mut Self {
        v.encode(self);
        self
    }

    pub fn seq<T: Encode>(&mut self, items: &[T]) -> &mut Self {
        self.u32(len32(items.len()));
        for item in items {
            item.encode(self);
        }
        self
    }
}

fn len32(n: usize) -> u32 {
    u32::try_from(n).expect("length does not fit the u32 prefix")
}

#[derive(Debug, Clone)]
pub struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub fn new(buf: &'a [u8]) -> Self {
        Reader { buf, pos: 0 }
    }

    pub fn position(&self) -> usize {
        self.pos
    }

    pub fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8], DecodeError> {
        if self.remaining() < n {
            return Err(DecodeError::Eof(self.pos));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub fn u8(&mut self) -> Result<u8, DecodeError> {
        Ok(self.take(1)?[0])
    }

    pub fn u32(&mut self) -> Result<u32, DecodeError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub fn u64(&mut self) -> Result<u64, DecodeError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub fn bytes(&mut self) -> Result<Vec<u8>, DecodeError> {
        let n = self.u32()? as usize;
        Ok(self.take(n)?.to_vec())
    }

    pub fn get<T: Decode>(&mut self) -> Result<T, DecodeError> {
        T::decode(self)
    }

    pub fn seq<T: Decode>(&mut self) -> Result<Vec<T>, DecodeError> {
        let n = self.u32()? as usize;
        // Guard the allocation against garbage lengths.
        let mut out = Vec::with_capacity(n.min(self.remaining()));
        for _ in 0..n {
            out.push(T::decode(self)?);
        }
        Ok(out)
    }

    pub fn tag_error(&self, what: &'static str, tag: u8) -> DecodeError {
        DecodeError::Tag { what, tag, at: self.pos.saturating_sub(1) }
    }

    pub fn finish(&self) -> Result<(), DecodeError> {
        match self.remaining() {
            0 => Ok(()),
            n => Err(DecodeError::Trailing(n)),
        }
    }
}

pub trait Encode {
    fn encode(&self, w: &mut Writer);

    fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new();
        self.encode(&mut w);
        w.into_bytes()
    }
}

pub trait Decode: Sized {
    fn decode(r: &mut Reader<'_>) -> Result<Self, DecodeError>;

    /// Decodes a value that must span the whole buffer.
    fn from_bytes(buf: &[u8]) -> Result<Self, DecodeError> {
        let mut r = Reader::new(buf);
        let v = Self::decode(&mut r)?;
        r.finish()?;
        Ok(v)
    }
}

impl Encode for u64 {
    fn encode(&self, w: &mut Writer) {
        w.u64(*self);
    }
}

impl Decode for u64 {
    fn decode(r: &mut Reader<'_>) -> Result<Self, DecodeError> {
        r.u64()
    }
}

macro_rules! newtype_codec {
    ($($t:ident),*) => {$(
        impl Encode for $t {
            fn encode(&self, w: &mut Writer) {
                w.u64(self.0);
            }
        }
        impl Decode for $t {
            fn decode(r: &mut Reader<'_>) -> Result<Self, DecodeError> {
                r.u64().map($t)
            }
        }
    )*};
}

newtype_codec!(ProcessId, ConfigId, ClientId, Ballot);

impl Encode for Round {
    fn encode(&self, w: &mut Writer) {
        w.put(&self.config).put(&self.ballot);
    }
}

impl Decode for Round {
    fn decode(r: &mut Reader<'_>) -> Result<Self, DecodeError> {
        Ok(Round::new(r.get()?, r.get()?))
    }
}

impl Encode for Command {
    fn encode(&self, w: &mut Writer) {
        w.put(&self.client).u64(self.seq).bytes(&self.op);
    }
}

impl Decode for Command {
    fn decode(r: &mut Reader<'_>) -> Result<Self, DecodeError> {
        Ok(Command::new(r.get()?, r.u64()?, r.bytes()?))
    }
}

impl Encode for StopSign {
    fn encode(&self, w: &mut Writer) {
        w.put(&self.next_config).u32(len32(self.processes.len()));
        for p in &self.processes {
            w.put(p);
        }
    }
}

impl Decode for StopSign {
    fn decode(r: &mut Reader<'_>) -> Result<Self, DecodeError> {
        let next: ConfigId = r.get()?;
        let n = r.u32()?;
        let mut procs = BTreeSet::new();
        for _ in 0..n {
            procs.insert(r.get::<ProcessId>()?);
        }
        Ok(StopSign::new(next, procs))
    }
}

impl Encode for LogEntry {
    fn encode(&self, w: &mut Writer) {
        match self {
            LogEntry::Normal(c) => w.u8(0).put(c),
            LogEntry::Stop(ss) => w.u8(1).put(ss),
        };
    }
}

impl Decode for LogEntry {
    fn decode(r: &mut Reader<'_>) -> Result<Self, DecodeError> {
        match r.u8()? {
            0 => Ok(LogEntry::Normal(r.get()?)),
            1 => Ok(LogEntry::Stop(r.get()?)),
            t => Err(r.tag_error("log entry", t)),
        }
    }
}

/// Encoded size of a slice of entries, as it would appear inside a message.
pub fn entries_size(entries: &[LogEntry]) -> usize {
    let mut w = Writer::new();
    w.seq(entries);
    w.into_bytes().len()
}
