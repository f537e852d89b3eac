//! Wire vocabulary: protocol messages, leader election heartbeats and the
//! state-transfer messages used to start a new configuration.
//!
//! The text form is `Name{key=value,...}`. Entry lists render as
//! `[1:2,SS@1{1+2}]` and opaque blobs as lowercase hex.

use std::fmt;
use std::str::FromStr;

use crate::codec::{Decode, DecodeError, Encode, Reader, Writer};
use crate::error::{invalid, Error, Result};
use crate::types::{Ballot, ConfigId, LogEntry, ProcessId, Round, StopSign};

/// Everything a process needs to start configuration `stop.next_config`.
///
/// `base` is an application snapshot covering the first `l_k` entries of the
/// final sequence; `entries` hold the rest, so
/// `base.l_k + entries.len() == sigma_len`.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct TransferPackage {
    pub sigma_len: u64,
    pub stop: StopSign,
    pub base: Option<(u64, Vec<u8>)>,
    pub entries: Vec<LogEntry>,
}

impl TransferPackage {
    pub fn validate(&self) -> Result<()> {
        let lk = self.base.as_ref().map_or(0, |(lk, _)| *lk);
        if lk + self.entries.len() as u64 != self.sigma_len {
            return Err(invalid("transfer package does not add up to the final sequence length"));
        }
        if self.entries.last().is_some_and(|e| e.as_stop() != Some(&self.stop)) {
            return Err(invalid("transfer package entries do not end in its stop-sign"));
        }
        self.stop.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum Message {
    Prepare { n: Round, ld: u64, na: Round },
    Promise { n: Round, n_a: Round, suffix: Vec<LogEntry>, ld: u64 },
    AcceptSync { n: Round, suffix: Vec<LogEntry>, ld: u64 },
    Accept { n: Round, entry: LogEntry },
    Accepted { n: Round, la: u64 },
    Decide { l: u64, n: Round },
    PrepareReq,
    HeartbeatRequest { round: u64, max_ballot: Ballot },
    HeartbeatReply { round: u64, ballot: Ballot },
    /// A holder of the final sequence announces it can start `config`.
    StateOffer { config: ConfigId },
    StateRequest { config: ConfigId },
    StateChunk { config: ConfigId, package: TransferPackage },
    StateAck { config: ConfigId },
    /// A proposal handed to the believed leader (snapshot markers only).
    Forward { entry: LogEntry },
}

impl Message {
    pub fn name(&self) -> &'static str {
        match self {
            Message::Prepare { .. } => "Prepare",
            Message::Promise { .. } => "Promise",
            Message::AcceptSync { .. } => "AcceptSync",
            Message::Accept { .. } => "Accept",
            Message::Accepted { .. } => "Accepted",
            Message::Decide { .. } => "Decide",
            Message::PrepareReq => "PrepareReq",
            Message::HeartbeatRequest { .. } => "HeartbeatRequest",
            Message::HeartbeatReply { .. } => "HeartbeatReply",
            Message::StateOffer { .. } => "StateOffer",
            Message::StateRequest { .. } => "StateRequest",
            Message::StateChunk { .. } => "StateChunk",
            Message::StateAck { .. } => "StateAck",
            Message::Forward { .. } => "Forward",
        }
    }

    pub fn is_heartbeat(&self) -> bool {
        matches!(self, Message::HeartbeatRequest { .. } | Message::HeartbeatReply { .. })
    }

    /// Encoded size in bytes.
    pub fn wire_size(&self) -> usize {
        self.to_bytes().len()
    }
}

/// A message with its routing tags.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Envelope {
    pub from: ProcessId,
    pub to: ProcessId,
    pub config: ConfigId,
    pub msg: Message,
}

impl fmt::Display for Envelope {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}->{} {} {}", self.from, self.to, self.config, self.msg)
    }
}

pub(crate) fn write_entries(f: &mut fmt::Formatter<'_>, entries: &[LogEntry]) -> fmt::Result {
    f.write_str("[")?;
    for (i, e) in entries.iter().enumerate() {
        if i > 0 {
            f.write_str(",")?;
        }
        write!(f, "{e}")?;
    }
    f.write_str("]")
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

pub(crate) fn unhex(s: &str) -> Result<Vec<u8>> {
    if !s.len().is_multiple_of(2) {
        return Err(invalid(format!("odd-length hex `{s}`")));
    }
    (0..s.len())
        .step_by(2)
        .map(|i| u8::from_str_radix(&s[i..i + 2], 16).map_err(|_| invalid(format!("bad hex `{s}`"))))
        .collect()
}

impl fmt::Display for Message {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}{{", self.name())?;
        match self {
            Message::Prepare { n, ld, na } => write!(f, "n={n},ld={ld},na={na}")?,
            Message::Promise { n, n_a, suffix, ld } => {
                write!(f, "n={n},na={n_a},ld={ld},sfx=")?;
                write_entries(f, suffix)?;
            }
            Message::AcceptSync { n, suffix, ld } => {
                write!(f, "n={n},ld={ld},sfx=")?;
                write_entries(f, suffix)?;
            }
            Message::Accept { n, entry } => write!(f, "n={n},e={entry}")?,
            Message::Accepted { n, la } => write!(f, "n={n},la={la}")?,
            Message::Decide { l, n } => write!(f, "l={l},n={n}")?,
            Message::PrepareReq => {}
            Message::HeartbeatRequest { round, max_ballot } => write!(f, "r={round},max={max_ballot}")?,
            Message::HeartbeatReply { round, ballot } => write!(f, "r={round},b={ballot}")?,
            Message::StateOffer { config } | Message::StateRequest { config } | Message::StateAck { config } => {
                write!(f, "c={}", config.0)?
            }
            Message::StateChunk { config, package } => {
                write!(f, "c={},len={},stop={},base=", config.0, package.sigma_len, package.stop)?;
                match &package.base {
                    Some((lk, blob)) => write!(f, "{lk}:{}", hex(blob))?,
                    None => f.write_str("-")?,
                }
                f.write_str(",sfx=")?;
                write_entries(f, &package.entries)?;
            }
            Message::Forward { entry } => write!(f, "e={entry}")?,
        }
        f.write_str("}")
    }
}

/// Splits `s` at commas that are not nested in `{}` or `[]`.
pub(crate) fn split_top(s: &str) -> Vec<&str> {
    let mut out = Vec::new();
    let (mut depth, mut start) = (0i32, 0usize);
    for (i, ch) in s.char_indices() {
        match ch {
            '{' | '[' => depth += 1,
            '}' | ']' => depth -= 1,
            ',' if depth == 0 => {
                out.push(&s[start..i]);
                start = i + 1;
            }
            _ => {}
        }
    }
    if start < s.len() {
        out.push(&s[start..]);
    }
    out
}

/// `key=value` pairs of a `Name{...}` body, in order.
pub(crate) struct Fields<'a> {
    pairs: Vec<(&'a str, &'a str)>,
    whole: &'a str,
}

impl<'a> Fields<'a> {
    pub(crate) fn parse(body: &'a str) -> Result<Self> {
        let pairs = split_top(body)
            .into_iter()
            .map(|kv| kv.split_once('=').ok_or_else(|| invalid(format!("expected key=value in `{body}`"))))
            .collect::<Result<_>>()?;
        Ok(Fields { pairs, whole: body })
    }

    pub(crate) fn raw(&self, key: &str) -> Result<&'a str> {
        self.pairs
            .iter()
            .find(|(k, _)| *k == key)
            .map(|(_, v)| *v)
            .ok_or_else(|| invalid(format!("missing `{key}` in `{}`", self.whole)))
    }

    pub(crate) fn get<T: FromStr>(&self, key: &str) -> Result<T> {
        let raw = self.raw(key)?;
        raw.parse().map_err(|_| invalid(format!("bad `{key}` value `{raw}`")))
    }

    pub(crate) fn entries(&self, key: &str) -> Result<Vec<LogEntry>> {
        parse_entries(self.raw(key)?)
    }
}

pub(crate) fn parse_entries(s: &str) -> Result<Vec<LogEntry>> {
    let inner = s
        .strip_prefix('[')
        .and_then(|s| s.strip_suffix(']'))
        .ok_or_else(|| invalid(format!("expected an entry list, got `{s}`")))?;
    split_top(inner).into_iter().map(str::parse).collect()
}

/// Splits `Name{body}` into its parts.
pub(crate) fn split_named(s: &str) -> Result<(&str, &str)> {
    let open = s.find('{').ok_or_else(|| invalid(format!("expected `Name{{...}}`, got `{s}`")))?;
    let body = s[open + 1..]
        .strip_suffix('}')
        .ok_or_else(|| invalid(format!("unterminated `{s}`")))?;
    Ok((&s[..open], body))
}

impl FromStr for Message {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (name, body) = split_named(s)?;
        let f = Fields::parse(body)?;
        let cfg = |f: &Fields<'_>| f.get::<u64>("c").map(ConfigId);
        Ok(match name {
            "Prepare" => Message::Prepare { n: f.get("n")?, ld: f.get("ld")?, na: f.get("na")? },
            "Promise" => Message::Promise {
                n: f.get("n")?,
                n_a: f.get("na")?,
                suffix: f.entries("sfx")?,
                ld: f.get("ld")?,
            },
            "AcceptSync" => Message::AcceptSync { n: f.get("n")?, suffix: f.entries("sfx")?, ld: f.get("ld")? },
            "Accept" => Message::Accept { n: f.get("n")?, entry: f.get("e")? },
            "Accepted" => Message::Accepted { n: f.get("n")?, la: f.get("la")? },
            "Decide" => Message::Decide { l: f.get("l")?, n: f.get("n")? },
            "PrepareReq" => Message::PrepareReq,
            "HeartbeatRequest" => Message::HeartbeatRequest {
                round: f.get("r")?,
                max_ballot: Ballot(f.get("max")?),
            },
            "HeartbeatReply" => Message::HeartbeatReply { round: f.get("r")?, ballot: Ballot(f.get("b")?) },
            "StateOffer" => Message::StateOffer { config: cfg(&f)? },
            "StateRequest" => Message::StateRequest { config: cfg(&f)? },
            "StateAck" => Message::StateAck { config: cfg(&f)? },
            "StateChunk" => {
                let stop = match f.get::<LogEntry>("stop")? {
                    LogEntry::Stop(ss) => ss,
                    LogEntry::Normal(_) => return Err(invalid("StateChunk stop field is not a stop-sign")),
                };
                let base = match f.raw("base")? {
                    "-" => None,
                    b => {
                        let (lk, blob) = b.split_once(':').ok_or_else(|| invalid(format!("bad base `{b}`")))?;
                        let lk = lk.parse().map_err(|_| invalid(format!("bad base `{b}`")))?;
                        Some((lk, unhex(blob)?))
                    }
                };
                Message::StateChunk {
                    config: cfg(&f)?,
                    package: TransferPackage { sigma_len: f.get("len")?, stop, base, entries: f.entries("sfx")? },
                }
            }
            "Forward" => Message::Forward { entry: f.get("e")? },
            other => return Err(invalid(format!("unknown message `{other}`"))),
        })
    }
}

impl Encode for TransferPackage {
    fn encode(&self, w: &mut Writer) {
        w.u64(self.sigma_len).put(&self.stop);
        match &self.base {
            Some((lk, blob)) => w.u8(1).u64(*lk).bytes(blob),
            None => w.u8(0),
        };
        w.seq(&self.entries);
    }
}

impl Decode for TransferPackage {
    fn decode(r: &mut Reader<'_>) -> Result<Self, DecodeError> {
        let sigma_len = r.u64()?;
        let stop = r.get()?;
        let base = match r.u8()? {
            0 => None,
            1 => Some((r.u64()?, r.bytes()?)),
            t => return Err(r.tag_error("transfer base", t)),
        };
        Ok(TransferPackage { sigma_len, stop, base, entries: r.seq()? })
    }
}

impl Encode for Message {
    fn encode(&self, w: &mut Writer) {
        match self {
            Message::Prepare { n, ld, na } => w.u8(1).put(n).u64(*ld).put(na),
            Message::Promise { n, n_a, suffix, ld } => w.u8(2).put(n).put(n_a).seq(suffix).u64(*ld),
            Message::AcceptSync { n, suffix, ld } => w.u8(3).put(n).seq(suffix).u64(*ld),
            Message::Accept { n, entry } => w.u8(4).put(n).put(entry),
            Message::Accepted { n, la } => w.u8(5).put(n).u64(*la),
            Message::Decide { l, n } => w.u8(6).u64(*l).put(n),
            Message::PrepareReq => w.u8(7),
            Message::HeartbeatRequest { round, max_ballot } => w.u8(8).u64(*round).put(max_ballot),
            Message::HeartbeatReply { round, ballot } => w.u8(9).u64(*round).put(ballot),
            Message::StateOffer { config } => w.u8(10).put(config),
            Message::StateRequest { config } => w.u8(11).put(config),
            Message::StateChunk { config, package } => w.u8(12).put(config).put(package),
            Message::StateAck { config } => w.u8(13).put(config),
            Message::Forward { entry } => w.u8(14).put(entry),
        };
    }
}

impl Decode for Message {
    fn decode(r: &mut Reader<'_>) -> Result<Self, DecodeError> {
        Ok(match r.u8()? {
            1 => Message::Prepare { n: r.get()?, ld: r.u64()?, na: r.get()? },
            2 => Message::Promise { n: r.get()?, n_a: r.get()?, suffix: r.seq()?, ld: r.u64()? },
            3 => Message::AcceptSync { n: r.get()?, suffix: r.seq()?, ld: r.u64()? },
            4 => Message::Accept { n: r.get()?, entry: r.get()? },
            5 => Message::Accepted { n: r.get()?, la: r.u64()? },
            6 => Message::Decide { l: r.u64()?, n: r.get()? },
            7 => Message::PrepareReq,
            8 => Message::HeartbeatRequest { round: r.u64()?, max_ballot: r.get()? },
            9 => Message::HeartbeatReply { round: r.u64()?, ballot: r.get()? },
            10 => Message::StateOffer { config: r.get()? },
            11 => Message::StateRequest { config: r.get()? },
            12 => Message::StateChunk { config: r.get()?, package: r.get()? },
            13 => Message::StateAck { config: r.get()? },
            14 => Message::Forward { entry: r.get()? },
            t => return Err(r.tag_error("message", t)),
        })
    }
}
