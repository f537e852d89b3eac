//! File backend.
//!
//! Layout under the process directory:
//!
//! ```text
//! c<config>/base.bin   one frame of type 8: generation u64 + full state
//! c<config>/wal.bin    generation u64, then frames of types 2..=7
//! ```
//!
//! A frame is `type u8 | len u32 LE | crc32 u32 LE | payload`, where the
//! checksum covers the type byte and the payload. Payloads use the codec
//! module's encoding.
//!
//! Compaction writes a new base with generation `g + 1` and then a fresh
//! WAL with the same generation, both via rename. A WAL whose generation is
//! older than the base is stale and skipped, so a crash between the two
//! renames loses nothing and applies nothing twice.
//!
//! A frame cut short at the end of the WAL is a torn write and is dropped.
//! A checksum mismatch anywhere is corruption and fails the load.

use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use super::{PersistentState, Record, Storage, StorageError};
use crate::codec::{Decode, Reader, Writer};
use crate::types::ConfigId;

const BASE_TAG: u8 = 8;
const HEADER: usize = 9;
const DEFAULT_COMPACT_AFTER: u64 = 1 << 20;

pub struct FileStorage {
    root: PathBuf,
    compact_after: u64,
    sync: bool,
    open: BTreeMap<ConfigId, Open>,
}

struct Open {
    state: PersistentState,
    generation: u64,
    wal: File,
    wal_len: u64,
}

/// Builds one frame.
pub fn frame(tag: u8, payload: &[u8]) -> Vec<u8> {
    let mut h = crc32fast::Hasher::new();
    h.update(&[tag]);
    h.update(payload);
    let mut out = Vec::with_capacity(HEADER + payload.len());
    out.push(tag);
    out.extend_from_slice(&(payload.len() as u32).to_le_bytes());
    out.extend_from_slice(&h.finalize().to_le_bytes());
    out.extend_from_slice(payload);
    out
}

enum Parsed<'a> {
    Frame { tag: u8, payload: &'a [u8], next: usize },
    Torn,
}

fn parse_frame(buf: &[u8], at: usize) -> Result<Parsed<'_>, StorageError> {
    let rest = &buf[at..];
    if rest.len() < HEADER {
        return Ok(Parsed::Torn);
    }
    let tag = rest[0];
    let len = u32::from_le_bytes(rest[1..5].try_into().unwrap()) as usize;
    let crc = u32::from_le_bytes(rest[5..9].try_into().unwrap());
    if rest.len() < HEADER + len {
        return Ok(Parsed::Torn);
    }
    let payload = &rest[HEADER..HEADER + len];
    let mut h = crc32fast::Hasher::new();
    h.update(&[tag]);
    h.update(payload);
    if h.finalize() != crc {
        return Err(StorageError::Corrupt(format!("checksum mismatch in frame at byte {at}")));
    }
    Ok(Parsed::Frame { tag, payload, next: at + HEADER + len })
}

fn config_dir(root: &Path, config: ConfigId) -> PathBuf {
    root.join(format!("c{}", config.0))
}

fn write_atomic(path: &Path, bytes: &[u8], sync: bool) -> Result<(), StorageError> {
    let tmp = path.with_extension("tmp");
    {
        let mut f = File::create(&tmp)?;
        f.write_all(bytes)?;
        if sync {
            f.sync_all()?;
        }
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

/// Result of reading one configuration directory.
struct Loaded {
    state: Option<PersistentState>,
    generation: u64,
    /// Length of the valid WAL prefix, when the WAL is current.
    wal_valid: Option<u64>,
}

fn read_dir_state(dir: &Path) -> Result<Loaded, StorageError> {
    let base_path = dir.join("base.bin");
    if !base_path.exists() {
        return Ok(Loaded { state: None, generation: 0, wal_valid: None });
    }
    let base = fs::read(&base_path)?;
    let (generation, mut state) = match parse_frame(&base, 0)? {
        Parsed::Frame { tag: BASE_TAG, payload, next } if next == base.len() => {
            let mut r = Reader::new(payload);
            let generation = r.u64()?;
            let state = PersistentState::decode(&mut r)?;
            r.finish()?;
            (generation, state)
        }
        Parsed::Frame { .. } => return Err(StorageError::Corrupt("base image is not a single base frame".into())),
        Parsed::Torn => return Err(StorageError::Corrupt("base image is truncated".into())),
    };
    let wal_path = dir.join("wal.bin");
    let wal = if wal_path.exists() { fs::read(&wal_path)? } else { Vec::new() };
    if wal.len() < 8 || u64::from_le_bytes(wal[..8].try_into().unwrap()) != generation {
        return Ok(Loaded { state: Some(state), generation, wal_valid: None });
    }
    let mut at = 8;
    while at < wal.len() {
        match parse_frame(&wal, at)? {
            Parsed::Torn => break,
            Parsed::Frame { tag, payload, next } => {
                let rec = Record::decode_payload(tag, payload)?;
                if matches!(rec, Record::Init(_)) {
                    return Err(StorageError::Corrupt("init record inside the WAL".into()));
                }
                state.apply(&rec).map_err(|e| StorageError::Corrupt(e.to_string()))?;
                at = next;
            }
        }
    }
    Ok(Loaded { state: Some(state), generation, wal_valid: Some(at as u64) })
}

impl FileStorage {
    /// Opens (creating if needed) the storage rooted at `root`.
    pub fn open(root: impl Into<PathBuf>) -> Result<FileStorage, StorageError> {
        let mut s = FileStorage { root: root.into(), compact_after: DEFAULT_COMPACT_AFTER, sync: false, open: BTreeMap::new() };
        s.reopen()?;
        Ok(s)
    }

    /// Compact the WAL into the base image once it grows past `bytes`.
    pub fn with_compaction_threshold(mut self, bytes: u64) -> Self {
        self.compact_after = bytes;
        self
    }

    /// Call `fsync` after every write. Off by default: the simulated crash
    /// model kills processes, not machines.
    pub fn with_sync(mut self, sync: bool) -> Self {
        self.sync = sync;
        self
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    fn install(&mut self, config: ConfigId, state: PersistentState, generation: u64) -> Result<(), StorageError> {
        let dir = config_dir(&self.root, config);
        fs::create_dir_all(&dir)?;
        let mut w = Writer::new();
        w.u64(generation).put(&state);
        write_atomic(&dir.join("base.bin"), &frame(BASE_TAG, &w.into_bytes()), self.sync)?;
        write_atomic(&dir.join("wal.bin"), &generation.to_le_bytes(), self.sync)?;
        let wal = OpenOptions::new().append(true).open(dir.join("wal.bin"))?;
        self.open.insert(config, Open { state, generation, wal, wal_len: 8 });
        Ok(())
    }

    fn compact(&mut self, config: ConfigId) -> Result<(), StorageError> {
        let o = self.open.get(&config).ok_or(StorageError::Missing(config))?;
        let (state, generation) = (o.state.clone(), o.generation + 1);
        self.install(config, state, generation)
    }
}

impl Storage for FileStorage {
    fn configs(&self) -> Result<Vec<ConfigId>, StorageError> {
        Ok(self.open.keys().copied().collect())
    }

    fn load(&self, config: ConfigId) -> Result<Option<PersistentState>, StorageError> {
        Ok(self.open.get(&config).map(|o| o.state.clone()))
    }

    fn write(&mut self, config: ConfigId, record: &Record) -> Result<(), StorageError> {
        if let Record::Init(state) = record {
            let generation = self.open.get(&config).map_or(0, |o| o.generation + 1);
            return self.install(config, state.clone(), generation);
        }
        let sync = self.sync;
        let o = self.open.get_mut(&config).ok_or(StorageError::Missing(config))?;
        let mut next = o.state.clone();
        next.apply(record)?;
        let bytes = frame(record.tag(), &record.encode_payload());
        o.wal.write_all(&bytes)?;
        if sync {
            o.wal.sync_data()?;
        }
        o.wal_len += bytes.len() as u64;
        o.state = next;
        if o.wal_len > self.compact_after {
            self.compact(config)?;
        }
        Ok(())
    }

    fn destroy(&mut self, config: ConfigId) -> Result<(), StorageError> {
        self.open.remove(&config);
        let dir = config_dir(&self.root, config);
        if dir.exists() {
            fs::remove_dir_all(dir)?;
        }
        Ok(())
    }

    fn reopen(&mut self) -> Result<(), StorageError> {
        self.open.clear();
        fs::create_dir_all(&self.root)?;
        let mut dirs: Vec<(ConfigId, PathBuf)> = Vec::new();
        for entry in fs::read_dir(&self.root)? {
            let path = entry?.path();
            let name = path.file_name().and_then(|n| n.to_str()).unwrap_or_default();
            if let Ok(config) = name.parse::<ConfigId>() {
                if path.is_dir() {
                    dirs.push((config, path));
                }
            }
        }
        dirs.sort();
        for (config, dir) in dirs {
            let loaded = read_dir_state(&dir)?;
            let Some(state) = loaded.state else { continue };
            match loaded.wal_valid {
                Some(valid) => {
                    let wal = OpenOptions::new().write(true).open(dir.join("wal.bin"))?;
                    // Drop a torn tail so new frames follow the last good one.
                    wal.set_len(valid)?;
                    drop(wal);
                    let wal = OpenOptions::new().append(true).open(dir.join("wal.bin"))?;
                    self.open.insert(config, Open { state, generation: loaded.generation, wal, wal_len: valid });
                }
                None => {
                    // Missing or stale WAL: start a fresh one for this generation.
                    write_atomic(&dir.join("wal.bin"), &loaded.generation.to_le_bytes(), self.sync)?;
                    let wal = OpenOptions::new().append(true).open(dir.join("wal.bin"))?;
                    self.open.insert(config, Open { state, generation: loaded.generation, wal, wal_len: 8 });
                }
            }
        }
        Ok(())
    }
}
