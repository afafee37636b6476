//! Append-only, checksummed event log with periodic checkpoints.
//!
//! On-disk layout per record: `u32 LE length`, `length` bytes of JSON
//! (`{seq, timestamp, kind, body}`), `u32 LE crc32` of those bytes.

use std::fs::{File, OpenOptions};
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::SimTime;

pub const DEFAULT_CHECKPOINT_EVERY: u64 = 1000;

#[derive(Debug, Clone, PartialEq, Eq, Error, Serialize, Deserialize)]
pub enum StoreError {
    #[error("io: {0}")]
    Io(String),
    #[error("corrupt record at byte {offset} (after seq {last_valid_seq:?}): {reason}")]
    CorruptRecord { offset: u64, last_valid_seq: Option<u64>, reason: String },
    #[error("serialization: {0}")]
    Serialize(String),
}

impl From<std::io::Error> for StoreError {
    fn from(e: std::io::Error) -> Self {
        Self::Io(e.to_string())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RecordKind {
    Event,
    Decision,
    StateTransition,
    Checkpoint,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LogRecord {
    pub seq: u64,
    pub timestamp: SimTime,
    pub kind: RecordKind,
    /// Serialized JSON body.
    pub body: String,
}

impl LogRecord {
    pub fn encode(&self) -> Vec<u8> {
        let payload = serde_json::to_vec(self).expect("record serializes");
        let mut out = Vec::with_capacity(payload.len() + 8);
        out.extend_from_slice(&(payload.len() as u32).to_le_bytes());
        out.extend_from_slice(&payload);
        out.extend_from_slice(&crc32fast::hash(&payload).to_le_bytes());
        out
    }

    pub fn body_as<T: for<'de> Deserialize<'de>>(&self) -> Result<T, StoreError> {
        serde_json::from_str(&self.body).map_err(|e| StoreError::Serialize(e.to_string()))
    }
}

/// Where a scan stopped early.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Truncation {
    pub offset: u64,
    pub last_valid_seq: Option<u64>,
    pub reason: String,
}

impl Truncation {
    pub fn to_error(&self) -> StoreError {
        StoreError::CorruptRecord { offset: self.offset, last_valid_seq: self.last_valid_seq, reason: self.reason.clone() }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Scan {
    pub records: Vec<LogRecord>,
    /// Byte length of the valid prefix.
    pub valid_len: u64,
    pub truncation: Option<Truncation>,
}

/// Decodes records until the end or the first invalid one.
pub fn scan(bytes: &[u8]) -> Scan {
    let mut out = Scan::default();
    let mut pos = 0usize;
    while pos < bytes.len() {
        let last = out.records.last().map(|r: &LogRecord| r.seq);
        let fail = |reason: &str| Truncation { offset: pos as u64, last_valid_seq: last, reason: reason.to_string() };
        let Some(len) = bytes.get(pos..pos + 4).map(|b| u32::from_le_bytes(b.try_into().expect("4 bytes")) as usize) else {
            out.truncation = Some(fail("truncated length prefix"));
            break;
        };
        let Some(payload) = bytes.get(pos + 4..pos + 4 + len) else {
            out.truncation = Some(fail("truncated payload"));
            break;
        };
        let Some(crc) = bytes.get(pos + 4 + len..pos + 8 + len).map(|b| u32::from_le_bytes(b.try_into().expect("4 bytes"))) else {
            out.truncation = Some(fail("truncated checksum"));
            break;
        };
        if crc32fast::hash(payload) != crc {
            out.truncation = Some(fail("checksum mismatch"));
            break;
        }
        let record: LogRecord = match serde_json::from_slice(payload) {
            Ok(r) => r,
            Err(e) => {
                out.truncation = Some(fail(&format!("undecodable record: {e}")));
                break;
            }
        };
        if let Some(prev) = last {
            if record.seq != prev + 1 {
                out.truncation = Some(fail(&format!("sequence gap: {} after {prev}", record.seq)));
                break;
            }
        }
        out.records.push(record);
        pos += 8 + len;
        out.valid_len = pos as u64;
    }
    out
}

#[derive(Debug)]
enum Backend {
    Memory(Vec<u8>),
    File { path: PathBuf, file: File, sync: bool },
}

#[derive(Debug)]
pub struct StateStore {
    backend: Backend,
    next_seq: u64,
    since_checkpoint: u64,
    checkpoint_every: u64,
    records: Vec<LogRecord>,
    truncation: Option<Truncation>,
}

impl StateStore {
    pub fn in_memory() -> Self {
        Self::from_scan(Backend::Memory(Vec::new()), Scan::default())
    }

    /// Loads a log image held in memory, dropping anything after the first
    /// invalid record.
    pub fn from_bytes(bytes: &[u8]) -> Self {
        let scan = scan(bytes);
        let valid = bytes[..scan.valid_len as usize].to_vec();
        Self::from_scan(Backend::Memory(valid), scan)
    }

    /// Opens or creates a log file. A corrupt tail is cut off so that later
    /// appends follow the last valid record; `truncation()` reports it.
    pub fn open(path: impl AsRef<Path>) -> Result<Self, StoreError> {
        let path = path.as_ref().to_path_buf();
        let mut bytes = Vec::new();
        if path.exists() {
            File::open(&path)?.read_to_end(&mut bytes)?;
        }
        let scan = scan(&bytes);
        let file = OpenOptions::new().create(true).truncate(false).read(true).write(true).open(&path)?;
        file.set_len(scan.valid_len)?;
        let mut file = file;
        use std::io::Seek;
        file.seek(std::io::SeekFrom::End(0))?;
        Ok(Self::from_scan(Backend::File { path, file, sync: true }, scan))
    }

    fn from_scan(backend: Backend, scan: Scan) -> Self {
        let next_seq = scan.records.last().map_or(0, |r| r.seq + 1);
        let since_checkpoint = scan.records.iter().rev().take_while(|r| r.kind != RecordKind::Checkpoint).count() as u64;
        Self { backend, next_seq, since_checkpoint, checkpoint_every: DEFAULT_CHECKPOINT_EVERY, records: scan.records, truncation: scan.truncation }
    }

    pub fn with_checkpoint_every(mut self, n: u64) -> Self {
        self.checkpoint_every = n.max(1);
        self
    }

    /// Disables fsync after each append. Appends are still written in order.
    pub fn without_sync(mut self) -> Self {
        if let Backend::File { sync, .. } = &mut self.backend {
            *sync = false;
        }
        self
    }

    pub fn path(&self) -> Option<&Path> {
        match &self.backend {
            Backend::File { path, .. } => Some(path),
            Backend::Memory(_) => None,
        }
    }

    pub fn truncation(&self) -> Option<&Truncation> {
        self.truncation.as_ref()
    }

    pub fn next_seq(&self) -> u64 {
        self.next_seq
    }

    pub fn records(&self) -> &[LogRecord] {
        &self.records
    }

    pub fn checkpoint_due(&self) -> bool {
        self.since_checkpoint >= self.checkpoint_every
    }

    /// Appends and persists a record, returning its sequence number.
    pub fn append(&mut self, timestamp: SimTime, kind: RecordKind, body: String) -> Result<u64, StoreError> {
        let record = LogRecord { seq: self.next_seq, timestamp, kind, body };
        let bytes = record.encode();
        match &mut self.backend {
            Backend::Memory(buf) => buf.extend_from_slice(&bytes),
            Backend::File { file, sync, .. } => {
                file.write_all(&bytes)?;
                file.flush()?;
                if *sync {
                    file.sync_data()?;
                }
            }
        }
        if kind == RecordKind::Checkpoint {
            self.since_checkpoint = 0;
        } else {
            self.since_checkpoint += 1;
        }
        self.next_seq += 1;
        self.records.push(record);
        Ok(self.next_seq - 1)
    }

    pub fn append_json<T: Serialize>(&mut self, timestamp: SimTime, kind: RecordKind, body: &T) -> Result<u64, StoreError> {
        let body = serde_json::to_string(body).map_err(|e| StoreError::Serialize(e.to_string()))?;
        self.append(timestamp, kind, body)
    }

    /// Index of the latest checkpoint, if any.
    pub fn last_checkpoint(&self) -> Option<&LogRecord> {
        self.records.iter().rev().find(|r| r.kind == RecordKind::Checkpoint)
    }

    /// Records needed to rebuild state: the latest checkpoint at or before
    /// `from_seq` (or the log start) and everything after it.
    pub fn replay_from(&self, from_seq: u64) -> &[LogRecord] {
        let start = self
            .records
            .iter()
            .rposition(|r| r.kind == RecordKind::Checkpoint && r.seq >= from_seq)
            .or_else(|| self.records.iter().position(|r| r.seq >= from_seq))
            .unwrap_or(self.records.len());
        &self.records[start..]
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        match &self.backend {
            Backend::Memory(buf) => buf.clone(),
            Backend::File { .. } => self.records.iter().flat_map(LogRecord::encode).collect(),
        }
    }

    /// Rewrites the log as a single checkpoint record, keeping the sequence
    /// numbering going.
    pub fn compact(&mut self, timestamp: SimTime, checkpoint_body: String) -> Result<u64, StoreError> {
        let record = LogRecord { seq: self.next_seq, timestamp, kind: RecordKind::Checkpoint, body: checkpoint_body };
        let bytes = record.encode();
        match &mut self.backend {
            Backend::Memory(buf) => *buf = bytes,
            Backend::File { path, file, .. } => {
                let tmp = path.with_extension("compact.tmp");
                {
                    let mut out = File::create(&tmp)?;
                    out.write_all(&bytes)?;
                    out.sync_all()?;
                }
                std::fs::rename(&tmp, &*path)?;
                *file = OpenOptions::new().append(true).open(&*path)?;
            }
        }
        self.records = vec![record];
        self.since_checkpoint = 0;
        self.next_seq += 1;
        Ok(self.next_seq - 1)
    }
}
