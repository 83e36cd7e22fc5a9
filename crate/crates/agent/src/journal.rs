//! Durable upload journal.
//!
//! One append-only file: the 4-byte magic `LPJ1`, then frames of
//! `[u32 LE payload length][u32 LE CRC-32 of payload][JSON payload]`.
//! Every append is fsynced before it returns. On open, a damaged final
//! frame is a torn write and is cut off; a damaged frame followed by more
//! data means the file cannot be trusted and opening fails.

use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io::{self, Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};

use labpipe_core::api::LinkageIntent;
use labpipe_core::{MetadataRecord, Timestamp};
use serde::{Deserialize, Serialize};

pub const MAGIC: &[u8; 4] = b"LPJ1";
const FRAME_HEADER: usize = 8;
/// Frames larger than this are treated as damage rather than allocated.
const MAX_FRAME: u32 = 64 * 1024 * 1024;
pub const DEFAULT_COMPACT_THRESHOLD: u64 = 64 * 1024 * 1024;

#[derive(Debug, thiserror::Error)]
pub enum JournalError {
    #[error("journal I/O error: {0}")]
    Io(#[from] io::Error),
    #[error("journal {path} is corrupt at byte {offset}: {reason}")]
    Corrupt { path: PathBuf, offset: u64, reason: String },
    #[error("journal entry {0} does not exist")]
    UnknownEntry(u64),
    #[error("illegal journal transition for entry {entry_id}: {from:?} -> {to:?}")]
    IllegalTransition { entry_id: u64, from: EntryState, to: EntryState },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EntryState {
    Pending,
    InFlight,
    Acked,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EntryKind {
    Record,
    FileChunkSet,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StagedFile {
    pub content_hash: String,
    pub size_bytes: u64,
    pub generated_file_id: String,
    /// Relative to the protocol's watch directory.
    pub original_path: String,
    pub captured_at: Timestamp,
    pub session_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub link: Option<LinkageIntent>,
    /// Record entry that must be acked before this file is sent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub depends_on: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EntryPayload {
    Record {
        record: MetadataRecord,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        expected_file_id: Option<String>,
    },
    FileChunkSet {
        file: StagedFile,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JournalEntry {
    pub entry_id: u64,
    pub payload: EntryPayload,
    pub state: EntryState,
    pub attempts: u32,
    pub next_attempt_at: Timestamp,
    pub created_at: Timestamp,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub upload_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub last_error: Option<String>,
    /// Server record id or artifact id once acked.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub result: Option<String>,
}

impl JournalEntry {
    pub fn kind(&self) -> EntryKind {
        match self.payload {
            EntryPayload::Record { .. } => EntryKind::Record,
            EntryPayload::FileChunkSet { .. } => EntryKind::FileChunkSet,
        }
    }

    /// Idempotency key for records, content hash for files.
    pub fn key(&self) -> &str {
        match &self.payload {
            EntryPayload::Record { record, .. } => &record.idempotency_key,
            EntryPayload::FileChunkSet { file } => &file.content_hash,
        }
    }

    pub fn session_id(&self) -> &str {
        match &self.payload {
            EntryPayload::Record { record, .. } => &record.session_id,
            EntryPayload::FileChunkSet { file } => &file.session_id,
        }
    }

    pub fn depends_on(&self) -> Option<u64> {
        match &self.payload {
            EntryPayload::Record { .. } => None,
            EntryPayload::FileChunkSet { file } => file.depends_on,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
enum Event {
    /// First frame of a compacted journal.
    Base { next_entry_id: u64 },
    Enqueue { entry: JournalEntry },
    State {
        entry_id: u64,
        state: EntryState,
        attempts: u32,
        next_attempt_at: Timestamp,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        last_error: Option<String>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        result: Option<String>,
    },
    Upload {
        entry_id: u64,
        upload_id: Option<String>,
    },
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ReplayReport {
    pub entries: usize,
    pub pending: usize,
    /// In-flight entries put back to pending.
    pub demoted: usize,
    pub torn_bytes: u64,
}

pub struct Journal {
    path: PathBuf,
    file: File,
    len: u64,
    entries: BTreeMap<u64, JournalEntry>,
    /// Ids below this that are missing were acked and compacted away.
    next_entry_id: u64,
    compact_threshold: u64,
}

fn encode_frame(event: &Event) -> Vec<u8> {
    let payload = serde_json::to_vec(event).expect("journal events serialize");
    let mut frame = Vec::with_capacity(FRAME_HEADER + payload.len());
    frame.extend_from_slice(&(payload.len() as u32).to_le_bytes());
    frame.extend_from_slice(&crc32fast::hash(&payload).to_le_bytes());
    frame.extend_from_slice(&payload);
    frame
}

struct Parsed {
    events: Vec<Event>,
    valid_len: u64,
    torn_bytes: u64,
}

fn corrupt(path: &Path, offset: u64, reason: impl Into<String>) -> JournalError {
    JournalError::Corrupt {
        path: path.to_path_buf(),
        offset,
        reason: reason.into(),
    }
}

fn parse(path: &Path, bytes: &[u8]) -> Result<Parsed, JournalError> {
    if bytes.len() < MAGIC.len() {
        if MAGIC.starts_with(bytes) {
            return Ok(Parsed {
                events: Vec::new(),
                valid_len: 0,
                torn_bytes: bytes.len() as u64,
            });
        }
        return Err(corrupt(path, 0, "missing LPJ1 header"));
    }
    if &bytes[..4] != MAGIC {
        return Err(corrupt(path, 0, "missing LPJ1 header"));
    }
    let mut events = Vec::new();
    let mut offset = MAGIC.len();
    while offset < bytes.len() {
        let rest = &bytes[offset..];
        let torn = Parsed {
            events: Vec::new(),
            valid_len: offset as u64,
            torn_bytes: rest.len() as u64,
        };
        if rest.len() < FRAME_HEADER {
            return Ok(Parsed { events, ..torn });
        }
        let len = u32::from_le_bytes(rest[0..4].try_into().unwrap());
        let crc = u32::from_le_bytes(rest[4..8].try_into().unwrap());
        let end = FRAME_HEADER + len as usize;
        if len > MAX_FRAME || end > rest.len() {
            // A length that runs past the end can only be the final frame.
            return Ok(Parsed { events, ..torn });
        }
        let payload = &rest[FRAME_HEADER..end];
        if crc32fast::hash(payload) != crc {
            if end == rest.len() {
                return Ok(Parsed { events, ..torn });
            }
            return Err(corrupt(path, offset as u64, "checksum mismatch before end of file"));
        }
        let event: Event = serde_json::from_slice(payload)
            .map_err(|e| corrupt(path, offset as u64, format!("undecodable entry: {e}")))?;
        events.push(event);
        offset += end;
    }
    Ok(Parsed {
        events,
        valid_len: offset as u64,
        torn_bytes: 0,
    })
}

fn apply(path: &Path, entries: &mut BTreeMap<u64, JournalEntry>, next: &mut u64, event: Event) -> Result<(), JournalError> {
    match event {
        Event::Base { next_entry_id } => *next = (*next).max(next_entry_id),
        Event::Enqueue { entry } => {
            *next = (*next).max(entry.entry_id + 1);
            entries.insert(entry.entry_id, entry);
        }
        Event::State {
            entry_id,
            state,
            attempts,
            next_attempt_at,
            last_error,
            result,
        } => {
            let e = entries
                .get_mut(&entry_id)
                .ok_or_else(|| corrupt(path, 0, format!("state change for unknown entry {entry_id}")))?;
            e.state = state;
            e.attempts = attempts;
            e.next_attempt_at = next_attempt_at;
            e.last_error = last_error;
            if result.is_some() {
                e.result = result;
            }
        }
        Event::Upload { entry_id, upload_id } => {
            let e = entries
                .get_mut(&entry_id)
                .ok_or_else(|| corrupt(path, 0, format!("upload for unknown entry {entry_id}")))?;
            e.upload_id = upload_id;
        }
    }
    Ok(())
}

/// Reads a journal without modifying it. A torn tail is ignored.
pub fn read_entries(path: &Path) -> Result<Vec<JournalEntry>, JournalError> {
    let bytes = fs::read(path)?;
    let parsed = parse(path, &bytes)?;
    let mut entries = BTreeMap::new();
    let mut next = 1;
    for event in parsed.events {
        apply(path, &mut entries, &mut next, event)?;
    }
    Ok(entries.into_values().collect())
}

fn sync_parent(path: &Path) -> io::Result<()> {
    if let Some(parent) = path.parent() {
        File::open(parent)?.sync_all()?;
    }
    Ok(())
}

impl Journal {
    pub fn open(path: impl Into<PathBuf>) -> Result<(Self, ReplayReport), JournalError> {
        Self::open_with_threshold(path, DEFAULT_COMPACT_THRESHOLD)
    }

    pub fn open_with_threshold(path: impl Into<PathBuf>, compact_threshold: u64) -> Result<(Self, ReplayReport), JournalError> {
        let path = path.into();
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        let mut file = OpenOptions::new().read(true).write(true).create(true).truncate(false).open(&path)?;
        let mut bytes = Vec::new();
        file.read_to_end(&mut bytes)?;
        let parsed = parse(&path, &bytes)?;

        let mut entries = BTreeMap::new();
        let mut next_entry_id = 1;
        for event in parsed.events {
            apply(&path, &mut entries, &mut next_entry_id, event)?;
        }
        let mut len = parsed.valid_len;
        if parsed.torn_bytes > 0 {
            tracing::warn!(path = %path.display(), bytes = parsed.torn_bytes, "discarding torn journal tail");
            file.set_len(len)?;
            file.sync_all()?;
        }
        if len == 0 {
            file.write_all(MAGIC)?;
            file.sync_all()?;
            sync_parent(&path)?;
            len = MAGIC.len() as u64;
        }
        file.seek(SeekFrom::Start(len))?;

        let mut report = ReplayReport {
            entries: entries.len(),
            torn_bytes: parsed.torn_bytes,
            ..Default::default()
        };
        for e in entries.values_mut() {
            if e.state == EntryState::InFlight {
                e.state = EntryState::Pending;
                report.demoted += 1;
            }
            if e.state == EntryState::Pending {
                report.pending += 1;
            }
        }
        Ok((
            Self {
                path,
                file,
                len,
                entries,
                next_entry_id,
                compact_threshold,
            },
            report,
        ))
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn file_len(&self) -> u64 {
        self.len
    }

    fn write(&mut self, event: &Event) -> Result<(), JournalError> {
        let frame = encode_frame(event);
        self.file.write_all(&frame)?;
        self.file.sync_data()?;
        self.len += frame.len() as u64;
        Ok(())
    }

    fn after_write(&mut self) -> Result<(), JournalError> {
        if self.len > self.compact_threshold {
            self.compact()?;
        }
        Ok(())
    }

    /// Durably appends a new pending entry and returns its id.
    pub fn append(&mut self, payload: EntryPayload, now: Timestamp) -> Result<u64, JournalError> {
        let entry = JournalEntry {
            entry_id: self.next_entry_id,
            payload,
            state: EntryState::Pending,
            attempts: 0,
            next_attempt_at: now,
            created_at: now,
            upload_id: None,
            last_error: None,
            result: None,
        };
        self.write(&Event::Enqueue { entry: entry.clone() })?;
        self.next_entry_id += 1;
        let id = entry.entry_id;
        self.entries.insert(id, entry);
        self.after_write()?;
        Ok(id)
    }

    fn transition(
        &mut self,
        entry_id: u64,
        to: EntryState,
        attempts: Option<u32>,
        next_attempt_at: Option<Timestamp>,
        last_error: Option<String>,
        result: Option<String>,
    ) -> Result<(), JournalError> {
        let entry = self.entries.get(&entry_id).ok_or(JournalError::UnknownEntry(entry_id))?;
        let from = entry.state;
        let legal = matches!(
            (from, to),
            (EntryState::Pending, EntryState::InFlight)
                | (EntryState::InFlight, EntryState::Acked)
                | (EntryState::InFlight, EntryState::Pending)
        );
        if !legal {
            return Err(JournalError::IllegalTransition { entry_id, from, to });
        }
        let event = Event::State {
            entry_id,
            state: to,
            attempts: attempts.unwrap_or(entry.attempts),
            next_attempt_at: next_attempt_at.unwrap_or(entry.next_attempt_at),
            last_error,
            result,
        };
        self.write(&event)?;
        apply(&self.path, &mut self.entries, &mut self.next_entry_id, event)?;
        self.after_write()
    }

    pub fn mark_in_flight(&mut self, entry_id: u64) -> Result<(), JournalError> {
        self.transition(entry_id, EntryState::InFlight, None, None, None, None)
    }

    /// Returns an in-flight entry to pending after a failed attempt.
    pub fn mark_failed(&mut self, entry_id: u64, next_attempt_at: Timestamp, error: String) -> Result<(), JournalError> {
        let attempts = self.entries.get(&entry_id).map_or(0, |e| e.attempts) + 1;
        self.transition(entry_id, EntryState::Pending, Some(attempts), Some(next_attempt_at), Some(error), None)
    }

    /// Returns an in-flight entry to pending without counting an attempt.
    pub fn release(&mut self, entry_id: u64) -> Result<(), JournalError> {
        self.transition(entry_id, EntryState::Pending, None, None, None, None)
    }

    pub fn mark_acked(&mut self, entry_id: u64, result: String) -> Result<(), JournalError> {
        self.transition(entry_id, EntryState::Acked, None, None, None, Some(result))
    }

    pub fn set_upload(&mut self, entry_id: u64, upload_id: Option<String>) -> Result<(), JournalError> {
        if !self.entries.contains_key(&entry_id) {
            return Err(JournalError::UnknownEntry(entry_id));
        }
        let event = Event::Upload { entry_id, upload_id };
        self.write(&event)?;
        apply(&self.path, &mut self.entries, &mut self.next_entry_id, event)?;
        self.after_write()
    }

    pub fn get(&self, entry_id: u64) -> Option<&JournalEntry> {
        self.entries.get(&entry_id)
    }

    /// Acked, including entries dropped by compaction.
    pub fn is_acked(&self, entry_id: u64) -> bool {
        match self.entries.get(&entry_id) {
            Some(e) => e.state == EntryState::Acked,
            None => entry_id < self.next_entry_id,
        }
    }

    pub fn state(&self, entry_id: u64) -> Option<EntryState> {
        match self.entries.get(&entry_id) {
            Some(e) => Some(e.state),
            None if entry_id < self.next_entry_id => Some(EntryState::Acked),
            None => None,
        }
    }

    pub fn entries(&self) -> impl Iterator<Item = &JournalEntry> {
        self.entries.values()
    }

    /// Entries not yet acked.
    pub fn depth(&self) -> usize {
        self.entries.values().filter(|e| e.state != EntryState::Acked).count()
    }

    /// Pending entries whose next attempt is due, in entry order.
    pub fn due(&self, now: Timestamp) -> Vec<JournalEntry> {
        self.entries
            .values()
            .filter(|e| e.state == EntryState::Pending && e.next_attempt_at <= now)
            .cloned()
            .collect()
    }

    pub fn next_entry_id(&self) -> u64 {
        self.next_entry_id
    }

    /// Rewrites the file with only the entries that are not acked.
    pub fn compact(&mut self) -> Result<(), JournalError> {
        let tmp = self.path.with_extension("compact.tmp");
        let mut out = File::create(&tmp)?;
        let mut len = MAGIC.len() as u64;
        out.write_all(MAGIC)?;
        let mut frames = vec![encode_frame(&Event::Base {
            next_entry_id: self.next_entry_id,
        })];
        for e in self.entries.values().filter(|e| e.state != EntryState::Acked) {
            frames.push(encode_frame(&Event::Enqueue { entry: e.clone() }));
        }
        for f in &frames {
            out.write_all(f)?;
            len += f.len() as u64;
        }
        out.sync_all()?;
        drop(out);
        fs::rename(&tmp, &self.path)?;
        sync_parent(&self.path)?;
        self.file = OpenOptions::new().read(true).write(true).open(&self.path)?;
        self.file.seek(SeekFrom::Start(len))?;
        self.len = len;
        self.entries.retain(|_, e| e.state != EntryState::Acked);
        tracing::info!(path = %self.path.display(), kept = self.entries.len(), "compacted journal");
        Ok(())
    }
}
