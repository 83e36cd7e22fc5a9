//! Collection sessions and their on-disk store.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use labpipe_core::{LinkMethod, Timestamp};
use serde::{Deserialize, Serialize};

use crate::fsutil::write_atomic;
use crate::scan::{FileState, Snapshot};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LocalRecord {
    pub idempotency_key: String,
    pub entry_id: u64,
    pub seq: u64,
    pub submitted_at: Timestamp,
    /// Expanded file id for id_pattern protocols.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub expected_file_id: Option<String>,
    #[serde(default)]
    pub resolved: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LocalLinkage {
    pub idempotency_key: String,
    pub path: String,
    pub content_hash: String,
    pub size_bytes: u64,
    pub link_method: LinkMethod,
    pub entry_id: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SessionState {
    pub session_id: String,
    pub protocol_id: String,
    pub agent_id: String,
    pub watch_dir: PathBuf,
    pub started_at: Timestamp,
    pub active: bool,
    /// Last idempotency-key counter handed out.
    pub counter: u64,
    pub records: Vec<LocalRecord>,
    pub linkages: Vec<LocalLinkage>,
    pub baseline: Snapshot,
    /// Change-detector state: last accepted state of every path.
    pub accepted: BTreeMap<String, FileState>,
}

impl SessionState {
    pub fn idempotency_key(&self, counter: u64) -> String {
        format!("{}:{}:{}", self.agent_id, self.session_id, counter)
    }

    pub fn unresolved(&self) -> impl Iterator<Item = &LocalRecord> {
        self.records.iter().filter(|r| r.expected_file_id.is_some() && !r.resolved)
    }

    pub fn is_linked(&self, key: &str, content_hash: &str) -> bool {
        self.linkages.iter().any(|l| l.idempotency_key == key && l.content_hash == content_hash)
    }
}

pub struct SessionStore {
    dir: PathBuf,
}

impl SessionStore {
    pub fn new(dir: impl Into<PathBuf>) -> std::io::Result<Self> {
        let dir = dir.into();
        std::fs::create_dir_all(&dir)?;
        Ok(Self { dir })
    }

    fn path(&self, session_id: &str) -> PathBuf {
        self.dir.join(format!("{session_id}.json"))
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn save(&self, session: &SessionState) -> std::io::Result<()> {
        write_atomic(&self.path(&session.session_id), &serde_json::to_vec(session).expect("sessions serialize"))
    }

    pub fn load_all(&self) -> std::io::Result<Vec<SessionState>> {
        let mut out = Vec::new();
        for item in std::fs::read_dir(&self.dir)? {
            let path = item?.path();
            if path.extension().and_then(|e| e.to_str()) != Some("json") {
                continue;
            }
            let bytes = std::fs::read(&path)?;
            let session = serde_json::from_slice(&bytes).map_err(|e| {
                std::io::Error::new(std::io::ErrorKind::InvalidData, format!("{}: {e}", path.display()))
            })?;
            out.push(session);
        }
        out.sort_by(|a: &SessionState, b| a.started_at.cmp(&b.started_at));
        Ok(out)
    }
}
