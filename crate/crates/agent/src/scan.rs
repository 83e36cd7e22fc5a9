//! Watch-directory snapshots and change detection.
//!
//! A file is reported only once it has *settled*: the same (size, mtime) in
//! two consecutive scans. A settled file not seen before is `created`; a
//! settled file whose (size, mtime) moved away from its last accepted state
//! is hashed, and reported as `modified` only if the hash changed.

use std::collections::BTreeMap;
use std::io;
use std::path::Path;
use std::time::UNIX_EPOCH;

use labpipe_core::digest::sha256_file;
use labpipe_core::Timestamp;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileState {
    pub size_bytes: u64,
    /// Nanoseconds since the Unix epoch.
    pub mtime_ns: i64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub content_hash: Option<String>,
}

impl FileState {
    fn stat(&self) -> (u64, i64) {
        (self.size_bytes, self.mtime_ns)
    }

    pub fn captured_at(&self) -> Timestamp {
        Timestamp::from_millis(self.mtime_ns.div_euclid(1_000_000))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Snapshot {
    pub taken_at: Timestamp,
    /// Keyed by `/`-separated path relative to the watched directory.
    pub entries: BTreeMap<String, FileState>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChangeSet {
    pub created: Vec<String>,
    pub modified: Vec<String>,
    pub unchanged: usize,
}

impl ChangeSet {
    pub fn is_empty(&self) -> bool {
        self.created.is_empty() && self.modified.is_empty()
    }
}

fn mtime_ns(meta: &std::fs::Metadata) -> i64 {
    match meta.modified().ok().and_then(|m| m.duration_since(UNIX_EPOCH).ok()) {
        Some(d) => d.as_nanos().min(i64::MAX as u128) as i64,
        None => 0,
    }
}

/// Stats every regular file under `root`. Unreadable entries are skipped
/// with a warning; they are picked up by a later scan.
pub fn scan_dir(root: &Path, taken_at: Timestamp) -> io::Result<Snapshot> {
    let mut entries = BTreeMap::new();
    for item in walkdir::WalkDir::new(root).follow_links(false).sort_by_file_name() {
        let item = match item {
            Ok(i) => i,
            Err(e) if e.depth() == 0 => return Err(e.into()),
            Err(e) => {
                tracing::warn!(error = %e, "skipping unreadable path");
                continue;
            }
        };
        if !item.file_type().is_file() {
            continue;
        }
        let meta = match item.metadata() {
            Ok(m) => m,
            Err(e) => {
                tracing::warn!(path = %item.path().display(), error = %e, "skipping unreadable file");
                continue;
            }
        };
        let Ok(rel) = item.path().strip_prefix(root) else { continue };
        let key = rel.components().map(|c| c.as_os_str().to_string_lossy()).collect::<Vec<_>>().join("/");
        entries.insert(
            key,
            FileState {
                size_bytes: meta.len(),
                mtime_ns: mtime_ns(&meta),
                content_hash: None,
            },
        );
    }
    Ok(Snapshot { taken_at, entries })
}

/// Fills in content hashes, dropping files that cannot be read.
pub fn hash_all(root: &Path, snapshot: &mut Snapshot) {
    snapshot.entries.retain(|path, state| match sha256_file(&root.join(path)) {
        Ok((hash, _)) => {
            state.content_hash = Some(hash);
            true
        }
        Err(e) => {
            tracing::warn!(path, error = %e, "cannot hash file");
            false
        }
    });
}

/// Stateless comparison of two hashed snapshots, without settling.
pub fn diff(prev: &Snapshot, current: &Snapshot) -> ChangeSet {
    let mut changes = ChangeSet::default();
    for (path, now) in &current.entries {
        match prev.entries.get(path) {
            None => changes.created.push(path.clone()),
            Some(before) if before.stat() != now.stat() && before.content_hash != now.content_hash => {
                changes.modified.push(path.clone())
            }
            Some(_) => changes.unchanged += 1,
        }
    }
    changes
}

/// Applies the settling rule across a sequence of scans.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChangeDetector {
    /// Last reported (or baseline) state of every known path, with hash.
    pub accepted: BTreeMap<String, FileState>,
    /// (size, mtime) from the previous scan.
    #[serde(skip)]
    previous: BTreeMap<String, (u64, i64)>,
}

impl ChangeDetector {
    /// Starts from a hashed baseline; baseline files count as settled.
    pub fn new(baseline: &Snapshot) -> Self {
        Self {
            accepted: baseline.entries.clone(),
            previous: baseline.entries.iter().map(|(p, s)| (p.clone(), s.stat())).collect(),
        }
    }

    /// Restores persisted state; settling starts over.
    pub fn resume(accepted: BTreeMap<String, FileState>) -> Self {
        Self {
            accepted,
            previous: BTreeMap::new(),
        }
    }

    pub fn is_settled(&self, path: &str, state: &FileState) -> bool {
        self.previous.get(path) == Some(&state.stat())
    }

    /// Feeds one scan. `hash` is called only for settled files whose stat
    /// differs from the accepted state.
    pub fn observe(&mut self, current: &Snapshot, mut hash: impl FnMut(&str) -> io::Result<String>) -> ChangeSet {
        let mut changes = ChangeSet::default();
        for (path, now) in &current.entries {
            if !self.is_settled(path, now) {
                continue;
            }
            match self.accepted.get(path) {
                Some(known) if known.stat() == now.stat() => changes.unchanged += 1,
                known => {
                    let digest = match hash(path) {
                        Ok(d) => d,
                        Err(e) => {
                            tracing::warn!(path, error = %e, "cannot hash settled file; will retry");
                            continue;
                        }
                    };
                    let mut state = now.clone();
                    state.content_hash = Some(digest);
                    match known {
                        None => changes.created.push(path.clone()),
                        Some(k) if k.content_hash != state.content_hash => changes.modified.push(path.clone()),
                        Some(_) => changes.unchanged += 1,
                    }
                    self.accepted.insert(path.clone(), state);
                }
            }
        }
        self.previous = current.entries.iter().map(|(p, s)| (p.clone(), s.stat())).collect();
        changes
    }
}
