//! Append-only audit log: one JSON event per line, `seq` contiguous from 1.

use std::fs::{self, File, OpenOptions};
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use labpipe_core::api::{AuditEvent, AuditOutcome};
use labpipe_core::Timestamp;

#[derive(Debug, thiserror::Error)]
pub enum AuditError {
    #[error("audit I/O error: {0}")]
    Io(#[from] io::Error),
    #[error("audit log corrupt at line {line}: {reason}")]
    Corrupt { line: usize, reason: String },
}

struct Inner {
    file: File,
    events: Vec<AuditEvent>,
}

pub struct AuditLog {
    path: PathBuf,
    inner: Mutex<Inner>,
}

impl AuditLog {
    /// Opens or creates the log. A torn final line (crash mid-append) is
    /// truncated away; damage anywhere else is an error.
    pub fn open(path: impl Into<PathBuf>) -> Result<Self, AuditError> {
        let path = path.into();
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir)?;
        }
        let bytes = match fs::read(&path) {
            Ok(b) => b,
            Err(e) if e.kind() == io::ErrorKind::NotFound => Vec::new(),
            Err(e) => return Err(e.into()),
        };
        let mut events: Vec<AuditEvent> = Vec::new();
        let mut good_len = 0usize;
        let mut offset = 0usize;
        let mut line_no = 0usize;
        while offset < bytes.len() {
            line_no += 1;
            let end = bytes[offset..].iter().position(|&b| b == b'\n').map(|p| offset + p);
            let (line, next, terminated) = match end {
                Some(end) => (&bytes[offset..end], end + 1, true),
                None => (&bytes[offset..], bytes.len(), false),
            };
            let is_last = next >= bytes.len();
            match serde_json::from_slice::<AuditEvent>(line) {
                Ok(event) if terminated => {
                    let expected = events.len() as u64 + 1;
                    if event.seq != expected {
                        return Err(AuditError::Corrupt {
                            line: line_no,
                            reason: format!("seq {} where {expected} was expected", event.seq),
                        });
                    }
                    events.push(event);
                    good_len = next;
                }
                _ if is_last => {
                    tracing::warn!(path = %path.display(), "discarding torn final audit line");
                    break;
                }
                Ok(_) => unreachable!("only the last line can be unterminated"),
                Err(e) => {
                    return Err(AuditError::Corrupt {
                        line: line_no,
                        reason: e.to_string(),
                    })
                }
            }
            offset = next;
        }
        let file = OpenOptions::new().create(true).append(true).read(true).open(&path)?;
        if good_len < bytes.len() {
            file.set_len(good_len as u64)?;
            file.sync_all()?;
        }
        Ok(Self {
            path,
            inner: Mutex::new(Inner { file, events }),
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    /// Appends an event durably and returns its sequence number.
    pub fn append(
        &self,
        at: Timestamp,
        principal_id: &str,
        action: &str,
        resource: &str,
        outcome: AuditOutcome,
    ) -> Result<u64, AuditError> {
        let mut inner = self.inner.lock().unwrap();
        let event = AuditEvent {
            seq: inner.events.len() as u64 + 1,
            at,
            principal_id: principal_id.to_string(),
            action: action.to_string(),
            resource: resource.to_string(),
            outcome,
        };
        let mut line = serde_json::to_vec(&event).expect("audit events serialize");
        line.push(b'\n');
        inner.file.write_all(&line)?;
        inner.file.sync_data()?;
        let seq = event.seq;
        inner.events.push(event);
        Ok(seq)
    }

    /// Events with `seq > since_seq`, in order.
    pub fn read(&self, since_seq: u64) -> Vec<AuditEvent> {
        let inner = self.inner.lock().unwrap();
        inner.events.iter().skip(since_seq as usize).cloned().collect()
    }

    pub fn last_seq(&self) -> u64 {
        self.inner.lock().unwrap().events.len() as u64
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn append(log: &AuditLog, outcome: AuditOutcome) -> u64 {
        log.append(Timestamp::from_millis(0), "p", "act", "res", outcome).unwrap()
    }

    #[test]
    fn seq_is_contiguous_and_survives_restart() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("audit.log");
        let log = AuditLog::open(&path).unwrap();
        assert_eq!(append(&log, AuditOutcome::Denied), 1);
        assert_eq!(append(&log, AuditOutcome::Denied), 2);
        assert_eq!(append(&log, AuditOutcome::Allowed), 3);
        let tail = log.read(2);
        assert_eq!(tail.len(), 1);
        assert_eq!(tail[0].seq, 3);
        assert_eq!(tail[0].outcome, AuditOutcome::Allowed);
        drop(log);
        let log = AuditLog::open(&path).unwrap();
        assert_eq!(append(&log, AuditOutcome::Allowed), 4);
        let seqs: Vec<u64> = log.read(0).iter().map(|e| e.seq).collect();
        assert_eq!(seqs, [1, 2, 3, 4]);
    }

    #[test]
    fn torn_tail_is_truncated() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("audit.log");
        let log = AuditLog::open(&path).unwrap();
        append(&log, AuditOutcome::Allowed);
        append(&log, AuditOutcome::Allowed);
        drop(log);
        let mut f = OpenOptions::new().append(true).open(&path).unwrap();
        f.write_all(b"{\"seq\":3,\"at\":\"19").unwrap();
        drop(f);
        let log = AuditLog::open(&path).unwrap();
        assert_eq!(log.last_seq(), 2);
        assert_eq!(append(&log, AuditOutcome::Error), 3);
        drop(log);
        assert_eq!(AuditLog::open(&path).unwrap().read(0).len(), 3);
    }

    #[test]
    fn mid_file_damage_refuses_to_open() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("audit.log");
        let log = AuditLog::open(&path).unwrap();
        append(&log, AuditOutcome::Allowed);
        append(&log, AuditOutcome::Allowed);
        drop(log);
        let text = fs::read_to_string(&path).unwrap();
        fs::write(&path, text.replacen("\"seq\":1", "\"seq\":x", 1)).unwrap();
        assert!(matches!(AuditLog::open(&path), Err(AuditError::Corrupt { line: 1, .. })));
    }
}
