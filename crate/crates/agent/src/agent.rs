use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs::{self, File};
use std::io::{self, Read, Seek, SeekFrom};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use labpipe_core::api::{BeginUploadRequest, LinkTarget, LinkageIntent};
use labpipe_core::digest::sha256_file;
use labpipe_core::transport::{Transport, TransportError};
use labpipe_core::{
    chunk_count, chunk_len, expand_file_id, sanitize_file_id, validate_submission, Builtins, Clock,
    CollectionProtocol, ConfigDocument, ConfigKind, FormTemplate, LinkMethod, LinkageStrategy,
    MetadataRecord, SystemClock, Timestamp, ValidationError, CHUNK_SIZE,
};
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::backoff::Backoff;
use crate::cache::ConfigCache;
use crate::config::AgentConfig;
use crate::crash::{CrashHook, CrashPoint};
use crate::journal::{
    EntryKind, EntryPayload, EntryState, Journal, JournalEntry, JournalError, ReplayReport, StagedFile,
    DEFAULT_COMPACT_THRESHOLD,
};
use crate::scan::{hash_all, scan_dir, ChangeDetector, ChangeSet, FileState};
use crate::session::{LocalLinkage, LocalRecord, SessionState, SessionStore};

#[derive(Debug, thiserror::Error)]
pub enum AgentError {
    #[error(transparent)]
    Journal(#[from] JournalError),
    #[error("I/O error: {0}")]
    Io(#[from] io::Error),
    #[error("protocol '{0}' is not in the local config cache")]
    UnknownProtocol(String),
    #[error("template {template_id} version {version} is not cached")]
    MissingTemplate { template_id: String, version: u64 },
    #[error("protocol '{protocol_id}' already has active session {session_id}")]
    SessionConflict { protocol_id: String, session_id: String },
    #[error("no session '{0}'")]
    UnknownSession(String),
    #[error("session '{0}' is closed")]
    SessionClosed(String),
    #[error("submission rejected: {}", .0.iter().map(ToString::to_string).collect::<Vec<_>>().join("; "))]
    Validation(Vec<ValidationError>),
    #[error("simulated crash at {0:?}")]
    Crashed(CrashPoint),
    #[error(transparent)]
    Transport(#[from] TransportError),
}

pub type AgentResult<T> = Result<T, AgentError>;

pub struct AgentOptions {
    pub clock: Arc<dyn Clock>,
    pub transport: Arc<dyn Transport>,
    /// Seeds backoff jitter.
    pub seed: u64,
    pub crash_hook: Option<CrashHook>,
    pub compact_threshold: u64,
}

impl AgentOptions {
    pub fn new(transport: Arc<dyn Transport>) -> Self {
        Self {
            clock: Arc::new(SystemClock),
            transport,
            seed: rand::random(),
            crash_hook: None,
            compact_threshold: DEFAULT_COMPACT_THRESHOLD,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Connectivity {
    Unknown,
    Online,
    Offline,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SyncReport {
    pub attempted: usize,
    pub acked: usize,
    /// Due entries left unacked, including those waiting on their record.
    pub deferred: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RefreshReport {
    pub applied: usize,
    pub global_version: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Submission {
    pub session_id: String,
    pub idempotency_key: String,
    pub entry_id: u64,
    pub seq: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub expected_file_id: Option<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScanOutcome {
    pub changes: ChangeSet,
    pub linked: Vec<LocalLinkage>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RecordLinkState {
    Linked,
    AwaitingFile,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RecordStatus {
    pub idempotency_key: String,
    pub seq: u64,
    pub submitted_at: Timestamp,
    pub sync_state: EntryState,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub record_id: Option<String>,
    pub link_state: RecordLinkState,
    pub files: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub expected_file_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub last_error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LinkageStatus {
    pub idempotency_key: String,
    pub path: String,
    pub content_hash: String,
    pub size_bytes: u64,
    pub link_method: LinkMethod,
    pub sync_state: EntryState,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub artifact_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub last_error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SessionStatus {
    pub session_id: String,
    pub protocol_id: String,
    pub active: bool,
    pub started_at: Timestamp,
    pub records: Vec<RecordStatus>,
    pub linkages: Vec<LinkageStatus>,
    /// Expected file ids not yet found.
    pub unresolved: Vec<String>,
    pub journal_depth: usize,
    pub connectivity: Connectivity,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub last_sync_at: Option<Timestamp>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProtocolView {
    #[serde(flatten)]
    pub protocol: CollectionProtocol,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub active_session: Option<String>,
}

struct Sessions {
    store: SessionStore,
    map: BTreeMap<String, SessionState>,
    detectors: HashMap<String, ChangeDetector>,
}

struct LinkStatus {
    connectivity: Connectivity,
    last_sync_at: Option<Timestamp>,
}

enum SendError {
    Failed(TransportError),
    Local(String),
    Crashed(CrashPoint),
    Journal(JournalError),
}

impl From<JournalError> for SendError {
    fn from(e: JournalError) -> Self {
        SendError::Journal(e)
    }
}

pub struct Agent {
    agent_id: String,
    watch_root: PathBuf,
    staging: PathBuf,
    clock: Arc<dyn Clock>,
    transport: Arc<dyn Transport>,
    crash: Option<CrashHook>,
    journal: Mutex<Journal>,
    cache: Mutex<ConfigCache>,
    sessions: Mutex<Sessions>,
    sync: Mutex<Backoff>,
    link: Mutex<LinkStatus>,
    replay: ReplayReport,
}

fn load_agent_id(config: &AgentConfig) -> io::Result<String> {
    if let Some(id) = &config.agent_id {
        return Ok(id.clone());
    }
    let path = config.data_dir.join("agent_id");
    match fs::read_to_string(&path) {
        Ok(id) if !id.trim().is_empty() => Ok(id.trim().to_string()),
        Ok(_) => Err(io::Error::new(io::ErrorKind::InvalidData, "empty agent_id file")),
        Err(e) if e.kind() == io::ErrorKind::NotFound => {
            let id = format!("agent-{}", &uuid::Uuid::new_v4().simple().to_string()[..12]);
            crate::fsutil::write_atomic(&path, id.as_bytes())?;
            Ok(id)
        }
        Err(e) => Err(e),
    }
}

fn key_seq(key: &str) -> u64 {
    key.rsplit(':').next().and_then(|s| s.parse().ok()).unwrap_or(0)
}

fn file_name(path: &str) -> &str {
    path.rsplit('/').next().unwrap_or(path)
}

/// Whether `path` is the file an id_pattern record expects.
pub fn matches_expected(path: &str, expected: &str, kinds: &[glob::Pattern]) -> bool {
    let name = file_name(path);
    let named = name == expected || name.strip_prefix(expected).is_some_and(|rest| rest.starts_with('.'));
    named && (kinds.is_empty() || kinds.iter().any(|k| k.matches(name)))
}

impl Agent {
    pub fn open(config: &AgentConfig, options: AgentOptions) -> AgentResult<Self> {
        fs::create_dir_all(&config.data_dir)?;
        fs::create_dir_all(&config.watch_root)?;
        let agent_id = load_agent_id(config)?;
        let (journal, replay) =
            Journal::open_with_threshold(config.data_dir.join("journal.lpj"), options.compact_threshold)?;
        let cache = ConfigCache::open(config.data_dir.join("cache.json"))?;
        let store = SessionStore::new(config.data_dir.join("sessions"))?;
        let staging = config.data_dir.join("staging");
        fs::create_dir_all(&staging)?;
        for item in fs::read_dir(&staging)? {
            let path = item?.path();
            if path.file_name().and_then(|n| n.to_str()).is_some_and(|n| n.starts_with('.')) {
                let _ = fs::remove_file(path);
            }
        }
        let map = store
            .load_all()?
            .into_iter()
            .map(|s| (s.session_id.clone(), s))
            .collect();
        if replay.torn_bytes > 0 || replay.demoted > 0 {
            tracing::warn!(?replay, "journal recovered after unclean shutdown");
        }
        let agent = Self {
            agent_id,
            watch_root: config.watch_root.clone(),
            staging,
            clock: options.clock,
            transport: options.transport,
            crash: options.crash_hook,
            journal: Mutex::new(journal),
            cache: Mutex::new(cache),
            sessions: Mutex::new(Sessions {
                store,
                map,
                detectors: HashMap::new(),
            }),
            sync: Mutex::new(Backoff::seeded(options.seed)),
            link: Mutex::new(LinkStatus {
                connectivity: Connectivity::Unknown,
                last_sync_at: None,
            }),
            replay,
        };
        agent.reconcile()?;
        Ok(agent)
    }

    pub fn agent_id(&self) -> &str {
        &self.agent_id
    }

    pub fn replay_report(&self) -> &ReplayReport {
        &self.replay
    }

    pub fn staging_dir(&self) -> &Path {
        &self.staging
    }

    fn crash_check(&self, point: CrashPoint, kind: EntryKind) -> Result<(), CrashPoint> {
        match &self.crash {
            Some(hook) if hook(point, kind) => {
                tracing::warn!(?point, ?kind, "simulated crash");
                Err(point)
            }
            _ => Ok(()),
        }
    }

    /// Restores session bookkeeping for entries journaled just before a
    /// crash interrupted the session file update.
    fn reconcile(&self) -> AgentResult<()> {
        let mut sessions = self.sessions.lock().unwrap();
        let journal = self.journal.lock().unwrap();
        let Sessions { store, map, .. } = &mut *sessions;
        for entry in journal.entries() {
            let Some(session) = map.get_mut(entry.session_id()) else { continue };
            let mut changed = false;
            match &entry.payload {
                EntryPayload::Record { record, expected_file_id } => {
                    let seq = key_seq(&record.idempotency_key);
                    session.counter = session.counter.max(seq);
                    if !session.records.iter().any(|r| r.idempotency_key == record.idempotency_key) {
                        session.records.push(LocalRecord {
                            idempotency_key: record.idempotency_key.clone(),
                            entry_id: entry.entry_id,
                            seq,
                            submitted_at: entry.created_at,
                            expected_file_id: expected_file_id.clone(),
                            resolved: false,
                        });
                        changed = true;
                    }
                }
                EntryPayload::FileChunkSet { file } => {
                    let Some(LinkageIntent {
                        target: LinkTarget::IdempotencyKey(key),
                        link_method,
                    }) = &file.link
                    else {
                        continue;
                    };
                    if !session.is_linked(key, &file.content_hash) {
                        session.linkages.push(LocalLinkage {
                            idempotency_key: key.clone(),
                            path: file.original_path.clone(),
                            content_hash: file.content_hash.clone(),
                            size_bytes: file.size_bytes,
                            link_method: *link_method,
                            entry_id: entry.entry_id,
                        });
                        if *link_method == LinkMethod::IdPattern {
                            for r in session.records.iter_mut().filter(|r| &r.idempotency_key == key) {
                                r.resolved = true;
                            }
                        }
                        changed = true;
                    }
                }
            }
            if changed {
                tracing::info!(session = %session.session_id, entry = entry.entry_id, "reconciled session from journal");
                store.save(session)?;
            }
        }
        Ok(())
    }

    fn note(&self, result: Result<(), &TransportError>) {
        let mut link = self.link.lock().unwrap();
        link.connectivity = match result {
            Err(e) if e.is_network() => Connectivity::Offline,
            _ => Connectivity::Online,
        };
    }

    pub fn connectivity(&self) -> Connectivity {
        self.link.lock().unwrap().connectivity
    }

    pub fn cache_version(&self) -> u64 {
        self.cache.lock().unwrap().global_version()
    }

    /// Pulls the catalog delta since the cached version. On any failure the
    /// cache is left as it was.
    pub fn refresh_configs(&self) -> Result<RefreshReport, TransportError> {
        let result = self.refresh_inner();
        self.note(result.as_ref().map(|_| ()));
        result
    }

    fn refresh_inner(&self) -> Result<RefreshReport, TransportError> {
        let since = self.cache_version();
        let mut delta = self.transport.list_configs(since)?;
        let mut replace = false;
        if delta.global_version < since {
            // The server's catalog went backwards (restored or rebuilt).
            delta = self.transport.list_configs(0)?;
            replace = true;
        }

        let needed: Vec<(String, u64)> = {
            let cache = self.cache.lock().unwrap();
            let mut have: BTreeSet<(String, u64)> = BTreeSet::new();
            let mut refs: BTreeSet<(String, u64)> = BTreeSet::new();
            let mut superseded: BTreeSet<String> = BTreeSet::new();
            for doc in &delta.documents {
                match doc.parse() {
                    Ok(ConfigDocument::Template(t)) => {
                        have.insert((t.template_id, t.version));
                    }
                    Ok(ConfigDocument::Protocol(p)) => {
                        superseded.insert(p.protocol_id.clone());
                        refs.insert((p.template.template_id, p.template.version));
                    }
                    _ => {}
                }
            }
            if !replace {
                for p in cache.protocols() {
                    if !superseded.contains(&p.protocol_id) {
                        refs.insert((p.template.template_id, p.template.version));
                    }
                }
            }
            refs.into_iter()
                .filter(|(id, v)| !have.contains(&(id.clone(), *v)) && cache.template(id, *v).is_none())
                .collect()
        };
        let mut fetched = Vec::new();
        for (id, version) in needed {
            let doc = self.transport.get_config(ConfigKind::Template, &id, Some(version))?;
            if let Ok(ConfigDocument::Template(t)) = doc.parse() {
                fetched.push(t);
            }
        }

        let mut cache = self.cache.lock().unwrap();
        for t in fetched {
            cache.insert_template(t);
        }
        let applied = cache
            .apply(delta.global_version, delta.documents, replace)
            .map_err(|e| TransportError::Network(format!("cannot persist config cache: {e}")))?;
        Ok(RefreshReport {
            applied,
            global_version: delta.global_version,
        })
    }

    pub fn protocols(&self) -> Vec<ProtocolView> {
        let protocols = self.cache.lock().unwrap().protocols();
        let sessions = self.sessions.lock().unwrap();
        protocols
            .into_iter()
            .map(|p| {
                let active_session = sessions
                    .map
                    .values()
                    .find(|s| s.active && s.protocol_id == p.protocol_id)
                    .map(|s| s.session_id.clone());
                ProtocolView { protocol: p, active_session }
            })
            .collect()
    }

    pub fn protocol(&self, protocol_id: &str) -> Option<CollectionProtocol> {
        self.cache.lock().unwrap().protocol(protocol_id)
    }

    /// A cached template; the latest cached version when `version` is None.
    pub fn template(&self, template_id: &str, version: Option<u64>) -> Option<FormTemplate> {
        let cache = self.cache.lock().unwrap();
        match version {
            Some(v) => cache.template(template_id, v).cloned(),
            None => cache.latest_template(template_id).cloned(),
        }
    }

    pub fn cached_documents(&self) -> Vec<labpipe_core::VersionedDocument> {
        self.cache.lock().unwrap().documents().cloned().collect()
    }

    fn watch_dir(&self, protocol: &CollectionProtocol) -> PathBuf {
        let hint = if protocol.watch_directory_hint.is_empty() {
            protocol.protocol_id.as_str()
        } else {
            protocol.watch_directory_hint.as_str()
        };
        self.watch_root.join(hint)
    }

    fn protocol_and_template(&self, protocol_id: &str) -> AgentResult<(CollectionProtocol, FormTemplate)> {
        let cache = self.cache.lock().unwrap();
        let protocol = cache
            .protocol(protocol_id)
            .ok_or_else(|| AgentError::UnknownProtocol(protocol_id.to_string()))?;
        let template = cache
            .template(&protocol.template.template_id, protocol.template.version)
            .cloned()
            .ok_or_else(|| AgentError::MissingTemplate {
                template_id: protocol.template.template_id.clone(),
                version: protocol.template.version,
            })?;
        Ok((protocol, template))
    }

    /// Starts a session, recording the watch directory's current contents as
    /// the baseline.
    pub fn start_session(&self, protocol_id: &str) -> AgentResult<SessionState> {
        let (protocol, _) = self.protocol_and_template(protocol_id)?;
        let mut sessions = self.sessions.lock().unwrap();
        if let Some(s) = sessions.map.values().find(|s| s.active && s.protocol_id == protocol_id) {
            return Err(AgentError::SessionConflict {
                protocol_id: protocol_id.to_string(),
                session_id: s.session_id.clone(),
            });
        }
        let watch_dir = self.watch_dir(&protocol);
        fs::create_dir_all(&watch_dir)?;
        let now = self.clock.now();
        let mut baseline = scan_dir(&watch_dir, now)?;
        hash_all(&watch_dir, &mut baseline);
        let session = SessionState {
            session_id: format!("s{}", &uuid::Uuid::new_v4().simple().to_string()[..16]),
            protocol_id: protocol_id.to_string(),
            agent_id: self.agent_id.clone(),
            watch_dir,
            started_at: now,
            active: true,
            counter: 0,
            records: Vec::new(),
            linkages: Vec::new(),
            accepted: baseline.entries.clone(),
            baseline,
        };
        sessions.store.save(&session)?;
        sessions
            .detectors
            .insert(session.session_id.clone(), ChangeDetector::new(&session.baseline));
        sessions.map.insert(session.session_id.clone(), session.clone());
        Ok(session)
    }

    pub fn close_session(&self, session_id: &str) -> AgentResult<SessionState> {
        let mut sessions = self.sessions.lock().unwrap();
        let Sessions { store, map, detectors } = &mut *sessions;
        let session = map
            .get_mut(session_id)
            .ok_or_else(|| AgentError::UnknownSession(session_id.to_string()))?;
        session.active = false;
        store.save(session)?;
        detectors.remove(session_id);
        Ok(session.clone())
    }

    pub fn session(&self, session_id: &str) -> Option<SessionState> {
        self.sessions.lock().unwrap().map.get(session_id).cloned()
    }

    pub fn sessions(&self) -> Vec<SessionState> {
        self.sessions.lock().unwrap().map.values().cloned().collect()
    }

    /// Validates a form locally and journals the record before anything is
    /// sent.
    pub fn submit_form(&self, session_id: &str, raw: &Map<String, Value>) -> AgentResult<Submission> {
        let mut sessions = self.sessions.lock().unwrap();
        let Sessions { store, map, .. } = &mut *sessions;
        let session = map
            .get_mut(session_id)
            .ok_or_else(|| AgentError::UnknownSession(session_id.to_string()))?;
        if !session.active {
            return Err(AgentError::SessionClosed(session_id.to_string()));
        }
        let (protocol, template) = self.protocol_and_template(&session.protocol_id)?;
        let values = validate_submission(&template, raw).map_err(AgentError::Validation)?;

        let now = self.clock.now();
        let seq = session.counter + 1;
        let expected_file_id = match protocol.linkage {
            LinkageStrategy::IdPattern if !template.file_id_pattern.is_empty() => {
                let builtins = Builtins {
                    study: protocol.study_id.clone(),
                    site: protocol.site_id.clone(),
                    date: now.as_datetime().date_naive(),
                    seq,
                };
                Some(
                    expand_file_id(&template.file_id_pattern, &values, &builtins)
                        .map_err(|e| AgentError::Validation(vec![e]))?,
                )
            }
            _ => None,
        };
        // The counter is durable before the key is used, so a key is never
        // minted twice.
        session.counter = seq;
        store.save(session)?;
        let key = session.idempotency_key(seq);
        self.crash_check(CrashPoint::PreJournal, EntryKind::Record)
            .map_err(AgentError::Crashed)?;

        let record = MetadataRecord {
            record_id: None,
            idempotency_key: key.clone(),
            protocol_id: protocol.protocol_id.clone(),
            template_version: template.version,
            values,
            collected_at: now,
            collector: String::new(),
            session_id: session_id.to_string(),
        };
        let entry_id = self.journal.lock().unwrap().append(
            EntryPayload::Record {
                record,
                expected_file_id: expected_file_id.clone(),
            },
            now,
        )?;
        session.records.push(LocalRecord {
            idempotency_key: key.clone(),
            entry_id,
            seq,
            submitted_at: now,
            expected_file_id: expected_file_id.clone(),
            resolved: false,
        });
        store.save(session)?;
        Ok(Submission {
            session_id: session_id.to_string(),
            idempotency_key: key,
            entry_id,
            seq,
            expected_file_id,
        })
    }

    /// Scans every active session.
    pub fn scan_all(&self) -> AgentResult<Vec<(String, ScanOutcome)>> {
        let ids: Vec<String> = self
            .sessions
            .lock()
            .unwrap()
            .map
            .values()
            .filter(|s| s.active)
            .map(|s| s.session_id.clone())
            .collect();
        let mut out = Vec::new();
        for id in ids {
            match self.scan_session(&id) {
                Ok(o) => out.push((id, o)),
                Err(AgentError::SessionClosed(_)) => {}
                Err(e) => return Err(e),
            }
        }
        Ok(out)
    }

    /// Scans one session's watch directory and links settled files.
    pub fn scan_session(&self, session_id: &str) -> AgentResult<ScanOutcome> {
        let mut sessions = self.sessions.lock().unwrap();
        let Sessions { store, map, detectors } = &mut *sessions;
        let session = map
            .get_mut(session_id)
            .ok_or_else(|| AgentError::UnknownSession(session_id.to_string()))?;
        if !session.active {
            return Err(AgentError::SessionClosed(session_id.to_string()));
        }
        let (protocol, template) = self.protocol_and_template(&session.protocol_id)?;
        fs::create_dir_all(&session.watch_dir)?;
        let current = scan_dir(&session.watch_dir, self.clock.now())?;
        let detector = detectors
            .entry(session_id.to_string())
            .or_insert_with(|| ChangeDetector::resume(session.accepted.clone()));
        let root = session.watch_dir.clone();
        let changes = detector.observe(&current, |p| sha256_file(&root.join(p)).map(|(h, _)| h));
        let mut dirty = session.accepted != detector.accepted;
        session.accepted = detector.accepted.clone();

        let mut linked = Vec::new();
        match protocol.linkage {
            LinkageStrategy::ChangeDetection => {
                let latest = session.records.last().cloned();
                let candidates = changes.created.iter().chain(&changes.modified);
                match latest {
                    Some(record) => {
                        for path in candidates {
                            let state = session.accepted[path].clone();
                            let hash = state.content_hash.as_deref().unwrap_or_default();
                            if session.is_linked(&record.idempotency_key, hash) {
                                continue;
                            }
                            if let Some(l) = self.link_file(session, &record, path, &state, LinkMethod::ChangeDetection)? {
                                linked.push(l);
                            }
                        }
                    }
                    None if !changes.is_empty() => {
                        tracing::info!(session = session_id, "files appeared before any record; not linked");
                    }
                    None => {}
                }
            }
            LinkageStrategy::IdPattern => {
                let kinds: Vec<glob::Pattern> = template
                    .expected_file_kinds
                    .iter()
                    .filter_map(|k| glob::Pattern::new(k).ok())
                    .collect();
                let waiting: Vec<LocalRecord> = session.unresolved().cloned().collect();
                for record in waiting {
                    let expected = record.expected_file_id.clone().unwrap_or_default();
                    let found = current.entries.iter().find_map(|(path, now)| {
                        let accepted = session.accepted.get(path)?;
                        let stable = accepted.size_bytes == now.size_bytes && accepted.mtime_ns == now.mtime_ns;
                        let fresh = session
                            .baseline
                            .entries
                            .get(path)
                            .is_none_or(|b| b.content_hash != accepted.content_hash);
                        (stable && fresh && matches_expected(path, &expected, &kinds)).then(|| (path.clone(), accepted.clone()))
                    });
                    if let Some((path, state)) = found {
                        if let Some(l) = self.link_file(session, &record, &path, &state, LinkMethod::IdPattern)? {
                            linked.push(l);
                        }
                    }
                }
            }
        }
        dirty |= !linked.is_empty();
        if dirty {
            store.save(session)?;
        }
        Ok(ScanOutcome { changes, linked })
    }

    /// Copies a file into staging and journals its upload.
    fn link_file(
        &self,
        session: &mut SessionState,
        record: &LocalRecord,
        path: &str,
        state: &FileState,
        method: LinkMethod,
    ) -> AgentResult<Option<LocalLinkage>> {
        let Some(hash) = state.content_hash.clone() else { return Ok(None) };
        let staged = self.staging.join(&hash);
        if !staged.exists() {
            let tmp = self.staging.join(format!(".{}.tmp", uuid::Uuid::new_v4().simple()));
            fs::copy(session.watch_dir.join(path), &tmp)?;
            let (copied, _) = sha256_file(&tmp)?;
            if copied != hash {
                let _ = fs::remove_file(&tmp);
                tracing::warn!(path, "file changed while staging; will retry");
                return Ok(None);
            }
            File::open(&tmp)?.sync_all()?;
            fs::rename(&tmp, &staged)?;
            File::open(&self.staging)?.sync_all()?;
        }
        self.crash_check(CrashPoint::PreJournal, EntryKind::FileChunkSet)
            .map_err(AgentError::Crashed)?;

        let generated_file_id = record
            .expected_file_id
            .clone()
            .unwrap_or_else(|| sanitize_file_id(file_name(path)));
        let file = StagedFile {
            content_hash: hash.clone(),
            size_bytes: state.size_bytes,
            generated_file_id,
            original_path: path.to_string(),
            captured_at: state.captured_at(),
            session_id: session.session_id.clone(),
            link: Some(LinkageIntent {
                target: LinkTarget::IdempotencyKey(record.idempotency_key.clone()),
                link_method: method,
            }),
            depends_on: Some(record.entry_id),
        };
        let entry_id = self
            .journal
            .lock()
            .unwrap()
            .append(EntryPayload::FileChunkSet { file }, self.clock.now())?;
        let linkage = LocalLinkage {
            idempotency_key: record.idempotency_key.clone(),
            path: path.to_string(),
            content_hash: hash,
            size_bytes: state.size_bytes,
            link_method: method,
            entry_id,
        };
        session.linkages.push(linkage.clone());
        if method == LinkMethod::IdPattern {
            for r in session.records.iter_mut().filter(|r| r.idempotency_key == record.idempotency_key) {
                r.resolved = true;
            }
        }
        Ok(Some(linkage))
    }

    /// One pass over due journal entries, in entry order.
    pub fn sync_once(&self) -> AgentResult<SyncReport> {
        let mut backoff = self.sync.lock().unwrap();
        let due = self.journal.lock().unwrap().due(self.clock.now());
        let mut report = SyncReport::default();
        for entry in due {
            let id = entry.entry_id;
            let kind = entry.kind();
            if let Some(dep) = entry.depends_on() {
                if !self.journal.lock().unwrap().is_acked(dep) {
                    report.deferred += 1;
                    continue;
                }
            }
            report.attempted += 1;
            self.journal.lock().unwrap().mark_in_flight(id)?;
            self.crash_check(CrashPoint::PostJournalPreSend, kind)
                .map_err(AgentError::Crashed)?;
            let outcome = match &entry.payload {
                EntryPayload::Record { record, .. } => self.send_record(record),
                EntryPayload::FileChunkSet { file } => self.send_file(&entry, file),
            };
            let outcome = outcome.and_then(|result| {
                self.crash_check(CrashPoint::PostAckPreMark, kind).map_err(SendError::Crashed)?;
                Ok(result)
            });
            match outcome {
                Ok(result) => {
                    self.journal.lock().unwrap().mark_acked(id, result)?;
                    self.crash_check(CrashPoint::PostMark, kind).map_err(AgentError::Crashed)?;
                    report.acked += 1;
                }
                Err(SendError::Crashed(p)) => return Err(AgentError::Crashed(p)),
                Err(SendError::Journal(e)) => return Err(e.into()),
                Err(SendError::Failed(e)) => {
                    let delay = backoff.delay(entry.attempts + 1);
                    let next = self.clock.now().add(delay);
                    self.journal.lock().unwrap().mark_failed(id, next, e.to_string())?;
                    report.deferred += 1;
                }
                Err(SendError::Local(message)) => {
                    tracing::error!(entry = id, %message, "cannot send journal entry");
                    let delay = backoff.delay(entry.attempts + 1);
                    let next = self.clock.now().add(delay);
                    self.journal.lock().unwrap().mark_failed(id, next, message)?;
                    report.deferred += 1;
                }
            }
        }
        drop(backoff);
        self.gc_staging()?;
        self.link.lock().unwrap().last_sync_at = Some(self.clock.now());
        Ok(report)
    }

    fn transport_result<T>(&self, result: Result<T, TransportError>) -> Result<T, SendError> {
        self.note(result.as_ref().map(|_| ()));
        result.map_err(SendError::Failed)
    }

    fn send_record(&self, record: &MetadataRecord) -> Result<String, SendError> {
        let mut result = self.transport.ingest_record(&record.idempotency_key, record);
        if matches!(&result, Err(e) if e.status() == Some(428)) {
            if let Err(e) = self.refresh_configs() {
                tracing::warn!(error = %e, "config refresh after stale_config failed");
            }
            result = self.transport.ingest_record(&record.idempotency_key, record);
        }
        let response = self.transport_result(result)?;
        self.crash_check(CrashPoint::PostSendPreAck, EntryKind::Record)
            .map_err(SendError::Crashed)?;
        Ok(response.record_id)
    }

    fn send_file(&self, entry: &JournalEntry, file: &StagedFile) -> Result<String, SendError> {
        let staged = self.staging.join(&file.content_hash);
        if !staged.exists() {
            return Err(SendError::Local(format!("staged copy {} is missing", staged.display())));
        }
        if let Some(upload_id) = &entry.upload_id {
            match self.transport.commit_upload(upload_id) {
                Ok(done) => {
                    self.note(Ok(()));
                    self.crash_check(CrashPoint::PostSendPreAck, EntryKind::FileChunkSet)
                        .map_err(SendError::Crashed)?;
                    return Ok(done.artifact_id);
                }
                Err(e) if e.code() == Some(labpipe_core::api::codes::INCOMPLETE_UPLOAD) => {
                    let missing: Vec<u64> = match &e {
                        TransportError::Rejected { body, .. } => body.details.iter().filter_map(Value::as_u64).collect(),
                        TransportError::Network(_) => Vec::new(),
                    };
                    self.send_chunks(upload_id, &missing, &staged, file.size_bytes)?;
                    return self.commit(upload_id);
                }
                Err(e)
                    if matches!(
                        e.code(),
                        Some("upload_closed") | Some("not_found") | Some("digest_mismatch")
                    ) =>
                {
                    tracing::info!(entry = entry.entry_id, error = %e, "restarting upload");
                    self.journal.lock().unwrap().set_upload(entry.entry_id, None)?;
                }
                Err(e) => return self.transport_result(Err(e)),
            }
        }
        let begin = self.transport_result(self.transport.begin_upload(&BeginUploadRequest {
            content_hash: file.content_hash.clone(),
            size_bytes: file.size_bytes,
            linkage: file.link.clone(),
            generated_file_id: file.generated_file_id.clone(),
            original_path: file.original_path.clone(),
            captured_at: Some(file.captured_at),
        }))?;
        let count = chunk_count(file.size_bytes);
        if begin.chunk_count != count || begin.chunk_size != CHUNK_SIZE {
            return Err(SendError::Local(format!(
                "server expects {} chunks of {} bytes, agent uses {count} of {CHUNK_SIZE}",
                begin.chunk_count, begin.chunk_size
            )));
        }
        self.journal
            .lock()
            .unwrap()
            .set_upload(entry.entry_id, Some(begin.upload_id.clone()))?;
        let all: Vec<u64> = (0..count).collect();
        self.send_chunks(&begin.upload_id, &all, &staged, file.size_bytes)?;
        self.commit(&begin.upload_id)
    }

    fn send_chunks(&self, upload_id: &str, indices: &[u64], staged: &Path, size: u64) -> Result<(), SendError> {
        let mut f = File::open(staged).map_err(|e| SendError::Local(format!("cannot read staged file: {e}")))?;
        let mut buf = Vec::with_capacity(CHUNK_SIZE as usize);
        for (n, &index) in indices.iter().enumerate() {
            let len = chunk_len(size, index)
                .ok_or_else(|| SendError::Local(format!("chunk index {index} out of range")))?;
            buf.clear();
            f.seek(SeekFrom::Start(index * CHUNK_SIZE))
                .and_then(|_| (&mut f).take(len).read_to_end(&mut buf))
                .map_err(|e| SendError::Local(format!("cannot read staged file: {e}")))?;
            if buf.len() as u64 != len {
                return Err(SendError::Local("staged file is shorter than recorded".into()));
            }
            self.transport_result(self.transport.upload_chunk(upload_id, index, &buf))?;
            if n + 1 < indices.len() {
                self.crash_check(CrashPoint::MidChunk, EntryKind::FileChunkSet)
                    .map_err(SendError::Crashed)?;
            }
        }
        Ok(())
    }

    fn commit(&self, upload_id: &str) -> Result<String, SendError> {
        let done = self.transport_result(self.transport.commit_upload(upload_id))?;
        self.crash_check(CrashPoint::PostSendPreAck, EntryKind::FileChunkSet)
            .map_err(SendError::Crashed)?;
        Ok(done.artifact_id)
    }

    /// Deletes staged copies no unacked entry needs.
    fn gc_staging(&self) -> AgentResult<()> {
        let _sessions = self.sessions.lock().unwrap();
        let journal = self.journal.lock().unwrap();
        let needed: BTreeSet<&str> = journal
            .entries()
            .filter(|e| e.state != EntryState::Acked && e.kind() == EntryKind::FileChunkSet)
            .map(|e| e.key())
            .collect();
        for item in fs::read_dir(&self.staging)? {
            let path = item?.path();
            let Some(name) = path.file_name().and_then(|n| n.to_str()) else { continue };
            if !name.starts_with('.') && !needed.contains(name) {
                fs::remove_file(&path)?;
            }
        }
        Ok(())
    }

    pub fn journal_depth(&self) -> usize {
        self.journal.lock().unwrap().depth()
    }

    pub fn journal_entries(&self) -> Vec<JournalEntry> {
        self.journal.lock().unwrap().entries().cloned().collect()
    }

    pub fn journal_path(&self) -> PathBuf {
        self.journal.lock().unwrap().path().to_path_buf()
    }

    pub fn status(&self, session_id: &str) -> AgentResult<SessionStatus> {
        let session = self
            .session(session_id)
            .ok_or_else(|| AgentError::UnknownSession(session_id.to_string()))?;
        let journal = self.journal.lock().unwrap();
        let entry_info = |id: u64| {
            let state = journal.state(id).unwrap_or(EntryState::Acked);
            let e = journal.get(id);
            (state, e.and_then(|e| e.result.clone()), e.and_then(|e| e.last_error.clone()))
        };
        let records = session
            .records
            .iter()
            .map(|r| {
                let (sync_state, record_id, last_error) = entry_info(r.entry_id);
                let files = session.linkages.iter().filter(|l| l.idempotency_key == r.idempotency_key).count();
                RecordStatus {
                    idempotency_key: r.idempotency_key.clone(),
                    seq: r.seq,
                    submitted_at: r.submitted_at,
                    sync_state,
                    record_id,
                    link_state: if files > 0 {
                        RecordLinkState::Linked
                    } else {
                        RecordLinkState::AwaitingFile
                    },
                    files,
                    expected_file_id: r.expected_file_id.clone(),
                    last_error,
                }
            })
            .collect();
        let linkages = session
            .linkages
            .iter()
            .map(|l| {
                let (sync_state, artifact_id, last_error) = entry_info(l.entry_id);
                LinkageStatus {
                    idempotency_key: l.idempotency_key.clone(),
                    path: l.path.clone(),
                    content_hash: l.content_hash.clone(),
                    size_bytes: l.size_bytes,
                    link_method: l.link_method,
                    sync_state,
                    artifact_id,
                    last_error,
                }
            })
            .collect();
        let link = self.link.lock().unwrap();
        Ok(SessionStatus {
            session_id: session.session_id.clone(),
            protocol_id: session.protocol_id.clone(),
            active: session.active,
            started_at: session.started_at,
            records,
            linkages,
            unresolved: session.unresolved().filter_map(|r| r.expected_file_id.clone()).collect(),
            journal_depth: journal.depth(),
            connectivity: link.connectivity,
            last_sync_at: link.last_sync_at,
        })
    }
}
