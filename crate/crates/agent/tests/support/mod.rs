#![allow(dead_code)]

pub mod oracle;
pub mod scenarios;

use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::{Duration, SystemTime};

use labpipe_agent::{Agent, AgentConfig, AgentOptions, CrashHook};
use labpipe_core::transport::Transport;
use labpipe_core::{ConfigKind, ManualClock, Timestamp};
use labpipe_server::local::LocalTransport;
use labpipe_server::{Principal, Server, ServerOptions};
use serde_json::{json, Map, Value};

pub fn start() -> Timestamp {
    Timestamp::parse("2026-03-02T09:00:00.000Z").unwrap()
}

pub struct Env {
    pub server_dir: tempfile::TempDir,
    pub agent_dir: tempfile::TempDir,
    pub server: Arc<Server>,
    pub clock: ManualClock,
    pub admin: Principal,
    pub collector_secret: String,
}

pub fn template_doc(id: &str) -> Value {
    json!({
        "template_id": id,
        "fields": [
            {"name": "participant", "label": "Participant", "kind": "text", "required": true},
            {"name": "puffs", "label": "Puffs", "kind": "integer", "constraints": {"min": 0, "max": 20}}
        ],
        "file_id_pattern": "{study}-{participant}-{seq:3}",
        "expected_file_kinds": ["*.csv"]
    })
}

impl Env {
    pub fn new() -> Self {
        let clock = ManualClock::new(start());
        let server_dir = tempfile::tempdir().unwrap();
        let server = Server::open(
            server_dir.path(),
            ServerOptions {
                clock: Arc::new(clock.clone()),
                ..Default::default()
            },
        )
        .unwrap();
        let secret = server.bootstrap_admin("root").unwrap().unwrap();
        let admin = server.authenticate(Some(&format!("Bearer {secret}"))).unwrap();
        server.create_principal(&admin, "nurse", "Nurse").unwrap();
        let collector_secret = server.issue_token(&admin, "nurse", &["collector".to_string()]).unwrap().secret;
        Self {
            server_dir,
            agent_dir: tempfile::tempdir().unwrap(),
            server: Arc::new(server),
            clock,
            admin,
            collector_secret,
        }
    }

    pub fn upsert(&self, kind: ConfigKind, id: &str, doc: Value) -> u64 {
        self.server.upsert_config(&self.admin, kind, id, &doc, None).unwrap().version
    }

    /// Site S1, template T and one protocol with the given linkage.
    pub fn install(&self, protocol_id: &str, linkage: &str) {
        self.upsert(ConfigKind::Site, "S1", json!({"site_id": "S1", "name": "Glenfield"}));
        if self.server.catalog_snapshot().latest(ConfigKind::Template, "T").is_none() {
            self.upsert(ConfigKind::Template, "T", template_doc("T"));
        }
        self.upsert(
            ConfigKind::Protocol,
            protocol_id,
            json!({
                "protocol_id": protocol_id,
                "study_id": "EMBER",
                "site_id": "S1",
                "instrument_id": format!("{protocol_id}-inst"),
                "sampling_mode": "offline",
                "template": {"template_id": "T", "version": 1},
                "linkage": linkage,
                "watch_directory_hint": protocol_id,
            }),
        );
    }

    pub fn local(&self) -> LocalTransport {
        LocalTransport::new(self.server.clone(), &self.collector_secret)
    }

    pub fn config(&self) -> AgentConfig {
        let mut c = AgentConfig::new("http://unused", self.agent_dir.path().join("data"), self.agent_dir.path().join("watch"));
        c.agent_id = Some("agent-1".into());
        c
    }

    pub fn watch(&self, protocol_id: &str) -> PathBuf {
        self.agent_dir.path().join("watch").join(protocol_id)
    }

    pub fn agent(&self, transport: Arc<dyn Transport>, hook: Option<CrashHook>) -> Agent {
        let mut options = AgentOptions::new(transport);
        options.clock = Arc::new(self.clock.clone());
        options.seed = 7;
        options.crash_hook = hook;
        Agent::open(&self.config(), options).unwrap()
    }

    /// Logical server contents: (record keys, artifact hashes, linkages).
    pub fn server_state(&self) -> (usize, usize, usize) {
        (
            self.server.record_count().unwrap(),
            self.server.artifact_count().unwrap(),
            self.server.linkages().unwrap().len(),
        )
    }
}

pub fn form(participant: &str) -> Map<String, Value> {
    json!({"participant": participant, "puffs": 4}).as_object().unwrap().clone()
}

/// Writes `bytes` and stamps an explicit mtime so scans are deterministic.
pub fn write_file(path: &Path, bytes: &[u8], mtime_secs: u64) {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).unwrap();
    }
    std::fs::write(path, bytes).unwrap();
    set_mtime(path, mtime_secs);
}

pub fn set_mtime(path: &Path, mtime_secs: u64) {
    let f = std::fs::File::options().write(true).open(path).unwrap();
    f.set_modified(SystemTime::UNIX_EPOCH + Duration::from_secs(mtime_secs)).unwrap();
}

/// Scans twice so new files settle.
pub fn settle(agent: &Agent, session_id: &str) -> Vec<labpipe_agent::session::LocalLinkage> {
    let mut linked = agent.scan_session(session_id).unwrap().linked;
    linked.extend(agent.scan_session(session_id).unwrap().linked);
    linked
}

/// Runs sync passes, advancing the clock between them, until the journal
/// is empty or `budget` of simulated time is spent.
pub fn drain(agent: &Agent, clock: &ManualClock, budget: Duration) -> Duration {
    let mut spent = Duration::ZERO;
    loop {
        agent.sync_once().unwrap();
        if agent.journal_depth() == 0 || spent >= budget {
            return spent;
        }
        clock.advance(Duration::from_secs(1));
        spent += Duration::from_secs(1);
    }
}
