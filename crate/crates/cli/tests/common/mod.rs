#![allow(dead_code)]

use std::path::PathBuf;
use std::process::Command;
use std::sync::Arc;

use labpipe_core::{ConfigKind, MetadataRecord, Timestamp};
use labpipe_notify::{CapturePlugin, CaptureTransport, EmailPlugin, FailingPlugin, PluginRegistry};
use labpipe_server::http::BackgroundServer;
use labpipe_server::{Principal, Server, ServerOptions};
use serde_json::{json, Value};

pub struct Harness {
    pub dir: tempfile::TempDir,
    pub server: Arc<Server>,
    pub http: BackgroundServer,
    pub admin: Principal,
    pub admin_secret: String,
    pub capture: CaptureTransport,
}

impl Harness {
    /// A server on an ephemeral port with `email` and `capture` plugins
    /// writing to one capture sink, and an always-failing `broken` plugin.
    pub fn start() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let capture = CaptureTransport::new();
        let mut plugins = PluginRegistry::new();
        plugins.register(Arc::new(EmailPlugin::new(Arc::new(capture.clone()), "labpipe@localhost")));
        plugins.register(Arc::new(CapturePlugin::new(capture.clone())));
        plugins.register(Arc::new(FailingPlugin::new("broken")));
        let server = Arc::new(
            Server::open(dir.path(), ServerOptions { plugins, ..Default::default() }).unwrap(),
        );
        let admin_secret = server.bootstrap_admin("root").unwrap().unwrap();
        let admin = server.authenticate(Some(&format!("Bearer {admin_secret}"))).unwrap();
        let http = BackgroundServer::start(server.clone(), "127.0.0.1:0").unwrap();
        Self { dir, server, http, admin, admin_secret, capture }
    }

    pub fn url(&self) -> String {
        self.http.url()
    }

    pub fn token_for(&self, principal: &str, roles: &[&str]) -> String {
        let _ = self.server.create_principal(&self.admin, principal, principal);
        let roles: Vec<String> = roles.iter().map(|r| r.to_string()).collect();
        self.server.issue_token(&self.admin, principal, &roles).unwrap().secret
    }

    pub fn upsert(&self, kind: ConfigKind, id: &str, doc: Value) {
        self.server.upsert_config(&self.admin, kind, id, &doc, None).unwrap();
    }

    /// Site, template and protocol `{id}` for `study`.
    pub fn install(&self, id: &str, study: &str, topics: &[&str]) {
        self.upsert(ConfigKind::Site, "S1", json!({"site_id": "S1", "name": "Site one"}));
        self.upsert(ConfigKind::Template, "T", template());
        self.upsert(
            ConfigKind::Protocol,
            id,
            json!({
                "protocol_id": id, "study_id": study, "site_id": "S1", "instrument_id": "i",
                "sampling_mode": "offline", "template": {"template_id": "T", "version": 1},
                "notification_topics": topics,
            }),
        );
    }

    pub fn ingest(&self, who: &Principal, key: &str, protocol: &str, participant: &str, at: Timestamp) {
        self.server.ingest_record(who, key, record(key, protocol, participant, at)).unwrap();
    }
}

pub fn template() -> Value {
    json!({
        "template_id": "T",
        "fields": [
            {"name": "participant", "label": "Participant", "kind": "text", "required": true},
            {"name": "puffs", "label": "Puffs", "kind": "integer"}
        ]
    })
}

pub fn record(key: &str, protocol: &str, participant: &str, at: Timestamp) -> MetadataRecord {
    let t = labpipe_core::compile_template(&template()).unwrap();
    let raw = json!({"participant": participant, "puffs": 2});
    MetadataRecord {
        record_id: None,
        idempotency_key: key.to_string(),
        protocol_id: protocol.to_string(),
        template_version: 1,
        values: labpipe_core::validate_submission(&t, raw.as_object().unwrap()).unwrap(),
        collected_at: at,
        collector: String::new(),
        session_id: "s".into(),
    }
}

pub fn fixture_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../fixtures/ember")
}

pub struct Output {
    pub code: i32,
    pub stdout: String,
    pub stderr: String,
}

impl Output {
    pub fn json(&self) -> Value {
        serde_json::from_str(&self.stdout).unwrap_or_else(|e| panic!("not one JSON document ({e}): {}", self.stdout))
    }
}

/// Runs the `lp` binary.
pub fn lp(url: &str, token: Option<&str>, args: &[&str]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_lp"));
    cmd.args(args).env("LP_SERVER_URL", url).env_remove("LP_TOKEN");
    if let Some(t) = token {
        cmd.env("LP_TOKEN", t);
    }
    let out = cmd.output().unwrap();
    Output {
        code: out.status.code().unwrap_or(-1),
        stdout: String::from_utf8(out.stdout).unwrap(),
        stderr: String::from_utf8(out.stderr).unwrap(),
    }
}
