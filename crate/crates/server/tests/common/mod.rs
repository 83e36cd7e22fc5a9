#![allow(dead_code)]

use std::sync::Arc;

use labpipe_core::{ConfigKind, ManualClock, MetadataRecord, Timestamp};
use labpipe_notify::{CaptureTransport, CapturePlugin, PluginRegistry};
use labpipe_server::{Principal, Server, ServerOptions};
use serde_json::{json, Value};

pub struct Fixture {
    pub dir: tempfile::TempDir,
    pub server: Server,
    pub clock: ManualClock,
    pub admin: Principal,
    pub admin_secret: String,
    pub capture: CaptureTransport,
}

pub fn start() -> Timestamp {
    Timestamp::parse("2026-03-02T09:00:00.000Z").unwrap()
}

pub fn open_at(dir: tempfile::TempDir, clock: ManualClock, capture: CaptureTransport) -> (tempfile::TempDir, Server) {
    let mut plugins = PluginRegistry::new();
    plugins.register(Arc::new(CapturePlugin::new(capture)));
    let server = Server::open(
        dir.path(),
        ServerOptions {
            clock: Arc::new(clock),
            plugins,
        },
    )
    .unwrap();
    (dir, server)
}

pub fn fixture() -> Fixture {
    let clock = ManualClock::new(start());
    let capture = CaptureTransport::new();
    let (dir, server) = open_at(tempfile::tempdir().unwrap(), clock.clone(), capture.clone());
    let admin_secret = server.bootstrap_admin("root").unwrap().unwrap();
    let admin = server.authenticate(Some(&format!("Bearer {admin_secret}"))).unwrap();
    Fixture {
        dir,
        server,
        clock,
        admin,
        admin_secret,
        capture,
    }
}

pub fn template_doc(id: &str) -> Value {
    json!({
        "template_id": id,
        "fields": [
            {"name": "participant", "label": "Participant", "kind": "text", "required": true},
            {"name": "puffs", "label": "Puffs", "kind": "integer", "constraints": {"min": 0, "max": 20}},
            {"name": "bag", "label": "Bag", "kind": "enum_choice", "constraints": {"choices": ["A", "B"]}}
        ],
        "file_id_pattern": "{study}-{participant}-{seq:3}",
        "expected_file_kinds": ["*.csv"]
    })
}

impl Fixture {
    pub fn principal(&self, id: &str, roles: &[&str]) -> Principal {
        self.server.create_principal(&self.admin, id, id).unwrap();
        let roles: Vec<String> = roles.iter().map(|r| r.to_string()).collect();
        let token = self.server.issue_token(&self.admin, id, &roles).unwrap();
        self.server.authenticate(Some(&format!("Bearer {}", token.secret))).unwrap()
    }

    pub fn upsert(&self, kind: ConfigKind, id: &str, doc: Value) -> u64 {
        self.server.upsert_config(&self.admin, kind, id, &doc, None).unwrap().version
    }

    /// Site S1, template T, protocol P (study EMBER).
    pub fn install_basic(&self, topics: &[&str]) {
        self.upsert(ConfigKind::Site, "S1", json!({"site_id": "S1", "name": "Glenfield"}));
        self.upsert(ConfigKind::Template, "T", template_doc("T"));
        self.install_protocol("P", "EMBER", "S1", topics);
    }

    pub fn install_protocol(&self, id: &str, study: &str, site: &str, topics: &[&str]) {
        self.upsert(
            ConfigKind::Protocol,
            id,
            json!({
                "protocol_id": id,
                "study_id": study,
                "site_id": site,
                "instrument_id": format!("{id}-instrument"),
                "sampling_mode": "offline",
                "template": {"template_id": "T", "version": 1},
                "linkage": "change_detection",
                "watch_directory_hint": id,
                "notification_topics": topics,
            }),
        );
    }
}

pub fn record(key: &str, protocol: &str, participant: &str, at: Timestamp) -> MetadataRecord {
    let raw = json!({"participant": participant, "puffs": 3, "bag": "A"});
    let template = labpipe_core::compile_template(&template_doc("T")).unwrap();
    let values = labpipe_core::validate_submission(&template, raw.as_object().unwrap()).unwrap();
    MetadataRecord {
        record_id: None,
        idempotency_key: key.to_string(),
        protocol_id: protocol.to_string(),
        template_version: 1,
        values,
        collected_at: at,
        collector: String::new(),
        session_id: "sess-1".into(),
    }
}
