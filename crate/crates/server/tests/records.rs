mod common;

use std::sync::Arc;
use std::time::Duration;

use labpipe_core::api::{IngestStatus, RecordFilter};
use labpipe_core::FieldValue;
use labpipe_notify::{FailingPlugin, PluginRegistry};
use labpipe_server::{record_id_for_key, Server, ServerOptions};

#[test]
fn replaying_a_key_stores_one_record() {
    let f = common::fixture();
    f.install_basic(&[]);
    let c = f.principal("c", &["collector"]);
    let ids: Vec<_> = (0..5)
        .map(|_| {
            f.server
                .ingest_record(&c, "agent:s:1", common::record("agent:s:1", "P", "P001", common::start()))
                .unwrap()
        })
        .collect();
    assert_eq!(ids[0].status, IngestStatus::Created);
    assert!(ids[1..].iter().all(|r| r.status == IngestStatus::AlreadyExisting));
    assert!(ids.iter().all(|r| r.record_id == ids[0].record_id));
    assert_eq!(f.server.record_count().unwrap(), 1);
}

#[test]
fn concurrent_ingests_sharing_a_key() {
    let f = common::fixture();
    f.install_basic(&[]);
    let c = f.principal("c", &["collector"]);
    let server = &f.server;
    let results: Vec<_> = std::thread::scope(|s| {
        let handles: Vec<_> = (0..16)
            .map(|_| {
                let c = c.clone();
                s.spawn(move || server.ingest_record(&c, "shared", common::record("shared", "P", "P001", common::start())))
            })
            .collect();
        handles.into_iter().map(|h| h.join().unwrap().unwrap()).collect()
    });
    assert_eq!(results.iter().filter(|r| r.status == IngestStatus::Created).count(), 1);
    assert!(results.iter().all(|r| r.record_id == record_id_for_key("shared")));
    assert_eq!(f.server.record_count().unwrap(), 1);
}

#[test]
fn differing_replay_is_a_conflict() {
    let f = common::fixture();
    f.install_basic(&[]);
    let c = f.principal("c", &["collector"]);
    f.server.ingest_record(&c, "k", common::record("k", "P", "P001", common::start())).unwrap();
    let err = f
        .server
        .ingest_record(&c, "k", common::record("k", "P", "P002", common::start()))
        .unwrap_err();
    assert_eq!((err.status, err.code), (409, "idempotency_conflict"));
}

#[test]
fn server_revalidates() {
    let f = common::fixture();
    f.install_basic(&[]);
    let c = f.principal("c", &["collector"]);
    let mut r = common::record("k", "P", "P001", common::start());
    r.values.insert("bag".into(), FieldValue::Text("C".into()));
    r.values.insert("extra".into(), FieldValue::Integer(1));
    let err = f.server.ingest_record(&c, "k", r).unwrap_err();
    assert_eq!(err.status, 422);
    assert_eq!(err.details.len(), 2);
    assert_eq!(f.server.record_count().unwrap(), 0);
}

#[test]
fn unknown_template_version_is_stale_config() {
    let f = common::fixture();
    f.install_basic(&[]);
    let c = f.principal("c", &["collector"]);
    let mut r = common::record("k", "P", "P001", common::start());
    r.template_version = 3;
    let err = f.server.ingest_record(&c, "k", r).unwrap_err();
    assert_eq!((err.status, err.code), (428, "stale_config"));
}

#[test]
fn pagination_matches_sort_and_slice() {
    let f = common::fixture();
    f.install_basic(&[]);
    f.install_protocol("Q", "OTHER", "S1", &[]);
    let c = f.principal("c", &["collector"]);
    let r = f.principal("r", &["researcher"]);
    let empty = f.server.query_records(&r, &RecordFilter::default(), 1, 10).unwrap();
    assert_eq!((empty.total, empty.records.len()), (0, 0));

    let mut expected = Vec::new();
    for i in 0..25u64 {
        // Deliberately out of time order, with ties.
        let at = common::start().add(Duration::from_secs((i * 7) % 11 * 60));
        let protocol = if i % 3 == 0 { "Q" } else { "P" };
        let key = format!("k{i}");
        let resp = f
            .server
            .ingest_record(&c, &key, common::record(&key, protocol, &format!("P{i:03}"), at))
            .unwrap();
        expected.push((at, resp.record_id, protocol));
    }
    expected.sort();

    let mut seen = Vec::new();
    for page in 1..=3 {
        let p = f.server.query_records(&r, &RecordFilter::default(), page, 10).unwrap();
        assert_eq!(p.total, 25);
        seen.extend(p.records.into_iter().map(|v| v.record.record_id.unwrap()));
    }
    let want: Vec<String> = expected.iter().map(|(_, id, _)| id.clone()).collect();
    assert_eq!(seen, want);

    let filter = RecordFilter {
        protocol: Some("Q".into()),
        ..Default::default()
    };
    let q = f.server.query_records(&r, &filter, 1, 100).unwrap();
    let want_q: Vec<String> = expected.iter().filter(|e| e.2 == "Q").map(|e| e.1.clone()).collect();
    let got_q: Vec<String> = q.records.into_iter().map(|v| v.record.record_id.unwrap()).collect();
    assert_eq!(got_q, want_q);

    let by_study = RecordFilter {
        study: Some("OTHER".into()),
        participant: Some("P003".into()),
        ..Default::default()
    };
    assert_eq!(f.server.query_records(&r, &by_study, 1, 100).unwrap().total, 1);

    let window = RecordFilter {
        from: Some(common::start()),
        to: Some(common::start().add(Duration::from_secs(60))),
        ..Default::default()
    };
    let in_window = expected.iter().filter(|e| e.0 < common::start().add(Duration::from_secs(60))).count();
    assert_eq!(f.server.query_records(&r, &window, 1, 100).unwrap().total, in_window as u64);
}

#[test]
fn ingest_notifies_subscribed_protocols_only() {
    let f = common::fixture();
    f.install_basic(&["sample.collected.*"]);
    f.install_protocol("QUIET", "EMBER", "S1", &[]);
    f.upsert(
        labpipe_core::ConfigKind::Subscription,
        "sub1",
        serde_json::json!({"subscription_id": "sub1", "topic": "sample.collected.EMBER", "plugin": "capture"}),
    );
    let c = f.principal("c", &["collector"]);
    f.server.ingest_record(&c, "k1", common::record("k1", "P", "P001", common::start())).unwrap();
    f.server.ingest_record(&c, "k1", common::record("k1", "P", "P001", common::start())).unwrap();
    f.server.ingest_record(&c, "k2", common::record("k2", "QUIET", "P001", common::start())).unwrap();
    f.server.flush_notifications();
    let messages = f.capture.messages();
    assert_eq!(messages.len(), 1);
    assert!(messages[0].body.contains("P"));
    assert_eq!(f.server.deliveries().unwrap().len(), 1);
}

#[test]
fn failing_plugin_does_not_change_ingest() {
    let dir = tempfile::tempdir().unwrap();
    let mut plugins = PluginRegistry::new();
    plugins.register(Arc::new(FailingPlugin::new("broken")));
    plugins.register(Arc::new(FailingPlugin::panicking("exploding")));
    let clock = labpipe_core::ManualClock::new(common::start());
    let server = Server::open(dir.path(), ServerOptions { clock: Arc::new(clock), plugins }).unwrap();
    let secret = server.bootstrap_admin("root").unwrap().unwrap();
    let admin = server.authenticate(Some(&format!("Bearer {secret}"))).unwrap();
    let put = |kind, id: &str, doc: serde_json::Value| server.upsert_config(&admin, kind, id, &doc, None).unwrap();
    use labpipe_core::ConfigKind::*;
    put(Site, "S1", serde_json::json!({"site_id": "S1", "name": "x"}));
    put(Template, "T", common::template_doc("T"));
    put(
        Protocol,
        "P",
        serde_json::json!({"protocol_id": "P", "study_id": "EMBER", "site_id": "S1", "instrument_id": "i",
            "sampling_mode": "online", "template": {"template_id": "T", "version": 1},
            "notification_topics": ["sample.collected.*"]}),
    );
    for (id, plugin) in [("a", "broken"), ("b", "exploding")] {
        put(Subscription, id, serde_json::json!({"subscription_id": id, "topic": "sample.*", "plugin": plugin}));
    }
    let resp = server.ingest_record(&admin, "k", common::record("k", "P", "P001", common::start())).unwrap();
    assert_eq!(resp.status, IngestStatus::Created);
    server.flush_notifications();
    let deliveries = server.deliveries().unwrap();
    assert_eq!(deliveries.len(), 2);
    assert!(deliveries.iter().all(|d| d.status == labpipe_notify::DeliveryStatus::Failed));
    let errors = server
        .audit_log()
        .read(0)
        .into_iter()
        .filter(|e| e.action == "notify.deliver" && e.outcome == labpipe_core::api::AuditOutcome::Error)
        .count();
    assert_eq!(errors, 2);
}
