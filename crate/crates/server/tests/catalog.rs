mod common;

use std::collections::BTreeMap;

use labpipe_core::ConfigKind;
use proptest::prelude::*;
use serde_json::json;

#[derive(Debug, Clone)]
enum Op {
    Site(u8),
    Approach(u8),
    BadTemplate(u8),
    Template(u8),
}

fn op() -> impl Strategy<Value = Op> {
    prop_oneof![
        (0u8..3).prop_map(Op::Site),
        (0u8..3).prop_map(Op::Approach),
        (0u8..2).prop_map(Op::BadTemplate),
        (0u8..3).prop_map(Op::Template),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    /// The server catalog tracks a reference map of (kind, id) -> (version, stamp).
    #[test]
    fn catalog_matches_reference_model(ops in prop::collection::vec(op(), 1..30)) {
        let f = common::fixture();
        let mut model: BTreeMap<(String, String), (u64, u64)> = BTreeMap::new();
        let mut global = 0u64;
        let mut snapshots = vec![BTreeMap::new()];
        for op in &ops {
            let (kind, id, doc, valid) = match op {
                Op::Site(n) => (ConfigKind::Site, format!("S{n}"), json!({"site_id": format!("S{n}"), "name": "x"}), true),
                Op::Approach(n) => (
                    ConfigKind::Approach,
                    format!("A{n}"),
                    json!({"approach_id": format!("A{n}"), "name": "a", "sampling_mode": "online"}),
                    true,
                ),
                Op::BadTemplate(n) => (
                    ConfigKind::Template,
                    format!("T{n}"),
                    json!({"template_id": format!("T{n}"), "fields": [], "file_id_pattern": "{nonexistent}"}),
                    false,
                ),
                Op::Template(n) => (ConfigKind::Template, format!("T{n}"), common::template_doc(&format!("T{n}")), true),
            };
            let result = f.server.upsert_config(&f.admin, kind, &id, &doc, None);
            prop_assert_eq!(result.is_ok(), valid);
            if let Ok(resp) = result {
                prop_assert!(resp.global_version > global);
                global = resp.global_version;
                let entry = model.entry((kind.to_string(), id)).or_insert((0, 0));
                entry.0 += 1;
                entry.1 = global;
                prop_assert_eq!(resp.version, entry.0);
            }
            snapshots.push(model.clone());
        }

        let full = f.server.list_configs(&f.admin, 0).unwrap();
        prop_assert_eq!(full.global_version, global);
        let got: BTreeMap<(String, String), (u64, u64)> = full
            .documents
            .iter()
            .map(|d| ((d.kind.to_string(), d.id.clone()), (d.version, d.global_version)))
            .collect();
        prop_assert_eq!(&got, &model);

        // Every delta equals the brute-force difference against the model.
        for since in 0..=global + 1 {
            let delta = f.server.list_configs(&f.admin, since).unwrap();
            let mut want: Vec<_> = model.iter().filter(|(_, v)| v.1 > since).map(|(k, v)| (k.clone(), v.0)).collect();
            want.sort();
            let mut have: Vec<_> = delta.documents.iter().map(|d| ((d.kind.to_string(), d.id.clone()), d.version)).collect();
            have.sort();
            prop_assert_eq!(have, want);
            prop_assert_eq!(delta.global_version, global);
        }

        // Older versions stay readable.
        for ((kind, id), (version, _)) in &model {
            for v in 1..=*version {
                let doc = f.server.get_config(&f.admin, kind.parse().unwrap(), id, Some(v)).unwrap();
                prop_assert_eq!(doc.version, v);
            }
        }
    }
}

#[test]
fn identical_reupload_bumps_version() {
    let f = common::fixture();
    assert_eq!(f.upsert(ConfigKind::Template, "T", common::template_doc("T")), 1);
    assert_eq!(f.upsert(ConfigKind::Template, "T", common::template_doc("T")), 2);
    let v1 = f.server.get_config(&f.admin, ConfigKind::Template, "T", Some(1)).unwrap();
    assert_eq!(v1.document["version"], 1);
}

#[test]
fn invalid_template_leaves_catalog_unchanged() {
    let f = common::fixture();
    f.upsert(ConfigKind::Template, "T", common::template_doc("T"));
    let before = f.server.list_configs(&f.admin, 0).unwrap();
    let bad = json!({"template_id": "T", "fields": [], "file_id_pattern": "{nonexistent}"});
    let err = f.server.upsert_config(&f.admin, ConfigKind::Template, "T", &bad, None).unwrap_err();
    assert_eq!(err.status, 422);
    assert_eq!(err.details[0]["code"], "bad_pattern");
    assert!(err.message.contains("nonexistent"));
    assert_eq!(f.server.list_configs(&f.admin, 0).unwrap(), before);
}

#[test]
fn expected_version_mismatch_is_a_conflict() {
    let f = common::fixture();
    let doc = json!({"site_id": "S1", "name": "x"});
    f.server.upsert_config(&f.admin, ConfigKind::Site, "S1", &doc, Some(0)).unwrap();
    let err = f.server.upsert_config(&f.admin, ConfigKind::Site, "S1", &doc, Some(0)).unwrap_err();
    assert_eq!((err.status, err.code), (409, "version_conflict"));
    f.server.upsert_config(&f.admin, ConfigKind::Site, "S1", &doc, Some(1)).unwrap();
}

#[test]
fn protocol_needs_existing_template_version() {
    let f = common::fixture();
    f.upsert(ConfigKind::Site, "S1", json!({"site_id": "S1", "name": "x"}));
    let protocol = json!({"protocol_id": "P", "study_id": "E", "site_id": "S1", "instrument_id": "i",
        "sampling_mode": "online", "template": {"template_id": "T", "version": 1}});
    let err = f.server.upsert_config(&f.admin, ConfigKind::Protocol, "P", &protocol, None).unwrap_err();
    assert_eq!(err.status, 422);
    f.upsert(ConfigKind::Template, "T", common::template_doc("T"));
    f.server.upsert_config(&f.admin, ConfigKind::Protocol, "P", &protocol, None).unwrap();
}

#[test]
fn catalog_survives_restart() {
    let f = common::fixture();
    f.install_basic(&[]);
    let before = f.server.list_configs(&f.admin, 0).unwrap();
    let common::Fixture { dir, server, clock, capture, .. } = f;
    drop(server);
    let (_dir, server) = common::open_at(dir, clock, capture);
    let admin = server.authenticate(Some("Bearer nope")).unwrap_err();
    assert_eq!(admin.status, 401);
    assert_eq!(server.catalog_snapshot().global_version(), before.global_version);
}
