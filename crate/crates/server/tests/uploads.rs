mod common;

use labpipe_core::api::{BeginUploadRequest, LinkTarget, LinkageIntent};
use labpipe_core::digest::sha256_hex;
use labpipe_core::{LinkMethod, CHUNK_SIZE};
use labpipe_server::{Principal, Server, UploadState, UPLOAD_TTL};
use rand::{RngCore, SeedableRng};

fn payload(seed: u64, len: usize) -> Vec<u8> {
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut bytes = vec![0u8; len];
    rng.fill_bytes(&mut bytes);
    bytes
}

fn begin(server: &Server, who: &Principal, bytes: &[u8], linkage: Option<LinkageIntent>) -> (String, u64) {
    let resp = server
        .begin_upload(
            who,
            BeginUploadRequest {
                content_hash: sha256_hex(bytes),
                size_bytes: bytes.len() as u64,
                linkage,
                generated_file_id: "EMBER-P001-001.csv".into(),
                original_path: "raw/run1.csv".into(),
                captured_at: None,
            },
        )
        .unwrap();
    (resp.upload_id, resp.chunk_count)
}

fn chunk(bytes: &[u8], i: u64) -> &[u8] {
    let start = (i * CHUNK_SIZE) as usize;
    let end = (start + CHUNK_SIZE as usize).min(bytes.len());
    &bytes[start..end]
}

fn read_back(server: &Server, who: &Principal, artifact_id: &str) -> Vec<u8> {
    let (_, mut file) = server.open_artifact(who, artifact_id).unwrap();
    let mut out = Vec::new();
    std::io::Read::read_to_end(&mut file, &mut out).unwrap();
    out
}

#[test]
fn empty_file_is_a_valid_artifact() {
    let f = common::fixture();
    let collector = f.principal("c", &["collector"]);
    let (id, count) = begin(&f.server, &collector, b"", None);
    assert_eq!(count, 0);
    let done = f.server.commit_upload(&collector, &id).unwrap();
    assert_eq!(
        done.content_hash,
        "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855"
    );
    assert_eq!(done.size_bytes, 0);
    assert!(read_back(&f.server, &f.admin, &done.artifact_id).is_empty());
}

#[test]
fn ten_mib_out_of_order() {
    let f = common::fixture();
    let collector = f.principal("c", &["collector"]);
    let bytes = payload(1, 10 * 1024 * 1024);
    let (id, count) = begin(&f.server, &collector, &bytes, None);
    assert_eq!(count, 3);
    for i in [2, 0, 1] {
        f.server.upload_chunk(&collector, &id, i, chunk(&bytes, i)).unwrap();
    }
    let done = f.server.commit_upload(&collector, &id).unwrap();
    assert_eq!(done.content_hash, sha256_hex(&bytes));
    assert!(!done.deduplicated);
    assert_eq!(read_back(&f.server, &f.admin, &done.artifact_id), bytes);
}

#[test]
fn corrupted_chunk_aborts_without_artifact() {
    let f = common::fixture();
    let collector = f.principal("c", &["collector"]);
    let bytes = payload(2, 10 * 1024 * 1024);
    let (id, _) = begin(&f.server, &collector, &bytes, None);
    for i in 0..3 {
        let mut c = chunk(&bytes, i).to_vec();
        if i == 2 {
            c[17] ^= 0x01;
        }
        f.server.upload_chunk(&collector, &id, i, &c).unwrap();
    }
    let err = f.server.commit_upload(&collector, &id).unwrap_err();
    assert_eq!((err.status, err.code), (422, "digest_mismatch"));
    assert_eq!(f.server.artifact_count().unwrap(), 0);
    assert!(!f.server.blob_exists(&sha256_hex(&bytes)));
    assert_eq!(f.server.upload_session(&id).unwrap().state, UploadState::Aborted);
    let again = f.server.commit_upload(&collector, &id).unwrap_err();
    assert_eq!(again.code, "upload_closed");
}

#[test]
fn missing_chunks_are_listed() {
    let f = common::fixture();
    let collector = f.principal("c", &["collector"]);
    let bytes = payload(3, 3 * CHUNK_SIZE as usize + 10);
    let (id, count) = begin(&f.server, &collector, &bytes, None);
    assert_eq!(count, 4);
    f.server.upload_chunk(&collector, &id, 1, chunk(&bytes, 1)).unwrap();
    let err = f.server.commit_upload(&collector, &id).unwrap_err();
    assert_eq!((err.status, err.code), (409, "incomplete_upload"));
    assert_eq!(err.details, vec![serde_json::json!(0), serde_json::json!(2), serde_json::json!(3)]);
    for i in [0, 2, 3] {
        f.server.upload_chunk(&collector, &id, i, chunk(&bytes, i)).unwrap();
    }
    f.server.commit_upload(&collector, &id).unwrap();
}

#[test]
fn bad_chunk_index_and_length_are_protocol_errors() {
    let f = common::fixture();
    let collector = f.principal("c", &["collector"]);
    let bytes = payload(4, 100);
    let (id, _) = begin(&f.server, &collector, &bytes, None);
    let err = f.server.upload_chunk(&collector, &id, 1, &bytes).unwrap_err();
    assert_eq!((err.status, err.code), (400, "protocol_error"));
    let err = f.server.upload_chunk(&collector, &id, 0, &bytes[..99]).unwrap_err();
    assert_eq!(err.code, "protocol_error");
}

#[test]
fn recommit_returns_same_result() {
    let f = common::fixture();
    let collector = f.principal("c", &["collector"]);
    let bytes = payload(5, 1000);
    let (id, _) = begin(&f.server, &collector, &bytes, None);
    f.server.upload_chunk(&collector, &id, 0, &bytes).unwrap();
    let first = f.server.commit_upload(&collector, &id).unwrap();
    let second = f.server.commit_upload(&collector, &id).unwrap();
    assert_eq!(first, second);
    assert_eq!(f.server.artifact_count().unwrap(), 1);
}

#[test]
fn identical_bytes_share_one_blob_with_two_linkages() {
    let f = common::fixture();
    f.install_basic(&[]);
    let collector = f.principal("c", &["collector"]);
    for key in ["k1", "k2"] {
        f.server
            .ingest_record(&collector, key, common::record(key, "P", "P001", common::start()))
            .unwrap();
    }
    let bytes = payload(6, 5000);
    let mut artifacts = Vec::new();
    for key in ["k1", "k2"] {
        let intent = LinkageIntent {
            target: LinkTarget::IdempotencyKey(key.into()),
            link_method: LinkMethod::ChangeDetection,
        };
        let (id, _) = begin(&f.server, &collector, &bytes, Some(intent));
        f.server.upload_chunk(&collector, &id, 0, &bytes).unwrap();
        artifacts.push(f.server.commit_upload(&collector, &id).unwrap());
    }
    assert_eq!(artifacts[0].artifact_id, artifacts[1].artifact_id);
    assert!(!artifacts[0].deduplicated);
    assert!(artifacts[1].deduplicated);
    assert_eq!(f.server.artifact_count().unwrap(), 1);
    assert_eq!(f.server.linkages().unwrap().len(), 2);
    let blobs = walk_files(&f.dir.path().join("blobs"));
    assert_eq!(blobs, 1);
}

fn walk_files(dir: &std::path::Path) -> usize {
    std::fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let p = e.unwrap().path();
            if p.is_dir() {
                walk_files(&p)
            } else {
                1
            }
        })
        .sum()
}

#[test]
fn linking_to_an_unknown_record_is_not_found() {
    let f = common::fixture();
    let collector = f.principal("c", &["collector"]);
    let intent = LinkageIntent {
        target: LinkTarget::RecordId("rec-nope".into()),
        link_method: LinkMethod::Manual,
    };
    let err = f
        .server
        .begin_upload(
            &collector,
            BeginUploadRequest {
                content_hash: sha256_hex(b"x"),
                size_bytes: 1,
                linkage: Some(intent),
                generated_file_id: String::new(),
                original_path: String::new(),
                captured_at: None,
            },
        )
        .unwrap_err();
    assert_eq!(err.status, 404);
}

#[test]
fn idle_sessions_expire() {
    let f = common::fixture();
    let collector = f.principal("c", &["collector"]);
    let bytes = payload(7, CHUNK_SIZE as usize + 1);
    let (id, _) = begin(&f.server, &collector, &bytes, None);
    f.server.upload_chunk(&collector, &id, 0, chunk(&bytes, 0)).unwrap();
    f.clock.advance(UPLOAD_TTL - std::time::Duration::from_secs(1));
    f.server.upload_chunk(&collector, &id, 1, chunk(&bytes, 1)).unwrap();
    f.clock.advance(UPLOAD_TTL + std::time::Duration::from_secs(1));
    let err = f.server.commit_upload(&collector, &id).unwrap_err();
    assert_eq!(err.code, "upload_closed");
}

#[test]
fn researchers_cannot_upload() {
    let f = common::fixture();
    let researcher = f.principal("r", &["researcher"]);
    let err = f
        .server
        .begin_upload(
            &researcher,
            BeginUploadRequest {
                content_hash: sha256_hex(b""),
                size_bytes: 0,
                linkage: None,
                generated_file_id: String::new(),
                original_path: String::new(),
                captured_at: None,
            },
        )
        .unwrap_err();
    assert_eq!(err.status, 403);
}
