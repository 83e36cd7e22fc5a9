//! Chunked, checksummed file uploads.
//!
//! An upload session is opened with the declared digest and size, receives
//! fixed-size chunks in any order, and is committed once every chunk is
//! present and the assembled bytes hash to the declared digest. Commit is
//! idempotent: committing an already committed session returns the stored
//! result.

use std::time::Duration;

use labpipe_core::api::{
    codes, BeginUploadRequest, BeginUploadResponse, ChunkAck, CommitResponse, LinkTarget,
};
use labpipe_core::digest::is_sha256_hex;
use labpipe_core::{
    chunk_count, chunk_len, FileArtifact, LinkMethod, LinkageRecord, Permission, Timestamp,
    CHUNK_SIZE,
};
use labpipe_notify::{NotificationEvent, TOPIC_FILE_COMMITTED};
use serde::{Deserialize, Serialize};

use crate::records::{protocol_emits, record_id_for_key, ARTIFACTS, LINKAGES};
use crate::{ApiError, ApiResult, Principal, Server};

const UPLOADS: &str = "uploads";

/// Sessions idle for longer than this are aborted.
pub const UPLOAD_TTL: Duration = Duration::from_secs(24 * 60 * 60);
pub const MAX_UPLOAD_BYTES: u64 = 64 * 1024 * 1024 * 1024;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UploadState {
    Open,
    Committed,
    Aborted,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResolvedLinkage {
    pub record_id: String,
    pub link_method: LinkMethod,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UploadSession {
    pub upload_id: String,
    pub content_hash: String,
    pub size_bytes: u64,
    pub chunk_count: u64,
    pub received: Vec<bool>,
    pub state: UploadState,
    #[serde(default)]
    pub linkage: Option<ResolvedLinkage>,
    pub generated_file_id: String,
    pub original_path: String,
    pub captured_at: Timestamp,
    pub principal_id: String,
    pub created_at: Timestamp,
    pub last_activity: Timestamp,
    #[serde(default)]
    pub result: Option<CommitResponse>,
    #[serde(default)]
    pub abort_reason: Option<String>,
}

impl UploadSession {
    pub fn missing(&self) -> Vec<u64> {
        self.received
            .iter()
            .enumerate()
            .filter(|(_, got)| !**got)
            .map(|(i, _)| i as u64)
            .collect()
    }
}

fn closed(session: &UploadSession) -> ApiError {
    ApiError::new(
        409,
        codes::UPLOAD_CLOSED,
        format!(
            "upload {} is {}{}",
            session.upload_id,
            match session.state {
                UploadState::Committed => "committed",
                UploadState::Aborted => "aborted",
                UploadState::Open => "open",
            },
            session.abort_reason.as_deref().map(|r| format!(": {r}")).unwrap_or_default()
        ),
    )
}

pub fn artifact_id_for_hash(content_hash: &str) -> String {
    format!("art-{}", &content_hash[..32])
}

impl Server {
    fn load_upload(&self, upload_id: &str) -> ApiResult<UploadSession> {
        let doc = self
            .store
            .get(UPLOADS, upload_id)?
            .ok_or_else(|| ApiError::not_found(format!("no upload '{upload_id}'")))?;
        serde_json::from_value(doc).map_err(|e| ApiError::internal(format!("corrupt upload session: {e}")))
    }

    fn save_upload(&self, session: &UploadSession) -> ApiResult<()> {
        self.store.put(UPLOADS, &session.upload_id, &serde_json::to_value(session).expect("sessions serialize"))?;
        Ok(())
    }

    fn abort_upload(&self, mut session: UploadSession, reason: &str) -> ApiResult<UploadSession> {
        session.state = UploadState::Aborted;
        session.abort_reason = Some(reason.to_string());
        self.save_upload(&session)?;
        self.blobs.remove_upload(&session.upload_id);
        Ok(session)
    }

    /// Loads an upload, aborting it first if it has been idle past the TTL.
    fn live_upload(&self, upload_id: &str) -> ApiResult<UploadSession> {
        let session = self.load_upload(upload_id)?;
        if session.state == UploadState::Open && self.clock.now().since(session.last_activity) > UPLOAD_TTL {
            return self.abort_upload(session, "expired after 24 h of inactivity");
        }
        Ok(session)
    }

    pub fn begin_upload(&self, caller: &Principal, req: BeginUploadRequest) -> ApiResult<BeginUploadResponse> {
        self.require(caller, Permission::FileWrite, "file.begin", "files")?;
        self.audited(caller, "file.begin", &format!("blob/{}", req.content_hash), || {
            if !is_sha256_hex(&req.content_hash) {
                return Err(ApiError::bad_request("content_hash must be 64 lowercase hex characters"));
            }
            if req.size_bytes > MAX_UPLOAD_BYTES {
                return Err(ApiError::bad_request(format!("uploads are limited to {MAX_UPLOAD_BYTES} bytes")));
            }
            let linkage = match &req.linkage {
                None => None,
                Some(intent) => {
                    let record_id = match &intent.target {
                        LinkTarget::IdempotencyKey(key) => record_id_for_key(key),
                        LinkTarget::RecordId(id) => id.clone(),
                    };
                    if self.load_record(&record_id)?.is_none() {
                        return Err(ApiError::not_found(format!(
                            "linked record {record_id} has not been ingested"
                        )));
                    }
                    Some(ResolvedLinkage {
                        record_id,
                        link_method: intent.link_method,
                    })
                }
            };
            let now = self.clock.now();
            let count = chunk_count(req.size_bytes);
            let session = UploadSession {
                upload_id: format!("up-{}", uuid::Uuid::new_v4().simple()),
                content_hash: req.content_hash,
                size_bytes: req.size_bytes,
                chunk_count: count,
                received: vec![false; count as usize],
                state: UploadState::Open,
                linkage,
                generated_file_id: req.generated_file_id,
                original_path: req.original_path,
                captured_at: req.captured_at.unwrap_or(now),
                principal_id: caller.principal_id.clone(),
                created_at: now,
                last_activity: now,
                result: None,
                abort_reason: None,
            };
            self.save_upload(&session)?;
            Ok(BeginUploadResponse {
                upload_id: session.upload_id,
                chunk_size: CHUNK_SIZE,
                chunk_count: count,
            })
        })
    }

    /// Stores one chunk. Re-sending a chunk overwrites it.
    pub fn upload_chunk(&self, caller: &Principal, upload_id: &str, index: u64, bytes: &[u8]) -> ApiResult<ChunkAck> {
        self.require(caller, Permission::FileWrite, "file.chunk", &format!("upload/{upload_id}"))?;
        {
            let _guard = self.upload_lock.lock().unwrap();
            let session = self.live_upload(upload_id)?;
            if session.state != UploadState::Open {
                return Err(closed(&session));
            }
            let expected = chunk_len(session.size_bytes, index).ok_or_else(|| {
                ApiError::protocol(format!(
                    "chunk index {index} out of range (upload has {} chunks)",
                    session.chunk_count
                ))
            })?;
            if bytes.len() as u64 != expected {
                return Err(ApiError::protocol(format!(
                    "chunk {index} must be {expected} bytes, got {}",
                    bytes.len()
                )));
            }
        }
        self.blobs.write_chunk(upload_id, index, bytes)?;
        let _guard = self.upload_lock.lock().unwrap();
        let mut session = self.load_upload(upload_id)?;
        if session.state != UploadState::Open {
            return Err(closed(&session));
        }
        session.received[index as usize] = true;
        session.last_activity = self.clock.now();
        self.save_upload(&session)?;
        Ok(ChunkAck {
            upload_id: upload_id.to_string(),
            index,
            received: session.received.iter().filter(|r| **r).count() as u64,
            chunk_count: session.chunk_count,
        })
    }

    pub fn commit_upload(&self, caller: &Principal, upload_id: &str) -> ApiResult<CommitResponse> {
        let resource = format!("upload/{upload_id}");
        self.require(caller, Permission::FileWrite, "file.commit", &resource)?;
        let mut notify = None;
        let result = self.audited(caller, "file.commit", &resource, || {
            let _guard = self.upload_lock.lock().unwrap();
            let mut session = self.live_upload(upload_id)?;
            match session.state {
                UploadState::Committed => {
                    return session.result.clone().ok_or_else(|| ApiError::internal("committed upload without result"));
                }
                UploadState::Aborted => return Err(closed(&session)),
                UploadState::Open => {}
            }
            let missing: Vec<u64> = (0..session.chunk_count)
                .filter(|i| !session.received[*i as usize] || !self.blobs.has_chunk(upload_id, *i))
                .collect();
            if !missing.is_empty() {
                return Err(ApiError::new(
                    409,
                    codes::INCOMPLETE_UPLOAD,
                    format!("{} of {} chunks missing", missing.len(), session.chunk_count),
                )
                .with_details(missing.into_iter().map(serde_json::Value::from).collect()));
            }

            let assembled = self.blobs.assemble(upload_id, session.chunk_count)?;
            if assembled.size_bytes != session.size_bytes || assembled.content_hash != session.content_hash {
                self.blobs.discard(&assembled);
                let reason = format!(
                    "assembled digest {} ({} bytes) does not match declared {} ({} bytes)",
                    assembled.content_hash, assembled.size_bytes, session.content_hash, session.size_bytes
                );
                self.abort_upload(session, &reason)?;
                return Err(ApiError::new(422, codes::DIGEST_MISMATCH, reason));
            }
            self.blobs.promote(&assembled)?;

            let artifact_id = artifact_id_for_hash(&session.content_hash);
            let artifact = FileArtifact {
                artifact_id: artifact_id.clone(),
                generated_file_id: session.generated_file_id.clone(),
                content_hash: session.content_hash.clone(),
                size_bytes: session.size_bytes,
                original_path: session.original_path.clone(),
                captured_at: session.captured_at,
            };
            let created = self.store.create(ARTIFACTS, &artifact_id, &serde_json::to_value(&artifact).expect("artifacts serialize"))?;
            if !created {
                let existing: FileArtifact = serde_json::from_value(self.store.get(ARTIFACTS, &artifact_id)?.unwrap_or_default())
                    .map_err(|e| ApiError::internal(format!("corrupt artifact: {e}")))?;
                if existing.size_bytes != session.size_bytes || existing.content_hash != session.content_hash {
                    return Err(ApiError::internal(format!("artifact id collision for {artifact_id}")));
                }
            }

            let linkage = match &session.linkage {
                None => None,
                Some(l) => {
                    let link = LinkageRecord {
                        record_id: l.record_id.clone(),
                        artifact_id: artifact_id.clone(),
                        link_method: l.link_method,
                    };
                    let key = format!("{}/{}", l.record_id, artifact_id);
                    self.store.create(LINKAGES, &key, &serde_json::to_value(&link).expect("linkages serialize"))?;
                    notify = Some(l.record_id.clone());
                    Some(link)
                }
            };

            let response = CommitResponse {
                artifact_id,
                content_hash: session.content_hash.clone(),
                size_bytes: session.size_bytes,
                deduplicated: !created,
                linkage,
            };
            session.state = UploadState::Committed;
            session.result = Some(response.clone());
            session.last_activity = self.clock.now();
            self.save_upload(&session)?;
            self.blobs.remove_upload(upload_id);
            Ok(response)
        })?;

        if let Some(record_id) = notify {
            self.notify_file_committed(caller, &record_id, &result);
        }
        Ok(result)
    }

    fn notify_file_committed(&self, caller: &Principal, record_id: &str, result: &CommitResponse) {
        let Ok(Some(record)) = self.load_record(record_id) else { return };
        let Some(protocol) = self.catalog.lock().unwrap().protocol(&record.record.protocol_id) else {
            return;
        };
        if !protocol_emits(&protocol.notification_topics, TOPIC_FILE_COMMITTED, &protocol.study_id) {
            return;
        }
        let file_count = self.linkages_of(record_id).map(|l| l.len() as u64).unwrap_or(0);
        self.publish_event(NotificationEvent {
            event_id: uuid::Uuid::new_v4().to_string(),
            topic: format!("{TOPIC_FILE_COMMITTED}.{}", protocol.study_id),
            study_id: protocol.study_id.clone(),
            site_id: protocol.site_id.clone(),
            protocol_id: protocol.protocol_id.clone(),
            collector: caller.principal_id.clone(),
            at: self.clock.now(),
            file_count,
            record_id: Some(record_id.to_string()),
            artifact_id: Some(result.artifact_id.clone()),
        });
    }

    pub fn upload_session(&self, upload_id: &str) -> ApiResult<UploadSession> {
        self.load_upload(upload_id)
    }

    /// Artifact metadata plus an open handle on its bytes.
    pub fn open_artifact(&self, caller: &Principal, artifact_id: &str) -> ApiResult<(FileArtifact, std::fs::File)> {
        let resource = format!("artifact/{artifact_id}");
        self.require(caller, Permission::FileRead, "file.read", &resource)?;
        self.audited(caller, "file.read", &resource, || {
            let doc = self
                .store
                .get(ARTIFACTS, artifact_id)?
                .ok_or_else(|| ApiError::not_found(format!("no artifact '{artifact_id}'")))?;
            let artifact: FileArtifact = serde_json::from_value(doc).map_err(|e| ApiError::internal(e.to_string()))?;
            let file = self.blobs.open_blob(&artifact.content_hash)?;
            Ok((artifact, file))
        })
    }

    pub fn artifact_count(&self) -> ApiResult<usize> {
        Ok(self.store.list(ARTIFACTS)?.len())
    }

    pub fn record_count(&self) -> ApiResult<usize> {
        Ok(self.store.list(crate::records::RECORDS)?.len())
    }

    pub fn linkages(&self) -> ApiResult<Vec<LinkageRecord>> {
        Ok(self
            .store
            .list(LINKAGES)?
            .into_iter()
            .filter_map(|(_, v)| serde_json::from_value(v).ok())
            .collect())
    }

    pub fn blob_exists(&self, content_hash: &str) -> bool {
        self.blobs.has_blob(content_hash)
    }
}
