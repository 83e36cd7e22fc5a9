//! In-process [`Transport`] that calls a [`Server`] directly, going through
//! the same bearer authentication as HTTP requests.

use std::sync::Arc;

use labpipe_core::api::{
    BeginUploadRequest, BeginUploadResponse, ChunkAck, CommitResponse, ConfigDelta,
    IngestResponse,
};
use labpipe_core::transport::{Transport, TransportError, TransportResult};
use labpipe_core::{ConfigKind, MetadataRecord, VersionedDocument};

use crate::{ApiError, ApiResult, Principal, Server};

pub struct LocalTransport {
    server: Arc<Server>,
    authorization: String,
}

impl LocalTransport {
    pub fn new(server: Arc<Server>, secret: &str) -> Self {
        Self {
            server,
            authorization: format!("Bearer {secret}"),
        }
    }

    fn call<T>(&self, op: impl FnOnce(&Server, &Principal) -> ApiResult<T>) -> TransportResult<T> {
        let result = self
            .server
            .authenticate(Some(&self.authorization))
            .and_then(|caller| op(&self.server, &caller));
        result.map_err(rejected)
    }
}

fn rejected(e: ApiError) -> TransportError {
    TransportError::Rejected {
        status: e.status,
        body: e.body(),
    }
}

impl Transport for LocalTransport {
    fn list_configs(&self, since: u64) -> TransportResult<ConfigDelta> {
        self.call(|s, p| s.list_configs(p, since))
    }

    fn get_config(&self, kind: ConfigKind, id: &str, version: Option<u64>) -> TransportResult<VersionedDocument> {
        self.call(|s, p| s.get_config(p, kind, id, version))
    }

    fn ingest_record(&self, idempotency_key: &str, record: &MetadataRecord) -> TransportResult<IngestResponse> {
        self.call(|s, p| s.ingest_record(p, idempotency_key, record.clone()))
    }

    fn begin_upload(&self, request: &BeginUploadRequest) -> TransportResult<BeginUploadResponse> {
        self.call(|s, p| s.begin_upload(p, request.clone()))
    }

    fn upload_chunk(&self, upload_id: &str, index: u64, bytes: &[u8]) -> TransportResult<ChunkAck> {
        self.call(|s, p| s.upload_chunk(p, upload_id, index, bytes))
    }

    fn commit_upload(&self, upload_id: &str) -> TransportResult<CommitResponse> {
        self.call(|s, p| s.commit_upload(p, upload_id))
    }
}
