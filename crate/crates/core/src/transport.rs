//! The subset of the server API an agent needs, independent of how requests
//! travel.

use crate::api::{
    BeginUploadResponse, ChunkAck, CommitResponse, ConfigDelta, ErrorBody, IngestResponse,
    BeginUploadRequest,
};
use crate::catalog::{ConfigKind, VersionedDocument};
use crate::model::MetadataRecord;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum TransportError {
    /// The request or its reply was lost; the server may or may not have
    /// applied it.
    #[error("network error: {0}")]
    Network(String),
    /// The server answered with an error status.
    #[error("{status} {}: {}", body.code, body.message)]
    Rejected { status: u16, body: ErrorBody },
}

impl TransportError {
    pub fn status(&self) -> Option<u16> {
        match self {
            TransportError::Network(_) => None,
            TransportError::Rejected { status, .. } => Some(*status),
        }
    }

    pub fn code(&self) -> Option<&str> {
        match self {
            TransportError::Network(_) => None,
            TransportError::Rejected { body, .. } => Some(&body.code),
        }
    }

    pub fn is_network(&self) -> bool {
        matches!(self, TransportError::Network(_))
    }
}

pub type TransportResult<T> = Result<T, TransportError>;

pub trait Transport: Send + Sync {
    fn list_configs(&self, since: u64) -> TransportResult<ConfigDelta>;
    fn get_config(&self, kind: ConfigKind, id: &str, version: Option<u64>) -> TransportResult<VersionedDocument>;
    fn ingest_record(&self, idempotency_key: &str, record: &MetadataRecord) -> TransportResult<IngestResponse>;
    fn begin_upload(&self, request: &BeginUploadRequest) -> TransportResult<BeginUploadResponse>;
    fn upload_chunk(&self, upload_id: &str, index: u64, bytes: &[u8]) -> TransportResult<ChunkAck>;
    fn commit_upload(&self, upload_id: &str) -> TransportResult<CommitResponse>;
}

impl<T: Transport + ?Sized> Transport for std::sync::Arc<T> {
    fn list_configs(&self, since: u64) -> TransportResult<ConfigDelta> {
        (**self).list_configs(since)
    }
    fn get_config(&self, kind: ConfigKind, id: &str, version: Option<u64>) -> TransportResult<VersionedDocument> {
        (**self).get_config(kind, id, version)
    }
    fn ingest_record(&self, idempotency_key: &str, record: &MetadataRecord) -> TransportResult<IngestResponse> {
        (**self).ingest_record(idempotency_key, record)
    }
    fn begin_upload(&self, request: &BeginUploadRequest) -> TransportResult<BeginUploadResponse> {
        (**self).begin_upload(request)
    }
    fn upload_chunk(&self, upload_id: &str, index: u64, bytes: &[u8]) -> TransportResult<ChunkAck> {
        (**self).upload_chunk(upload_id, index, bytes)
    }
    fn commit_upload(&self, upload_id: &str) -> TransportResult<CommitResponse> {
        (**self).commit_upload(upload_id)
    }
}
