//! JSON wire types for the `/api/v1` HTTP interface.

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::catalog::{ConfigKind, VersionedDocument};
use crate::clock::Timestamp;
use crate::error::ValidationError;
use crate::model::{LinkMethod, LinkageRecord, MetadataRecord};

pub const API_PREFIX: &str = "/api/v1";
pub const IDEMPOTENCY_HEADER: &str = "Idempotency-Key";

/// Machine-readable error codes carried in [`ErrorBody::code`].
pub mod codes {
    pub const UNAUTHENTICATED: &str = "unauthenticated";
    pub const FORBIDDEN: &str = "forbidden";
    pub const NOT_FOUND: &str = "not_found";
    pub const BAD_REQUEST: &str = "bad_request";
    pub const VALIDATION_FAILED: &str = "validation_failed";
    pub const VERSION_CONFLICT: &str = "version_conflict";
    pub const IDEMPOTENCY_CONFLICT: &str = "idempotency_conflict";
    pub const STALE_CONFIG: &str = "stale_config";
    pub const PROTOCOL_ERROR: &str = "protocol_error";
    pub const INCOMPLETE_UPLOAD: &str = "incomplete_upload";
    pub const DIGEST_MISMATCH: &str = "digest_mismatch";
    pub const UPLOAD_CLOSED: &str = "upload_closed";
    pub const INTERNAL: &str = "internal";
}

/// Error response body shared by every endpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub code: String,
    pub message: String,
    #[serde(default)]
    pub details: Vec<Value>,
}

impl ErrorBody {
    /// Validation errors carried in `details`, if any.
    pub fn validation_errors(&self) -> Vec<ValidationError> {
        self.details
            .iter()
            .filter_map(|d| serde_json::from_value(d.clone()).ok())
            .collect()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CreatePrincipalRequest {
    #[serde(default)]
    pub display_name: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PrincipalView {
    pub principal_id: String,
    pub display_name: String,
    pub roles: Vec<String>,
    pub has_token: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IssueTokenRequest {
    pub principal_id: String,
    pub roles: Vec<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IssueTokenResponse {
    pub principal_id: String,
    pub roles: Vec<String>,
    /// Shown exactly once; the server keeps only its digest.
    pub secret: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UpsertResponse {
    pub kind: ConfigKind,
    pub id: String,
    pub version: u64,
    pub global_version: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfigDelta {
    pub global_version: u64,
    pub documents: Vec<VersionedDocument>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IngestStatus {
    Created,
    AlreadyExisting,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IngestResponse {
    pub record_id: String,
    pub status: IngestStatus,
}

/// Which record an uploaded file should be linked to.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LinkTarget {
    IdempotencyKey(String),
    RecordId(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LinkageIntent {
    pub target: LinkTarget,
    pub link_method: LinkMethod,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BeginUploadRequest {
    pub content_hash: String,
    pub size_bytes: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub linkage: Option<LinkageIntent>,
    #[serde(default)]
    pub generated_file_id: String,
    #[serde(default)]
    pub original_path: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub captured_at: Option<Timestamp>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BeginUploadResponse {
    pub upload_id: String,
    pub chunk_size: u64,
    pub chunk_count: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChunkAck {
    pub upload_id: String,
    pub index: u64,
    pub received: u64,
    pub chunk_count: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CommitResponse {
    pub artifact_id: String,
    pub content_hash: String,
    pub size_bytes: u64,
    /// True when the bytes were already stored under another upload.
    pub deduplicated: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub linkage: Option<LinkageRecord>,
}

/// Query filter for `GET /records`. All present criteria must match.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RecordFilter {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub study: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub site: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub protocol: Option<String>,
    /// Inclusive lower bound on `collected_at`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub from: Option<Timestamp>,
    /// Exclusive upper bound on `collected_at`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub to: Option<Timestamp>,
    /// Matches the `participant` form field.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub participant: Option<String>,
}

impl RecordFilter {
    /// Query-string pairs in a fixed order.
    pub fn query_pairs(&self) -> Vec<(&'static str, String)> {
        let mut pairs = Vec::new();
        if let Some(v) = &self.study {
            pairs.push(("study", v.clone()));
        }
        if let Some(v) = &self.site {
            pairs.push(("site", v.clone()));
        }
        if let Some(v) = &self.protocol {
            pairs.push(("protocol", v.clone()));
        }
        if let Some(v) = &self.from {
            pairs.push(("from", v.to_string()));
        }
        if let Some(v) = &self.to {
            pairs.push(("to", v.to_string()));
        }
        if let Some(v) = &self.participant {
            pairs.push(("participant", v.clone()));
        }
        pairs
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArtifactSummary {
    pub artifact_id: String,
    pub generated_file_id: String,
    pub content_hash: String,
    pub size_bytes: u64,
    pub link_method: LinkMethod,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecordView {
    pub record: MetadataRecord,
    pub study_id: String,
    pub site_id: String,
    pub artifacts: Vec<ArtifactSummary>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecordPage {
    pub records: Vec<RecordView>,
    pub total: u64,
    pub page: u64,
    pub page_size: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AuditOutcome {
    Allowed,
    Denied,
    Error,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuditEvent {
    pub seq: u64,
    pub at: Timestamp,
    pub principal_id: String,
    pub action: String,
    pub resource: String,
    pub outcome: AuditOutcome,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn link_target_wire_shape() {
        let intent = LinkageIntent {
            target: LinkTarget::IdempotencyKey("a:b:1".into()),
            link_method: LinkMethod::ChangeDetection,
        };
        let json = serde_json::to_value(&intent).unwrap();
        assert_eq!(
            json,
            serde_json::json!({"target": {"idempotency_key": "a:b:1"}, "link_method": "change_detection"})
        );
    }

    #[test]
    fn filter_query_pairs() {
        let f = RecordFilter {
            study: Some("EMBER".into()),
            to: Some(Timestamp::from_millis(0)),
            ..Default::default()
        };
        assert_eq!(
            f.query_pairs(),
            vec![("study", "EMBER".to_string()), ("to", "1970-01-01T00:00:00.000Z".to_string())]
        );
    }
}
