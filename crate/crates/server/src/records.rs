//! Idempotent record ingestion and record queries.

use labpipe_core::api::{
    codes, ArtifactSummary, IngestResponse, IngestStatus, RecordFilter, RecordPage, RecordView,
};
use labpipe_core::model::values_to_raw;
use labpipe_core::{
    validate_submission, FieldValue, FileArtifact, LinkageRecord, MetadataRecord, Permission,
    Timestamp,
};
use labpipe_notify::{NotificationEvent, TOPIC_SAMPLE_COLLECTED};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::{ApiError, ApiResult, Principal, Server};

pub(crate) const RECORDS: &str = "records";
pub(crate) const LINKAGES: &str = "linkages";
pub(crate) const ARTIFACTS: &str = "artifacts";

pub const MAX_PAGE_SIZE: u64 = 1000;
pub const DEFAULT_PAGE_SIZE: u64 = 50;

/// The server-canonical record id for an idempotency key.
///
/// Deriving the id from the key makes "one record per key" a single atomic
/// create in the store.
pub fn record_id_for_key(idempotency_key: &str) -> String {
    let digest = Sha256::digest(idempotency_key.as_bytes());
    format!("rec-{}", &hex::encode(digest)[..32])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub(crate) struct StoredRecord {
    pub record: MetadataRecord,
    pub study_id: String,
    pub site_id: String,
    pub received_at: Timestamp,
}

impl Server {
    pub(crate) fn load_record(&self, record_id: &str) -> ApiResult<Option<StoredRecord>> {
        self.store
            .get(RECORDS, record_id)?
            .map(|v| serde_json::from_value(v).map_err(|e| ApiError::internal(format!("corrupt record: {e}"))))
            .transpose()
    }

    pub(crate) fn linkages_of(&self, record_id: &str) -> ApiResult<Vec<LinkageRecord>> {
        Ok(self
            .store
            .list_prefix(LINKAGES, &format!("{record_id}/"))?
            .into_iter()
            .filter_map(|(_, v)| serde_json::from_value(v).ok())
            .collect())
    }

    /// Ingests a record exactly once per idempotency key.
    ///
    /// The record is re-validated against the template version it cites.
    /// Replays of an already stored key return the original record id;
    /// a replay whose content differs is a conflict.
    pub fn ingest_record(&self, caller: &Principal, idempotency_key: &str, record: MetadataRecord) -> ApiResult<IngestResponse> {
        let resource = format!("record/{idempotency_key}");
        self.require(caller, Permission::RecordWrite, "record.ingest", &resource)?;
        self.audited(caller, "record.ingest", &resource, || {
            if idempotency_key.is_empty() || idempotency_key.len() > 256 {
                return Err(ApiError::bad_request("Idempotency-Key must be 1-256 characters"));
            }
            if record.idempotency_key != idempotency_key {
                return Err(ApiError::bad_request("Idempotency-Key header does not match the record body"));
            }
            let record_id = record_id_for_key(idempotency_key);

            let (protocol, template) = {
                let catalog = self.catalog.lock().unwrap();
                let protocol = catalog.protocol(&record.protocol_id).ok_or_else(|| {
                    ApiError::validation(vec![labpipe_core::ValidationError::new(
                        "protocol_id",
                        labpipe_core::ValidationCode::ConstraintViolation,
                        format!("unknown protocol '{}'", record.protocol_id),
                    )])
                })?;
                let template = catalog
                    .template(&protocol.template.template_id, record.template_version)
                    .ok_or_else(|| {
                        ApiError::new(
                            428,
                            codes::STALE_CONFIG,
                            format!(
                                "template {} version {} is unknown to the server; refresh configs",
                                protocol.template.template_id, record.template_version
                            ),
                        )
                    })?;
                (protocol, template)
            };
            let values = validate_submission(&template, &values_to_raw(&record.values)).map_err(ApiError::validation)?;

            let stored = StoredRecord {
                record: MetadataRecord {
                    record_id: Some(record_id.clone()),
                    values,
                    collector: caller.principal_id.clone(),
                    ..record
                },
                study_id: protocol.study_id.clone(),
                site_id: protocol.site_id.clone(),
                received_at: self.clock.now(),
            };
            let doc = serde_json::to_value(&stored).expect("records serialize");
            if !self.store.create(RECORDS, &record_id, &doc)? {
                let existing = self
                    .load_record(&record_id)?
                    .ok_or_else(|| ApiError::internal("record vanished during ingest"))?;
                if existing.record.idempotency_key != idempotency_key
                    || existing.record.protocol_id != stored.record.protocol_id
                    || existing.record.values != stored.record.values
                    || existing.record.collected_at != stored.record.collected_at
                {
                    return Err(ApiError::new(
                        409,
                        codes::IDEMPOTENCY_CONFLICT,
                        format!("idempotency key '{idempotency_key}' was already used for different content"),
                    ));
                }
                return Ok(IngestResponse {
                    record_id,
                    status: IngestStatus::AlreadyExisting,
                });
            }

            if protocol_emits(&protocol.notification_topics, TOPIC_SAMPLE_COLLECTED, &protocol.study_id) {
                self.publish_event(NotificationEvent {
                    event_id: uuid::Uuid::new_v4().to_string(),
                    topic: format!("{TOPIC_SAMPLE_COLLECTED}.{}", protocol.study_id),
                    study_id: protocol.study_id.clone(),
                    site_id: protocol.site_id.clone(),
                    protocol_id: protocol.protocol_id.clone(),
                    collector: caller.principal_id.clone(),
                    at: stored.record.collected_at,
                    file_count: 0,
                    record_id: Some(record_id.clone()),
                    artifact_id: None,
                });
            }
            Ok(IngestResponse {
                record_id,
                status: IngestStatus::Created,
            })
        })
    }

    /// Filtered records ordered by `(collected_at, record_id)`, 1-based pages.
    pub fn query_records(&self, caller: &Principal, filter: &RecordFilter, page: u64, page_size: u64) -> ApiResult<RecordPage> {
        self.require(caller, Permission::RecordRead, "record.query", "records")?;
        self.audited(caller, "record.query", "records", || {
            if page == 0 {
                return Err(ApiError::bad_request("page numbers start at 1"));
            }
            if page_size == 0 || page_size > MAX_PAGE_SIZE {
                return Err(ApiError::bad_request(format!("page_size must be 1..={MAX_PAGE_SIZE}")));
            }
            let mut matching: Vec<StoredRecord> = self
                .store
                .list(RECORDS)?
                .into_iter()
                .filter_map(|(_, v)| serde_json::from_value::<StoredRecord>(v).ok())
                .filter(|r| matches(filter, r))
                .collect();
            matching.sort_by(|a, b| {
                (a.record.collected_at, &a.record.record_id).cmp(&(b.record.collected_at, &b.record.record_id))
            });
            let total = matching.len() as u64;
            let start = ((page - 1).saturating_mul(page_size)).min(total) as usize;
            let end = (start as u64 + page_size).min(total) as usize;
            let records = matching[start..end]
                .iter()
                .map(|r| self.view(r))
                .collect::<ApiResult<Vec<_>>>()?;
            Ok(RecordPage {
                records,
                total,
                page,
                page_size,
            })
        })
    }

    fn view(&self, stored: &StoredRecord) -> ApiResult<RecordView> {
        let record_id = stored.record.record_id.clone().unwrap_or_default();
        let mut artifacts = Vec::new();
        for link in self.linkages_of(&record_id)? {
            if let Some(a) = self.store.get(ARTIFACTS, &link.artifact_id)? {
                let a: FileArtifact = serde_json::from_value(a).map_err(|e| ApiError::internal(e.to_string()))?;
                artifacts.push(ArtifactSummary {
                    artifact_id: a.artifact_id,
                    generated_file_id: a.generated_file_id,
                    content_hash: a.content_hash,
                    size_bytes: a.size_bytes,
                    link_method: link.link_method,
                });
            }
        }
        Ok(RecordView {
            record: stored.record.clone(),
            study_id: stored.study_id.clone(),
            site_id: stored.site_id.clone(),
            artifacts,
        })
    }
}

/// Whether a protocol's `notification_topics` opt it into `<prefix>.<study>`.
pub(crate) fn protocol_emits(topics: &[String], prefix: &str, study: &str) -> bool {
    let topic = format!("{prefix}.{study}");
    topics.iter().any(|pattern| labpipe_notify::topic_matches(pattern, &topic))
}

fn matches(filter: &RecordFilter, r: &StoredRecord) -> bool {
    let eq = |want: &Option<String>, have: &str| want.as_deref().is_none_or(|w| w == have);
    eq(&filter.study, &r.study_id)
        && eq(&filter.site, &r.site_id)
        && eq(&filter.protocol, &r.record.protocol_id)
        && filter.from.is_none_or(|from| r.record.collected_at >= from)
        && filter.to.is_none_or(|to| r.record.collected_at < to)
        && filter.participant.as_deref().is_none_or(|p| {
            matches!(r.record.values.get("participant"), Some(FieldValue::Text(v)) if v == p)
        })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn record_ids_are_stable_and_distinct() {
        assert_eq!(record_id_for_key("a:s:1"), record_id_for_key("a:s:1"));
        assert_ne!(record_id_for_key("a:s:1"), record_id_for_key("a:s:2"));
        assert_eq!(record_id_for_key("k").len(), 4 + 32);
    }

    #[test]
    fn notification_topic_opt_in() {
        let topics = vec!["sample.collected.*".to_string()];
        assert!(protocol_emits(&topics, "sample.collected", "EMBER"));
        assert!(!protocol_emits(&topics, "file.committed", "EMBER"));
        assert!(!protocol_emits(&[], "sample.collected", "EMBER"));
    }
}
