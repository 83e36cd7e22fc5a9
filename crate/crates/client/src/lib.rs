//! Blocking client for the `/api/v1` HTTP API.
//!
//! Every failure is a [`TransportError`]: `Network` when no usable reply
//! arrived, `Rejected` when the server answered with an error status.

use std::io::Write;
use std::time::Duration;

use labpipe_core::api::{
    AuditEvent, BeginUploadRequest, BeginUploadResponse, ChunkAck, CommitResponse, ConfigDelta,
    CreatePrincipalRequest, ErrorBody, IngestResponse, IssueTokenRequest, IssueTokenResponse,
    PrincipalView, RecordFilter, RecordPage, UpsertResponse, API_PREFIX, IDEMPOTENCY_HEADER,
};
use labpipe_core::transport::{Transport, TransportError, TransportResult};
use labpipe_core::{ConfigKind, MetadataRecord, VersionedDocument};
use reqwest::blocking::{Client, RequestBuilder, Response};
pub use reqwest::Method;
use reqwest::Url;
use serde::de::DeserializeOwned;

pub use labpipe_core::transport;

pub const ENV_SERVER_URL: &str = "LP_SERVER_URL";
pub const ENV_TOKEN: &str = "LP_TOKEN";
pub const DEFAULT_SERVER_URL: &str = "http://127.0.0.1:8080";

#[derive(Clone)]
pub struct ApiClient {
    base: Url,
    token: Option<String>,
    http: Client,
}

impl std::fmt::Debug for ApiClient {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ApiClient")
            .field("base", &self.base.as_str())
            .field("token", &self.token.as_ref().map(|_| "<redacted>"))
            .finish()
    }
}

fn network(e: impl std::fmt::Display) -> TransportError {
    TransportError::Network(e.to_string())
}

impl ApiClient {
    pub fn new(server_url: &str, token: Option<String>) -> Result<Self, String> {
        Self::with_timeout(server_url, token, Duration::from_secs(120))
    }

    pub fn with_timeout(server_url: &str, token: Option<String>, timeout: Duration) -> Result<Self, String> {
        let base = Url::parse(server_url).map_err(|e| format!("invalid server URL '{server_url}': {e}"))?;
        if base.cannot_be_a_base() {
            return Err(format!("invalid server URL '{server_url}'"));
        }
        let http = Client::builder()
            .connect_timeout(Duration::from_secs(5))
            .timeout(timeout)
            .build()
            .map_err(|e| e.to_string())?;
        Ok(Self { base, token, http })
    }

    pub fn base_url(&self) -> &str {
        self.base.as_str()
    }

    fn url(&self, segments: &[&str], query: &[(&str, String)]) -> Url {
        let mut url = self.base.clone();
        {
            let mut path = url.path_segments_mut().expect("base URL checked in constructor");
            path.pop_if_empty();
            path.extend(API_PREFIX.trim_start_matches('/').split('/'));
            path.extend(segments);
        }
        if !query.is_empty() {
            let mut pairs = url.query_pairs_mut();
            for (k, v) in query {
                pairs.append_pair(k, v);
            }
        }
        url
    }

    fn request(&self, method: Method, segments: &[&str], query: &[(&str, String)]) -> RequestBuilder {
        let builder = self.http.request(method, self.url(segments, query));
        match &self.token {
            Some(t) => builder.bearer_auth(t),
            None => builder,
        }
    }

    fn send(builder: RequestBuilder) -> TransportResult<Response> {
        let response = builder.send().map_err(network)?;
        let status = response.status();
        if status.is_success() {
            return Ok(response);
        }
        let text = response.text().map_err(network)?;
        let body = serde_json::from_str::<ErrorBody>(&text).unwrap_or_else(|_| ErrorBody {
            code: format!("http_{}", status.as_u16()),
            message: text,
            details: Vec::new(),
        });
        Err(TransportError::Rejected {
            status: status.as_u16(),
            body,
        })
    }

    fn json<T: DeserializeOwned>(builder: RequestBuilder) -> TransportResult<T> {
        let response = Self::send(builder)?;
        let bytes = response.bytes().map_err(network)?;
        serde_json::from_slice(&bytes).map_err(|e| network(format!("malformed response body: {e}")))
    }

    pub fn issue_token(&self, principal_id: &str, roles: &[String]) -> TransportResult<IssueTokenResponse> {
        let body = IssueTokenRequest {
            principal_id: principal_id.to_string(),
            roles: roles.to_vec(),
        };
        Self::json(self.request(Method::POST, &["auth", "token"], &[]).json(&body))
    }

    pub fn revoke_token(&self, principal_id: &str) -> TransportResult<PrincipalView> {
        Self::json(self.request(Method::DELETE, &["auth", "token", principal_id], &[]))
    }

    pub fn create_principal(&self, principal_id: &str, display_name: &str) -> TransportResult<PrincipalView> {
        let body = CreatePrincipalRequest {
            display_name: display_name.to_string(),
        };
        Self::json(self.request(Method::PUT, &["principals", principal_id], &[]).json(&body))
    }

    pub fn list_principals(&self) -> TransportResult<Vec<PrincipalView>> {
        Self::json(self.request(Method::GET, &["principals"], &[]))
    }

    pub fn upsert_config(
        &self,
        kind: ConfigKind,
        id: &str,
        document: &serde_json::Value,
        expected_version: Option<u64>,
    ) -> TransportResult<UpsertResponse> {
        let query: Vec<(&str, String)> = expected_version.map(|v| ("expected_version", v.to_string())).into_iter().collect();
        Self::json(self.request(Method::PUT, &["configs", kind.as_str(), id], &query).json(document))
    }

    pub fn query_records(&self, filter: &RecordFilter, page: u64, page_size: u64) -> TransportResult<RecordPage> {
        let mut query = filter.query_pairs();
        query.push(("page", page.to_string()));
        query.push(("page_size", page_size.to_string()));
        Self::json(self.request(Method::GET, &["records"], &query))
    }

    /// Streams an artifact's bytes into `out`; returns the server-declared
    /// content hash.
    pub fn download_artifact(&self, artifact_id: &str, out: &mut dyn Write) -> TransportResult<Option<String>> {
        let mut response = Self::send(self.request(Method::GET, &["files", artifact_id], &[]))?;
        let hash = response
            .headers()
            .get("x-content-hash")
            .and_then(|v| v.to_str().ok())
            .map(str::to_string);
        response.copy_to(out).map_err(network)?;
        Ok(hash)
    }

    pub fn read_audit(&self, since_seq: u64) -> TransportResult<Vec<AuditEvent>> {
        Self::json(self.request(Method::GET, &["audit"], &[("since_seq", since_seq.to_string())]))
    }

    /// Raw request for callers that need the status of arbitrary endpoints.
    pub fn raw(&self, method: Method, path: &str, body: Option<Vec<u8>>) -> TransportResult<(u16, Vec<u8>)> {
        let mut url = self.url(&[], &[]);
        let joined = format!("{}/{}", url.path().trim_end_matches('/'), path.trim_start_matches('/'));
        let (p, q) = joined.split_once('?').map_or((joined.as_str(), None), |(p, q)| (p, Some(q)));
        url.set_path(p);
        url.set_query(q);
        let mut builder = self.http.request(method, url);
        if let Some(t) = &self.token {
            builder = builder.bearer_auth(t);
        }
        if let Some(b) = body {
            builder = builder.header("content-type", "application/json").body(b);
        }
        let response = builder.send().map_err(network)?;
        let status = response.status().as_u16();
        Ok((status, response.bytes().map_err(network)?.to_vec()))
    }
}

impl Transport for ApiClient {
    fn list_configs(&self, since: u64) -> TransportResult<ConfigDelta> {
        Self::json(self.request(Method::GET, &["configs"], &[("since", since.to_string())]))
    }

    fn get_config(&self, kind: ConfigKind, id: &str, version: Option<u64>) -> TransportResult<VersionedDocument> {
        let query: Vec<(&str, String)> = version.map(|v| ("version", v.to_string())).into_iter().collect();
        Self::json(self.request(Method::GET, &["configs", kind.as_str(), id], &query))
    }

    fn ingest_record(&self, idempotency_key: &str, record: &MetadataRecord) -> TransportResult<IngestResponse> {
        Self::json(
            self.request(Method::POST, &["records"], &[])
                .header(IDEMPOTENCY_HEADER, idempotency_key)
                .json(record),
        )
    }

    fn begin_upload(&self, request: &BeginUploadRequest) -> TransportResult<BeginUploadResponse> {
        Self::json(self.request(Method::POST, &["files", "begin"], &[]).json(request))
    }

    fn upload_chunk(&self, upload_id: &str, index: u64, bytes: &[u8]) -> TransportResult<ChunkAck> {
        Self::json(
            self.request(Method::PUT, &["files", upload_id, "chunks", &index.to_string()], &[])
                .header("content-type", "application/octet-stream")
                .body(bytes.to_vec()),
        )
    }

    fn commit_upload(&self, upload_id: &str) -> TransportResult<CommitResponse> {
        Self::json(self.request(Method::POST, &["files", upload_id, "commit"], &[]))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn urls_escape_segments_and_keep_base_path() {
        let c = ApiClient::new("http://host:9/prefix/", None).unwrap();
        let url = c.url(&["configs", "template", "a b"], &[("since", "3".into())]);
        assert_eq!(url.as_str(), "http://host:9/prefix/api/v1/configs/template/a%20b?since=3");
        let c = ApiClient::new("http://host:9", None).unwrap();
        assert_eq!(c.url(&["audit"], &[]).as_str(), "http://host:9/api/v1/audit");
    }

    #[test]
    fn debug_hides_token() {
        let c = ApiClient::new("http://h", Some("lp_secret".into())).unwrap();
        assert!(!format!("{c:?}").contains("lp_secret"));
    }

    #[test]
    fn unreachable_server_is_a_network_error() {
        let c = ApiClient::with_timeout("http://127.0.0.1:9", None, Duration::from_secs(2)).unwrap();
        assert!(c.list_configs(0).unwrap_err().is_network());
    }
}
