//! HTTP binding of [`Server`] under `/api/v1`.
//!
//! Handlers take raw bodies and query strings so that authentication and
//! authorization run before any request parsing.

use std::collections::HashMap;
use std::sync::Arc;

use axum::body::{Body, Bytes};
use axum::extract::{DefaultBodyLimit, Path, RawQuery, State};
use axum::http::{header, HeaderMap, HeaderValue, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{delete, get, post, put};
use axum::{Json, Router};
use labpipe_core::api::{
    BeginUploadRequest, CreatePrincipalRequest, IssueTokenRequest, RecordFilter, API_PREFIX,
    IDEMPOTENCY_HEADER,
};
use labpipe_core::{ConfigKind, MetadataRecord, Timestamp, CHUNK_SIZE};
use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::records::DEFAULT_PAGE_SIZE;
use crate::{ApiError, ApiResult, Principal, Server};

/// Response header carrying an artifact's content hash.
pub const CONTENT_HASH_HEADER: &str = "X-Content-Hash";

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let status = StatusCode::from_u16(self.status).unwrap_or(StatusCode::INTERNAL_SERVER_ERROR);
        (status, Json(self.body())).into_response()
    }
}

type Shared = State<Arc<Server>>;

pub fn router(server: Arc<Server>) -> Router {
    let api = Router::new()
        .route("/auth/token", post(issue_token))
        .route("/auth/token/{principal_id}", delete(revoke_token))
        .route("/principals", get(list_principals))
        .route("/principals/{principal_id}", put(create_principal))
        .route("/configs", get(list_configs))
        .route("/configs/{kind}/{id}", get(get_config).put(upsert_config))
        .route("/records", post(ingest_record).get(query_records))
        .route("/files/begin", post(begin_upload))
        .route("/files/{upload_id}/chunks/{index}", put(upload_chunk))
        .route("/files/{upload_id}/commit", post(commit_upload))
        .route("/files/{artifact_id}", get(get_artifact))
        .route("/audit", get(read_audit))
        .layer(DefaultBodyLimit::max(CHUNK_SIZE as usize + 64 * 1024));
    Router::new().nest(API_PREFIX, api).with_state(server)
}

/// Serves the API until the listener fails.
pub async fn serve(listener: tokio::net::TcpListener, server: Arc<Server>) -> std::io::Result<()> {
    axum::serve(listener, router(server)).await
}

/// Serves until `shutdown` resolves.
pub async fn serve_with_shutdown(
    listener: tokio::net::TcpListener,
    server: Arc<Server>,
    shutdown: impl std::future::Future<Output = ()> + Send + 'static,
) -> std::io::Result<()> {
    axum::serve(listener, router(server)).with_graceful_shutdown(shutdown).await
}

async fn blocking<T, F>(status: StatusCode, f: F) -> Response
where
    T: Serialize + Send + 'static,
    F: FnOnce() -> ApiResult<T> + Send + 'static,
{
    match tokio::task::spawn_blocking(f).await {
        Ok(Ok(value)) => (status, Json(value)).into_response(),
        Ok(Err(e)) => e.into_response(),
        Err(e) => ApiError::internal(format!("handler panicked: {e}")).into_response(),
    }
}

fn bearer(headers: &HeaderMap) -> Option<String> {
    headers
        .get(header::AUTHORIZATION)
        .and_then(|v| v.to_str().ok())
        .map(str::to_string)
}

fn authenticate(server: &Server, authorization: &Option<String>) -> ApiResult<Principal> {
    server.authenticate(authorization.as_deref())
}

fn parse_json<T: DeserializeOwned>(body: &[u8]) -> ApiResult<T> {
    serde_json::from_slice(body).map_err(|e| ApiError::bad_request(format!("malformed JSON body: {e}")))
}

fn query_map(raw: Option<String>) -> HashMap<String, String> {
    form_urlencoded::parse(raw.unwrap_or_default().as_bytes())
        .into_owned()
        .collect()
}

fn int_param(query: &HashMap<String, String>, name: &str) -> ApiResult<Option<u64>> {
    query
        .get(name)
        .map(|v| {
            v.parse::<u64>()
                .map_err(|_| ApiError::bad_request(format!("query parameter '{name}' must be a non-negative integer")))
        })
        .transpose()
}

fn time_param(query: &HashMap<String, String>, name: &str) -> ApiResult<Option<Timestamp>> {
    query
        .get(name)
        .map(|v| {
            Timestamp::parse(v)
                .map_err(|_| ApiError::bad_request(format!("query parameter '{name}' must be an RFC 3339 timestamp")))
        })
        .transpose()
}

async fn issue_token(State(server): Shared, headers: HeaderMap, body: Bytes) -> Response {
    let auth = bearer(&headers);
    blocking(StatusCode::CREATED, move || {
        let caller = authenticate(&server, &auth)?;
        server.require(&caller, labpipe_core::Permission::Admin, "token.issue", "tokens")?;
        let req: IssueTokenRequest = parse_json(&body)?;
        server.issue_token(&caller, &req.principal_id, &req.roles)
    })
    .await
}

async fn revoke_token(State(server): Shared, headers: HeaderMap, Path(principal_id): Path<String>) -> Response {
    let auth = bearer(&headers);
    blocking(StatusCode::OK, move || {
        let caller = authenticate(&server, &auth)?;
        server.revoke_token(&caller, &principal_id)
    })
    .await
}

async fn list_principals(State(server): Shared, headers: HeaderMap) -> Response {
    let auth = bearer(&headers);
    blocking(StatusCode::OK, move || {
        let caller = authenticate(&server, &auth)?;
        server.list_principals(&caller)
    })
    .await
}

async fn create_principal(State(server): Shared, headers: HeaderMap, Path(principal_id): Path<String>, body: Bytes) -> Response {
    let auth = bearer(&headers);
    blocking(StatusCode::CREATED, move || {
        let caller = authenticate(&server, &auth)?;
        server.require(&caller, labpipe_core::Permission::Admin, "principal.create", &format!("principal/{principal_id}"))?;
        let req: CreatePrincipalRequest = if body.is_empty() {
            CreatePrincipalRequest { display_name: String::new() }
        } else {
            parse_json(&body)?
        };
        server.create_principal(&caller, &principal_id, &req.display_name)
    })
    .await
}

async fn list_configs(State(server): Shared, headers: HeaderMap, RawQuery(query): RawQuery) -> Response {
    let auth = bearer(&headers);
    blocking(StatusCode::OK, move || {
        let caller = authenticate(&server, &auth)?;
        server.require(&caller, labpipe_core::Permission::ConfigRead, "config.list", "configs")?;
        let since = int_param(&query_map(query), "since")?.unwrap_or(0);
        server.list_configs(&caller, since)
    })
    .await
}

fn config_kind(kind: &str) -> ApiResult<ConfigKind> {
    kind.parse().map_err(|_| ApiError::not_found(format!("unknown config kind '{kind}'")))
}

async fn get_config(
    State(server): Shared,
    headers: HeaderMap,
    Path((kind, id)): Path<(String, String)>,
    RawQuery(query): RawQuery,
) -> Response {
    let auth = bearer(&headers);
    blocking(StatusCode::OK, move || {
        let caller = authenticate(&server, &auth)?;
        server.require(&caller, labpipe_core::Permission::ConfigRead, "config.get", &format!("config/{kind}/{id}"))?;
        let version = int_param(&query_map(query), "version")?;
        server.get_config(&caller, config_kind(&kind)?, &id, version)
    })
    .await
}

async fn upsert_config(
    State(server): Shared,
    headers: HeaderMap,
    Path((kind, id)): Path<(String, String)>,
    RawQuery(query): RawQuery,
    body: Bytes,
) -> Response {
    let auth = bearer(&headers);
    blocking(StatusCode::OK, move || {
        let caller = authenticate(&server, &auth)?;
        server.require(&caller, labpipe_core::Permission::ConfigWrite, "config.upsert", &format!("config/{kind}/{id}"))?;
        let expected = int_param(&query_map(query), "expected_version")?;
        let raw: serde_json::Value = parse_json(&body)?;
        server.upsert_config(&caller, config_kind(&kind)?, &id, &raw, expected)
    })
    .await
}

async fn ingest_record(State(server): Shared, headers: HeaderMap, body: Bytes) -> Response {
    let auth = bearer(&headers);
    let key = headers
        .get(IDEMPOTENCY_HEADER)
        .map(|v| v.to_str().map(str::to_string).unwrap_or_default());
    let result = tokio::task::spawn_blocking(move || {
        let caller = authenticate(&server, &auth)?;
        server.require(&caller, labpipe_core::Permission::RecordWrite, "record.ingest", "records")?;
        let key = key.ok_or_else(|| ApiError::bad_request(format!("missing {IDEMPOTENCY_HEADER} header")))?;
        let record: MetadataRecord = parse_json(&body)?;
        server.ingest_record(&caller, &key, record)
    })
    .await;
    match result {
        Ok(Ok(resp)) => {
            let status = match resp.status {
                labpipe_core::api::IngestStatus::Created => StatusCode::CREATED,
                labpipe_core::api::IngestStatus::AlreadyExisting => StatusCode::OK,
            };
            (status, Json(resp)).into_response()
        }
        Ok(Err(e)) => e.into_response(),
        Err(e) => ApiError::internal(format!("handler panicked: {e}")).into_response(),
    }
}

async fn query_records(State(server): Shared, headers: HeaderMap, RawQuery(query): RawQuery) -> Response {
    let auth = bearer(&headers);
    blocking(StatusCode::OK, move || {
        let caller = authenticate(&server, &auth)?;
        server.require(&caller, labpipe_core::Permission::RecordRead, "record.query", "records")?;
        let q = query_map(query);
        let filter = RecordFilter {
            study: q.get("study").cloned(),
            site: q.get("site").cloned(),
            protocol: q.get("protocol").cloned(),
            from: time_param(&q, "from")?,
            to: time_param(&q, "to")?,
            participant: q.get("participant").cloned(),
        };
        let page = int_param(&q, "page")?.unwrap_or(1);
        let page_size = int_param(&q, "page_size")?.unwrap_or(DEFAULT_PAGE_SIZE);
        server.query_records(&caller, &filter, page, page_size)
    })
    .await
}

async fn begin_upload(State(server): Shared, headers: HeaderMap, body: Bytes) -> Response {
    let auth = bearer(&headers);
    blocking(StatusCode::CREATED, move || {
        let caller = authenticate(&server, &auth)?;
        server.require(&caller, labpipe_core::Permission::FileWrite, "file.begin", "files")?;
        let req: BeginUploadRequest = parse_json(&body)?;
        server.begin_upload(&caller, req)
    })
    .await
}

async fn upload_chunk(
    State(server): Shared,
    headers: HeaderMap,
    Path((upload_id, index)): Path<(String, String)>,
    body: Bytes,
) -> Response {
    let auth = bearer(&headers);
    blocking(StatusCode::OK, move || {
        let caller = authenticate(&server, &auth)?;
        server.require(&caller, labpipe_core::Permission::FileWrite, "file.chunk", &format!("upload/{upload_id}"))?;
        let index: u64 = index
            .parse()
            .map_err(|_| ApiError::protocol(format!("chunk index '{index}' is not an integer")))?;
        server.upload_chunk(&caller, &upload_id, index, &body)
    })
    .await
}

async fn commit_upload(State(server): Shared, headers: HeaderMap, Path(upload_id): Path<String>) -> Response {
    let auth = bearer(&headers);
    blocking(StatusCode::OK, move || {
        let caller = authenticate(&server, &auth)?;
        server.commit_upload(&caller, &upload_id)
    })
    .await
}

async fn get_artifact(State(server): Shared, headers: HeaderMap, Path(artifact_id): Path<String>) -> Response {
    let auth = bearer(&headers);
    let opened = tokio::task::spawn_blocking(move || {
        let caller = authenticate(&server, &auth)?;
        server.open_artifact(&caller, &artifact_id)
    })
    .await;
    let (artifact, file) = match opened {
        Ok(Ok(v)) => v,
        Ok(Err(e)) => return e.into_response(),
        Err(e) => return ApiError::internal(format!("handler panicked: {e}")).into_response(),
    };
    let stream = tokio_util::io::ReaderStream::new(tokio::fs::File::from_std(file));
    let mut response = Response::new(Body::from_stream(stream));
    let h = response.headers_mut();
    h.insert(header::CONTENT_TYPE, HeaderValue::from_static("application/octet-stream"));
    h.insert(header::CONTENT_LENGTH, HeaderValue::from(artifact.size_bytes));
    if let Ok(v) = HeaderValue::from_str(&artifact.content_hash) {
        h.insert(CONTENT_HASH_HEADER, v);
    }
    if let Ok(v) = HeaderValue::from_str(&format!("attachment; filename=\"{}\"", artifact.generated_file_id)) {
        h.insert(header::CONTENT_DISPOSITION, v);
    }
    response
}

async fn read_audit(State(server): Shared, headers: HeaderMap, RawQuery(query): RawQuery) -> Response {
    let auth = bearer(&headers);
    blocking(StatusCode::OK, move || {
        let caller = authenticate(&server, &auth)?;
        server.require(&caller, labpipe_core::Permission::AuditRead, "audit.read", "audit")?;
        let since = int_param(&query_map(query), "since_seq")?.unwrap_or(0);
        server.read_audit(&caller, since)
    })
    .await
}

/// A server running on its own runtime thread; stops when dropped.
pub struct BackgroundServer {
    addr: std::net::SocketAddr,
    shutdown: Option<tokio::sync::oneshot::Sender<()>>,
    thread: Option<std::thread::JoinHandle<()>>,
}

impl BackgroundServer {
    pub fn start(server: Arc<Server>, bind: &str) -> std::io::Result<Self> {
        let runtime = tokio::runtime::Builder::new_multi_thread()
            .worker_threads(4)
            .enable_all()
            .build()?;
        let listener = runtime.block_on(tokio::net::TcpListener::bind(bind))?;
        let addr = listener.local_addr()?;
        let (tx, rx) = tokio::sync::oneshot::channel::<()>();
        let thread = std::thread::Builder::new().name("lp-server".into()).spawn(move || {
            let result = runtime.block_on(serve_with_shutdown(listener, server, async {
                let _ = rx.await;
            }));
            if let Err(e) = result {
                tracing::error!(error = %e, "server stopped");
            }
        })?;
        Ok(Self {
            addr,
            shutdown: Some(tx),
            thread: Some(thread),
        })
    }

    pub fn addr(&self) -> std::net::SocketAddr {
        self.addr
    }

    pub fn url(&self) -> String {
        format!("http://{}", self.addr)
    }
}

impl Drop for BackgroundServer {
    fn drop(&mut self) {
        if let Some(tx) = self.shutdown.take() {
            let _ = tx.send(());
        }
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}
