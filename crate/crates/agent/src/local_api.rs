//! Loopback HTTP API consumed by the desktop UI.

use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::Arc;

use axum::extract::{Path, Query, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{delete, get, post};
use axum::{Json, Router};
use serde::Deserialize;
use serde_json::{json, Map, Value};

use crate::agent::{Agent, AgentError};

pub const DEFAULT_LOCAL_PORT: u16 = 47820;

struct LocalError(AgentError);

impl IntoResponse for LocalError {
    fn into_response(self) -> Response {
        let (status, code, details) = match &self.0 {
            AgentError::UnknownProtocol(_) | AgentError::UnknownSession(_) => (StatusCode::NOT_FOUND, "not_found", Value::Null),
            AgentError::MissingTemplate { .. } => (StatusCode::CONFLICT, "missing_template", Value::Null),
            AgentError::SessionConflict { session_id, .. } => {
                (StatusCode::CONFLICT, "session_conflict", json!({ "session_id": session_id }))
            }
            AgentError::SessionClosed(_) => (StatusCode::CONFLICT, "session_closed", Value::Null),
            AgentError::Validation(errors) => (
                StatusCode::UNPROCESSABLE_ENTITY,
                "validation_failed",
                serde_json::to_value(errors).unwrap_or(Value::Null),
            ),
            AgentError::Transport(_) => (StatusCode::BAD_GATEWAY, "upstream", Value::Null),
            _ => (StatusCode::INTERNAL_SERVER_ERROR, "internal", Value::Null),
        };
        let body = json!({ "code": code, "message": self.0.to_string(), "details": details });
        (status, Json(body)).into_response()
    }
}

type LocalResult<T> = Result<T, LocalError>;

async fn blocking<T: Send + 'static>(f: impl FnOnce() -> Result<T, AgentError> + Send + 'static) -> LocalResult<T> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| LocalError(AgentError::Io(std::io::Error::other(e))))?
        .map_err(LocalError)
}

async fn protocols(State(agent): State<Arc<Agent>>) -> LocalResult<Json<Value>> {
    let list = blocking(move || Ok(agent.protocols())).await?;
    Ok(Json(json!({ "protocols": list })))
}

#[derive(Deserialize)]
struct StartSession {
    protocol_id: String,
}

async fn start_session(State(agent): State<Arc<Agent>>, Json(req): Json<StartSession>) -> LocalResult<Response> {
    let session = blocking(move || {
        // Configs are fetched on each use when networked.
        if let Err(e) = agent.refresh_configs() {
            tracing::debug!(error = %e, "refresh before session start failed; using cache");
        }
        agent.start_session(&req.protocol_id)
    })
    .await?;
    Ok((StatusCode::CREATED, Json(session)).into_response())
}

async fn close_session(State(agent): State<Arc<Agent>>, Path(id): Path<String>) -> LocalResult<Json<Value>> {
    let session = blocking(move || agent.close_session(&id)).await?;
    Ok(Json(json!({ "session_id": session.session_id, "active": session.active })))
}

#[derive(Deserialize)]
struct SubmitForm {
    values: Map<String, Value>,
}

async fn submit(
    State(agent): State<Arc<Agent>>,
    Path(id): Path<String>,
    Json(req): Json<SubmitForm>,
) -> LocalResult<Response> {
    let sub = blocking(move || agent.submit_form(&id, &req.values)).await?;
    Ok((StatusCode::ACCEPTED, Json(sub)).into_response())
}

async fn status(State(agent): State<Arc<Agent>>, Path(id): Path<String>) -> LocalResult<Response> {
    let st = blocking(move || agent.status(&id)).await?;
    Ok(Json(st).into_response())
}

#[derive(Deserialize)]
struct TemplateQuery {
    version: Option<u64>,
}

async fn template(
    State(agent): State<Arc<Agent>>,
    Path(id): Path<String>,
    Query(q): Query<TemplateQuery>,
) -> LocalResult<Response> {
    let found = blocking(move || Ok(agent.template(&id, q.version))).await?;
    match found {
        Some(t) => Ok(Json(t).into_response()),
        None => Ok((
            StatusCode::NOT_FOUND,
            Json(json!({ "code": "not_found", "message": "template not cached", "details": null })),
        )
            .into_response()),
    }
}

pub fn router(agent: Arc<Agent>, ui_dir: Option<PathBuf>) -> Router {
    let api = Router::new()
        .route("/local/v1/protocols", get(protocols))
        .route("/local/v1/sessions", post(start_session))
        .route("/local/v1/sessions/{id}", delete(close_session))
        .route("/local/v1/sessions/{id}/records", post(submit))
        .route("/local/v1/sessions/{id}/status", get(status))
        .route("/local/v1/templates/{id}", get(template))
        .with_state(agent);
    match ui_dir {
        Some(dir) => api.fallback_service(tower_http::services::ServeDir::new(dir)),
        None => api,
    }
}

/// Runs the local API on its own thread until dropped.
pub struct LocalApi {
    addr: SocketAddr,
    shutdown: Option<tokio::sync::oneshot::Sender<()>>,
    thread: Option<std::thread::JoinHandle<()>>,
}

impl LocalApi {
    pub fn start(agent: Arc<Agent>, bind: &str, ui_dir: Option<PathBuf>) -> std::io::Result<Self> {
        let addr: SocketAddr = bind
            .parse()
            .map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidInput, format!("bad bind address: {e}")))?;
        if !addr.ip().is_loopback() {
            return Err(std::io::Error::new(std::io::ErrorKind::InvalidInput, "local API must bind to loopback"));
        }
        let rt = tokio::runtime::Builder::new_multi_thread()
            .worker_threads(2)
            .enable_all()
            .build()?;
        let listener = rt.block_on(tokio::net::TcpListener::bind(addr))?;
        let addr = listener.local_addr()?;
        let (tx, rx) = tokio::sync::oneshot::channel::<()>();
        let app = router(agent, ui_dir);
        let thread = std::thread::spawn(move || {
            rt.block_on(async move {
                let _ = axum::serve(listener, app)
                    .with_graceful_shutdown(async move {
                        let _ = rx.await;
                    })
                    .await;
            });
        });
        Ok(Self { addr, shutdown: Some(tx), thread: Some(thread) })
    }

    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn url(&self) -> String {
        format!("http://{}", self.addr)
    }
}

impl Drop for LocalApi {
    fn drop(&mut self) {
        if let Some(tx) = self.shutdown.take() {
            let _ = tx.send(());
        }
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}
