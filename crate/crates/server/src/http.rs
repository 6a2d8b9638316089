//! HTTP routes of the ingestion service.

use std::future::Future;
use std::path::PathBuf;
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{DefaultBodyLimit, Path, State};
use axum::http::{header, HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::Deserialize;
use tokio::net::TcpListener;
use tracelab_core::record::now_ms;
use tracelab_core::wire::{ErrorBody, RegisterRequest};

use crate::error::ServerError;
use crate::ingest::decode_body;
use crate::repo::{RawPayload, Repository};

pub const ADMIN_TOKEN_ENV: &str = "TRACELAB_ADMIN_TOKEN";
pub const ADDR_ENV: &str = "TRACELAB_ADDR";
const MAX_REQUEST_BYTES: usize = 16 * 1024 * 1024;

#[derive(Clone)]
pub struct AppState {
    pub repo: Arc<dyn Repository>,
    /// Admin endpoints are disabled when unset.
    pub admin_token: Option<String>,
    /// Backups are written to subdirectories of this path.
    pub backup_root: PathBuf,
}

struct ApiError(StatusCode, ErrorBody);

impl From<ServerError> for ApiError {
    fn from(e: ServerError) -> Self {
        let status = match &e {
            ServerError::AuthFailure => StatusCode::UNAUTHORIZED,
            ServerError::UnknownSession | ServerError::UnknownResearch(_) => StatusCode::NOT_FOUND,
            ServerError::ConsentMissing => StatusCode::UNPROCESSABLE_ENTITY,
            ServerError::Body(_) => StatusCode::BAD_REQUEST,
            ServerError::BackupExists(_) => StatusCode::CONFLICT,
            ServerError::Io { .. } | ServerError::Storage(_) => {
                tracing::error!("{e}");
                StatusCode::INTERNAL_SERVER_ERROR
            }
        };
        ApiError(
            status,
            ErrorBody {
                error: e.code().into(),
                message: e.to_string(),
            },
        )
    }
}

impl ApiError {
    fn new(status: StatusCode, error: &str, message: &str) -> Self {
        ApiError(
            status,
            ErrorBody {
                error: error.into(),
                message: message.into(),
            },
        )
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.0, Json(self.1)).into_response()
    }
}

async fn blocking<T, F>(f: F) -> Result<T, ApiError>
where
    F: FnOnce() -> Result<T, ServerError> + Send + 'static,
    T: Send + 'static,
{
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|_| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", "worker panicked"))?
        .map_err(ApiError::from)
}

fn bearer(headers: &HeaderMap) -> Option<&str> {
    headers
        .get(header::AUTHORIZATION)?
        .to_str()
        .ok()?
        .strip_prefix("Bearer ")
        .map(str::trim)
}

/// The bearer token must be the one named in the path.
fn require_session(headers: &HeaderMap, token: &str) -> Result<(), ApiError> {
    match bearer(headers) {
        Some(t) if t == token => Ok(()),
        Some(_) => Err(ApiError::new(StatusCode::FORBIDDEN, "auth-failure", "token does not own this session")),
        None => Err(ServerError::AuthFailure.into()),
    }
}

async fn register(State(s): State<AppState>, Json(req): Json<RegisterRequest>) -> Result<Response, ApiError> {
    let repo = s.repo.clone();
    let resp = blocking(move || repo.register(&req, now_ms())).await?;
    Ok((StatusCode::OK, Json(resp)).into_response())
}

async fn ingest(
    State(s): State<AppState>,
    Path(token): Path<String>,
    headers: HeaderMap,
    body: Bytes,
) -> Result<Response, ApiError> {
    require_session(&headers, &token)?;
    let gzip = headers
        .get(header::CONTENT_ENCODING)
        .and_then(|v| v.to_str().ok())
        .is_some_and(|v| v.eq_ignore_ascii_case("gzip"));
    let repo = s.repo.clone();
    let ack = blocking(move || {
        let body = decode_body(&body, gzip)?;
        repo.ingest(&token, &body, now_ms())
    })
    .await?;
    Ok(Json(ack).into_response())
}

/// Tar archive of raw payloads named `<receipt>-<batch_id>.json`.
pub fn export_archive(payloads: &[RawPayload]) -> Vec<u8> {
    let mut builder = tar::Builder::new(Vec::new());
    for (i, p) in payloads.iter().enumerate() {
        let mut h = tar::Header::new_gnu();
        h.set_size(p.bytes.len() as u64);
        h.set_mode(0o644);
        h.set_mtime((p.received_at.max(0) / 1000) as u64);
        h.set_cksum();
        builder
            .append_data(&mut h, format!("{:06}-{}.json", i + 1, p.batch_id), p.bytes.as_slice())
            .expect("writing to a Vec");
    }
    builder.into_inner().expect("writing to a Vec")
}

async fn export(State(s): State<AppState>, Path(token): Path<String>, headers: HeaderMap) -> Result<Response, ApiError> {
    require_session(&headers, &token)?;
    let repo = s.repo.clone();
    let payloads = blocking(move || {
        repo.authenticate(&token)?;
        repo.export_raw(&token)
    })
    .await?;
    Ok(([(header::CONTENT_TYPE, "application/x-tar")], export_archive(&payloads)).into_response())
}

async fn summary(State(s): State<AppState>, Path(id): Path<String>) -> Result<Response, ApiError> {
    let repo = s.repo.clone();
    let summary = blocking(move || repo.summary(&id)).await?;
    Ok(Json(summary).into_response())
}

#[derive(Debug, Default, Deserialize)]
struct BackupRequest {
    #[serde(default)]
    label: Option<String>,
}

async fn backup(State(s): State<AppState>, headers: HeaderMap, body: Bytes) -> Result<Response, ApiError> {
    let Some(expected) = s.admin_token.as_deref() else {
        return Err(ApiError::new(StatusCode::FORBIDDEN, "admin-disabled", "admin token not configured"));
    };
    if bearer(&headers) != Some(expected) {
        return Err(ServerError::AuthFailure.into());
    }
    let req: BackupRequest = if body.is_empty() {
        BackupRequest::default()
    } else {
        serde_json::from_slice(&body)
            .map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, "malformed-request", &e.to_string()))?
    };
    let now = now_ms();
    let label = req.label.unwrap_or_else(|| format!("backup-{now}"));
    if label.is_empty() || !label.bytes().all(|b| b.is_ascii_alphanumeric() || b == b'-' || b == b'_') {
        return Err(ApiError::new(StatusCode::BAD_REQUEST, "malformed-request", "invalid backup label"));
    }
    let dest = s.backup_root.join(&label);
    let repo = s.repo.clone();
    let manifest = blocking(move || repo.backup(&dest, now)).await?;
    Ok(Json(serde_json::json!({ "label": label, "manifest": manifest })).into_response())
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/api/v1/sessions", post(register))
        .route("/api/v1/sessions/{token}/batches", post(ingest))
        .route("/api/v1/sessions/{token}/export", get(export))
        .route("/api/v1/studies/{id}/summary", get(summary))
        .route("/api/v1/admin/backup", post(backup))
        .layer(DefaultBodyLimit::max(MAX_REQUEST_BYTES))
        .with_state(state)
}

pub async fn serve<F>(listener: TcpListener, state: AppState, shutdown: F) -> std::io::Result<()>
where
    F: Future<Output = ()> + Send + 'static,
{
    axum::serve(listener, router(state))
        .with_graceful_shutdown(shutdown)
        .await
}
