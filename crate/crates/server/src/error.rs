use std::path::PathBuf;

use crate::ingest::BodyError;

#[derive(Debug, thiserror::Error)]
pub enum ServerError {
    #[error("missing or invalid credentials")]
    AuthFailure,
    #[error("unknown session")]
    UnknownSession,
    #[error("unknown research `{0}`")]
    UnknownResearch(String),
    #[error("consent has not been granted")]
    ConsentMissing,
    #[error(transparent)]
    Body(#[from] BodyError),
    #[error("backup destination {0} already exists")]
    BackupExists(PathBuf),
    #[error("i/o failure on {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("storage failure: {0}")]
    Storage(#[from] rusqlite::Error),
}

impl ServerError {
    /// Stable machine-readable code used in error bodies.
    pub fn code(&self) -> &'static str {
        match self {
            ServerError::AuthFailure => "auth-failure",
            ServerError::UnknownSession => "unknown-session",
            ServerError::UnknownResearch(_) => "unknown-research",
            ServerError::ConsentMissing => "consent-missing",
            ServerError::Body(_) => "malformed-batch",
            ServerError::BackupExists(_) => "backup-exists",
            ServerError::Io { .. } => "io-failure",
            ServerError::Storage(_) => "storage-failure",
        }
    }
}
