use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use tracelab_core::progsnap2::StudyInput;
use tracelab_core::record::TimestampMs;
use tracelab_core::stats::StudySummary;
use tracelab_core::wire::{BatchAck, RegisterRequest, RegisterResponse};

use crate::error::ServerError;

/// Public identity of an authenticated session.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SessionInfo {
    pub session_uid: String,
    pub participant_id: String,
    pub research_id: String,
}

/// One stored batch body, byte-exact as received (after gzip decoding).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RawPayload {
    pub batch_id: String,
    pub received_at: TimestampMs,
    pub bytes: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub created_at: TimestampMs,
    pub database: String,
    pub tables: BTreeMap<String, u64>,
}

/// Storage operations of the ingestion service.
pub trait Repository: Send + Sync {
    /// Issue a token, or return the existing one for the same research id and
    /// client nonce.
    fn register(&self, req: &RegisterRequest, now: TimestampMs) -> Result<RegisterResponse, ServerError>;

    fn authenticate(&self, token: &str) -> Result<SessionInfo, ServerError>;

    /// Apply a decompressed batch body atomically.
    fn ingest(&self, token: &str, body: &[u8], now: TimestampMs) -> Result<BatchAck, ServerError>;

    /// Raw payloads of a session in receipt order.
    fn export_raw(&self, token: &str) -> Result<Vec<RawPayload>, ServerError>;

    /// Applied records of every session of a research.
    fn study_input(&self, research_id: &str) -> Result<StudyInput, ServerError>;

    fn summary(&self, research_id: &str) -> Result<StudySummary, ServerError>;

    /// Point-in-time copy of the whole store into `destination`.
    fn backup(&self, destination: &Path, now: TimestampMs) -> Result<Manifest, ServerError>;
}
