//! JSON bodies exchanged between the client and the ingestion server.
//!
//! Batch bodies may be sent gzip-compressed with `Content-Encoding: gzip`.

use serde::{Deserialize, Serialize};

use crate::record::TrackedRecord;
use crate::scenario::Consent;

pub const SESSIONS_PATH: &str = "/api/v1/sessions";

pub fn batches_path(token: &str) -> String {
    format!("/api/v1/sessions/{token}/batches")
}

pub fn export_path(token: &str) -> String {
    format!("/api/v1/sessions/{token}/export")
}

pub fn summary_path(research_id: &str) -> String {
    format!("/api/v1/studies/{research_id}/summary")
}

pub const BACKUP_PATH: &str = "/api/v1/admin/backup";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RegisterRequest {
    pub research_id: String,
    pub consent: Consent,
    /// Random per-installation value; re-registering with it returns the
    /// same token.
    pub client_nonce: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RegisterResponse {
    pub session_token: String,
}

/// A third-party file sent alongside a batch.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Attachment {
    pub path: String,
    pub content_base64: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BatchBody {
    /// 128-bit hex id, reused by every retry of the same batch.
    pub batch_id: String,
    pub records: Vec<TrackedRecord>,
    #[serde(default)]
    pub attachments: Vec<Attachment>,
}

impl BatchBody {
    pub fn last_seq(&self) -> u64 {
        self.records.iter().map(TrackedRecord::seq).max().unwrap_or(0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BatchAck {
    pub acked_upto_seq: u64,
    pub duplicate: bool,
    /// Records of this batch set aside as malformed.
    #[serde(default)]
    pub quarantined: u64,
}

/// Error body of every non-2xx response.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub error: String,
    pub message: String,
}
