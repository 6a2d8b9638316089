//! Decoding and checking of batch bodies, independent of the storage backend.

use std::io::Read;

use base64::Engine;
use serde::Deserialize;
use serde_json::Value;
use tracelab_core::config::normalize_relative;
use tracelab_core::record::{content_digest, ContentMode, TrackedRecord};

/// Upper bound on a decompressed batch body.
pub const MAX_BODY_BYTES: u64 = 64 * 1024 * 1024;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum BodyError {
    #[error("body is not valid gzip")]
    BadGzip,
    #[error("body exceeds {MAX_BODY_BYTES} bytes")]
    TooLarge,
    #[error("malformed batch: {0}")]
    Malformed(String),
}

/// Undo `Content-Encoding: gzip`.
pub fn decode_body(bytes: &[u8], gzip: bool) -> Result<Vec<u8>, BodyError> {
    if !gzip {
        if bytes.len() as u64 > MAX_BODY_BYTES {
            return Err(BodyError::TooLarge);
        }
        return Ok(bytes.to_vec());
    }
    let mut out = Vec::new();
    flate2::read::GzDecoder::new(bytes)
        .take(MAX_BODY_BYTES + 1)
        .read_to_end(&mut out)
        .map_err(|_| BodyError::BadGzip)?;
    if out.len() as u64 > MAX_BODY_BYTES {
        return Err(BodyError::TooLarge);
    }
    Ok(out)
}

#[derive(Deserialize)]
struct RawAttachment {
    path: String,
    content_base64: String,
}

#[derive(Deserialize)]
struct RawBatch {
    batch_id: String,
    records: Vec<Value>,
    #[serde(default)]
    attachments: Vec<Value>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QuarantinedItem {
    /// Position in the batch's `records` array, or in `attachments` when
    /// `attachment` is set.
    pub index: usize,
    pub attachment: bool,
    pub raw: String,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DecodedAttachment {
    pub path: String,
    pub content: Vec<u8>,
}

/// A batch split into applicable records and quarantined items.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PreparedBatch {
    pub batch_id: String,
    pub records: Vec<TrackedRecord>,
    pub attachments: Vec<DecodedAttachment>,
    pub quarantined: Vec<QuarantinedItem>,
    /// Highest `seq` present in the body, valid record or not.
    pub max_seq: u64,
}

fn check_path(p: &str) -> Result<(), String> {
    match normalize_relative(p) {
        Ok(n) if n == p => Ok(()),
        _ => Err(format!("path `{p}` is not a normalized workspace-relative path")),
    }
}

/// Reasons a well-typed record is still refused.
pub fn check_record(r: &TrackedRecord) -> Result<(), String> {
    if r.seq() == 0 {
        return Err("seq must be positive".into());
    }
    if let Some(f) = r.file() {
        check_path(f)?;
    }
    match r {
        TrackedRecord::Snapshot(s) if s.mode == ContentMode::Full => {
            if content_digest(s.content.as_bytes()) != s.content_digest {
                return Err("digest does not match content".into());
            }
        }
        TrackedRecord::Activity(a) if a.event_id.is_empty() => return Err("empty event_id".into()),
        TrackedRecord::ToolWindow(t) if t.window_id.is_empty() => return Err("empty window_id".into()),
        _ => {}
    }
    Ok(())
}

fn valid_batch_id(id: &str) -> bool {
    !id.is_empty() && id.len() <= 64 && id.bytes().all(|b| b.is_ascii_alphanumeric() || b == b'-')
}

/// Split a decompressed body into records to apply and items to quarantine.
pub fn prepare_batch(body: &[u8]) -> Result<PreparedBatch, BodyError> {
    let raw: RawBatch = serde_json::from_slice(body).map_err(|e| BodyError::Malformed(e.to_string()))?;
    if !valid_batch_id(&raw.batch_id) {
        return Err(BodyError::Malformed(format!("invalid batch_id `{}`", raw.batch_id)));
    }
    let mut out = PreparedBatch {
        batch_id: raw.batch_id,
        records: Vec::new(),
        attachments: Vec::new(),
        quarantined: Vec::new(),
        max_seq: 0,
    };
    for (index, value) in raw.records.into_iter().enumerate() {
        if let Some(seq) = value.get("seq").and_then(Value::as_u64) {
            out.max_seq = out.max_seq.max(seq);
        }
        let parsed = serde_json::from_value::<TrackedRecord>(value.clone())
            .map_err(|e| e.to_string())
            .and_then(|r| check_record(&r).map(|_| r));
        match parsed {
            Ok(r) => out.records.push(r),
            Err(reason) => out.quarantined.push(QuarantinedItem {
                index,
                attachment: false,
                raw: value.to_string(),
                reason,
            }),
        }
    }
    for (index, value) in raw.attachments.into_iter().enumerate() {
        let decoded = serde_json::from_value::<RawAttachment>(value.clone())
            .map_err(|e| e.to_string())
            .and_then(|a| {
                check_path(&a.path)?;
                let content = base64::engine::general_purpose::STANDARD
                    .decode(a.content_base64.as_bytes())
                    .map_err(|e| format!("bad base64: {e}"))?;
                Ok(DecodedAttachment { path: a.path, content })
            });
        match decoded {
            Ok(a) => out.attachments.push(a),
            Err(reason) => out.quarantined.push(QuarantinedItem {
                index,
                attachment: true,
                raw: value.to_string(),
                reason,
            }),
        }
    }
    Ok(out)
}
