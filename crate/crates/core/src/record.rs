//! The five categories of collected data and their shared envelope.
//!
//! Every record carries a per-session `seq` assigned by the journal and a UTC
//! millisecond timestamp. On the wire records are tagged by a `type` field.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

/// UTC milliseconds since the Unix epoch.
pub type TimestampMs = i64;

/// Hex-encoded SHA-256 of `content`.
pub fn content_digest(content: &[u8]) -> String {
    hex::encode(Sha256::digest(content))
}

/// Current wall-clock time in UTC milliseconds.
pub fn now_ms() -> TimestampMs {
    chrono::Utc::now().timestamp_millis()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ContentMode {
    Full,
    SignaturesOnly,
}

impl ContentMode {
    pub fn as_str(self) -> &'static str {
        match self {
            ContentMode::Full => "full",
            ContentMode::SignaturesOnly => "signatures-only",
        }
    }
}

/// Closed set of activity categories.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ActivityCategory {
    Action,
    Hotkey,
    Run,
    Debug,
    Ui,
}

impl ActivityCategory {
    pub const ALL: [ActivityCategory; 5] = [
        ActivityCategory::Action,
        ActivityCategory::Hotkey,
        ActivityCategory::Run,
        ActivityCategory::Debug,
        ActivityCategory::Ui,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ActivityCategory::Action => "action",
            ActivityCategory::Hotkey => "hotkey",
            ActivityCategory::Run => "run",
            ActivityCategory::Debug => "debug",
            ActivityCategory::Ui => "ui",
        }
    }
}

impl fmt::Display for ActivityCategory {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("unknown activity category `{0}`")]
pub struct UnknownCategory(pub String);

impl FromStr for ActivityCategory {
    type Err = UnknownCategory;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        ActivityCategory::ALL
            .into_iter()
            .find(|c| c.as_str() == s)
            .ok_or_else(|| UnknownCategory(s.to_owned()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FocusKind {
    Open,
    Focus,
    Unfocus,
    Close,
}

impl FocusKind {
    pub fn as_str(self) -> &'static str {
        match self {
            FocusKind::Open => "open",
            FocusKind::Focus => "focus",
            FocusKind::Unfocus => "unfocus",
            FocusKind::Close => "close",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ToolWindowKind {
    Opened,
    Closed,
}

impl ToolWindowKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ToolWindowKind::Opened => "opened",
            ToolWindowKind::Closed => "closed",
        }
    }
}

macro_rules! impl_from_str_via_serde {
    ($($ty:ty),*) => {$(
        impl FromStr for $ty {
            type Err = String;
            fn from_str(s: &str) -> Result<Self, Self::Err> {
                serde_json::from_value(serde_json::Value::String(s.to_owned()))
                    .map_err(|_| format!("invalid value `{s}`"))
            }
        }
    )*};
}

impl_from_str_via_serde!(ContentMode, FocusKind, ToolWindowKind);

/// A survey answer. Choice questions answer with option labels; open-ended
/// questions with free text.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(untagged)]
pub enum AnswerValue {
    Text(String),
    Choices(Vec<String>),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub struct SnapshotRecord {
    pub seq: u64,
    pub timestamp: TimestampMs,
    pub file: String,
    pub mode: ContentMode,
    /// Digest of the full file content, even when `content` holds signatures.
    pub content_digest: String,
    pub content: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub struct ActivityRecord {
    pub seq: u64,
    pub timestamp: TimestampMs,
    pub category: ActivityCategory,
    pub event_id: String,
    #[serde(default)]
    pub detail: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub struct FocusRecord {
    pub seq: u64,
    pub timestamp: TimestampMs,
    pub file: String,
    pub kind: FocusKind,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub struct ToolWindowRecord {
    pub seq: u64,
    pub timestamp: TimestampMs,
    pub window_id: String,
    pub kind: ToolWindowKind,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub struct SurveyResponseRecord {
    pub seq: u64,
    pub timestamp: TimestampMs,
    pub survey_id: String,
    pub answers: BTreeMap<String, AnswerValue>,
}

/// Record category, one per journal file and server table.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RecordKind {
    Snapshot,
    Activity,
    Focus,
    ToolWindow,
    Survey,
}

impl RecordKind {
    pub const ALL: [RecordKind; 5] = [
        RecordKind::Snapshot,
        RecordKind::Activity,
        RecordKind::Focus,
        RecordKind::ToolWindow,
        RecordKind::Survey,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            RecordKind::Snapshot => "snapshot",
            RecordKind::Activity => "activity",
            RecordKind::Focus => "focus",
            RecordKind::ToolWindow => "tool-window",
            RecordKind::Survey => "survey",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "kebab-case")]
pub enum TrackedRecord {
    Snapshot(SnapshotRecord),
    Activity(ActivityRecord),
    Focus(FocusRecord),
    ToolWindow(ToolWindowRecord),
    Survey(SurveyResponseRecord),
}

impl TrackedRecord {
    pub fn kind(&self) -> RecordKind {
        match self {
            TrackedRecord::Snapshot(_) => RecordKind::Snapshot,
            TrackedRecord::Activity(_) => RecordKind::Activity,
            TrackedRecord::Focus(_) => RecordKind::Focus,
            TrackedRecord::ToolWindow(_) => RecordKind::ToolWindow,
            TrackedRecord::Survey(_) => RecordKind::Survey,
        }
    }

    pub fn seq(&self) -> u64 {
        match self {
            TrackedRecord::Snapshot(r) => r.seq,
            TrackedRecord::Activity(r) => r.seq,
            TrackedRecord::Focus(r) => r.seq,
            TrackedRecord::ToolWindow(r) => r.seq,
            TrackedRecord::Survey(r) => r.seq,
        }
    }

    pub fn set_seq(&mut self, seq: u64) {
        match self {
            TrackedRecord::Snapshot(r) => r.seq = seq,
            TrackedRecord::Activity(r) => r.seq = seq,
            TrackedRecord::Focus(r) => r.seq = seq,
            TrackedRecord::ToolWindow(r) => r.seq = seq,
            TrackedRecord::Survey(r) => r.seq = seq,
        }
    }

    pub fn timestamp(&self) -> TimestampMs {
        match self {
            TrackedRecord::Snapshot(r) => r.timestamp,
            TrackedRecord::Activity(r) => r.timestamp,
            TrackedRecord::Focus(r) => r.timestamp,
            TrackedRecord::ToolWindow(r) => r.timestamp,
            TrackedRecord::Survey(r) => r.timestamp,
        }
    }

    /// Workspace-relative path the record refers to, if any.
    pub fn file(&self) -> Option<&str> {
        match self {
            TrackedRecord::Snapshot(r) => Some(&r.file),
            TrackedRecord::Focus(r) => Some(&r.file),
            _ => None,
        }
    }
}

impl From<SnapshotRecord> for TrackedRecord {
    fn from(r: SnapshotRecord) -> Self {
        TrackedRecord::Snapshot(r)
    }
}

impl From<ActivityRecord> for TrackedRecord {
    fn from(r: ActivityRecord) -> Self {
        TrackedRecord::Activity(r)
    }
}

impl From<FocusRecord> for TrackedRecord {
    fn from(r: FocusRecord) -> Self {
        TrackedRecord::Focus(r)
    }
}

impl From<ToolWindowRecord> for TrackedRecord {
    fn from(r: ToolWindowRecord) -> Self {
        TrackedRecord::ToolWindow(r)
    }
}

impl From<SurveyResponseRecord> for TrackedRecord {
    fn from(r: SurveyResponseRecord) -> Self {
        TrackedRecord::Survey(r)
    }
}
