//! Activity filtering, consent gating and sequencing of records.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::convert::Infallible;

use serde::{Deserialize, Serialize};

use crate::config::{normalize_relative, ActivityPolicy};
use crate::record::{
    ActivityCategory, ActivityRecord, FocusKind, FocusRecord, TimestampMs, ToolWindowKind,
    ToolWindowRecord, TrackedRecord, UnknownCategory,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FilterReason {
    /// The event id is in the policy's excluded set.
    Excluded,
    /// The same (category, event id) was accepted too recently.
    Throttled,
    /// Consent has not been granted.
    NoConsent,
    /// The record names a file outside the configured set.
    Untracked,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Outcome {
    Accepted(u64),
    Filtered(FilterReason),
}

/// Exclusion and throttling under an [`ActivityPolicy`].
#[derive(Debug, Clone, Default)]
pub struct ActivityFilter {
    policy: ActivityPolicy,
    last_accepted: HashMap<(ActivityCategory, String), TimestampMs>,
}

impl ActivityFilter {
    pub fn new(policy: ActivityPolicy) -> Self {
        ActivityFilter {
            policy,
            last_accepted: HashMap::new(),
        }
    }

    /// Decide on `record`; an accepted record updates the throttle window.
    pub fn check(&mut self, record: &ActivityRecord) -> Result<(), FilterReason> {
        if self.policy.excluded.contains(&record.event_id) {
            return Err(FilterReason::Excluded);
        }
        let interval = self.policy.min_interval(record.category) as i64;
        let key = (record.category, record.event_id.clone());
        if interval > 0 {
            if let Some(last) = self.last_accepted.get(&key) {
                if record.timestamp - last < interval {
                    return Err(FilterReason::Throttled);
                }
            }
        }
        self.last_accepted.insert(key, record.timestamp);
        Ok(())
    }
}

/// Consumer of accepted records; assigns the per-session sequence number.
pub trait RecordSink {
    type Error;

    fn append(&mut self, record: TrackedRecord) -> Result<u64, Self::Error>;
}

/// In-memory sink with a serial counter starting at 1.
#[derive(Debug, Clone, Default)]
pub struct MemorySink {
    pub records: Vec<TrackedRecord>,
}

impl RecordSink for MemorySink {
    type Error = Infallible;

    fn append(&mut self, mut record: TrackedRecord) -> Result<u64, Infallible> {
        let seq = self.records.last().map_or(1, |r| r.seq() + 1);
        record.set_seq(seq);
        self.records.push(record);
        Ok(seq)
    }
}

impl<S: RecordSink + ?Sized> RecordSink for &mut S {
    type Error = S::Error;

    fn append(&mut self, record: TrackedRecord) -> Result<u64, S::Error> {
        (**self).append(record)
    }
}

/// Single consumer in front of a sink: consent gate, file allow-list and
/// activity policy.
#[derive(Debug)]
pub struct Recorder<S> {
    sink: S,
    filter: ActivityFilter,
    allowed_files: BTreeSet<String>,
    consent: bool,
}

impl<S: RecordSink> Recorder<S> {
    pub fn new(sink: S, policy: ActivityPolicy, allowed_files: BTreeSet<String>) -> Self {
        Recorder {
            sink,
            filter: ActivityFilter::new(policy),
            allowed_files,
            consent: false,
        }
    }

    pub fn grant_consent(&mut self) {
        self.consent = true;
    }

    pub fn consent_granted(&self) -> bool {
        self.consent
    }

    pub fn sink(&self) -> &S {
        &self.sink
    }

    pub fn sink_mut(&mut self) -> &mut S {
        &mut self.sink
    }

    pub fn into_sink(self) -> S {
        self.sink
    }

    pub fn record_activity(&mut self, record: ActivityRecord) -> Result<Outcome, S::Error> {
        if !self.consent {
            return Ok(Outcome::Filtered(FilterReason::NoConsent));
        }
        if let Err(reason) = self.filter.check(&record) {
            return Ok(Outcome::Filtered(reason));
        }
        self.sink.append(record.into()).map(Outcome::Accepted)
    }

    /// Record any category. Activity records go through the policy filter.
    pub fn record(&mut self, record: TrackedRecord) -> Result<Outcome, S::Error> {
        match record {
            TrackedRecord::Activity(a) => self.record_activity(a),
            other => {
                if !self.consent {
                    return Ok(Outcome::Filtered(FilterReason::NoConsent));
                }
                if let Some(file) = other.file() {
                    if !self.allowed_files.contains(file) {
                        return Ok(Outcome::Filtered(FilterReason::Untracked));
                    }
                }
                self.sink.append(other).map(Outcome::Accepted)
            }
        }
    }
}

/// Event as posted by an editor adapter. Categories and kinds arrive as
/// strings and the timestamp is optional (the daemon stamps it).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "kebab-case")]
pub enum AdapterEvent {
    Activity {
        category: String,
        #[serde(rename = "event-id", alias = "event_id")]
        event_id: String,
        #[serde(default)]
        detail: BTreeMap<String, String>,
        #[serde(default)]
        timestamp: Option<TimestampMs>,
    },
    Focus {
        file: String,
        kind: String,
        #[serde(default)]
        timestamp: Option<TimestampMs>,
    },
    ToolWindow {
        #[serde(rename = "window-id", alias = "window_id")]
        window_id: String,
        kind: String,
        #[serde(default)]
        timestamp: Option<TimestampMs>,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum AdapterError {
    #[error(transparent)]
    UnknownCategory(#[from] UnknownCategory),
    #[error("unknown {what} kind `{kind}`")]
    UnknownKind { what: &'static str, kind: String },
    #[error("event id must not be empty")]
    EmptyEventId,
    #[error("invalid file path `{0}`")]
    BadPath(String),
}

impl AdapterEvent {
    pub fn into_record(self, now: TimestampMs) -> Result<TrackedRecord, AdapterError> {
        Ok(match self {
            AdapterEvent::Activity {
                category,
                event_id,
                detail,
                timestamp,
            } => {
                let category: ActivityCategory = category.parse()?;
                if event_id.trim().is_empty() {
                    return Err(AdapterError::EmptyEventId);
                }
                TrackedRecord::Activity(ActivityRecord {
                    seq: 0,
                    timestamp: timestamp.unwrap_or(now),
                    category,
                    event_id,
                    detail,
                })
            }
            AdapterEvent::Focus { file, kind, timestamp } => {
                let kind: FocusKind = kind.parse().map_err(|_| AdapterError::UnknownKind {
                    what: "focus",
                    kind: kind.clone(),
                })?;
                let file = normalize_relative(&file).map_err(|_| AdapterError::BadPath(file))?;
                TrackedRecord::Focus(FocusRecord {
                    seq: 0,
                    timestamp: timestamp.unwrap_or(now),
                    file,
                    kind,
                })
            }
            AdapterEvent::ToolWindow {
                window_id,
                kind,
                timestamp,
            } => {
                let kind: ToolWindowKind = kind.parse().map_err(|_| AdapterError::UnknownKind {
                    what: "tool-window",
                    kind: kind.clone(),
                })?;
                if window_id.trim().is_empty() {
                    return Err(AdapterError::EmptyEventId);
                }
                TrackedRecord::ToolWindow(ToolWindowRecord {
                    seq: 0,
                    timestamp: timestamp.unwrap_or(now),
                    window_id,
                    kind,
                })
            }
        })
    }
}
