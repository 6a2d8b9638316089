//! Snapshot scheduling under a [`TrackingPolicy`].
//!
//! [`SnapshotTracker`] holds no clock and does no I/O of its own: callers feed
//! it change notifications and the current time, and it reads file contents
//! through a [`FileSource`]. The filesystem watcher and the scripted-clock
//! tests drive the same code.
//!
//! Emission rules:
//! - `EveryChange(d)`: trailing debounce. A burst of changes yields one
//!   snapshot `d` ms after the last change, or at the latest `MAX_WAIT_FACTOR * d`
//!   after the first unsnapshotted change.
//! - `OnSave`: each change notification is a save; snapshot immediately.
//! - `Interval(s)`: files with pending changes are sampled every `s` seconds.
//!
//! In every mode a snapshot whose content digest equals the file's previous
//! snapshot is suppressed.

use std::collections::{BTreeMap, BTreeSet};
use std::path::PathBuf;

use crate::config::{language_hint, normalize_relative, SnapshotTrigger, TrackingPolicy};
use crate::record::{content_digest, ContentMode, SnapshotRecord, TimestampMs};

use super::signatures::extract_signatures;

pub const MAX_WAIT_FACTOR: i64 = 10;

/// Read access to tracked files by workspace-relative path.
pub trait FileSource {
    /// `None` when the file does not exist or cannot be read.
    fn read(&self, relative: &str) -> Option<Vec<u8>>;
}

/// Files under a workspace directory.
#[derive(Debug, Clone)]
pub struct DirSource {
    pub root: PathBuf,
}

impl FileSource for DirSource {
    fn read(&self, relative: &str) -> Option<Vec<u8>> {
        let rel = normalize_relative(relative).ok()?;
        std::fs::read(self.root.join(rel)).ok()
    }
}

impl FileSource for BTreeMap<String, Vec<u8>> {
    fn read(&self, relative: &str) -> Option<Vec<u8>> {
        self.get(relative).cloned()
    }
}

#[derive(Debug, Default, Clone)]
struct FileState {
    last_digest: Option<String>,
    pending_since: Option<TimestampMs>,
    deadline: Option<TimestampMs>,
}

#[derive(Debug, Clone)]
pub struct SnapshotTracker {
    policy: TrackingPolicy,
    files: BTreeMap<String, FileState>,
    next_tick: Option<TimestampMs>,
}

/// Build the snapshot record for `bytes` under `mode`.
pub fn make_snapshot(file: &str, bytes: &[u8], mode: ContentMode, now: TimestampMs) -> SnapshotRecord {
    let text = String::from_utf8_lossy(bytes);
    let content = match mode {
        ContentMode::Full => text.into_owned(),
        ContentMode::SignaturesOnly => extract_signatures(&text, language_hint(file)).join("\n"),
    };
    SnapshotRecord {
        seq: 0,
        timestamp: now,
        file: file.to_owned(),
        mode,
        content_digest: content_digest(bytes),
        content,
    }
}

impl SnapshotTracker {
    pub fn new<I, S>(policy: TrackingPolicy, files: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        SnapshotTracker {
            policy,
            files: files
                .into_iter()
                .map(|f| (f.into(), FileState::default()))
                .collect(),
            next_tick: None,
        }
    }

    pub fn policy(&self) -> &TrackingPolicy {
        &self.policy
    }

    pub fn is_tracked(&self, relative: &str) -> bool {
        self.files.contains_key(relative)
    }

    pub fn tracked(&self) -> BTreeSet<&str> {
        self.files.keys().map(String::as_str).collect()
    }

    /// Forget the digests of earlier runs; `seed` maps files to the digest of
    /// their last journaled snapshot.
    pub fn seed_digests(&mut self, seed: &BTreeMap<String, String>) {
        for (file, state) in &mut self.files {
            if let Some(d) = seed.get(file) {
                state.last_digest = Some(d.clone());
            }
        }
    }

    fn capture(&mut self, file: &str, source: &dyn FileSource, now: TimestampMs) -> Option<SnapshotRecord> {
        let mode = self.policy.content_mode;
        let state = self.files.get_mut(file)?;
        state.pending_since = None;
        state.deadline = None;
        let bytes = source.read(file)?;
        let digest = content_digest(&bytes);
        if state.last_digest.as_deref() == Some(digest.as_str()) {
            return None;
        }
        state.last_digest = Some(digest);
        Some(make_snapshot(file, &bytes, mode, now))
    }

    /// Baseline snapshot of every existing tracked file.
    pub fn start(&mut self, source: &dyn FileSource, now: TimestampMs) -> Vec<SnapshotRecord> {
        if let SnapshotTrigger::Interval { seconds } = self.policy.trigger {
            self.next_tick = Some(now + seconds as i64 * 1000);
        }
        let files: Vec<String> = self.files.keys().cloned().collect();
        files
            .iter()
            .filter_map(|f| self.capture(f, source, now))
            .collect()
    }

    /// A change notification for `relative`. Untracked paths are ignored.
    pub fn on_change(&mut self, relative: &str, source: &dyn FileSource, now: TimestampMs) -> Vec<SnapshotRecord> {
        let trigger = self.policy.trigger;
        let Some(state) = self.files.get_mut(relative) else {
            return Vec::new();
        };
        match trigger {
            SnapshotTrigger::OnSave => self.capture(relative, source, now).into_iter().collect(),
            SnapshotTrigger::EveryChange { debounce_ms } => {
                let d = debounce_ms as i64;
                let since = *state.pending_since.get_or_insert(now);
                state.deadline = Some((now + d).min(since + d.max(1) * MAX_WAIT_FACTOR).max(now));
                Vec::new()
            }
            SnapshotTrigger::Interval { .. } => {
                state.pending_since.get_or_insert(now);
                Vec::new()
            }
        }
    }

    /// Fire every deadline or interval tick that is due at `now`.
    pub fn poll(&mut self, source: &dyn FileSource, now: TimestampMs) -> Vec<SnapshotRecord> {
        let mut out = Vec::new();
        match self.policy.trigger {
            SnapshotTrigger::EveryChange { .. } => {
                let due: Vec<String> = self
                    .files
                    .iter()
                    .filter(|(_, s)| s.deadline.is_some_and(|d| d <= now))
                    .map(|(f, _)| f.clone())
                    .collect();
                out.extend(due.iter().filter_map(|f| self.capture(f, source, now)));
            }
            SnapshotTrigger::Interval { seconds } => {
                let period = seconds as i64 * 1000;
                let tick = *self.next_tick.get_or_insert(now + period);
                if now >= tick {
                    let dirty: Vec<String> = self
                        .files
                        .iter()
                        .filter(|(_, s)| s.pending_since.is_some())
                        .map(|(f, _)| f.clone())
                        .collect();
                    out.extend(dirty.iter().filter_map(|f| self.capture(f, source, now)));
                    // a late poll restarts the period so samples stay `period` apart
                    self.next_tick = Some(if now == tick { tick + period } else { now + period });
                }
            }
            SnapshotTrigger::OnSave => {}
        }
        out
    }

    /// Earliest time at which `poll` may emit something.
    pub fn next_deadline(&self) -> Option<TimestampMs> {
        match self.policy.trigger {
            SnapshotTrigger::EveryChange { .. } => self.files.values().filter_map(|s| s.deadline).min(),
            SnapshotTrigger::Interval { .. } => self.next_tick,
            SnapshotTrigger::OnSave => None,
        }
    }

    /// Final capture at the end of a session: every file whose content differs
    /// from its last snapshot is recorded, pending or not.
    pub fn finish(&mut self, source: &dyn FileSource, now: TimestampMs) -> Vec<SnapshotRecord> {
        let files: Vec<String> = self.files.keys().cloned().collect();
        files
            .iter()
            .filter_map(|f| self.capture(f, source, now))
            .collect()
    }
}
