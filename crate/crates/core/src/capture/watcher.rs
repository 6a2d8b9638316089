//! Filesystem-driven snapshot capture.
//!
//! A background thread owns a [`SnapshotTracker`] and feeds it native change
//! notifications. When the platform watcher cannot be set up the thread polls
//! file digests instead, every `max(debounce, 500 ms)`.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::mpsc::{self, RecvTimeoutError};
use std::thread::JoinHandle;
use std::time::Duration;

use notify::{RecursiveMode, Watcher};

use crate::config::{normalize_relative, SnapshotTrigger, TrackingPolicy};
use crate::record::{content_digest, now_ms, SnapshotRecord};

use super::tracker::{DirSource, FileSource, SnapshotTracker};

pub const MIN_POLL_MS: u64 = 500;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum WatchMode {
    Native,
    Polling(Duration),
}

#[derive(Debug, thiserror::Error)]
pub enum WatchError {
    #[error("tracked path `{0}` is not workspace-relative")]
    BadPath(String),
    #[error("workspace root {0} does not exist")]
    MissingRoot(PathBuf),
}

enum Msg {
    Changed(Vec<PathBuf>),
    Stop,
}

/// Running capture thread. Dropping the handle stops it.
pub struct WatcherHandle {
    tx: mpsc::Sender<Msg>,
    thread: Option<JoinHandle<()>>,
    mode: WatchMode,
    // kept alive for the lifetime of the handle
    _native: Option<notify::RecommendedWatcher>,
}

impl WatcherHandle {
    pub fn mode(&self) -> &WatchMode {
        &self.mode
    }

    /// Stop the thread after a final capture of every tracked file.
    pub fn stop(mut self) {
        self.shutdown();
    }

    fn shutdown(&mut self) {
        let _ = self.tx.send(Msg::Stop);
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

impl Drop for WatcherHandle {
    fn drop(&mut self) {
        self.shutdown();
    }
}

/// Polling interval used when native notifications are unavailable.
pub fn fallback_interval(policy: &TrackingPolicy) -> Duration {
    let debounce = match policy.trigger {
        SnapshotTrigger::EveryChange { debounce_ms } => debounce_ms,
        _ => 0,
    };
    Duration::from_millis(debounce.max(MIN_POLL_MS))
}

/// Start capturing `files` (workspace-relative) under `root`.
///
/// `seed` carries the last known digest per file so a restarted session does
/// not re-record unchanged files.
pub fn watch<F>(
    root: &Path,
    files: &[String],
    policy: TrackingPolicy,
    seed: BTreeMap<String, String>,
    force_polling: bool,
    mut sink: F,
) -> Result<WatcherHandle, WatchError>
where
    F: FnMut(SnapshotRecord) + Send + 'static,
{
    let root = root
        .canonicalize()
        .map_err(|_| WatchError::MissingRoot(root.to_path_buf()))?;
    let mut normalized = Vec::with_capacity(files.len());
    for f in files {
        normalized.push(normalize_relative(f).map_err(|_| WatchError::BadPath(f.clone()))?);
    }

    let (tx, rx) = mpsc::channel::<Msg>();
    let native = if force_polling {
        None
    } else {
        let event_tx = tx.clone();
        notify::recommended_watcher(move |res: notify::Result<notify::Event>| {
            if let Ok(event) = res {
                if matches!(
                    event.kind,
                    notify::EventKind::Create(_) | notify::EventKind::Modify(_) | notify::EventKind::Remove(_)
                ) {
                    let _ = event_tx.send(Msg::Changed(event.paths));
                }
            }
        })
        .and_then(|mut w| w.watch(&root, RecursiveMode::Recursive).map(|_| w))
        .map_err(|e| tracing::warn!("native file watching unavailable, polling instead: {e}"))
        .ok()
    };
    let mode = match native {
        Some(_) => WatchMode::Native,
        None => WatchMode::Polling(fallback_interval(&policy)),
    };

    let source = DirSource { root: root.clone() };
    let mut tracker = SnapshotTracker::new(policy, normalized.clone());
    tracker.seed_digests(&seed);
    let thread_mode = mode.clone();
    let thread = std::thread::Builder::new()
        .name("tracelab-capture".into())
        .spawn(move || {
            let mut emit = |records: Vec<SnapshotRecord>| records.into_iter().for_each(&mut sink);
            emit(tracker.start(&source, now_ms()));
            let mut polled: BTreeMap<String, Option<String>> = normalized
                .iter()
                .map(|f| (f.clone(), source.read(f).map(|b| content_digest(&b))))
                .collect();
            loop {
                let now = now_ms();
                let mut wait = tracker
                    .next_deadline()
                    .map(|d| Duration::from_millis((d - now).max(0) as u64))
                    .unwrap_or(Duration::from_secs(1));
                if let WatchMode::Polling(every) = thread_mode {
                    wait = wait.min(every);
                }
                match rx.recv_timeout(wait) {
                    Ok(Msg::Changed(paths)) => {
                        let now = now_ms();
                        for p in paths {
                            if let Some(rel) = relative_to(&root, &p) {
                                emit(tracker.on_change(&rel, &source, now));
                            }
                        }
                    }
                    Ok(Msg::Stop) | Err(RecvTimeoutError::Disconnected) => {
                        let now = now_ms();
                        emit(tracker.poll(&source, now));
                        emit(tracker.finish(&source, now));
                        return;
                    }
                    Err(RecvTimeoutError::Timeout) => {}
                }
                let now = now_ms();
                if let WatchMode::Polling(_) = thread_mode {
                    for (file, last) in polled.iter_mut() {
                        let current = source.read(file).map(|b| content_digest(&b));
                        if current != *last {
                            *last = current;
                            emit(tracker.on_change(file, &source, now));
                        }
                    }
                }
                emit(tracker.poll(&source, now));
            }
        })
        .expect("spawn capture thread");

    Ok(WatcherHandle {
        tx,
        thread: Some(thread),
        mode,
        _native: native,
    })
}

fn relative_to(root: &Path, path: &Path) -> Option<String> {
    let rel = path
        .strip_prefix(root)
        .ok()
        .map(Path::to_path_buf)
        .or_else(|| {
            let canonical = path.parent()?.canonicalize().ok()?.join(path.file_name()?);
            canonical.strip_prefix(root).ok().map(Path::to_path_buf)
        })?;
    let s = rel.to_str()?;
    normalize_relative(s).ok()
}
