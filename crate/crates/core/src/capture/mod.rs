//! Producing tracked records.
//!
//! Keystroke granularity is approximated by filesystem change events with a
//! default debounce of [`DEFAULT_DEBOUNCE_MS`]: a burst of writes closer
//! together than the debounce is recorded as one snapshot of the latest
//! content, and a write that leaves the digest unchanged records nothing.

pub mod activity;
pub mod signatures;
pub mod tracker;
pub mod watcher;

pub use activity::{
    ActivityFilter, AdapterError, AdapterEvent, FilterReason, MemorySink, Outcome, RecordSink, Recorder,
};
pub use signatures::extract_signatures;
pub use tracker::{make_snapshot, DirSource, FileSource, SnapshotTracker};
pub use watcher::{watch, WatchError, WatchMode, WatcherHandle};

pub const DEFAULT_DEBOUNCE_MS: u64 = 200;

#[cfg(test)]
mod tests;
