//! Core of the TraceLab data-collection pipeline.
//!
//! - [`config`]: the seven study documents and task file materialization
//! - [`scenario`]: per-participant state machine over the study plan
//! - [`capture`]: snapshot tracking, signature extraction, activity filtering
//! - [`journal`]: crash-safe per-category CSV logs
//! - [`stats`]: counts, rankings and focus intervals
//! - [`progsnap2`]: conversion to and validation of ProgSnap2 bundles
//! - [`wire`]: request and response bodies shared by client and server

pub mod capture;
pub mod config;
pub mod journal;
pub mod progsnap2;
pub mod record;
pub mod scenario;
pub mod stats;
pub mod wire;

pub use record::TrackedRecord;
