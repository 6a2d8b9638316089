//! Ingestion service for study data.
//!
//! Sessions register with proof of consent and receive an opaque token bound
//! to a random participant id. Batches are deduplicated by `(session,
//! batch_id)`, stored byte-exact, and split into one table per record
//! category. Malformed records are quarantined rather than rejected.

pub mod error;
pub mod http;
pub mod ingest;
pub mod repo;
pub mod store;

pub use error::ServerError;
pub use http::{router, serve, AppState};
pub use repo::{Manifest, RawPayload, Repository, SessionInfo};
pub use store::SqliteStore;
