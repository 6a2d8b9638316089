//! Study client: upload of journaled records and the local session daemon.

pub mod daemon;
pub mod sync;

pub use daemon::{Daemon, DaemonError, DaemonOptions};
pub use sync::{
    Backoff, FaultPlan, FaultyTransport, FlushReport, HttpTransport, SyncConfig, SyncError, Syncer, Transport,
    TransportError,
};
