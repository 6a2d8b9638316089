//! SQLite implementation of [`Repository`].
//!
//! Category tables mirror the client journal's column layout, prefixed by the
//! owning session and the batch that delivered the row. `UNIQUE(session_id,
//! seq)` makes re-delivery of a record under a fresh batch id harmless.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use rusqlite::types::ValueRef;
use rusqlite::{params, Connection, OptionalExtension, Transaction};
use serde::{Deserialize, Serialize};
use tracelab_core::journal::{decode_fields, encode_fields, header};
use tracelab_core::progsnap2::{SessionInput, StudyInput};
use tracelab_core::record::{RecordKind, TimestampMs, TrackedRecord};
use tracelab_core::stats::{study_summary, SessionRecords, StudySummary};
use tracelab_core::wire::{BatchAck, RegisterRequest, RegisterResponse};

use crate::error::ServerError;
use crate::ingest::{prepare_batch, PreparedBatch};
use crate::repo::{Manifest, RawPayload, Repository, SessionInfo};

pub const DATABASE_FILE: &str = "tracelab.sqlite";
pub const MANIFEST_FILE: &str = "manifest.json";

pub fn table_name(kind: RecordKind) -> &'static str {
    match kind {
        RecordKind::Snapshot => "snapshots",
        RecordKind::Activity => "activity",
        RecordKind::Focus => "focus",
        RecordKind::ToolWindow => "toolwindow",
        RecordKind::Survey => "survey",
    }
}

pub const TABLES: [&str; 10] = [
    "sessions",
    "consent",
    "batches",
    "snapshots",
    "activity",
    "focus",
    "toolwindow",
    "survey",
    "quarantine",
    "attachments",
];

const SCHEMA: &str = "
PRAGMA foreign_keys = ON;
CREATE TABLE IF NOT EXISTS sessions (
    id INTEGER PRIMARY KEY,
    token TEXT NOT NULL UNIQUE,
    session_uid TEXT NOT NULL UNIQUE,
    participant_id TEXT NOT NULL,
    research_id TEXT NOT NULL,
    client_nonce TEXT NOT NULL,
    created_at INTEGER NOT NULL,
    UNIQUE (research_id, client_nonce)
);
CREATE INDEX IF NOT EXISTS sessions_research ON sessions (research_id);
CREATE TABLE IF NOT EXISTS consent (
    session_id INTEGER PRIMARY KEY REFERENCES sessions (id),
    granted_at INTEGER NOT NULL
);
CREATE TABLE IF NOT EXISTS batches (
    id INTEGER PRIMARY KEY,
    session_id INTEGER NOT NULL REFERENCES sessions (id),
    batch_id TEXT NOT NULL,
    received_at INTEGER NOT NULL,
    raw BLOB NOT NULL,
    status TEXT NOT NULL,
    acked_upto_seq INTEGER NOT NULL,
    receipts INTEGER NOT NULL DEFAULT 1,
    UNIQUE (session_id, batch_id)
);
CREATE TABLE IF NOT EXISTS snapshots (
    session_id INTEGER NOT NULL REFERENCES sessions (id),
    batch_row INTEGER NOT NULL,
    seq INTEGER NOT NULL, timestamp INTEGER NOT NULL,
    file TEXT NOT NULL, mode TEXT NOT NULL, digest TEXT NOT NULL, content TEXT NOT NULL,
    UNIQUE (session_id, seq)
);
CREATE TABLE IF NOT EXISTS activity (
    session_id INTEGER NOT NULL REFERENCES sessions (id),
    batch_row INTEGER NOT NULL,
    seq INTEGER NOT NULL, timestamp INTEGER NOT NULL,
    category TEXT NOT NULL, event_id TEXT NOT NULL, detail_json TEXT NOT NULL,
    UNIQUE (session_id, seq)
);
CREATE TABLE IF NOT EXISTS focus (
    session_id INTEGER NOT NULL REFERENCES sessions (id),
    batch_row INTEGER NOT NULL,
    seq INTEGER NOT NULL, timestamp INTEGER NOT NULL,
    file TEXT NOT NULL, kind TEXT NOT NULL,
    UNIQUE (session_id, seq)
);
CREATE TABLE IF NOT EXISTS toolwindow (
    session_id INTEGER NOT NULL REFERENCES sessions (id),
    batch_row INTEGER NOT NULL,
    seq INTEGER NOT NULL, timestamp INTEGER NOT NULL,
    window_id TEXT NOT NULL, kind TEXT NOT NULL,
    UNIQUE (session_id, seq)
);
CREATE TABLE IF NOT EXISTS survey (
    session_id INTEGER NOT NULL REFERENCES sessions (id),
    batch_row INTEGER NOT NULL,
    seq INTEGER NOT NULL, timestamp INTEGER NOT NULL,
    survey_id TEXT NOT NULL, answers_json TEXT NOT NULL,
    UNIQUE (session_id, seq)
);
CREATE TABLE IF NOT EXISTS quarantine (
    id INTEGER PRIMARY KEY,
    session_id INTEGER NOT NULL REFERENCES sessions (id),
    batch_row INTEGER NOT NULL,
    item_index INTEGER NOT NULL,
    is_attachment INTEGER NOT NULL,
    raw TEXT NOT NULL,
    reason TEXT NOT NULL
);
CREATE TABLE IF NOT EXISTS attachments (
    id INTEGER PRIMARY KEY,
    session_id INTEGER NOT NULL REFERENCES sessions (id),
    batch_row INTEGER NOT NULL,
    path TEXT NOT NULL,
    content BLOB NOT NULL
);
";

fn random_hex(bytes: usize) -> String {
    let buf: Vec<u8> = (0..bytes).map(|_| rand::random::<u8>()).collect();
    hex::encode(buf)
}

fn value_to_string(v: ValueRef<'_>) -> String {
    match v {
        ValueRef::Null => String::new(),
        ValueRef::Integer(i) => i.to_string(),
        ValueRef::Real(f) => f.to_string(),
        ValueRef::Text(t) | ValueRef::Blob(t) => String::from_utf8_lossy(t).into_owned(),
    }
}

#[derive(Debug)]
pub struct SqliteStore {
    conn: Mutex<Connection>,
    path: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ApplyCounts {
    pub applied: u64,
    /// Records whose (session, seq) was already stored.
    pub already_present: u64,
    pub quarantined: u64,
}

fn apply_prepared(
    tx: &Transaction<'_>,
    session_id: i64,
    batch_row: i64,
    batch: &PreparedBatch,
) -> rusqlite::Result<ApplyCounts> {
    let mut counts = ApplyCounts::default();
    for r in &batch.records {
        let kind = r.kind();
        let cols = header(kind);
        let sql = format!(
            "INSERT OR IGNORE INTO {} (session_id, batch_row, {}) VALUES (?1, ?2, {})",
            table_name(kind),
            cols.join(", "),
            (0..cols.len()).map(|i| format!("?{}", i + 3)).collect::<Vec<_>>().join(", ")
        );
        let fields = encode_fields(r);
        let mut values: Vec<rusqlite::types::Value> = vec![session_id.into(), batch_row.into()];
        values.push((r.seq() as i64).into());
        values.push(r.timestamp().into());
        values.extend(fields[2..].iter().cloned().map(rusqlite::types::Value::from));
        let n = tx.execute(&sql, rusqlite::params_from_iter(values))?;
        if n == 1 {
            counts.applied += 1;
        } else {
            counts.already_present += 1;
        }
    }
    for q in &batch.quarantined {
        tx.execute(
            "INSERT INTO quarantine (session_id, batch_row, item_index, is_attachment, raw, reason)
             VALUES (?1, ?2, ?3, ?4, ?5, ?6)",
            params![session_id, batch_row, q.index as i64, q.attachment, q.raw, q.reason],
        )?;
        counts.quarantined += 1;
    }
    for a in &batch.attachments {
        tx.execute(
            "INSERT INTO attachments (session_id, batch_row, path, content) VALUES (?1, ?2, ?3, ?4)",
            params![session_id, batch_row, a.path, a.content],
        )?;
    }
    Ok(counts)
}

fn load_records(conn: &Connection, session_id: i64) -> rusqlite::Result<Vec<TrackedRecord>> {
    let mut out = Vec::new();
    for kind in RecordKind::ALL {
        let cols = header(kind);
        let mut stmt = conn.prepare_cached(&format!(
            "SELECT {} FROM {} WHERE session_id = ?1",
            cols.join(", "),
            table_name(kind)
        ))?;
        let rows = stmt.query_map([session_id], |row| {
            (0..cols.len())
                .map(|i| row.get_ref(i).map(value_to_string))
                .collect::<rusqlite::Result<Vec<String>>>()
        })?;
        for fields in rows {
            let fields = fields?;
            let refs: Vec<&str> = fields.iter().map(String::as_str).collect();
            match decode_fields(kind, &refs) {
                Ok(r) => out.push(r),
                Err(e) => tracing::error!("undecodable {} row: {e}", table_name(kind)),
            }
        }
    }
    out.sort_by_key(TrackedRecord::seq);
    Ok(out)
}

fn count_tables(conn: &Connection) -> rusqlite::Result<BTreeMap<String, u64>> {
    let mut out = BTreeMap::new();
    for t in TABLES {
        let n: i64 = conn.query_row(&format!("SELECT COUNT(*) FROM {t}"), [], |r| r.get(0))?;
        out.insert(t.to_owned(), n as u64);
    }
    Ok(out)
}

impl SqliteStore {
    pub fn open(path: &Path) -> Result<Self, ServerError> {
        let conn = Connection::open(path)?;
        conn.pragma_update(None, "journal_mode", "WAL")?;
        conn.pragma_update(None, "synchronous", "FULL")?;
        Self::init(conn, Some(path.to_path_buf()))
    }

    /// Open `<dir>/tracelab.sqlite`, creating the directory if needed.
    pub fn open_data_dir(dir: &Path) -> Result<Self, ServerError> {
        std::fs::create_dir_all(dir).map_err(|source| ServerError::Io {
            path: dir.to_path_buf(),
            source,
        })?;
        Self::open(&dir.join(DATABASE_FILE))
    }

    pub fn open_in_memory() -> Result<Self, ServerError> {
        Self::init(Connection::open_in_memory()?, None)
    }

    fn init(conn: Connection, path: Option<PathBuf>) -> Result<Self, ServerError> {
        conn.execute_batch(SCHEMA)?;
        Ok(SqliteStore {
            conn: Mutex::new(conn),
            path,
        })
    }

    pub fn path(&self) -> Option<&Path> {
        self.path.as_deref()
    }

    fn lock(&self) -> std::sync::MutexGuard<'_, Connection> {
        self.conn.lock().unwrap_or_else(|p| p.into_inner())
    }

    pub fn table_counts(&self) -> Result<BTreeMap<String, u64>, ServerError> {
        Ok(count_tables(&self.lock())?)
    }

    /// Every row of the category and quarantine tables, sorted, without
    /// row ids. Used to compare stores.
    pub fn dump_category_tables(&self) -> Result<BTreeMap<String, Vec<Vec<String>>>, ServerError> {
        let conn = self.lock();
        let mut out = BTreeMap::new();
        let mut tables: Vec<(String, String)> = RecordKind::ALL
            .iter()
            .map(|&k| (table_name(k).to_owned(), format!("session_id, batch_row, {}", header(k).join(", "))))
            .collect();
        tables.push((
            "quarantine".into(),
            "session_id, batch_row, item_index, is_attachment, raw, reason".into(),
        ));
        tables.push(("attachments".into(), "session_id, batch_row, path, content".into()));
        for (t, cols) in tables {
            let width = cols.split(',').count();
            let mut stmt = conn.prepare(&format!("SELECT {cols} FROM {t}"))?;
            let mut rows: Vec<Vec<String>> = stmt
                .query_map([], |row| {
                    (0..width)
                        .map(|i| row.get_ref(i).map(value_to_string))
                        .collect::<rusqlite::Result<Vec<String>>>()
                })?
                .collect::<rusqlite::Result<_>>()?;
            rows.sort();
            out.insert(t, rows);
        }
        Ok(out)
    }

    /// Drop every derived row and rebuild the category, quarantine and
    /// attachment tables from the stored raw payloads, in receipt order.
    pub fn rebuild_from_raw(&self) -> Result<u64, ServerError> {
        let mut conn = self.lock();
        let tx = conn.transaction()?;
        for t in ["snapshots", "activity", "focus", "toolwindow", "survey", "quarantine", "attachments"] {
            tx.execute(&format!("DELETE FROM {t}"), [])?;
        }
        let batches: Vec<(i64, i64, Vec<u8>)> = {
            let mut stmt = tx.prepare("SELECT id, session_id, raw FROM batches ORDER BY id")?;
            let rows = stmt.query_map([], |r| Ok((r.get(0)?, r.get(1)?, r.get(2)?)))?;
            rows.collect::<rusqlite::Result<_>>()?
        };
        let n = batches.len() as u64;
        for (row, session, raw) in batches {
            match prepare_batch(&raw) {
                Ok(b) => {
                    apply_prepared(&tx, session, row, &b)?;
                }
                Err(e) => tracing::error!("stored batch {row} no longer decodes: {e}"),
            }
        }
        tx.commit()?;
        Ok(n)
    }

    fn session_row(conn: &Connection, token: &str) -> rusqlite::Result<Option<(i64, SessionInfo)>> {
        conn.query_row(
            "SELECT id, session_uid, participant_id, research_id FROM sessions WHERE token = ?1",
            [token],
            |r| {
                Ok((
                    r.get(0)?,
                    SessionInfo {
                        session_uid: r.get(1)?,
                        participant_id: r.get(2)?,
                        research_id: r.get(3)?,
                    },
                ))
            },
        )
        .optional()
    }
}

impl Repository for SqliteStore {
    fn register(&self, req: &RegisterRequest, now: TimestampMs) -> Result<RegisterResponse, ServerError> {
        let granted_at = match req.consent {
            tracelab_core::scenario::Consent::Granted { at } => at,
            _ => return Err(ServerError::ConsentMissing),
        };
        let mut conn = self.lock();
        let tx = conn.transaction()?;
        let existing: Option<String> = tx
            .query_row(
                "SELECT token FROM sessions WHERE research_id = ?1 AND client_nonce = ?2",
                params![req.research_id, req.client_nonce],
                |r| r.get(0),
            )
            .optional()?;
        if let Some(token) = existing {
            return Ok(RegisterResponse { session_token: token });
        }
        let token = random_hex(32);
        tx.execute(
            "INSERT INTO sessions (token, session_uid, participant_id, research_id, client_nonce, created_at)
             VALUES (?1, ?2, ?3, ?4, ?5, ?6)",
            params![
                token,
                random_hex(8),
                format!("p-{}", random_hex(8)),
                req.research_id,
                req.client_nonce,
                now
            ],
        )?;
        let id = tx.last_insert_rowid();
        tx.execute("INSERT INTO consent (session_id, granted_at) VALUES (?1, ?2)", params![id, granted_at])?;
        tx.commit()?;
        Ok(RegisterResponse { session_token: token })
    }

    fn authenticate(&self, token: &str) -> Result<SessionInfo, ServerError> {
        Self::session_row(&self.lock(), token)?
            .map(|(_, s)| s)
            .ok_or(ServerError::AuthFailure)
    }

    fn ingest(&self, token: &str, body: &[u8], now: TimestampMs) -> Result<BatchAck, ServerError> {
        let batch = prepare_batch(body)?;
        let mut conn = self.lock();
        let (session_id, _) = Self::session_row(&conn, token)?.ok_or(ServerError::AuthFailure)?;
        let tx = conn.transaction()?;
        let seen: Option<i64> = tx
            .query_row(
                "SELECT acked_upto_seq FROM batches WHERE session_id = ?1 AND batch_id = ?2",
                params![session_id, batch.batch_id],
                |r| r.get(0),
            )
            .optional()?;
        if let Some(acked) = seen {
            tx.execute(
                "UPDATE batches SET receipts = receipts + 1 WHERE session_id = ?1 AND batch_id = ?2",
                params![session_id, batch.batch_id],
            )?;
            tx.commit()?;
            return Ok(BatchAck {
                acked_upto_seq: acked as u64,
                duplicate: true,
                quarantined: 0,
            });
        }
        tx.execute(
            "INSERT INTO batches (session_id, batch_id, received_at, raw, status, acked_upto_seq)
             VALUES (?1, ?2, ?3, ?4, 'applied', ?5)",
            params![session_id, batch.batch_id, now, body, batch.max_seq as i64],
        )?;
        let row = tx.last_insert_rowid();
        let counts = apply_prepared(&tx, session_id, row, &batch)?;
        tx.commit()?;
        if counts.quarantined > 0 {
            tracing::warn!("batch {} quarantined {} item(s)", batch.batch_id, counts.quarantined);
        }
        Ok(BatchAck {
            acked_upto_seq: batch.max_seq,
            duplicate: false,
            quarantined: counts.quarantined,
        })
    }

    fn export_raw(&self, token: &str) -> Result<Vec<RawPayload>, ServerError> {
        let conn = self.lock();
        let (session_id, _) = Self::session_row(&conn, token)?.ok_or(ServerError::UnknownSession)?;
        let mut stmt =
            conn.prepare("SELECT batch_id, received_at, raw FROM batches WHERE session_id = ?1 ORDER BY id")?;
        let rows = stmt.query_map([session_id], |r| {
            Ok(RawPayload {
                batch_id: r.get(0)?,
                received_at: r.get(1)?,
                bytes: r.get(2)?,
            })
        })?;
        Ok(rows.collect::<rusqlite::Result<_>>()?)
    }

    fn study_input(&self, research_id: &str) -> Result<StudyInput, ServerError> {
        let conn = self.lock();
        let sessions: Vec<(i64, String, String)> = {
            let mut stmt = conn.prepare(
                "SELECT id, session_uid, participant_id FROM sessions WHERE research_id = ?1 ORDER BY id",
            )?;
            let rows = stmt.query_map([research_id], |r| Ok((r.get(0)?, r.get(1)?, r.get(2)?)))?;
            rows.collect::<rusqlite::Result<_>>()?
        };
        if sessions.is_empty() {
            return Err(ServerError::UnknownResearch(research_id.to_owned()));
        }
        let mut input = StudyInput {
            research_id: research_id.to_owned(),
            sessions: Vec::with_capacity(sessions.len()),
            quarantined: 0,
        };
        for (id, uid, participant) in sessions {
            let q: i64 = conn.query_row(
                "SELECT COUNT(*) FROM quarantine WHERE session_id = ?1 AND is_attachment = 0",
                [id],
                |r| r.get(0),
            )?;
            input.quarantined += q as u64;
            input.sessions.push(SessionInput {
                session_id: uid,
                subject_id: participant,
                records: load_records(&conn, id)?,
            });
        }
        Ok(input)
    }

    fn summary(&self, research_id: &str) -> Result<StudySummary, ServerError> {
        let input = self.study_input(research_id)?;
        let sessions: Vec<SessionRecords> = input
            .sessions
            .into_iter()
            .map(|s| SessionRecords {
                participant: s.subject_id,
                records: s.records,
            })
            .collect();
        Ok(study_summary(&sessions))
    }

    fn backup(&self, destination: &Path, now: TimestampMs) -> Result<Manifest, ServerError> {
        let io = |path: &Path| {
            let path = path.to_path_buf();
            move |source| ServerError::Io { path, source }
        };
        if destination.exists() && std::fs::read_dir(destination).map_err(io(destination))?.next().is_some() {
            return Err(ServerError::BackupExists(destination.to_path_buf()));
        }
        std::fs::create_dir_all(destination).map_err(io(destination))?;
        let db = destination.join(DATABASE_FILE);
        {
            let conn = self.lock();
            conn.execute("VACUUM INTO ?1", [db.to_string_lossy()])?;
        }
        let copy = Connection::open(&db)?;
        let manifest = Manifest {
            created_at: now,
            database: DATABASE_FILE.into(),
            tables: count_tables(&copy)?,
        };
        let path = destination.join(MANIFEST_FILE);
        let json = serde_json::to_vec_pretty(&manifest).expect("manifest serializes");
        std::fs::write(&path, json).map_err(io(&path))?;
        Ok(manifest)
    }
}
