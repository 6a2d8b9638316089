//! Append-only per-category CSV journal with a flush watermark.
//!
//! Layout of a journal directory:
//!
//! | file             | columns                                       |
//! |------------------|-----------------------------------------------|
//! | `snapshots.csv`  | seq,timestamp,file,mode,digest,content        |
//! | `activity.csv`   | seq,timestamp,category,event_id,detail_json   |
//! | `focus.csv`      | seq,timestamp,file,kind                       |
//! | `toolwindow.csv` | seq,timestamp,window_id,kind                  |
//! | `survey.csv`     | seq,timestamp,survey_id,answers_json          |
//! | `watermark`      | highest seq acknowledged by the server        |
//!
//! Each append writes one complete RFC-4180 record, terminated by `\n`, with
//! a single `write` call. A crash can therefore leave at most one partial
//! record at the end of one file; [`Journal::open`] moves such a tail to a
//! `<file>.torn` sidecar before appending again. The watermark is replaced by
//! atomic rename so it is always either the old or the new value.

use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use crate::capture::RecordSink;
use crate::record::{
    ActivityRecord, FocusRecord, RecordKind, SnapshotRecord, SurveyResponseRecord, ToolWindowRecord,
    TrackedRecord,
};

pub const WATERMARK_FILE: &str = "watermark";

pub fn file_name(kind: RecordKind) -> &'static str {
    match kind {
        RecordKind::Snapshot => "snapshots.csv",
        RecordKind::Activity => "activity.csv",
        RecordKind::Focus => "focus.csv",
        RecordKind::ToolWindow => "toolwindow.csv",
        RecordKind::Survey => "survey.csv",
    }
}

pub fn header(kind: RecordKind) -> &'static [&'static str] {
    match kind {
        RecordKind::Snapshot => &["seq", "timestamp", "file", "mode", "digest", "content"],
        RecordKind::Activity => &["seq", "timestamp", "category", "event_id", "detail_json"],
        RecordKind::Focus => &["seq", "timestamp", "file", "kind"],
        RecordKind::ToolWindow => &["seq", "timestamp", "window_id", "kind"],
        RecordKind::Survey => &["seq", "timestamp", "survey_id", "answers_json"],
    }
}

#[derive(Debug, thiserror::Error)]
pub enum JournalError {
    #[error("disk full while writing {0}")]
    DiskFull(PathBuf),
    #[error("i/o failure on {path}: {source}")]
    IoFailure { path: PathBuf, source: io::Error },
    #[error("{file} has an unexpected header")]
    HeaderMismatch { file: String },
    #[error("watermark file is unreadable: {0:?}")]
    CorruptWatermark(String),
    #[error("cannot mark {upto} flushed: last appended seq is {last}")]
    BeyondAppended { upto: u64, last: u64 },
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> JournalError + '_ {
    move |source| {
        if source.kind() == io::ErrorKind::StorageFull {
            JournalError::DiskFull(path.to_path_buf())
        } else {
            JournalError::IoFailure {
                path: path.to_path_buf(),
                source,
            }
        }
    }
}

/// A complete row that could not be decoded. `line` is the 1-based line on
/// which the row starts; the header is line 1.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CorruptRow {
    pub file: String,
    pub line: u64,
    pub reason: String,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ReadOutcome {
    /// Records in seq order.
    pub records: Vec<TrackedRecord>,
    pub corrupt: Vec<CorruptRow>,
}

/// Encode `record` as one CSV row in its file's column order.
pub fn encode_fields(record: &TrackedRecord) -> Vec<String> {
    match record {
        TrackedRecord::Snapshot(r) => vec![
            r.seq.to_string(),
            r.timestamp.to_string(),
            r.file.clone(),
            r.mode.as_str().to_owned(),
            r.content_digest.clone(),
            r.content.clone(),
        ],
        TrackedRecord::Activity(r) => vec![
            r.seq.to_string(),
            r.timestamp.to_string(),
            r.category.as_str().to_owned(),
            r.event_id.clone(),
            serde_json::to_string(&r.detail).expect("string map serializes"),
        ],
        TrackedRecord::Focus(r) => vec![
            r.seq.to_string(),
            r.timestamp.to_string(),
            r.file.clone(),
            r.kind.as_str().to_owned(),
        ],
        TrackedRecord::ToolWindow(r) => vec![
            r.seq.to_string(),
            r.timestamp.to_string(),
            r.window_id.clone(),
            r.kind.as_str().to_owned(),
        ],
        TrackedRecord::Survey(r) => vec![
            r.seq.to_string(),
            r.timestamp.to_string(),
            r.survey_id.clone(),
            serde_json::to_string(&r.answers).expect("answers serialize"),
        ],
    }
}

/// Decode one row of `kind`'s file.
pub fn decode_fields(kind: RecordKind, f: &[&str]) -> Result<TrackedRecord, String> {
    let want = header(kind).len();
    if f.len() != want {
        return Err(format!("expected {want} fields, found {}", f.len()));
    }
    let seq: u64 = f[0].parse().map_err(|_| format!("bad seq `{}`", f[0]))?;
    let timestamp: i64 = f[1].parse().map_err(|_| format!("bad timestamp `{}`", f[1]))?;
    Ok(match kind {
        RecordKind::Snapshot => SnapshotRecord {
            seq,
            timestamp,
            file: f[2].to_owned(),
            mode: f[3].parse()?,
            content_digest: f[4].to_owned(),
            content: f[5].to_owned(),
        }
        .into(),
        RecordKind::Activity => ActivityRecord {
            seq,
            timestamp,
            category: f[2].parse().map_err(|e| format!("{e}"))?,
            event_id: f[3].to_owned(),
            detail: serde_json::from_str(f[4]).map_err(|e| format!("bad detail_json: {e}"))?,
        }
        .into(),
        RecordKind::Focus => FocusRecord {
            seq,
            timestamp,
            file: f[2].to_owned(),
            kind: f[3].parse()?,
        }
        .into(),
        RecordKind::ToolWindow => ToolWindowRecord {
            seq,
            timestamp,
            window_id: f[2].to_owned(),
            kind: f[3].parse()?,
        }
        .into(),
        RecordKind::Survey => SurveyResponseRecord {
            seq,
            timestamp,
            survey_id: f[2].to_owned(),
            answers: serde_json::from_str(f[3]).map_err(|e| format!("bad answers_json: {e}"))?,
        }
        .into(),
    })
}

fn csv_row(fields: &[impl AsRef<[u8]>]) -> Vec<u8> {
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(Vec::new());
    w.write_record(fields).expect("writing to a Vec");
    w.into_inner().expect("flushing a Vec")
}

/// Length of the longest prefix of `bytes` made of whole records.
fn complete_prefix(bytes: &[u8]) -> usize {
    let mut quoted = false;
    let mut end = 0;
    for (i, b) in bytes.iter().enumerate() {
        match b {
            b'"' => quoted = !quoted,
            b'\n' if !quoted => end = i + 1,
            _ => {}
        }
    }
    end
}

fn parse_file(kind: RecordKind, bytes: &[u8], out: &mut ReadOutcome) -> Result<(), JournalError> {
    let name = file_name(kind);
    let bytes = &bytes[..complete_prefix(bytes)];
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_reader(bytes);
    let mut rows = reader.byte_records();
    match rows.next() {
        None => return Ok(()),
        Some(Ok(h)) if h.iter().eq(header(kind).iter().map(|s| s.as_bytes())) => {}
        Some(_) => return Err(JournalError::HeaderMismatch { file: name.into() }),
    }
    for row in rows {
        let row = match row {
            Ok(r) => r,
            Err(e) => {
                let line = e.position().map_or(0, |p| p.line());
                out.corrupt.push(CorruptRow {
                    file: name.into(),
                    line,
                    reason: e.to_string(),
                });
                continue;
            }
        };
        let line = row.position().map_or(0, |p| p.line());
        let decoded = row
            .iter()
            .map(std::str::from_utf8)
            .collect::<Result<Vec<_>, _>>()
            .map_err(|_| "invalid UTF-8".to_owned())
            .and_then(|fields| decode_fields(kind, &fields));
        match decoded {
            Ok(r) => out.records.push(r),
            Err(reason) => out.corrupt.push(CorruptRow {
                file: name.into(),
                line,
                reason,
            }),
        }
    }
    Ok(())
}

/// Read every complete record of the journal at `dir` without modifying it.
pub fn read_journal(dir: &Path) -> Result<ReadOutcome, JournalError> {
    let mut out = ReadOutcome::default();
    for kind in RecordKind::ALL {
        let path = dir.join(file_name(kind));
        let bytes = match fs::read(&path) {
            Ok(b) => b,
            Err(e) if e.kind() == io::ErrorKind::NotFound => continue,
            Err(e) => return Err(io_err(&path)(e)),
        };
        parse_file(kind, &bytes, &mut out)?;
    }
    out.records.sort_by_key(TrackedRecord::seq);
    Ok(out)
}

/// Watermark stored at `dir`, 0 when absent.
pub fn read_watermark(dir: &Path) -> Result<u64, JournalError> {
    let path = dir.join(WATERMARK_FILE);
    match fs::read_to_string(&path) {
        Ok(s) => s.trim().parse().map_err(|_| JournalError::CorruptWatermark(s)),
        Err(e) if e.kind() == io::ErrorKind::NotFound => Ok(0),
        Err(e) => Err(io_err(&path)(e)),
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct JournalOptions {
    /// `fsync` every append instead of only handing it to the OS.
    pub sync_appends: bool,
}

/// Single-writer handle on a session journal.
#[derive(Debug)]
pub struct Journal {
    dir: PathBuf,
    files: BTreeMap<RecordKind, File>,
    last_seq: u64,
    watermark: u64,
    options: JournalOptions,
    torn: Vec<String>,
}

impl Journal {
    pub fn open(dir: &Path) -> Result<Self, JournalError> {
        Self::open_with(dir, JournalOptions::default())
    }

    pub fn open_with(dir: &Path, options: JournalOptions) -> Result<Self, JournalError> {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
        let _ = fs::remove_file(dir.join(format!("{WATERMARK_FILE}.tmp")));
        let watermark = read_watermark(dir)?;
        let mut files = BTreeMap::new();
        let mut torn = Vec::new();
        let mut last_seq = watermark;
        for kind in RecordKind::ALL {
            let path = dir.join(file_name(kind));
            let bytes = match fs::read(&path) {
                Ok(b) => b,
                Err(e) if e.kind() == io::ErrorKind::NotFound => Vec::new(),
                Err(e) => return Err(io_err(&path)(e)),
            };
            let keep = complete_prefix(&bytes);
            if keep < bytes.len() {
                let side = dir.join(format!("{}.torn", file_name(kind)));
                let mut f = OpenOptions::new()
                    .create(true)
                    .append(true)
                    .open(&side)
                    .map_err(io_err(&side))?;
                f.write_all(&bytes[keep..]).map_err(io_err(&side))?;
                f.sync_all().map_err(io_err(&side))?;
                let f = OpenOptions::new().write(true).open(&path).map_err(io_err(&path))?;
                f.set_len(keep as u64).map_err(io_err(&path))?;
                f.sync_all().map_err(io_err(&path))?;
                tracing::warn!("discarded partial record at end of {}", path.display());
                torn.push(file_name(kind).to_owned());
            }
            let mut out = ReadOutcome::default();
            parse_file(kind, &bytes[..keep], &mut out)?;
            if let Some(max) = out.records.iter().map(TrackedRecord::seq).max() {
                last_seq = last_seq.max(max);
            }
            let mut file = OpenOptions::new()
                .create(true)
                .append(true)
                .open(&path)
                .map_err(io_err(&path))?;
            if keep == 0 {
                file.write_all(&csv_row(header(kind))).map_err(io_err(&path))?;
                file.sync_all().map_err(io_err(&path))?;
            }
            files.insert(kind, file);
        }
        Ok(Journal {
            dir: dir.to_path_buf(),
            files,
            last_seq,
            watermark,
            options,
            torn,
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    /// Highest seq assigned so far.
    pub fn last_seq(&self) -> u64 {
        self.last_seq
    }

    pub fn watermark(&self) -> u64 {
        self.watermark
    }

    /// Files whose partial tail was set aside by the last `open`.
    pub fn torn_files(&self) -> &[String] {
        &self.torn
    }

    /// Assign the next seq to `record` and append it to its category file.
    pub fn append(&mut self, mut record: TrackedRecord) -> Result<u64, JournalError> {
        let seq = self.last_seq + 1;
        record.set_seq(seq);
        let kind = record.kind();
        let row = csv_row(&encode_fields(&record));
        let path = self.dir.join(file_name(kind));
        let file = self.files.get_mut(&kind).expect("all kinds opened");
        file.write_all(&row).map_err(io_err(&path))?;
        if self.options.sync_appends {
            file.sync_data().map_err(io_err(&path))?;
        }
        self.last_seq = seq;
        Ok(seq)
    }

    /// All records, flushed or not.
    pub fn read_all(&self) -> Result<ReadOutcome, JournalError> {
        read_journal(&self.dir)
    }

    /// Records above the watermark in seq order.
    pub fn read_pending(&self) -> Result<ReadOutcome, JournalError> {
        let mut out = read_journal(&self.dir)?;
        out.records.retain(|r| r.seq() > self.watermark);
        Ok(out)
    }

    /// Exclude every record with seq ≤ `upto` from future reads of pending
    /// records. Lower values than the current watermark are a no-op.
    pub fn mark_flushed(&mut self, upto: u64) -> Result<(), JournalError> {
        if upto > self.last_seq {
            return Err(JournalError::BeyondAppended {
                upto,
                last: self.last_seq,
            });
        }
        if upto <= self.watermark {
            return Ok(());
        }
        let tmp = self.dir.join(format!("{WATERMARK_FILE}.tmp"));
        let path = self.dir.join(WATERMARK_FILE);
        {
            let mut f = File::create(&tmp).map_err(io_err(&tmp))?;
            writeln!(f, "{upto}").map_err(io_err(&tmp))?;
            f.sync_all().map_err(io_err(&tmp))?;
        }
        fs::rename(&tmp, &path).map_err(io_err(&path))?;
        if let Ok(d) = File::open(&self.dir) {
            let _ = d.sync_all();
        }
        self.watermark = upto;
        Ok(())
    }

    /// Digest of the latest snapshot per file, for resuming capture.
    pub fn snapshot_digests(&self) -> Result<BTreeMap<String, String>, JournalError> {
        let mut out = BTreeMap::new();
        for r in self.read_all()?.records {
            if let TrackedRecord::Snapshot(s) = r {
                out.insert(s.file, s.content_digest);
            }
        }
        Ok(out)
    }
}

impl RecordSink for Journal {
    type Error = JournalError;

    fn append(&mut self, record: TrackedRecord) -> Result<u64, JournalError> {
        Journal::append(self, record)
    }
}
