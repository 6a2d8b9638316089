//! ProgSnap2 export.
//!
//! A bundle is a directory holding `MainTable.csv`, `DatasetMetadata.csv` and
//! one directory per code state under `CodeStates/`. Event types:
//!
//! | record                      | EventType                           |
//! |-----------------------------|-------------------------------------|
//! | snapshot                    | `File.Edit` (new CodeStateID)       |
//! | activity `run` / `debug`    | `Run.Program` / `Debug.Program`     |
//! | activity `action`           | `X-Action`                          |
//! | activity `hotkey`           | `X-Hotkey`                          |
//! | activity `ui`               | `X-UI`                              |
//! | focus open/focus/close      | `File.Open` / `File.Focus` / `File.Close` |
//! | focus unfocus               | `X-File.Unfocus`                    |
//! | tool window opened/closed   | `X-ToolWindow.Open` / `X-ToolWindow.Close` |
//! | survey response             | `X-Survey`                          |
//!
//! A code state holds every file of the session as of its latest snapshot;
//! events after a snapshot carry that snapshot's CodeStateID.

mod convert;
mod validate;

use std::collections::BTreeMap;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

pub use convert::{convert, ConvertReport, SessionInput, StudyInput};
pub use validate::{validate_bundle, Violation, ViolationKind};

use crate::config::normalize_relative;

pub const VERSION: &str = "6.0";
pub const MAIN_TABLE: &str = "MainTable.csv";
pub const METADATA_TABLE: &str = "DatasetMetadata.csv";
pub const CODE_STATES_DIR: &str = "CodeStates";

pub const MAIN_COLUMNS: [&str; 12] = [
    "EventID",
    "Order",
    "SubjectID",
    "ToolInstances",
    "EventType",
    "CodeStateID",
    "ClientTimestamp",
    "SessionID",
    "CodeStateSection",
    "X-EventID",
    "X-ContentMode",
    "X-Detail",
];

pub const REQUIRED_COLUMNS: [&str; 7] = [
    "EventID",
    "Order",
    "SubjectID",
    "ToolInstances",
    "EventType",
    "CodeStateID",
    "ClientTimestamp",
];

pub const REQUIRED_METADATA: [&str; 4] = [
    "Version",
    "IsEventOrderingConsistent",
    "EventOrderScope",
    "CodeStateRepresentation",
];

/// A CSV table with a header row.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Table {
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn column(&self, name: &str) -> Option<usize> {
        self.header.iter().position(|h| h == name)
    }

    fn to_csv(&self) -> Vec<u8> {
        let mut w = csv::WriterBuilder::new()
            .terminator(csv::Terminator::Any(b'\n'))
            .from_writer(Vec::new());
        w.write_record(&self.header).expect("writing to a Vec");
        for r in &self.rows {
            w.write_record(r).expect("writing to a Vec");
        }
        w.into_inner().expect("flushing a Vec")
    }

    fn from_csv(bytes: &[u8]) -> Result<Table, csv::Error> {
        let mut r = csv::ReaderBuilder::new().flexible(true).from_reader(bytes);
        let header = r.headers()?.iter().map(str::to_owned).collect();
        let rows = r
            .records()
            .map(|rec| rec.map(|rec| rec.iter().map(str::to_owned).collect()))
            .collect::<Result<_, _>>()?;
        Ok(Table { header, rows })
    }
}

/// In-memory bundle. Code states map CodeStateID to file path and content.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Bundle {
    pub main: Table,
    pub metadata: Table,
    pub code_states: BTreeMap<String, BTreeMap<String, String>>,
}

impl Bundle {
    pub fn metadata_value(&self, property: &str) -> Option<&str> {
        self.metadata
            .rows
            .iter()
            .find(|r| r.first().is_some_and(|p| p == property))
            .and_then(|r| r.get(1))
            .map(String::as_str)
    }
}

#[derive(Debug, thiserror::Error)]
pub enum BundleError {
    #[error("i/o failure on {path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("malformed {file}: {source}")]
    Csv { file: String, source: csv::Error },
    #[error("code state {id} has unsafe path `{path}`")]
    UnsafePath { id: String, path: String },
}

fn io_at(path: &Path) -> impl FnOnce(io::Error) -> BundleError + '_ {
    move |source| BundleError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Write `bundle` under `out`, which must not contain an older bundle.
pub fn write_bundle(bundle: &Bundle, out: &Path) -> Result<(), BundleError> {
    fs::create_dir_all(out).map_err(io_at(out))?;
    let main = out.join(MAIN_TABLE);
    fs::write(&main, bundle.main.to_csv()).map_err(io_at(&main))?;
    let meta = out.join(METADATA_TABLE);
    fs::write(&meta, bundle.metadata.to_csv()).map_err(io_at(&meta))?;
    let states = out.join(CODE_STATES_DIR);
    fs::create_dir_all(&states).map_err(io_at(&states))?;
    for (id, files) in &bundle.code_states {
        let unsafe_path = || BundleError::UnsafePath {
            id: id.clone(),
            path: id.clone(),
        };
        if id.is_empty() || id.contains(['/', '\\']) || id == "." || id == ".." {
            return Err(unsafe_path());
        }
        let dir = states.join(id);
        fs::create_dir_all(&dir).map_err(io_at(&dir))?;
        for (path, content) in files {
            let rel = normalize_relative(path).map_err(|_| BundleError::UnsafePath {
                id: id.clone(),
                path: path.clone(),
            })?;
            let target = dir.join(rel);
            if let Some(parent) = target.parent() {
                fs::create_dir_all(parent).map_err(io_at(parent))?;
            }
            fs::write(&target, content).map_err(io_at(&target))?;
        }
    }
    Ok(())
}

fn collect_files(base: &Path, dir: &Path, out: &mut BTreeMap<String, String>) -> Result<(), BundleError> {
    for entry in fs::read_dir(dir).map_err(io_at(dir))? {
        let entry = entry.map_err(io_at(dir))?;
        let path = entry.path();
        if path.is_dir() {
            collect_files(base, &path, out)?;
        } else {
            let rel = path.strip_prefix(base).expect("walk stays under base");
            let rel = rel
                .components()
                .map(|c| c.as_os_str().to_string_lossy())
                .collect::<Vec<_>>()
                .join("/");
            let bytes = fs::read(&path).map_err(io_at(&path))?;
            out.insert(rel, String::from_utf8_lossy(&bytes).into_owned());
        }
    }
    Ok(())
}

/// Read a bundle directory. A missing table reads as an empty table so that
/// validation can report it.
pub fn read_bundle(dir: &Path) -> Result<Bundle, BundleError> {
    let read_table = |name: &str| -> Result<Table, BundleError> {
        let path = dir.join(name);
        match fs::read(&path) {
            Ok(b) => Table::from_csv(&b).map_err(|source| BundleError::Csv {
                file: name.into(),
                source,
            }),
            Err(e) if e.kind() == io::ErrorKind::NotFound => Ok(Table::default()),
            Err(e) => Err(io_at(&path)(e)),
        }
    };
    let main = read_table(MAIN_TABLE)?;
    let metadata = read_table(METADATA_TABLE)?;
    let mut code_states = BTreeMap::new();
    let states = dir.join(CODE_STATES_DIR);
    if states.is_dir() {
        for entry in fs::read_dir(&states).map_err(io_at(&states))? {
            let entry = entry.map_err(io_at(&states))?;
            if entry.path().is_dir() {
                let mut files = BTreeMap::new();
                collect_files(&entry.path(), &entry.path(), &mut files)?;
                code_states.insert(entry.file_name().to_string_lossy().into_owned(), files);
            }
        }
    }
    Ok(Bundle {
        main,
        metadata,
        code_states,
    })
}
