//! Command implementations behind the `tracelab` binary.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use tracelab_client::daemon::{state_dir, JOURNAL_DIR};
use tracelab_core::config::{parse_study_config, LoadError, StudyConfig};
use tracelab_core::journal::read_journal;
use tracelab_core::progsnap2::{SessionInput, StudyInput};
use tracelab_core::stats::{study_summary, SessionRecords, StudySummary};

pub mod simulate;

/// Numbered plan of a scenario, consent first.
pub fn plan(config: &StudyConfig) -> Vec<String> {
    let mut out = vec!["0. consent".to_owned()];
    out.extend(
        config
            .scenario
            .steps
            .iter()
            .enumerate()
            .map(|(i, s)| format!("{}. {s}", i + 1)),
    );
    out
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ValidateReport {
    pub ok: bool,
    /// The plan when valid, one error summary per line otherwise.
    pub lines: Vec<String>,
}

pub fn validate(dir: &Path) -> ValidateReport {
    match parse_study_config(dir) {
        Ok(config) => ValidateReport {
            ok: true,
            lines: plan(&config),
        },
        Err(LoadError::Invalid(errors)) => ValidateReport {
            ok: false,
            lines: errors.0.iter().map(|e| e.summary()).collect(),
        },
        Err(e) => ValidateReport {
            ok: false,
            lines: vec![format!("unreadable {e}")],
        },
    }
}

/// Session workspaces under `root`: `root` itself when it holds a journal,
/// else its immediate subdirectories that do, in name order.
pub fn find_workspaces(root: &Path) -> Result<Vec<PathBuf>> {
    let has_journal = |p: &Path| state_dir(p).join(JOURNAL_DIR).is_dir();
    if has_journal(root) {
        return Ok(vec![root.to_path_buf()]);
    }
    let mut out = Vec::new();
    for entry in std::fs::read_dir(root).with_context(|| format!("reading {}", root.display()))? {
        let p = entry?.path();
        if p.is_dir() && has_journal(&p) {
            out.push(p);
        }
    }
    out.sort();
    Ok(out)
}

/// Study input read directly from client journals. Session and subject ids
/// are the workspace directory names.
pub fn study_from_journals(research_id: &str, workspaces: &[PathBuf]) -> Result<StudyInput> {
    let mut sessions = Vec::new();
    let mut corrupt = 0;
    for ws in workspaces {
        let name = ws
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_else(|| "session".into());
        let outcome = read_journal(&state_dir(ws).join(JOURNAL_DIR))?;
        for c in &outcome.corrupt {
            tracing::warn!("{name}: {}:{} skipped: {}", c.file, c.line, c.reason);
        }
        corrupt += outcome.corrupt.len() as u64;
        sessions.push(SessionInput {
            session_id: name.clone(),
            subject_id: name,
            records: outcome.records,
        });
    }
    Ok(StudyInput {
        research_id: research_id.to_owned(),
        sessions,
        quarantined: corrupt,
    })
}

pub fn summary_of(study: &StudyInput) -> StudySummary {
    let sessions: Vec<SessionRecords> = study
        .sessions
        .iter()
        .map(|s| SessionRecords {
            participant: s.subject_id.clone(),
            records: s.records.clone(),
        })
        .collect();
    study_summary(&sessions)
}

/// Human-readable rendering of a summary.
pub fn summary_table(s: &StudySummary) -> String {
    let mut out = String::new();
    let c = &s.counts;
    let _ = writeln!(out, "participants  {}", c.participants);
    let _ = writeln!(out, "activities    {}", c.activities);
    let _ = writeln!(out, "  actions     {}", c.actions);
    let _ = writeln!(out, "  run/debug   {}", c.run_debug);
    let _ = writeln!(out, "  hotkeys     {}", c.hotkeys);
    let _ = writeln!(out, "  ui          {}", c.ui);
    let _ = writeln!(out, "snapshots     {}", c.snapshots);
    for (title, ranked) in [
        ("top actions", &s.top_actions),
        ("top hotkeys", &s.top_hotkeys),
        ("top tool windows", &s.top_tool_windows),
    ] {
        if ranked.is_empty() {
            continue;
        }
        let _ = writeln!(out, "\n{title}");
        for r in ranked {
            let _ = writeln!(out, "  {:>8}  {}", r.count, r.event_id);
        }
    }
    if !s.focus_time_by_file.is_empty() {
        let _ = writeln!(out, "\nfocus time (s)");
        for (file, ms) in &s.focus_time_by_file {
            let _ = writeln!(out, "  {:>10.1}  {file}", *ms as f64 / 1000.0);
        }
    }
    let a = &s.focus_anomalies;
    if a.total() > 0 {
        let _ = writeln!(
            out,
            "\nfocus anomalies: {} implicit switches, {} unmatched ends, {} open at end",
            a.implicit_switches, a.unmatched_ends, a.open_at_end
        );
    }
    out
}
