use std::collections::BTreeMap;

use chrono::{DateTime, SecondsFormat};

use crate::record::{ActivityCategory, FocusKind, TimestampMs, ToolWindowKind, TrackedRecord};

use super::{Bundle, Table, MAIN_COLUMNS, VERSION};

/// Applied records of one session, in any order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SessionInput {
    pub session_id: String,
    pub subject_id: String,
    pub records: Vec<TrackedRecord>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct StudyInput {
    pub research_id: String,
    pub sessions: Vec<SessionInput>,
    /// Quarantined records, which have no row in the bundle.
    pub quarantined: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ConvertReport {
    pub rows: u64,
    pub code_states: u64,
    pub quarantined_excluded: u64,
}

pub fn event_type(record: &TrackedRecord) -> &'static str {
    match record {
        TrackedRecord::Snapshot(_) => "File.Edit",
        TrackedRecord::Activity(a) => match a.category {
            ActivityCategory::Run => "Run.Program",
            ActivityCategory::Debug => "Debug.Program",
            ActivityCategory::Action => "X-Action",
            ActivityCategory::Hotkey => "X-Hotkey",
            ActivityCategory::Ui => "X-UI",
        },
        TrackedRecord::Focus(f) => match f.kind {
            FocusKind::Open => "File.Open",
            FocusKind::Focus => "File.Focus",
            FocusKind::Unfocus => "X-File.Unfocus",
            FocusKind::Close => "File.Close",
        },
        TrackedRecord::ToolWindow(t) => match t.kind {
            ToolWindowKind::Opened => "X-ToolWindow.Open",
            ToolWindowKind::Closed => "X-ToolWindow.Close",
        },
        TrackedRecord::Survey(_) => "X-Survey",
    }
}

pub fn client_timestamp(ts: TimestampMs) -> String {
    DateTime::from_timestamp_millis(ts)
        .map(|t| t.to_rfc3339_opts(SecondsFormat::Millis, true))
        .unwrap_or_else(|| ts.to_string())
}

fn tool_instances() -> String {
    format!("tracelab {}", env!("CARGO_PKG_VERSION"))
}

/// Convert a study into a bundle. The result depends only on `study`.
pub fn convert(study: &StudyInput) -> (Bundle, ConvertReport) {
    let mut events: Vec<(TimestampMs, &str, u64, usize, usize)> = Vec::new();
    for (si, s) in study.sessions.iter().enumerate() {
        for (ri, r) in s.records.iter().enumerate() {
            events.push((r.timestamp(), s.session_id.as_str(), r.seq(), si, ri));
        }
    }
    events.sort();

    let mut trees: Vec<BTreeMap<String, String>> = vec![BTreeMap::new(); study.sessions.len()];
    let mut current: Vec<Option<String>> = vec![None; study.sessions.len()];
    let mut code_states = BTreeMap::new();
    let mut rows = Vec::with_capacity(events.len());
    let tools = tool_instances();

    for (order, &(ts, session_id, seq, si, ri)) in events.iter().enumerate() {
        let session = &study.sessions[si];
        let record = &session.records[ri];
        let (section, x_event, mode, detail) = match record {
            TrackedRecord::Snapshot(s) => {
                trees[si].insert(s.file.clone(), s.content.clone());
                let id = code_states.len().to_string();
                code_states.insert(id.clone(), trees[si].clone());
                current[si] = Some(id);
                (s.file.clone(), String::new(), s.mode.as_str().to_owned(), String::new())
            }
            TrackedRecord::Activity(a) => (
                String::new(),
                a.event_id.clone(),
                String::new(),
                serde_json::to_string(&a.detail).expect("string map serializes"),
            ),
            TrackedRecord::Focus(f) => (f.file.clone(), String::new(), String::new(), String::new()),
            TrackedRecord::ToolWindow(t) => (String::new(), t.window_id.clone(), String::new(), String::new()),
            TrackedRecord::Survey(s) => (
                String::new(),
                s.survey_id.clone(),
                String::new(),
                serde_json::to_string(&s.answers).expect("answers serialize"),
            ),
        };
        rows.push(vec![
            format!("{session_id}-{seq}"),
            order.to_string(),
            session.subject_id.clone(),
            tools.clone(),
            event_type(record).to_owned(),
            current[si].clone().unwrap_or_default(),
            client_timestamp(ts),
            session_id.to_owned(),
            section,
            x_event,
            mode,
            detail,
        ]);
    }

    let metadata = Table {
        header: vec!["Property".into(), "Value".into()],
        rows: [
            ("Version", VERSION),
            ("IsEventOrderingConsistent", "true"),
            ("EventOrderScope", "Global"),
            ("CodeStateRepresentation", "Directory"),
            ("X-ResearchID", study.research_id.as_str()),
        ]
        .into_iter()
        .map(|(p, v)| vec![p.to_owned(), v.to_owned()])
        .collect(),
    };
    let report = ConvertReport {
        rows: rows.len() as u64,
        code_states: code_states.len() as u64,
        quarantined_excluded: study.quarantined,
    };
    let bundle = Bundle {
        main: Table {
            header: MAIN_COLUMNS.iter().map(|s| s.to_string()).collect(),
            rows,
        },
        metadata,
        code_states,
    };
    (bundle, report)
}
