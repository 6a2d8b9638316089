//! Pure analytics over record streams.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use crate::record::{ActivityCategory, FocusKind, FocusRecord, TimestampMs, ToolWindowKind, TrackedRecord};

/// Number of entries in the summary's rankings.
pub const SUMMARY_TOP_N: usize = 15;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RankedEvent {
    pub event_id: String,
    pub count: u64,
}

fn rank(counts: HashMap<&str, u64>, n: usize) -> Vec<RankedEvent> {
    let mut ranked: Vec<(&str, u64)> = counts.into_iter().collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
    ranked
        .into_iter()
        .take(n)
        .map(|(id, count)| RankedEvent {
            event_id: id.to_owned(),
            count,
        })
        .collect()
}

/// The `n` most frequent event ids of `category`, by count descending and
/// then event id ascending.
pub fn top_n<'a, I>(records: I, category: ActivityCategory, n: usize) -> Vec<RankedEvent>
where
    I: IntoIterator<Item = &'a TrackedRecord>,
{
    let mut counts: HashMap<&str, u64> = HashMap::new();
    for r in records {
        if let TrackedRecord::Activity(a) = r {
            if a.category == category {
                *counts.entry(a.event_id.as_str()).or_default() += 1;
            }
        }
    }
    rank(counts, n)
}

/// Tool windows ranked by how often they were opened.
pub fn top_tool_windows<'a, I>(records: I, n: usize) -> Vec<RankedEvent>
where
    I: IntoIterator<Item = &'a TrackedRecord>,
{
    let mut counts: HashMap<&str, u64> = HashMap::new();
    for r in records {
        if let TrackedRecord::ToolWindow(t) = r {
            if t.kind == ToolWindowKind::Opened {
                *counts.entry(t.window_id.as_str()).or_default() += 1;
            }
        }
    }
    rank(counts, n)
}

/// Half-open span `[start, end)` during which `file` held focus.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FocusInterval {
    pub file: String,
    pub start: TimestampMs,
    pub end: TimestampMs,
}

impl FocusInterval {
    pub fn duration(&self) -> i64 {
        self.end - self.start
    }
}

/// Irregularities resolved while pairing focus events.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FocusAnomalies {
    /// A focus arrived while another file was still focused.
    pub implicit_switches: u64,
    /// An unfocus or close named a file that held no open interval.
    pub unmatched_ends: u64,
    /// An interval was still open at the end of the stream.
    pub open_at_end: u64,
}

impl FocusAnomalies {
    pub fn total(&self) -> u64 {
        self.implicit_switches + self.unmatched_ends + self.open_at_end
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FocusReport {
    pub intervals: Vec<FocusInterval>,
    pub anomalies: FocusAnomalies,
}

/// Pair one session's focus records (in seq order) into intervals.
///
/// Focus is exclusive: focusing a file ends the interval of whichever file
/// was focused before. `open` alone starts nothing. Refocusing the file that
/// already has focus continues its interval.
pub fn focus_intervals<'a, I>(records: I) -> FocusReport
where
    I: IntoIterator<Item = &'a FocusRecord>,
{
    let mut report = FocusReport::default();
    let mut current: Option<(&str, TimestampMs)> = None;
    let mut last_ts = None;
    let close = |file: &str, start: TimestampMs, at: TimestampMs, out: &mut Vec<FocusInterval>| {
        out.push(FocusInterval {
            file: file.to_owned(),
            start,
            end: at.max(start),
        });
    };
    for r in records {
        last_ts = Some(r.timestamp);
        match r.kind {
            FocusKind::Open => {}
            FocusKind::Focus => match current {
                Some((f, _)) if f == r.file => {}
                Some((f, start)) => {
                    report.anomalies.implicit_switches += 1;
                    close(f, start, r.timestamp, &mut report.intervals);
                    current = Some((&r.file, r.timestamp));
                }
                None => current = Some((&r.file, r.timestamp)),
            },
            FocusKind::Unfocus | FocusKind::Close => match current {
                Some((f, start)) if f == r.file => {
                    close(f, start, r.timestamp, &mut report.intervals);
                    current = None;
                }
                _ => report.anomalies.unmatched_ends += 1,
            },
        }
    }
    if let (Some((f, start)), Some(end)) = (current, last_ts) {
        report.anomalies.open_at_end += 1;
        close(f, start, end, &mut report.intervals);
    }
    report
}

/// Total focused milliseconds per file.
pub fn focus_time_by_file(intervals: &[FocusInterval]) -> BTreeMap<String, i64> {
    let mut out = BTreeMap::new();
    for i in intervals {
        *out.entry(i.file.clone()).or_default() += i.duration();
    }
    out
}

/// Record counts of a study. `activities` is the sum of the four activity
/// subcategories.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SummaryCounts {
    pub participants: u64,
    pub activities: u64,
    pub actions: u64,
    pub run_debug: u64,
    pub hotkeys: u64,
    pub ui: u64,
    pub snapshots: u64,
}

/// Count records tagged with the participant they belong to.
pub fn summary_counts<'a, I>(records: I) -> SummaryCounts
where
    I: IntoIterator<Item = (&'a str, &'a TrackedRecord)>,
{
    let mut c = SummaryCounts::default();
    let mut participants = BTreeSet::new();
    for (participant, r) in records {
        participants.insert(participant);
        match r {
            TrackedRecord::Snapshot(_) => c.snapshots += 1,
            TrackedRecord::Activity(a) => {
                c.activities += 1;
                match a.category {
                    ActivityCategory::Action => c.actions += 1,
                    ActivityCategory::Run | ActivityCategory::Debug => c.run_debug += 1,
                    ActivityCategory::Hotkey => c.hotkeys += 1,
                    ActivityCategory::Ui => c.ui += 1,
                }
            }
            _ => {}
        }
    }
    c.participants = participants.len() as u64;
    c
}

/// One session's records, in seq order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SessionRecords {
    pub participant: String,
    pub records: Vec<TrackedRecord>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StudySummary {
    pub participants: u64,
    pub events_by_category: BTreeMap<String, u64>,
    pub snapshots: u64,
    pub counts: SummaryCounts,
    pub top_actions: Vec<RankedEvent>,
    pub top_hotkeys: Vec<RankedEvent>,
    pub top_tool_windows: Vec<RankedEvent>,
    pub focus_time_by_file: BTreeMap<String, i64>,
    pub focus_anomalies: FocusAnomalies,
}

/// Key of `record` in [`StudySummary::events_by_category`].
pub fn category_key(record: &TrackedRecord) -> &'static str {
    match record {
        TrackedRecord::Activity(a) => a.category.as_str(),
        other => other.kind().as_str(),
    }
}

pub fn study_summary(sessions: &[SessionRecords]) -> StudySummary {
    let all = || sessions.iter().flat_map(|s| s.records.iter());
    let counts = summary_counts(
        sessions
            .iter()
            .flat_map(|s| s.records.iter().map(move |r| (s.participant.as_str(), r))),
    );
    let mut events_by_category = BTreeMap::new();
    for r in all() {
        *events_by_category.entry(category_key(r).to_owned()).or_default() += 1;
    }
    let mut focus_time = BTreeMap::new();
    let mut anomalies = FocusAnomalies::default();
    for s in sessions {
        let focus = s.records.iter().filter_map(|r| match r {
            TrackedRecord::Focus(f) => Some(f),
            _ => None,
        });
        let report = focus_intervals(focus);
        for (file, ms) in focus_time_by_file(&report.intervals) {
            *focus_time.entry(file).or_default() += ms;
        }
        anomalies.implicit_switches += report.anomalies.implicit_switches;
        anomalies.unmatched_ends += report.anomalies.unmatched_ends;
        anomalies.open_at_end += report.anomalies.open_at_end;
    }
    StudySummary {
        participants: counts.participants,
        events_by_category,
        snapshots: counts.snapshots,
        counts,
        top_actions: top_n(all(), ActivityCategory::Action, SUMMARY_TOP_N),
        top_hotkeys: top_n(all(), ActivityCategory::Hotkey, SUMMARY_TOP_N),
        top_tool_windows: top_tool_windows(all(), SUMMARY_TOP_N),
        focus_time_by_file: focus_time,
        focus_anomalies: anomalies,
    }
}
