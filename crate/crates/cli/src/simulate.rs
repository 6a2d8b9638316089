//! Deterministic synthetic sessions.
//!
//! Each session walks a random legal path through the scenario, edits the
//! files of every completed task and emits activity, focus and tool-window
//! events on a virtual clock. Records go through the same recorder, filter
//! and snapshot tracker as a live session, so the output is what a real
//! client would have journaled. Nothing depends on the wall clock, so the
//! same seed yields byte-identical workspaces.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use tracelab_client::daemon::{state_dir, JOURNAL_DIR, STATE_FILE};
use tracelab_core::capture::{Recorder, SnapshotTracker};
use tracelab_core::config::{resolve_task_files, QuestionKind, ScenarioStep, StudyConfig, SurveySpec};
use tracelab_core::journal::Journal;
use tracelab_core::record::{
    content_digest, ActivityCategory, ActivityRecord, AnswerValue, FocusKind, FocusRecord, SnapshotRecord,
    SurveyResponseRecord, TimestampMs, ToolWindowKind, ToolWindowRecord, TrackedRecord,
};
use tracelab_core::scenario::{save_state, ScenarioState, StepAction};

pub const ACTIONS_FILE: &str = "actions.jsonl";
/// 2024-01-01T00:00:00Z; session `i` starts one day after session `i - 1`.
const EPOCH: TimestampMs = 1_704_067_200_000;
const DAY: TimestampMs = 86_400_000;

const ACTION_IDS: &[&str] = &[
    "EditorBackSpace",
    "EditorEnter",
    "EditorCopy",
    "EditorPaste",
    "CommentByLineComment",
    "ReformatCode",
    "$Undo",
    "GotoDeclaration",
];
const HOTKEY_IDS: &[&str] = &["ctrl+S", "ctrl+Z", "ctrl+D", "ctrl+alt+L", "ctrl+shift+F10", "shift+F6"];
const RUN_IDS: &[&str] = &["Run", "RunTests", "RunConfiguration"];
const DEBUG_IDS: &[&str] = &["Debug", "ToggleLineBreakpoint"];
const UI_IDS: &[&str] = &["ProjectViewClick", "TabSwitch", "ToolbarClick", "EditorScroll", "TaskPanelClick"];
const TOOL_WINDOWS: &[&str] = &["Project", "Run", "Terminal", "Problems"];

/// Shape of the generated traffic.
#[derive(Debug, Clone, PartialEq)]
pub struct Profile {
    /// Inclusive range of edits per task file.
    pub edits_per_file: (u32, u32),
    /// Inclusive range of activity events between two edits.
    pub activities_per_edit: (u32, u32),
    /// Relative weight of each activity category.
    pub weights: Vec<(ActivityCategory, u32)>,
    /// Inclusive range of the pause between two edits, in ms.
    pub edit_gap_ms: (i64, i64),
    pub tool_window_prob: f64,
    pub pause_prob: f64,
}

impl Profile {
    pub fn balanced() -> Self {
        Profile {
            edits_per_file: (3, 8),
            activities_per_edit: (1, 4),
            weights: vec![
                (ActivityCategory::Action, 40),
                (ActivityCategory::Ui, 25),
                (ActivityCategory::Hotkey, 20),
                (ActivityCategory::Run, 10),
                (ActivityCategory::Debug, 5),
            ],
            edit_gap_ms: (30, 1500),
            tool_window_prob: 0.1,
            pause_prob: 0.1,
        }
    }

    /// Category mix of a large in-editor course: activities outnumber
    /// snapshots about 4.6 to 1, hotkeys are about 3.6 % of activities and
    /// run or debug invocations about 0.6 %.
    pub fn course() -> Self {
        Profile {
            edits_per_file: (6, 14),
            activities_per_edit: (4, 6),
            weights: vec![
                (ActivityCategory::Action, 560),
                (ActivityCategory::Ui, 400),
                (ActivityCategory::Hotkey, 37),
                (ActivityCategory::Run, 4),
                (ActivityCategory::Debug, 2),
            ],
            edit_gap_ms: (30, 1500),
            tool_window_prob: 0.05,
            pause_prob: 0.05,
        }
    }

    pub fn by_name(name: &str) -> Option<Self> {
        match name {
            "balanced" => Some(Self::balanced()),
            "course" => Some(Self::course()),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
struct LoggedAction<'a> {
    timestamp: TimestampMs,
    #[serde(flatten)]
    action: &'a StepAction,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct SessionSummary {
    pub name: String,
    pub workspace: PathBuf,
    pub records: u64,
    pub actions: usize,
}

pub fn session_name(index: usize) -> String {
    format!("session-{:03}", index + 1)
}

/// Derive the seed of session `index` from the run seed.
fn session_seed(seed: u64, index: usize) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64 + 1);
    rng.random()
}

struct Sim<'a> {
    config: &'a StudyConfig,
    profile: &'a Profile,
    rng: ChaCha8Rng,
    now: TimestampMs,
    files: BTreeMap<String, Vec<u8>>,
    edits: BTreeMap<String, u32>,
    tracker: SnapshotTracker,
    recorder: Recorder<Journal>,
    open_windows: BTreeSet<&'static str>,
}

impl Sim<'_> {
    fn record(&mut self, r: TrackedRecord) -> Result<()> {
        self.recorder.record(r)?;
        Ok(())
    }

    fn snapshots(&mut self, snaps: Vec<SnapshotRecord>) -> Result<()> {
        for s in snaps {
            self.record(s.into())?;
        }
        Ok(())
    }

    /// Move the clock to `t`, firing every debounce deadline on the way.
    fn advance_to(&mut self, t: TimestampMs) -> Result<()> {
        while let Some(d) = self.tracker.next_deadline() {
            if d > t {
                break;
            }
            self.now = self.now.max(d);
            let snaps = self.tracker.poll(&self.files, self.now);
            self.snapshots(snaps)?;
        }
        self.now = self.now.max(t);
        Ok(())
    }

    fn wait(&mut self, lo: i64, hi: i64) -> Result<()> {
        let t = self.now + self.rng.random_range(lo..=hi);
        self.advance_to(t)
    }

    fn category(&mut self) -> ActivityCategory {
        let total: u32 = self.profile.weights.iter().map(|(_, w)| w).sum();
        let mut pick = self.rng.random_range(0..total.max(1));
        for &(c, w) in &self.profile.weights {
            if pick < w {
                return c;
            }
            pick -= w;
        }
        ActivityCategory::Action
    }

    fn activity(&mut self) -> Result<()> {
        let category = self.category();
        let ids = match category {
            ActivityCategory::Action => ACTION_IDS,
            ActivityCategory::Hotkey => HOTKEY_IDS,
            ActivityCategory::Run => RUN_IDS,
            ActivityCategory::Debug => DEBUG_IDS,
            ActivityCategory::Ui => UI_IDS,
        };
        let event_id = ids.choose(&mut self.rng).expect("non-empty").to_string();
        let mut detail = BTreeMap::new();
        if category == ActivityCategory::Hotkey {
            detail.insert("shortcut".into(), event_id.clone());
        }
        let r = ActivityRecord {
            seq: 0,
            timestamp: self.now,
            category,
            event_id,
            detail,
        };
        self.record(r.into())
    }

    fn tool_window(&mut self) -> Result<()> {
        let id = *TOOL_WINDOWS.choose(&mut self.rng).expect("non-empty");
        let kind = if self.open_windows.remove(id) {
            ToolWindowKind::Closed
        } else {
            self.open_windows.insert(id);
            ToolWindowKind::Opened
        };
        let r = ToolWindowRecord {
            seq: 0,
            timestamp: self.now,
            window_id: id.into(),
            kind,
        };
        self.record(r.into())
    }

    fn focus(&mut self, file: &str, kind: FocusKind) -> Result<()> {
        let r = FocusRecord {
            seq: 0,
            timestamp: self.now,
            file: file.into(),
            kind,
        };
        self.record(r.into())
    }

    fn edit(&mut self, file: &str) -> Result<()> {
        let n = self.edits.entry(file.to_owned()).or_insert(0);
        *n += 1;
        let k = *n;
        let content = self.files.entry(file.to_owned()).or_default();
        if !content.is_empty() && !content.ends_with(b"\n") {
            content.push(b'\n');
        }
        if k.is_multiple_of(4) {
            // revise the previous line instead of adding one
            if let Some(pos) = content[..content.len().saturating_sub(1)].iter().rposition(|&b| b == b'\n') {
                content.truncate(pos + 1);
            } else {
                content.clear();
            }
        }
        let x: u32 = self.rng.random_range(0..100);
        writeln!(content, "fun step{k}(x: Int): Int = x * {x} + {k}").expect("writing to a Vec");
        let snaps = self.tracker.on_change(file, &self.files, self.now);
        self.snapshots(snaps)
    }

    fn work_on(&mut self, task: &str) -> Result<()> {
        let paths: Vec<String> = self.config.tasks[task].files.iter().map(|f| f.relative_path.clone()).collect();
        for file in paths {
            self.wait(200, 3000)?;
            self.focus(&file, FocusKind::Focus)?;
            let (lo, hi) = self.profile.edits_per_file;
            for _ in 0..self.rng.random_range(lo..=hi) {
                let (glo, ghi) = self.profile.edit_gap_ms;
                self.wait(glo, ghi)?;
                self.edit(&file)?;
                let (alo, ahi) = self.profile.activities_per_edit;
                for _ in 0..self.rng.random_range(alo..=ahi) {
                    self.wait(20, 400)?;
                    self.activity()?;
                }
                if self.rng.random_bool(self.profile.tool_window_prob) {
                    self.tool_window()?;
                }
            }
            self.wait(100, 2000)?;
            self.focus(&file, FocusKind::Unfocus)?;
        }
        Ok(())
    }

    fn answers(&mut self, survey: &SurveySpec) -> BTreeMap<String, AnswerValue> {
        let mut out = BTreeMap::new();
        for q in &survey.questions {
            if !q.required && !self.rng.random_bool(0.5) {
                continue;
            }
            let v = match q.kind {
                QuestionKind::OpenEnded => AnswerValue::Text(format!("answer to {}", q.id)),
                QuestionKind::SingleChoice => AnswerValue::Text(q.options.choose(&mut self.rng).expect("options").clone()),
                QuestionKind::MultipleChoice => {
                    let mut picked: Vec<String> =
                        q.options.iter().filter(|_| self.rng.random_bool(0.5)).cloned().collect();
                    if picked.is_empty() {
                        picked.push(q.options[0].clone());
                    }
                    AnswerValue::Choices(picked)
                }
            };
            out.insert(q.id.clone(), v);
        }
        out
    }
}

/// Generate one session into `workspace`, which must not exist yet.
pub fn simulate_session(
    config: &StudyConfig,
    profile: &Profile,
    workspace: &Path,
    seed: u64,
    index: usize,
) -> Result<SessionSummary> {
    std::fs::create_dir_all(workspace).with_context(|| format!("creating {}", workspace.display()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let start = EPOCH + index as i64 * DAY + rng.random_range(0..3_600_000);
    let mut log: Vec<(TimestampMs, StepAction)> = Vec::new();

    let mut state = ScenarioState::init(config).advance(&StepAction::GrantConsent, config, start)?;
    log.push((start, StepAction::GrantConsent));

    for task in config.tasks.values() {
        resolve_task_files(task, workspace)?;
    }
    let tracked = config.tracked_files();
    let mut files = BTreeMap::new();
    for f in &tracked {
        files.insert(f.clone(), std::fs::read(workspace.join(f))?);
    }
    let dir = state_dir(workspace);
    let journal = Journal::open(&dir.join(JOURNAL_DIR))?;
    let mut recorder = Recorder::new(journal, config.activity_policy.clone(), tracked.iter().cloned().collect());
    recorder.grant_consent();
    let tracker = SnapshotTracker::new(config.tracking_policy, tracked.clone());

    let mut sim = Sim {
        config,
        profile,
        rng,
        now: start,
        files,
        edits: BTreeMap::new(),
        tracker,
        recorder,
        open_windows: BTreeSet::new(),
    };
    let snaps = sim.tracker.start(&sim.files, sim.now);
    sim.snapshots(snaps)?;

    while !state.finished {
        let options: Vec<StepAction> = state
            .available_actions(config)
            .into_iter()
            .filter(|a| !matches!(a, StepAction::Pause | StepAction::Submit))
            .collect();
        let mut action = options.choose(&mut sim.rng).cloned().context("scenario has no way forward")?;
        let mut survey = None;
        match &action {
            StepAction::CompleteTask { task } => sim.work_on(task)?,
            StepAction::AnswerSurvey { .. } => {
                sim.wait(5_000, 60_000)?;
                let Some(ScenarioStep::Survey(id)) = state.current_step(config) else {
                    unreachable!("answers are only offered at a survey step");
                };
                action = StepAction::AnswerSurvey {
                    answers: sim.answers(&config.surveys[id]),
                };
                survey = Some(id.clone());
            }
            _ => sim.wait(1_000, 10_000)?,
        }
        let next = state.advance(&action, config, sim.now)?;
        if let Some(id) = survey {
            let r = SurveyResponseRecord {
                seq: 0,
                timestamp: sim.now,
                answers: next.survey_answers[&id].clone(),
                survey_id: id,
            };
            sim.record(r.into())?;
        }
        log.push((sim.now, action));
        state = next;
        if !state.finished && sim.rng.random_bool(sim.profile.pause_prob) {
            sim.wait(60_000, 600_000)?;
            state = state.advance(&StepAction::Pause, config, sim.now)?;
            log.push((sim.now, StepAction::Pause));
        }
    }
    // drain pending debounces, then the final capture
    if let Some(last) = sim.tracker.next_deadline() {
        sim.advance_to(last)?;
    }
    let snaps = sim.tracker.finish(&sim.files, sim.now);
    sim.snapshots(snaps)?;
    sim.wait(1_000, 5_000)?;
    state = state.advance(&StepAction::Submit, config, sim.now)?;
    log.push((sim.now, StepAction::Submit));

    for (rel, bytes) in &sim.files {
        std::fs::write(workspace.join(rel), bytes)?;
    }
    std::fs::write(dir.join(STATE_FILE), save_state(&state))?;
    let mut actions = Vec::new();
    for (timestamp, action) in &log {
        serde_json::to_writer(&mut actions, &LoggedAction { timestamp: *timestamp, action })?;
        actions.push(b'\n');
    }
    std::fs::write(workspace.join(ACTIONS_FILE), actions)?;

    Ok(SessionSummary {
        name: session_name(index),
        workspace: workspace.to_path_buf(),
        records: sim.recorder.sink().last_seq(),
        actions: log.len(),
    })
}

/// Generate `sessions` workspaces under `out`.
pub fn simulate(
    config: &StudyConfig,
    profile: &Profile,
    out: &Path,
    sessions: usize,
    seed: u64,
) -> Result<Vec<SessionSummary>> {
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    (0..sessions)
        .map(|i| simulate_session(config, profile, &out.join(session_name(i)), session_seed(seed, i), i))
        .collect()
}

/// Digest over every file below `root`, in path order.
pub fn tree_digest(root: &Path) -> Result<String> {
    fn walk(dir: &Path, out: &mut Vec<PathBuf>) -> std::io::Result<()> {
        for entry in std::fs::read_dir(dir)? {
            let p = entry?.path();
            if p.is_dir() {
                walk(&p, out)?;
            } else {
                out.push(p);
            }
        }
        Ok(())
    }
    let mut files = Vec::new();
    if root.exists() {
        walk(root, &mut files)?;
    }
    files.sort();
    let mut buf = Vec::new();
    for f in files {
        let rel = f.strip_prefix(root).unwrap_or(&f).to_string_lossy().replace('\\', "/");
        buf.extend_from_slice(rel.as_bytes());
        buf.push(0);
        buf.extend_from_slice(content_digest(&std::fs::read(&f)?).as_bytes());
        buf.push(b'\n');
    }
    Ok(content_digest(&buf))
}
