//! Per-participant session daemon.
//!
//! Owns the scenario state, the journal and the capture thread, and exposes
//! them to the webview and editor adapters on a loopback HTTP API. Nothing is
//! written to disk before consent is granted.

use std::collections::BTreeMap;
use std::future::Future;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, MutexGuard};
use std::time::Duration;

use axum::body::Bytes;
use axum::extract::{Path as UrlPath, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use serde_json::json;
use tokio::net::TcpListener;
use tokio::sync::watch;
use tracelab_core::capture::{watch as start_watch, AdapterEvent, FilterReason, Outcome, Recorder, WatchError, WatcherHandle};
use tracelab_core::config::{resolve_task_files, ResolveError, ScenarioStep, StudyConfig, SurveySpec, TaskSpec};
use tracelab_core::journal::{Journal, JournalError, JournalOptions};
use tracelab_core::record::{now_ms, AnswerValue, SurveyResponseRecord, TrackedRecord};
use tracelab_core::scenario::{restore_state, save_state, ScenarioError, ScenarioState, StepAction};

use crate::sync::{collect_attachments, FlushReport, SyncConfig, SyncError, Syncer, Transport};

/// Client state directory inside the workspace.
pub const STATE_DIR: &str = ".tracelab";
pub const JOURNAL_DIR: &str = "journal";
pub const STATE_FILE: &str = "state.json";
pub const SESSION_FILE: &str = "session.json";

pub fn state_dir(workspace: &Path) -> PathBuf {
    workspace.join(STATE_DIR)
}

#[derive(Debug, thiserror::Error)]
pub enum DaemonError {
    #[error(transparent)]
    Scenario(#[from] ScenarioError),
    #[error(transparent)]
    Journal(#[from] JournalError),
    #[error(transparent)]
    Resolve(#[from] ResolveError),
    #[error(transparent)]
    Watch(#[from] WatchError),
    #[error(transparent)]
    Sync(#[from] SyncError),
    #[error("state file {path}: {message}")]
    StateFile { path: PathBuf, message: String },
    #[error("survey `{0}` is not the active step")]
    NotActiveSurvey(String),
}

#[derive(Debug, Clone)]
pub struct DaemonOptions {
    pub workspace: PathBuf,
    pub study: StudyConfig,
    pub sync: SyncConfig,
    pub journal: JournalOptions,
    /// Poll file digests instead of using native notifications.
    pub force_polling: bool,
    /// Periodic upload in addition to pause, submit and shutdown.
    pub flush_every: Option<Duration>,
}

impl DaemonOptions {
    pub fn new(workspace: &Path, study: StudyConfig) -> Self {
        DaemonOptions {
            sync: SyncConfig::new(study.research_id()),
            workspace: workspace.to_path_buf(),
            study,
            journal: JournalOptions::default(),
            force_polling: false,
            flush_every: None,
        }
    }
}

struct Active {
    recorder: Arc<Mutex<Recorder<Journal>>>,
    watcher: Option<WatcherHandle>,
}

struct Core {
    state: ScenarioState,
    active: Option<Active>,
}

struct Inner {
    opts: DaemonOptions,
    transport: Arc<dyn Transport>,
    core: Mutex<Core>,
    /// Created on consent; serializes uploads.
    syncer: tokio::sync::Mutex<Option<Syncer>>,
    exit: watch::Sender<bool>,
}

/// What an adapter event turned into.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum EventOutcome {
    Accepted(u64),
    Filtered(FilterReason),
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub struct StepView {
    pub index: usize,
    pub kind: &'static str,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub tasks: Vec<TaskSpec>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub survey: Option<SurveySpec>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub text: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub struct ScenarioView {
    pub state: ScenarioState,
    pub step: Option<StepView>,
    pub available_actions: Vec<StepAction>,
    pub total_steps: usize,
}

/// Result of a flush triggered by a step action.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub struct FlushStatus {
    pub report: FlushReport,
    /// Set when records stayed pending.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl FlushStatus {
    fn from_result(r: Result<FlushReport, SyncError>) -> Self {
        match r {
            Ok(report) => FlushStatus { report, error: None },
            Err(e) => {
                let report = match &e {
                    SyncError::ServerUnreachable { report } | SyncError::Rejected { report, .. } => *report,
                    _ => FlushReport::default(),
                };
                tracing::warn!("flush incomplete: {e}");
                FlushStatus {
                    report,
                    error: Some(e.to_string()),
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub struct AdvanceOutcome {
    pub view: ScenarioView,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub flush: Option<FlushStatus>,
}

#[derive(Clone)]
pub struct Daemon {
    inner: Arc<Inner>,
}

fn write_atomic(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    let tmp = path.with_extension("tmp");
    let mut f = std::fs::File::create(&tmp)?;
    f.write_all(bytes)?;
    f.sync_all()?;
    std::fs::rename(&tmp, path)
}

impl Daemon {
    /// Start or resume the session in `opts.workspace`.
    pub fn start(opts: DaemonOptions, transport: Arc<dyn Transport>) -> Result<Self, DaemonError> {
        let state_path = state_dir(&opts.workspace).join(STATE_FILE);
        let state = match std::fs::read(&state_path) {
            Ok(bytes) => {
                let s = restore_state(&bytes)?;
                s.check(&opts.study)?;
                s
            }
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => ScenarioState::init(&opts.study),
            Err(e) => {
                return Err(DaemonError::StateFile {
                    path: state_path,
                    message: e.to_string(),
                })
            }
        };
        let (exit, _) = watch::channel(false);
        let daemon = Daemon {
            inner: Arc::new(Inner {
                opts,
                transport,
                core: Mutex::new(Core { state, active: None }),
                syncer: tokio::sync::Mutex::new(None),
                exit,
            }),
        };
        let mut core = daemon.core();
        if core.state.consent.is_granted() {
            daemon.activate(&mut core)?;
        }
        drop(core);
        Ok(daemon)
    }

    fn core(&self) -> MutexGuard<'_, Core> {
        self.inner.core.lock().unwrap_or_else(|p| p.into_inner())
    }

    fn opts(&self) -> &DaemonOptions {
        &self.inner.opts
    }

    pub fn workspace(&self) -> &Path {
        &self.opts().workspace
    }

    /// Resolves to `true` once the session should end (consent declined).
    pub fn exit_signal(&self) -> watch::Receiver<bool> {
        self.inner.exit.subscribe()
    }

    fn start_watcher(&self, recorder: &Arc<Mutex<Recorder<Journal>>>) -> Result<WatcherHandle, DaemonError> {
        let seed = recorder
            .lock()
            .unwrap_or_else(|p| p.into_inner())
            .sink()
            .snapshot_digests()?;
        let sink_rec = recorder.clone();
        let handle = start_watch(
            &self.opts().workspace,
            &self.opts().study.tracked_files(),
            self.opts().study.tracking_policy,
            seed,
            self.opts().force_polling,
            move |snap| {
                let mut r = sink_rec.lock().unwrap_or_else(|p| p.into_inner());
                if let Err(e) = r.record(snap.into()) {
                    tracing::error!("snapshot not journaled: {e}");
                }
            },
        )?;
        Ok(handle)
    }

    fn activate(&self, core: &mut Core) -> Result<(), DaemonError> {
        if core.active.is_some() {
            return Ok(());
        }
        let ws = &self.opts().workspace;
        let dir = state_dir(ws);
        std::fs::create_dir_all(&dir).map_err(|e| DaemonError::StateFile {
            path: dir.clone(),
            message: e.to_string(),
        })?;
        for task in self.opts().study.tasks.values() {
            resolve_task_files(task, ws)?;
        }
        let journal = Journal::open_with(&dir.join(JOURNAL_DIR), self.opts().journal)?;
        let allowed = self.opts().study.tracked_files().into_iter().collect();
        let mut recorder = Recorder::new(journal, self.opts().study.activity_policy.clone(), allowed);
        recorder.grant_consent();
        let recorder = Arc::new(Mutex::new(recorder));
        let watcher = self.start_watcher(&recorder)?;
        core.active = Some(Active {
            recorder,
            watcher: Some(watcher),
        });
        Ok(())
    }

    fn persist(&self, state: &ScenarioState) -> Result<(), DaemonError> {
        let path = state_dir(&self.opts().workspace).join(STATE_FILE);
        write_atomic(&path, &save_state(state)).map_err(|e| DaemonError::StateFile {
            path,
            message: e.to_string(),
        })
    }

    /// Take a final capture of every tracked file, then resume watching.
    fn recapture(&self) -> Result<(), DaemonError> {
        let mut core = self.core();
        let Some(active) = core.active.as_mut() else {
            return Ok(());
        };
        if let Some(w) = active.watcher.take() {
            w.stop();
        }
        active.watcher = Some(self.start_watcher(&active.recorder.clone())?);
        Ok(())
    }

    /// Journal an adapter event.
    pub fn post_event(&self, event: AdapterEvent) -> Result<EventOutcome, DaemonError> {
        let record = match event.into_record(now_ms()) {
            Ok(r) => r,
            Err(e) => return Ok(EventOutcome::Invalid(e.to_string())),
        };
        let recorder = match &self.core().active {
            Some(a) => a.recorder.clone(),
            None => return Ok(EventOutcome::Filtered(FilterReason::NoConsent)),
        };
        let outcome = recorder.lock().unwrap_or_else(|p| p.into_inner()).record(record)?;
        Ok(match outcome {
            Outcome::Accepted(seq) => EventOutcome::Accepted(seq),
            Outcome::Filtered(r) => EventOutcome::Filtered(r),
        })
    }

    pub fn view(&self) -> ScenarioView {
        let core = self.core();
        self.view_of(&core.state)
    }

    fn view_of(&self, state: &ScenarioState) -> ScenarioView {
        let study = &self.opts().study;
        let step = state.current_step(study).map(|s| {
            let tasks = s.task_ids().iter().filter_map(|id| study.tasks.get(id).cloned()).collect();
            StepView {
                index: state.cursor,
                kind: s.kind_name(),
                tasks,
                survey: match s {
                    ScenarioStep::Survey(id) => study.surveys.get(id).cloned(),
                    _ => None,
                },
                text: match s {
                    ScenarioStep::Info(t) => Some(t.clone()),
                    _ => None,
                },
            }
        });
        ScenarioView {
            state: state.clone(),
            step,
            available_actions: state.available_actions(study),
            total_steps: study.scenario.steps.len(),
        }
    }

    /// Apply a step action. Pause and submit upload pending records; submit
    /// also uploads the third-party files.
    pub async fn advance(&self, action: StepAction) -> Result<AdvanceOutcome, DaemonError> {
        let view = {
            let mut core = self.core();
            let next = core.state.advance(&action, &self.opts().study, now_ms())?;
            match &action {
                StepAction::DeclineConsent => {
                    core.state = next;
                    let _ = self.inner.exit.send(true);
                    return Ok(AdvanceOutcome {
                        view: self.view_of(&core.state),
                        flush: None,
                    });
                }
                StepAction::GrantConsent => self.activate(&mut core)?,
                StepAction::AnswerSurvey { .. } => {
                    if let Some(ScenarioStep::Survey(id)) = core.state.current_step(&self.opts().study) {
                        let answers = next.survey_answers.get(id).cloned().unwrap_or_default();
                        let record = SurveyResponseRecord {
                            seq: 0,
                            timestamp: now_ms(),
                            survey_id: id.clone(),
                            answers,
                        };
                        if let Some(a) = &core.active {
                            a.recorder
                                .lock()
                                .unwrap_or_else(|p| p.into_inner())
                                .record(TrackedRecord::Survey(record))?;
                        }
                    }
                }
                _ => {}
            }
            self.persist(&next)?;
            core.state = next;
            self.view_of(&core.state)
        };
        let flush = match action {
            StepAction::Pause => Some(self.flush(false).await),
            StepAction::Submit => Some(self.flush(true).await),
            _ => None,
        };
        Ok(AdvanceOutcome {
            view,
            flush: flush.map(FlushStatus::from_result),
        })
    }

    /// Answer the survey `survey_id`, which must be the active step.
    pub async fn answer_survey(
        &self,
        survey_id: &str,
        answers: BTreeMap<String, AnswerValue>,
    ) -> Result<AdvanceOutcome, DaemonError> {
        let active = matches!(
            self.core().state.current_step(&self.opts().study),
            Some(ScenarioStep::Survey(id)) if id == survey_id
        );
        if !active {
            return Err(DaemonError::NotActiveSurvey(survey_id.to_owned()));
        }
        self.advance(StepAction::AnswerSurvey { answers }).await
    }

    /// Capture the latest file contents and upload pending records.
    pub async fn flush(&self, with_attachments: bool) -> Result<FlushReport, SyncError> {
        let (recorder, consent) = {
            let core = self.core();
            match &core.active {
                Some(a) => (a.recorder.clone(), core.state.consent.clone()),
                None => return Err(SyncError::ConsentMissing),
            }
        };
        if let Err(e) = self.recapture() {
            tracing::warn!("final capture before flush failed: {e}");
        }
        let attachments = if with_attachments {
            collect_attachments(&self.opts().workspace, &self.opts().study.metadata.third_party_files)
        } else {
            Vec::new()
        };
        let mut guard = self.inner.syncer.lock().await;
        if guard.is_none() {
            let path = state_dir(&self.opts().workspace).join(SESSION_FILE);
            *guard = Some(Syncer::new(self.inner.transport.clone(), self.opts().sync.clone(), Some(path))?);
        }
        let syncer = guard.as_mut().expect("initialized above");
        syncer.flush(recorder.as_ref(), &consent, attachments).await
    }

    /// Stop capture after a last snapshot and upload what is pending.
    pub async fn shutdown(&self) -> Option<FlushStatus> {
        let active = {
            let mut core = self.core();
            core.active.as_mut().and_then(|a| a.watcher.take())
        };
        let watcher = active?;
        watcher.stop();
        let consent_granted = self.core().state.consent.is_granted();
        if !consent_granted {
            return None;
        }
        let (recorder, consent) = {
            let core = self.core();
            let a = core.active.as_ref()?;
            (a.recorder.clone(), core.state.consent.clone())
        };
        let mut guard = self.inner.syncer.lock().await;
        if guard.is_none() {
            let path = state_dir(&self.opts().workspace).join(SESSION_FILE);
            match Syncer::new(self.inner.transport.clone(), self.opts().sync.clone(), Some(path)) {
                Ok(s) => *guard = Some(s),
                Err(e) => return Some(FlushStatus::from_result(Err(e))),
            }
        }
        let syncer = guard.as_mut().expect("initialized above");
        Some(FlushStatus::from_result(syncer.flush(recorder.as_ref(), &consent, Vec::new()).await))
    }

    /// Highest seq journaled so far, or `None` before consent.
    pub fn last_seq(&self) -> Option<u64> {
        let core = self.core();
        let a = core.active.as_ref()?;
        let seq = a.recorder.lock().unwrap_or_else(|p| p.into_inner()).sink().last_seq();
        Some(seq)
    }

    /// Digests of batch bodies acknowledged by the server this run.
    pub async fn sent_digests(&self) -> Vec<String> {
        self.inner
            .syncer
            .lock()
            .await
            .as_ref()
            .map(|s| s.sent_digests.clone())
            .unwrap_or_default()
    }
}

fn reply(status: StatusCode, body: serde_json::Value) -> Response {
    (status, Json(body)).into_response()
}

fn error_reply(e: DaemonError) -> Response {
    let (status, code) = match &e {
        DaemonError::Scenario(ScenarioError::IllegalAction { .. }) => (StatusCode::CONFLICT, "illegal-action"),
        DaemonError::Scenario(ScenarioError::MissingRequiredAnswer(_)) => {
            (StatusCode::UNPROCESSABLE_ENTITY, "missing-required-answer")
        }
        DaemonError::Scenario(ScenarioError::InvalidAnswer { .. }) => (StatusCode::UNPROCESSABLE_ENTITY, "invalid-answer"),
        DaemonError::NotActiveSurvey(_) => (StatusCode::CONFLICT, "illegal-action"),
        _ => {
            tracing::error!("{e}");
            (StatusCode::INTERNAL_SERVER_ERROR, "internal")
        }
    };
    reply(status, json!({ "error": code, "message": e.to_string() }))
}

fn parse<T: for<'de> Deserialize<'de>>(body: &[u8]) -> Result<T, Box<Response>> {
    serde_json::from_slice(body)
        .map_err(|e| Box::new(reply(StatusCode::BAD_REQUEST, json!({ "error": "malformed-request", "message": e.to_string() }))))
}

async fn post_event(State(d): State<Daemon>, body: Bytes) -> Response {
    let event: AdapterEvent = match parse(&body) {
        Ok(e) => e,
        Err(r) => return *r,
    };
    match d.post_event(event) {
        Ok(EventOutcome::Accepted(seq)) => reply(StatusCode::ACCEPTED, json!({ "seq": seq })),
        Ok(EventOutcome::Filtered(reason)) => {
            reply(StatusCode::UNPROCESSABLE_ENTITY, json!({ "error": "filtered", "reason": reason }))
        }
        Ok(EventOutcome::Invalid(message)) => {
            reply(StatusCode::UNPROCESSABLE_ENTITY, json!({ "error": "invalid-event", "message": message }))
        }
        Err(e) => error_reply(e),
    }
}

async fn get_scenario(State(d): State<Daemon>) -> Response {
    Json(d.view()).into_response()
}

async fn post_advance(State(d): State<Daemon>, body: Bytes) -> Response {
    let action: StepAction = match parse(&body) {
        Ok(a) => a,
        Err(r) => return *r,
    };
    match d.advance(action).await {
        Ok(out) => Json(out).into_response(),
        Err(e) => error_reply(e),
    }
}

#[derive(Deserialize)]
struct SurveyBody {
    answers: BTreeMap<String, AnswerValue>,
}

async fn post_survey(State(d): State<Daemon>, UrlPath(id): UrlPath<String>, body: Bytes) -> Response {
    let body: SurveyBody = match parse(&body) {
        Ok(b) => b,
        Err(r) => return *r,
    };
    match d.answer_survey(&id, body.answers).await {
        Ok(out) => Json(out).into_response(),
        Err(e) => error_reply(e),
    }
}

async fn post_flush(State(d): State<Daemon>) -> Response {
    match d.flush(false).await {
        Ok(report) => Json(report).into_response(),
        Err(SyncError::ConsentMissing) => reply(
            StatusCode::UNPROCESSABLE_ENTITY,
            json!({ "error": "consent-missing", "message": "consent has not been granted" }),
        ),
        Err(e) => {
            let status = FlushStatus::from_result(Err(e));
            reply(StatusCode::SERVICE_UNAVAILABLE, serde_json::to_value(status).expect("serializes"))
        }
    }
}

pub fn router(daemon: Daemon) -> Router {
    Router::new()
        .route("/v1/health", get(|| async { "ok" }))
        .route("/v1/events", post(post_event))
        .route("/v1/scenario", get(get_scenario))
        .route("/v1/scenario/advance", post(post_advance))
        .route("/v1/survey/{id}", post(post_survey))
        .route("/v1/flush", post(post_flush))
        .with_state(daemon)
}

/// Serve the local API until `shutdown` resolves or consent is declined,
/// then stop capture and upload pending records.
pub async fn serve<F>(listener: TcpListener, daemon: Daemon, shutdown: F) -> std::io::Result<Option<FlushStatus>>
where
    F: Future<Output = ()> + Send + 'static,
{
    let mut exit = daemon.exit_signal();
    let stop = async move {
        tokio::select! {
            _ = shutdown => {}
            _ = exit.wait_for(|v| *v) => {}
        }
    };
    let timer = daemon.opts().flush_every.map(|every| {
        let d = daemon.clone();
        tokio::spawn(async move {
            let mut tick = tokio::time::interval(every);
            tick.tick().await;
            loop {
                tick.tick().await;
                if let Err(e) = d.flush(false).await {
                    tracing::debug!("periodic flush: {e}");
                }
            }
        })
    });
    axum::serve(listener, router(daemon.clone()))
        .with_graceful_shutdown(stop)
        .await?;
    if let Some(t) = timer {
        t.abort();
    }
    Ok(daemon.shutdown().await)
}
