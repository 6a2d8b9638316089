//! Per-participant state machine over the configured scenario.
//!
//! Consent is an implicit step zero: until it is granted the only legal
//! actions are granting or declining it, and nothing may be tracked. After
//! consent the cursor walks the configured steps; it never moves backwards.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::config::{QuestionKind, ScenarioStep, StudyConfig, SurveySpec};
use crate::record::{AnswerValue, TimestampMs};

pub const STATE_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "kebab-case")]
pub enum Consent {
    Pending,
    Granted { at: TimestampMs },
    Declined,
}

impl Consent {
    pub fn is_granted(&self) -> bool {
        matches!(self, Consent::Granted { .. })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub struct ScenarioState {
    pub consent: Consent,
    pub cursor: usize,
    /// Tasks completed within the active group step.
    pub group_done: BTreeSet<String>,
    /// The alternative picked in the active choice step.
    pub choice_taken: Option<String>,
    /// Accepted answers per completed survey; optional questions may be absent.
    pub survey_answers: BTreeMap<String, BTreeMap<String, AnswerValue>>,
    pub finished: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "action", rename_all = "kebab-case")]
pub enum StepAction {
    GrantConsent,
    DeclineConsent,
    CompleteTask { task: String },
    PickChoice { task: String },
    AnswerSurvey { answers: BTreeMap<String, AnswerValue> },
    Acknowledge,
    Pause,
    Submit,
}

impl StepAction {
    fn name(&self) -> &'static str {
        match self {
            StepAction::GrantConsent => "grant-consent",
            StepAction::DeclineConsent => "decline-consent",
            StepAction::CompleteTask { .. } => "complete-task",
            StepAction::PickChoice { .. } => "pick-choice",
            StepAction::AnswerSurvey { .. } => "answer-survey",
            StepAction::Acknowledge => "acknowledge",
            StepAction::Pause => "pause",
            StepAction::Submit => "submit",
        }
    }

    /// Same variant and, for task actions, same task id. Survey payloads are
    /// checked separately by `advance`.
    fn matches(&self, offered: &StepAction) -> bool {
        match (self, offered) {
            (StepAction::CompleteTask { task: a }, StepAction::CompleteTask { task: b })
            | (StepAction::PickChoice { task: a }, StepAction::PickChoice { task: b }) => a == b,
            (StepAction::AnswerSurvey { .. }, StepAction::AnswerSurvey { .. }) => true,
            (a, b) => std::mem::discriminant(a) == std::mem::discriminant(b),
        }
    }
}

impl fmt::Display for StepAction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            StepAction::CompleteTask { task } | StepAction::PickChoice { task } => {
                write!(f, "{}({task})", self.name())
            }
            other => f.write_str(other.name()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ScenarioError {
    #[error("action {action} is not legal at step {cursor}")]
    IllegalAction { action: String, cursor: usize },
    #[error("required question `{0}` is unanswered")]
    MissingRequiredAnswer(String),
    #[error("invalid answer for question `{question}`: {reason}")]
    InvalidAnswer { question: String, reason: String },
    #[error("corrupt scenario state: {0}")]
    CorruptState(String),
}

impl ScenarioState {
    pub fn init(_config: &StudyConfig) -> Self {
        ScenarioState {
            consent: Consent::Pending,
            cursor: 0,
            group_done: BTreeSet::new(),
            choice_taken: None,
            survey_answers: BTreeMap::new(),
            finished: false,
        }
    }

    /// True when capture may run.
    pub fn tracking_allowed(&self) -> bool {
        self.consent.is_granted()
    }

    pub fn current_step<'c>(&self, config: &'c StudyConfig) -> Option<&'c ScenarioStep> {
        if !self.consent.is_granted() {
            return None;
        }
        config.scenario.steps.get(self.cursor)
    }

    pub fn available_actions(&self, config: &StudyConfig) -> Vec<StepAction> {
        match self.consent {
            Consent::Pending => return vec![StepAction::GrantConsent, StepAction::DeclineConsent],
            Consent::Declined => return Vec::new(),
            Consent::Granted { .. } => {}
        }
        let mut actions = Vec::new();
        match config.scenario.steps.get(self.cursor) {
            None => {}
            Some(ScenarioStep::Task(id)) => actions.push(StepAction::CompleteTask { task: id.clone() }),
            Some(ScenarioStep::Group(ids)) => actions.extend(
                ids.iter()
                    .filter(|id| !self.group_done.contains(*id))
                    .map(|id| StepAction::CompleteTask { task: id.clone() }),
            ),
            Some(ScenarioStep::Choice(ids)) => match &self.choice_taken {
                None => actions.extend(ids.iter().map(|id| StepAction::PickChoice { task: id.clone() })),
                Some(taken) => actions.push(StepAction::CompleteTask { task: taken.clone() }),
            },
            Some(ScenarioStep::Survey(_)) => actions.push(StepAction::AnswerSurvey {
                answers: BTreeMap::new(),
            }),
            Some(ScenarioStep::Info(_)) => actions.push(StepAction::Acknowledge),
        }
        actions.push(StepAction::Pause);
        actions.push(StepAction::Submit);
        actions
    }

    /// Successor state for a legal action. On error `self` is unchanged.
    pub fn advance(
        &self,
        action: &StepAction,
        config: &StudyConfig,
        now: TimestampMs,
    ) -> Result<ScenarioState, ScenarioError> {
        let illegal = || ScenarioError::IllegalAction {
            action: action.to_string(),
            cursor: self.cursor,
        };
        if !self.available_actions(config).iter().any(|a| action.matches(a)) {
            return Err(illegal());
        }
        let mut next = self.clone();
        match action {
            StepAction::GrantConsent => {
                next.consent = Consent::Granted { at: now };
            }
            StepAction::DeclineConsent => {
                next.consent = Consent::Declined;
                return Ok(next);
            }
            StepAction::Pause | StepAction::Submit => return Ok(next),
            StepAction::Acknowledge => next.cursor += 1,
            StepAction::PickChoice { task } => next.choice_taken = Some(task.clone()),
            StepAction::CompleteTask { task } => match config.scenario.steps.get(self.cursor) {
                Some(ScenarioStep::Group(ids)) => {
                    next.group_done.insert(task.clone());
                    if ids.iter().all(|id| next.group_done.contains(id)) {
                        next.group_done.clear();
                        next.cursor += 1;
                    }
                }
                Some(ScenarioStep::Choice(_)) => {
                    next.choice_taken = None;
                    next.cursor += 1;
                }
                Some(ScenarioStep::Task(_)) => next.cursor += 1,
                _ => return Err(illegal()),
            },
            StepAction::AnswerSurvey { answers } => {
                let Some(ScenarioStep::Survey(survey_id)) = config.scenario.steps.get(self.cursor) else {
                    return Err(illegal());
                };
                let survey = config.surveys.get(survey_id).ok_or_else(illegal)?;
                let accepted = check_answers(survey, answers)?;
                next.survey_answers.insert(survey_id.clone(), accepted);
                next.cursor += 1;
            }
        }
        next.finished = next.cursor >= config.scenario.steps.len();
        next.cursor = next.cursor.min(config.scenario.steps.len());
        Ok(next)
    }

    /// Check the structural invariants against a config, e.g. after restore.
    pub fn check(&self, config: &StudyConfig) -> Result<(), ScenarioError> {
        let corrupt = |m: &str| Err(ScenarioError::CorruptState(m.to_owned()));
        let steps = &config.scenario.steps;
        if self.cursor > steps.len() {
            return corrupt("cursor beyond the last step");
        }
        if self.finished != (self.consent.is_granted() && self.cursor == steps.len()) {
            return corrupt("finished flag disagrees with cursor");
        }
        if !self.consent.is_granted() && (self.cursor != 0 || !self.group_done.is_empty()) {
            return corrupt("progress recorded without consent");
        }
        match steps.get(self.cursor) {
            Some(ScenarioStep::Group(ids)) => {
                if !self.group_done.iter().all(|d| ids.contains(d)) {
                    return corrupt("group progress outside the active group");
                }
            }
            _ if !self.group_done.is_empty() => return corrupt("group progress outside a group step"),
            _ => {}
        }
        match (steps.get(self.cursor), &self.choice_taken) {
            (Some(ScenarioStep::Choice(ids)), Some(taken)) if !ids.contains(taken) => {
                corrupt("choice outside the active alternatives")
            }
            (Some(ScenarioStep::Choice(_)), _) | (_, None) => Ok(()),
            _ => corrupt("choice recorded outside a choice step"),
        }
    }
}

fn answered(value: &AnswerValue) -> bool {
    match value {
        AnswerValue::Text(t) => !t.trim().is_empty(),
        AnswerValue::Choices(c) => !c.is_empty(),
    }
}

/// Validate a submission against the survey definition. Unanswered optional
/// questions are dropped from the result.
pub fn check_answers(
    survey: &SurveySpec,
    answers: &BTreeMap<String, AnswerValue>,
) -> Result<BTreeMap<String, AnswerValue>, ScenarioError> {
    for qid in answers.keys() {
        if survey.question(qid).is_none() {
            return Err(ScenarioError::InvalidAnswer {
                question: qid.clone(),
                reason: "no such question".into(),
            });
        }
    }
    let mut accepted = BTreeMap::new();
    for q in &survey.questions {
        let Some(value) = answers.get(&q.id).filter(|v| answered(v)) else {
            if q.required {
                return Err(ScenarioError::MissingRequiredAnswer(q.id.clone()));
            }
            continue;
        };
        let invalid = |reason: &str| ScenarioError::InvalidAnswer {
            question: q.id.clone(),
            reason: reason.to_owned(),
        };
        match (q.kind, value) {
            (QuestionKind::OpenEnded, AnswerValue::Text(_)) => {}
            (QuestionKind::SingleChoice, AnswerValue::Text(choice)) => {
                if !q.options.contains(choice) {
                    return Err(invalid("not one of the options"));
                }
            }
            (QuestionKind::MultipleChoice, AnswerValue::Choices(choices)) => {
                let distinct: BTreeSet<&String> = choices.iter().collect();
                if distinct.len() != choices.len() {
                    return Err(invalid("option selected twice"));
                }
                if !choices.iter().all(|c| q.options.contains(c)) {
                    return Err(invalid("not one of the options"));
                }
            }
            (QuestionKind::OpenEnded, _) => return Err(invalid("expected text")),
            (QuestionKind::SingleChoice, _) => return Err(invalid("expected a single option")),
            (QuestionKind::MultipleChoice, _) => return Err(invalid("expected a list of options")),
        }
        accepted.insert(q.id.clone(), value.clone());
    }
    Ok(accepted)
}

#[derive(Serialize, Deserialize)]
struct PersistedState {
    version: u32,
    state: ScenarioState,
}

pub fn save_state(state: &ScenarioState) -> Vec<u8> {
    serde_json::to_vec_pretty(&PersistedState {
        version: STATE_VERSION,
        state: state.clone(),
    })
    .expect("scenario state serializes")
}

pub fn restore_state(bytes: &[u8]) -> Result<ScenarioState, ScenarioError> {
    let persisted: PersistedState =
        serde_json::from_slice(bytes).map_err(|e| ScenarioError::CorruptState(e.to_string()))?;
    if persisted.version != STATE_VERSION {
        return Err(ScenarioError::CorruptState(format!(
            "unsupported state version {}",
            persisted.version
        )));
    }
    let s = persisted.state;
    if s.cursor > 0 && !s.consent.is_granted() {
        return Err(ScenarioError::CorruptState("progress recorded without consent".into()));
    }
    Ok(s)
}

/// Number of distinct task-completion orders through `steps`: k! per
/// group of k tasks, k per choice of k alternatives.
pub fn analytic_path_count(steps: &[ScenarioStep]) -> u128 {
    steps
        .iter()
        .map(|s| match s {
            ScenarioStep::Group(ids) => (1..=ids.len() as u128).product(),
            ScenarioStep::Choice(ids) => ids.len() as u128,
            _ => 1,
        })
        .product()
}

/// A minimal legal submission for `survey`, answering each required question.
pub fn minimal_answers(survey: &SurveySpec) -> BTreeMap<String, AnswerValue> {
    survey
        .questions
        .iter()
        .filter(|q| q.required)
        .map(|q| {
            let value = match q.kind {
                QuestionKind::OpenEnded => AnswerValue::Text("n/a".into()),
                QuestionKind::SingleChoice => AnswerValue::Text(q.options[0].clone()),
                QuestionKind::MultipleChoice => AnswerValue::Choices(vec![q.options[0].clone()]),
            };
            (q.id.clone(), value)
        })
        .collect()
}
