//! Study configuration: parsing, cross-validation and task file materialization.
//!
//! A study is described by seven YAML documents in one directory:
//!
//! | file            | contents                                   | required |
//! |-----------------|--------------------------------------------|----------|
//! | `scenario.yaml` | ordered steps                              | yes      |
//! | `tasks.yaml`    | task descriptions and their files          | yes      |
//! | `settings.yaml` | editor feature toggles                     | no       |
//! | `surveys.yaml`  | surveys and their questions                | no       |
//! | `activity.yaml` | excluded events and per-category throttles | no       |
//! | `tracking.yaml` | snapshot trigger and content mode          | yes      |
//! | `research.yaml` | study metadata, server, third-party files  | yes      |
//!
//! Validation does not stop at the first problem: every document is parsed
//! independently and all errors are reported together.

mod model;
pub mod paths;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

pub use model::*;
pub use paths::{normalize_relative, resolve_within, PathEscape};

pub const SCENARIO_FILE: &str = "scenario.yaml";
pub const TASKS_FILE: &str = "tasks.yaml";
pub const SETTINGS_FILE: &str = "settings.yaml";
pub const SURVEYS_FILE: &str = "surveys.yaml";
pub const ACTIVITY_FILE: &str = "activity.yaml";
pub const TRACKING_FILE: &str = "tracking.yaml";
pub const RESEARCH_FILE: &str = "research.yaml";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum RefKind {
    Task,
    Survey,
}

impl fmt::Display for RefKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            RefKind::Task => "task",
            RefKind::Survey => "survey",
        })
    }
}

/// One validation problem. `summary()` is the stable one-line form used by
/// fixtures and the CLI; `Display` adds the human-readable detail.
#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ConfigError {
    #[error("{file}: required document is missing")]
    MissingDocument { file: &'static str },
    #[error("{file}:{line}: malformed document: {message}")]
    MalformedDocument {
        file: &'static str,
        line: usize,
        message: String,
    },
    #[error("{file}: reference to undefined {kind} `{id}`")]
    DanglingReference {
        file: &'static str,
        kind: RefKind,
        id: String,
    },
    #[error("{file}: path `{path}` escapes the workspace root")]
    PathEscape { file: &'static str, path: String },
    #[error("{file}: duplicate {namespace} id `{id}`")]
    DuplicateId {
        file: &'static str,
        namespace: &'static str,
        id: String,
    },
    #[error("{file}: unknown feature `{name}`")]
    UnknownFeature { file: &'static str, name: String },
    #[error("{file}: {message}")]
    Constraint { file: &'static str, message: String },
}

impl ConfigError {
    pub fn code(&self) -> &'static str {
        match self {
            ConfigError::MissingDocument { .. } => "missing-document",
            ConfigError::MalformedDocument { .. } => "malformed-document",
            ConfigError::DanglingReference { .. } => "dangling-reference",
            ConfigError::PathEscape { .. } => "path-escape",
            ConfigError::DuplicateId { .. } => "duplicate-id",
            ConfigError::UnknownFeature { .. } => "unknown-feature",
            ConfigError::Constraint { .. } => "constraint",
        }
    }

    pub fn summary(&self) -> String {
        match self {
            ConfigError::MissingDocument { file } => format!("missing-document {file}"),
            ConfigError::MalformedDocument { file, line, .. } => {
                format!("malformed-document {file}:{line}")
            }
            ConfigError::DanglingReference { kind, id, .. } => {
                format!("dangling-reference {kind} {id}")
            }
            ConfigError::PathEscape { file, path } => format!("path-escape {file} {path}"),
            ConfigError::DuplicateId { namespace, id, .. } => {
                format!("duplicate-id {namespace} {id}")
            }
            ConfigError::UnknownFeature { name, .. } => format!("unknown-feature {name}"),
            ConfigError::Constraint { file, message } => format!("constraint {file} {message}"),
        }
    }
}

/// Non-empty list of validation problems.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfigErrors(pub Vec<ConfigError>);

impl fmt::Display for ConfigErrors {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, e) in self.0.iter().enumerate() {
            if i > 0 {
                writeln!(f)?;
            }
            write!(f, "{e}")?;
        }
        Ok(())
    }
}

impl std::error::Error for ConfigErrors {}

#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields)]
struct TasksDoc {
    #[serde(default)]
    tasks: Vec<TaskSpec>,
}

#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields)]
struct SurveysDoc {
    #[serde(default)]
    surveys: Vec<SurveySpec>,
}

/// Raw documents before cross-validation, one slot per file.
#[derive(Debug, Default)]
pub struct StudyDocuments {
    pub scenario: Option<Vec<u8>>,
    pub tasks: Option<Vec<u8>>,
    pub settings: Option<Vec<u8>>,
    pub surveys: Option<Vec<u8>>,
    pub activity: Option<Vec<u8>>,
    pub tracking: Option<Vec<u8>>,
    pub research: Option<Vec<u8>>,
}

impl StudyDocuments {
    pub fn read_dir(dir: &Path) -> io::Result<Self> {
        let read = |name: &str| -> io::Result<Option<Vec<u8>>> {
            match fs::read(dir.join(name)) {
                Ok(bytes) => Ok(Some(bytes)),
                Err(e) if e.kind() == io::ErrorKind::NotFound => Ok(None),
                Err(e) => Err(e),
            }
        };
        if !dir.is_dir() {
            return Err(io::Error::new(
                io::ErrorKind::NotFound,
                format!("{} is not a directory", dir.display()),
            ));
        }
        Ok(StudyDocuments {
            scenario: read(SCENARIO_FILE)?,
            tasks: read(TASKS_FILE)?,
            settings: read(SETTINGS_FILE)?,
            surveys: read(SURVEYS_FILE)?,
            activity: read(ACTIVITY_FILE)?,
            tracking: read(TRACKING_FILE)?,
            research: read(RESEARCH_FILE)?,
        })
    }
}

#[derive(Debug, thiserror::Error)]
pub enum LoadError {
    #[error("cannot read configuration directory: {0}")]
    Io(#[from] io::Error),
    #[error("{0}")]
    Invalid(ConfigErrors),
}

/// Read and validate the study documents in `dir`.
pub fn parse_study_config(dir: &Path) -> Result<StudyConfig, LoadError> {
    let docs = StudyDocuments::read_dir(dir)?;
    parse_documents(&docs).map_err(LoadError::Invalid)
}

fn parse_doc<T: DeserializeOwned>(
    file: &'static str,
    bytes: &[u8],
    errors: &mut Vec<ConfigError>,
) -> Option<T> {
    // An empty document is an empty mapping.
    let is_blank = bytes.iter().all(|b| b.is_ascii_whitespace());
    let result = if is_blank {
        serde_yaml::from_str::<T>("{}")
    } else {
        serde_yaml::from_slice::<T>(bytes)
    };
    match result {
        Ok(v) => Some(v),
        Err(e) => {
            let line = e.location().map(|l| l.line()).unwrap_or(0);
            errors.push(ConfigError::MalformedDocument {
                file,
                line,
                message: e.to_string(),
            });
            None
        }
    }
}

fn required<T: DeserializeOwned>(
    file: &'static str,
    bytes: &Option<Vec<u8>>,
    errors: &mut Vec<ConfigError>,
) -> Option<T> {
    match bytes {
        Some(b) => parse_doc(file, b, errors),
        None => {
            errors.push(ConfigError::MissingDocument { file });
            None
        }
    }
}

fn optional<T: DeserializeOwned + Default>(
    file: &'static str,
    bytes: &Option<Vec<u8>>,
    errors: &mut Vec<ConfigError>,
) -> Option<T> {
    match bytes {
        Some(b) => parse_doc(file, b, errors),
        None => Some(T::default()),
    }
}

/// Validate a set of raw documents. Total: never panics on any input.
pub fn parse_documents(docs: &StudyDocuments) -> Result<StudyConfig, ConfigErrors> {
    let mut errors = Vec::new();

    let scenario: Option<ScenarioSpec> = required(SCENARIO_FILE, &docs.scenario, &mut errors);
    let tasks: Option<TasksDoc> = required(TASKS_FILE, &docs.tasks, &mut errors);
    let settings: Option<FeatureToggles> = optional(SETTINGS_FILE, &docs.settings, &mut errors);
    let surveys: Option<SurveysDoc> = optional(SURVEYS_FILE, &docs.surveys, &mut errors);
    let activity: Option<ActivityPolicy> = optional(ACTIVITY_FILE, &docs.activity, &mut errors);
    let tracking: Option<TrackingPolicy> = required(TRACKING_FILE, &docs.tracking, &mut errors);
    let research: Option<ResearchMetadata> = required(RESEARCH_FILE, &docs.research, &mut errors);

    let tasks = tasks.map(|doc| validate_tasks(doc.tasks, &mut errors));
    let surveys = surveys.map(|doc| validate_surveys(doc.surveys, &mut errors));
    if let Some(settings) = &settings {
        validate_settings(settings, &mut errors);
    }
    if let Some(tracking) = &tracking {
        validate_tracking(tracking, &mut errors);
    }
    let research = research.map(|r| validate_research(r, &mut errors));
    if let Some(scenario) = &scenario {
        validate_scenario(scenario, tasks.as_ref(), surveys.as_ref(), &mut errors);
    }

    match (scenario, tasks, settings, surveys, activity, tracking, research) {
        (
            Some(scenario),
            Some(tasks),
            Some(settings),
            Some(surveys),
            Some(activity_policy),
            Some(tracking_policy),
            Some(metadata),
        ) if errors.is_empty() => Ok(StudyConfig {
            scenario,
            tasks,
            surveys,
            settings,
            activity_policy,
            tracking_policy,
            metadata,
        }),
        _ => Err(ConfigErrors(errors)),
    }
}

fn validate_tasks(list: Vec<TaskSpec>, errors: &mut Vec<ConfigError>) -> BTreeMap<String, TaskSpec> {
    let mut out = BTreeMap::new();
    for mut task in list {
        if task.id.trim().is_empty() {
            errors.push(ConfigError::Constraint {
                file: TASKS_FILE,
                message: "task id must not be empty".into(),
            });
            continue;
        }
        let mut seen = BTreeSet::new();
        for file in &mut task.files {
            match normalize_relative(&file.relative_path) {
                Ok(norm) => {
                    if !seen.insert(norm.clone()) {
                        errors.push(ConfigError::DuplicateId {
                            file: TASKS_FILE,
                            namespace: "task-file",
                            id: norm.clone(),
                        });
                    }
                    file.relative_path = norm;
                }
                Err(_) => errors.push(ConfigError::PathEscape {
                    file: TASKS_FILE,
                    path: file.relative_path.clone(),
                }),
            }
        }
        if out.contains_key(&task.id) {
            errors.push(ConfigError::DuplicateId {
                file: TASKS_FILE,
                namespace: "task",
                id: task.id.clone(),
            });
            continue;
        }
        out.insert(task.id.clone(), task);
    }
    out
}

fn validate_surveys(
    list: Vec<SurveySpec>,
    errors: &mut Vec<ConfigError>,
) -> BTreeMap<String, SurveySpec> {
    let mut out = BTreeMap::new();
    for survey in list {
        let mut qids = BTreeSet::new();
        for q in &survey.questions {
            if q.id.trim().is_empty() {
                errors.push(ConfigError::Constraint {
                    file: SURVEYS_FILE,
                    message: format!("survey `{}` has a question without id", survey.id),
                });
            } else if !qids.insert(q.id.as_str()) {
                errors.push(ConfigError::DuplicateId {
                    file: SURVEYS_FILE,
                    namespace: "question",
                    id: format!("{}/{}", survey.id, q.id),
                });
            }
            match q.kind {
                QuestionKind::SingleChoice | QuestionKind::MultipleChoice => {
                    if q.options.len() < 2 {
                        errors.push(ConfigError::Constraint {
                            file: SURVEYS_FILE,
                            message: format!(
                                "question `{}/{}` needs at least 2 options",
                                survey.id, q.id
                            ),
                        });
                    }
                    let distinct: BTreeSet<&String> = q.options.iter().collect();
                    if distinct.len() != q.options.len() {
                        errors.push(ConfigError::DuplicateId {
                            file: SURVEYS_FILE,
                            namespace: "option",
                            id: format!("{}/{}", survey.id, q.id),
                        });
                    }
                }
                QuestionKind::OpenEnded => {
                    if !q.options.is_empty() {
                        errors.push(ConfigError::Constraint {
                            file: SURVEYS_FILE,
                            message: format!(
                                "open-ended question `{}/{}` must not have options",
                                survey.id, q.id
                            ),
                        });
                    }
                }
            }
        }
        if survey.id.trim().is_empty() {
            errors.push(ConfigError::Constraint {
                file: SURVEYS_FILE,
                message: "survey id must not be empty".into(),
            });
            continue;
        }
        if out.contains_key(&survey.id) {
            errors.push(ConfigError::DuplicateId {
                file: SURVEYS_FILE,
                namespace: "survey",
                id: survey.id.clone(),
            });
            continue;
        }
        out.insert(survey.id.clone(), survey);
    }
    out
}

fn validate_settings(settings: &FeatureToggles, errors: &mut Vec<ConfigError>) {
    for (name, value) in &settings.features {
        match feature_shape(name) {
            None => errors.push(ConfigError::UnknownFeature {
                file: SETTINGS_FILE,
                name: name.clone(),
            }),
            Some(FeatureShape::Switch) => {
                if let FeatureValue::Value(v) = value {
                    errors.push(ConfigError::Constraint {
                        file: SETTINGS_FILE,
                        message: format!(
                            "feature `{name}` expects enabled/disabled/default, got `{v}`"
                        ),
                    });
                }
            }
            Some(FeatureShape::Valued) => {}
        }
    }
}

fn validate_tracking(tracking: &TrackingPolicy, errors: &mut Vec<ConfigError>) {
    if let SnapshotTrigger::Interval { seconds } = tracking.trigger {
        if seconds < 1 {
            errors.push(ConfigError::Constraint {
                file: TRACKING_FILE,
                message: "interval trigger needs at least 1 second".into(),
            });
        }
    }
}

fn validate_research(mut research: ResearchMetadata, errors: &mut Vec<ConfigError>) -> ResearchMetadata {
    if research.id.trim().is_empty() {
        research.id = slugify(&research.title);
    }
    if research.id.is_empty() {
        errors.push(ConfigError::Constraint {
            file: RESEARCH_FILE,
            message: "study needs an id or a title with alphanumeric characters".into(),
        });
    }
    let mut seen = BTreeSet::new();
    for path in &mut research.third_party_files {
        match normalize_relative(path) {
            Ok(norm) => {
                if !seen.insert(norm.clone()) {
                    errors.push(ConfigError::DuplicateId {
                        file: RESEARCH_FILE,
                        namespace: "third-party-file",
                        id: norm.clone(),
                    });
                }
                *path = norm;
            }
            Err(_) => errors.push(ConfigError::PathEscape {
                file: RESEARCH_FILE,
                path: path.clone(),
            }),
        }
    }
    research
}

fn validate_scenario(
    scenario: &ScenarioSpec,
    tasks: Option<&BTreeMap<String, TaskSpec>>,
    surveys: Option<&BTreeMap<String, SurveySpec>>,
    errors: &mut Vec<ConfigError>,
) {
    for (index, step) in scenario.steps.iter().enumerate() {
        let position = index + 1;
        match step {
            ScenarioStep::Group(ids) if ids.is_empty() => errors.push(ConfigError::Constraint {
                file: SCENARIO_FILE,
                message: format!("step {position}: group must not be empty"),
            }),
            ScenarioStep::Choice(ids) if ids.len() < 2 => errors.push(ConfigError::Constraint {
                file: SCENARIO_FILE,
                message: format!("step {position}: choice needs at least 2 alternatives"),
            }),
            _ => {}
        }
        if let ScenarioStep::Group(ids) | ScenarioStep::Choice(ids) = step {
            let distinct: BTreeSet<&String> = ids.iter().collect();
            if distinct.len() != ids.len() {
                errors.push(ConfigError::Constraint {
                    file: SCENARIO_FILE,
                    message: format!("step {position}: {} lists a task twice", step.kind_name()),
                });
            }
        }
        if let Some(tasks) = tasks {
            for id in step.task_ids() {
                if !tasks.contains_key(id) {
                    errors.push(ConfigError::DanglingReference {
                        file: SCENARIO_FILE,
                        kind: RefKind::Task,
                        id: id.clone(),
                    });
                }
            }
        }
        if let (ScenarioStep::Survey(id), Some(surveys)) = (step, surveys) {
            if !surveys.contains_key(id) {
                errors.push(ConfigError::DanglingReference {
                    file: SCENARIO_FILE,
                    kind: RefKind::Survey,
                    id: id.clone(),
                });
            }
        }
    }
}

/// Render a validated config back into its seven documents.
pub fn render_documents(config: &StudyConfig) -> Result<Vec<(&'static str, String)>, serde_yaml::Error> {
    let tasks = TasksDoc {
        tasks: config.tasks.values().cloned().collect(),
    };
    let surveys = SurveysDoc {
        surveys: config.surveys.values().cloned().collect(),
    };
    Ok(vec![
        (SCENARIO_FILE, serde_yaml::to_string(&config.scenario)?),
        (TASKS_FILE, serde_yaml::to_string(&tasks)?),
        (SETTINGS_FILE, serde_yaml::to_string(&config.settings)?),
        (SURVEYS_FILE, serde_yaml::to_string(&surveys)?),
        (ACTIVITY_FILE, serde_yaml::to_string(&config.activity_policy)?),
        (TRACKING_FILE, serde_yaml::to_string(&config.tracking_policy)?),
        (RESEARCH_FILE, serde_yaml::to_string(&config.metadata)?),
    ])
}

pub fn write_study_config(config: &StudyConfig, dir: &Path) -> io::Result<()> {
    fs::create_dir_all(dir)?;
    let docs = render_documents(config).map_err(io::Error::other)?;
    for (name, body) in docs {
        fs::write(dir.join(name), body)?;
    }
    Ok(())
}

impl StudyDocuments {
    pub fn from_rendered(docs: &[(&'static str, String)]) -> Self {
        let mut out = StudyDocuments::default();
        for (name, body) in docs {
            let slot = match *name {
                SCENARIO_FILE => &mut out.scenario,
                TASKS_FILE => &mut out.tasks,
                SETTINGS_FILE => &mut out.settings,
                SURVEYS_FILE => &mut out.surveys,
                ACTIVITY_FILE => &mut out.activity,
                TRACKING_FILE => &mut out.tracking,
                RESEARCH_FILE => &mut out.research,
                _ => continue,
            };
            *slot = Some(body.clone().into_bytes());
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ResolvedFile {
    pub relative_path: String,
    pub path: PathBuf,
    pub created: bool,
}

#[derive(Debug, thiserror::Error)]
pub enum ResolveError {
    #[error("i/o failure on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error(transparent)]
    PathEscape(#[from] PathEscape),
}

/// Materialize a task's files inside `workspace_root`.
///
/// Missing files are created with their template (or empty). Existing files
/// are never touched, whether internal or not.
pub fn resolve_task_files(task: &TaskSpec, workspace_root: &Path) -> Result<Vec<ResolvedFile>, ResolveError> {
    let mut out = Vec::with_capacity(task.files.len());
    for file in &task.files {
        let path = resolve_within(workspace_root, &file.relative_path)?;
        let io_err = |source| ResolveError::Io {
            path: path.clone(),
            source,
        };
        if path.symlink_metadata().is_ok() {
            out.push(ResolvedFile {
                relative_path: normalize_relative(&file.relative_path)?,
                path,
                created: false,
            });
            continue;
        }
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(io_err)?;
        }
        // Re-check after creating parents: a racing symlink must not redirect us.
        let path = resolve_within(workspace_root, &file.relative_path)?;
        let created = match fs::OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut handle) => {
                use io::Write;
                if let Some(template) = &file.template {
                    handle.write_all(template.as_bytes()).map_err(io_err)?;
                }
                handle.sync_all().map_err(io_err)?;
                true
            }
            Err(e) if e.kind() == io::ErrorKind::AlreadyExists => false,
            Err(e) => return Err(io_err(e)),
        };
        out.push(ResolvedFile {
            relative_path: normalize_relative(&file.relative_path)?,
            path,
            created,
        });
    }
    Ok(out)
}

/// Language hint for signature extraction, from the file extension.
pub fn language_hint(path: &str) -> &'static str {
    match Path::new(path).extension().and_then(|e| e.to_str()) {
        Some("kt") | Some("kts") => "kotlin",
        Some("java") => "java",
        Some("py") => "python",
        _ => "generic",
    }
}
