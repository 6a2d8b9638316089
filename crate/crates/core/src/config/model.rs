//! Typed shapes of the seven study documents.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::record::{ActivityCategory, ContentMode};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScenarioStep {
    Task(String),
    /// Tasks completed in any order.
    Group(Vec<String>),
    /// Exactly one of the alternatives is completed.
    Choice(Vec<String>),
    Survey(String),
    Info(String),
}

impl ScenarioStep {
    pub fn task_ids(&self) -> &[String] {
        match self {
            ScenarioStep::Task(id) => std::slice::from_ref(id),
            ScenarioStep::Group(ids) | ScenarioStep::Choice(ids) => ids,
            _ => &[],
        }
    }

    pub fn kind_name(&self) -> &'static str {
        match self {
            ScenarioStep::Task(_) => "task",
            ScenarioStep::Group(_) => "group",
            ScenarioStep::Choice(_) => "choice",
            ScenarioStep::Survey(_) => "survey",
            ScenarioStep::Info(_) => "info",
        }
    }
}

impl fmt::Display for ScenarioStep {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ScenarioStep::Task(id) => write!(f, "task {id}"),
            ScenarioStep::Group(ids) => write!(f, "group (any order): {}", ids.join(", ")),
            ScenarioStep::Choice(ids) => write!(f, "choice (pick 1): {}", ids.join(", ")),
            ScenarioStep::Survey(id) => write!(f, "survey {id}"),
            ScenarioStep::Info(text) => {
                let first = text.lines().next().unwrap_or("");
                write!(f, "info: {first}")
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields)]
pub struct ScenarioSpec {
    #[serde(default, with = "serde_yaml::with::singleton_map_recursive")]
    pub steps: Vec<ScenarioStep>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields)]
pub struct TaskFile {
    pub relative_path: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub template: Option<String>,
    #[serde(default)]
    pub internal: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields)]
pub struct TaskSpec {
    pub id: String,
    #[serde(default)]
    pub description: String,
    #[serde(default)]
    pub files: Vec<TaskFile>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum QuestionKind {
    SingleChoice,
    MultipleChoice,
    OpenEnded,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields)]
pub struct Question {
    pub id: String,
    pub kind: QuestionKind,
    pub text: String,
    #[serde(default)]
    pub required: bool,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub options: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields)]
pub struct SurveySpec {
    pub id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub title: Option<String>,
    pub questions: Vec<Question>,
}

impl SurveySpec {
    pub fn question(&self, id: &str) -> Option<&Question> {
        self.questions.iter().find(|q| q.id == id)
    }
}

/// State requested for one editor feature.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum FeatureValue {
    Enabled,
    Disabled,
    Default,
    Value(String),
}

impl Serialize for FeatureValue {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        match self {
            FeatureValue::Enabled => s.serialize_str("enabled"),
            FeatureValue::Disabled => s.serialize_str("disabled"),
            FeatureValue::Default => s.serialize_str("default"),
            FeatureValue::Value(v) => s.serialize_str(v),
        }
    }
}

impl<'de> Deserialize<'de> for FeatureValue {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Bool(bool),
            Str(String),
        }
        Ok(match Raw::deserialize(d)? {
            Raw::Bool(true) => FeatureValue::Enabled,
            Raw::Bool(false) => FeatureValue::Disabled,
            Raw::Str(s) => match s.as_str() {
                "enabled" => FeatureValue::Enabled,
                "disabled" => FeatureValue::Disabled,
                "default" => FeatureValue::Default,
                _ => FeatureValue::Value(s),
            },
        })
    }
}

/// Whether a known feature is an on/off switch or carries a free value.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FeatureShape {
    Switch,
    Valued,
}

/// Features the toggle document may mention.
pub const KNOWN_FEATURES: &[(&str, FeatureShape)] = &[
    ("completion", FeatureShape::Switch),
    ("quality-inspections", FeatureShape::Switch),
    ("parameter-hints", FeatureShape::Switch),
    ("auto-import", FeatureShape::Switch),
    ("spell-checking", FeatureShape::Switch),
    ("color-theme", FeatureShape::Valued),
    ("font-size", FeatureShape::Valued),
];

pub fn feature_shape(name: &str) -> Option<FeatureShape> {
    KNOWN_FEATURES
        .iter()
        .find(|(n, _)| *n == name)
        .map(|(_, shape)| *shape)
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields)]
pub struct FeatureToggles {
    #[serde(default)]
    pub features: BTreeMap<String, FeatureValue>,
}

impl FeatureToggles {
    pub fn get(&self, name: &str) -> &FeatureValue {
        self.features.get(name).unwrap_or(&FeatureValue::Default)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields)]
pub struct ActivityPolicy {
    /// Event identifiers that are never recorded.
    #[serde(default)]
    pub excluded: BTreeSet<String>,
    /// Minimum spacing between accepted events of the same id, per category.
    #[serde(default)]
    pub min_interval_ms: BTreeMap<ActivityCategory, u64>,
}

impl ActivityPolicy {
    pub fn min_interval(&self, category: ActivityCategory) -> u64 {
        self.min_interval_ms.get(&category).copied().unwrap_or(0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields)]
pub enum SnapshotTrigger {
    EveryChange {
        #[serde(rename = "debounce-ms")]
        debounce_ms: u64,
    },
    OnSave,
    Interval {
        seconds: u64,
    },
}

impl Default for SnapshotTrigger {
    fn default() -> Self {
        SnapshotTrigger::EveryChange {
            debounce_ms: crate::capture::DEFAULT_DEBOUNCE_MS,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields)]
pub struct TrackingPolicy {
    #[serde(with = "serde_yaml::with::singleton_map")]
    pub trigger: SnapshotTrigger,
    #[serde(default = "default_content_mode")]
    pub content_mode: ContentMode,
}

fn default_content_mode() -> ContentMode {
    ContentMode::Full
}

impl Default for TrackingPolicy {
    fn default() -> Self {
        TrackingPolicy {
            trigger: SnapshotTrigger::default(),
            content_mode: ContentMode::Full,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields)]
pub struct ResearchMetadata {
    /// Study identifier used by the server; derived from the title when absent.
    #[serde(default)]
    pub id: String,
    pub title: String,
    #[serde(default)]
    pub description: String,
    pub consent_url: String,
    pub server_url: String,
    #[serde(default)]
    pub third_party_files: Vec<String>,
}

/// Lowercase ASCII slug of `title`, used as the default study id.
pub fn slugify(title: &str) -> String {
    let mut out = String::new();
    for c in title.chars() {
        if c.is_ascii_alphanumeric() {
            out.push(c.to_ascii_lowercase());
        } else if !out.ends_with('-') && !out.is_empty() {
            out.push('-');
        }
    }
    while out.ends_with('-') {
        out.pop();
    }
    out
}

/// The validated aggregate of all study documents.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StudyConfig {
    pub scenario: ScenarioSpec,
    pub tasks: BTreeMap<String, TaskSpec>,
    pub surveys: BTreeMap<String, SurveySpec>,
    pub settings: FeatureToggles,
    pub activity_policy: ActivityPolicy,
    pub tracking_policy: TrackingPolicy,
    pub metadata: ResearchMetadata,
}

impl StudyConfig {
    /// Every configured task file, normalized, deduplicated and sorted.
    pub fn tracked_files(&self) -> Vec<String> {
        let set: BTreeSet<String> = self
            .tasks
            .values()
            .flat_map(|t| t.files.iter().map(|f| f.relative_path.clone()))
            .collect();
        set.into_iter().collect()
    }

    /// Task files and third-party files: everything the client may read.
    pub fn readable_files(&self) -> BTreeSet<String> {
        let mut set: BTreeSet<String> = self.tracked_files().into_iter().collect();
        set.extend(self.metadata.third_party_files.iter().cloned());
        set
    }

    pub fn research_id(&self) -> &str {
        &self.metadata.id
    }
}
