//! Core domain types: tasks, requirements, harness levels, artifacts and the
//! visibility matrix that defines the H0-H3 ladder.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

/// Rung of the harness ladder. Ordered: `H0 < H1 < H2 < H3`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum HarnessLevel {
    H0,
    H1,
    H2,
    H3,
}

impl HarnessLevel {
    pub const ALL: [HarnessLevel; 4] = [Self::H0, Self::H1, Self::H2, Self::H3];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::H0 => "H0",
            Self::H1 => "H1",
            Self::H2 => "H2",
            Self::H3 => "H3",
        }
    }
}

impl fmt::Display for HarnessLevel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for HarnessLevel {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_uppercase().as_str() {
            "H0" => Ok(Self::H0),
            "H1" => Ok(Self::H1),
            "H2" => Ok(Self::H2),
            "H3" => Ok(Self::H3),
            other => Err(format!("unknown harness level `{other}` (expected H0..H3)")),
        }
    }
}

/// Every artifact row of the visibility matrix, plus the evaluator notes that
/// are never shown to an agent.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArtifactKind {
    TaskDescription,
    RepositoryFiles,
    ToolRegistry,
    TestCommandRegistry,
    ToolUsageProtocol,
    AgentGuide,
    Architecture,
    TestingGuide,
    TaskState,
    KnownFailures,
    ContextSelectionProtocol,
    DeterministicCheckRegistry,
    BugReproductionProtocol,
    FailureAttributionProtocol,
    VerificationProtocol,
    VerificationReportTemplate,
    HiddenEvaluatorNotes,
}

impl ArtifactKind {
    pub const ALL: [ArtifactKind; 17] = [
        Self::TaskDescription,
        Self::RepositoryFiles,
        Self::ToolRegistry,
        Self::TestCommandRegistry,
        Self::ToolUsageProtocol,
        Self::AgentGuide,
        Self::Architecture,
        Self::TestingGuide,
        Self::TaskState,
        Self::KnownFailures,
        Self::ContextSelectionProtocol,
        Self::DeterministicCheckRegistry,
        Self::BugReproductionProtocol,
        Self::FailureAttributionProtocol,
        Self::VerificationProtocol,
        Self::VerificationReportTemplate,
        Self::HiddenEvaluatorNotes,
    ];

    /// Lowest level at which the artifact becomes visible; `None` for the
    /// hidden evaluator notes.
    pub fn introduced_at(self) -> Option<HarnessLevel> {
        use ArtifactKind::*;
        match self {
            TaskDescription | RepositoryFiles => Some(HarnessLevel::H0),
            ToolRegistry | TestCommandRegistry | ToolUsageProtocol => Some(HarnessLevel::H1),
            AgentGuide | Architecture | TestingGuide | TaskState | KnownFailures | ContextSelectionProtocol => {
                Some(HarnessLevel::H2)
            }
            DeterministicCheckRegistry
            | BugReproductionProtocol
            | FailureAttributionProtocol
            | VerificationProtocol
            | VerificationReportTemplate => Some(HarnessLevel::H3),
            HiddenEvaluatorNotes => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        use ArtifactKind::*;
        match self {
            TaskDescription => "task_description",
            RepositoryFiles => "repository_files",
            ToolRegistry => "tool_registry",
            TestCommandRegistry => "test_command_registry",
            ToolUsageProtocol => "tool_usage_protocol",
            AgentGuide => "agent_guide",
            Architecture => "architecture",
            TestingGuide => "testing_guide",
            TaskState => "task_state",
            KnownFailures => "known_failures",
            ContextSelectionProtocol => "context_selection_protocol",
            DeterministicCheckRegistry => "deterministic_check_registry",
            BugReproductionProtocol => "bug_reproduction_protocol",
            FailureAttributionProtocol => "failure_attribution_protocol",
            VerificationProtocol => "verification_protocol",
            VerificationReportTemplate => "verification_report_template",
            HiddenEvaluatorNotes => "hidden_evaluator_notes",
        }
    }

    /// Workspace-relative path of the artifact. Repository files have no
    /// single path.
    pub fn workspace_path(self) -> Option<String> {
        match self {
            Self::RepositoryFiles => None,
            Self::TaskDescription => Some("TASK.md".to_string()),
            other => Some(format!("harness/{}.md", other.as_str().to_ascii_uppercase())),
        }
    }

    /// Inverse of [`ArtifactKind::workspace_path`].
    pub fn from_workspace_path(path: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.workspace_path().as_deref() == Some(path))
    }

    pub fn is_harness_file(self) -> bool {
        !matches!(self, Self::TaskDescription | Self::RepositoryFiles)
    }
}

impl fmt::Display for ArtifactKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// (artifact, level) -> visible.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VisibilityMatrix {
    entries: BTreeMap<(ArtifactKind, HarnessLevel), bool>,
}

impl VisibilityMatrix {
    /// The ladder's matrix: each artifact is visible from the level that
    /// introduces it onwards; evaluator notes are never visible.
    pub fn standard() -> Self {
        let mut entries = BTreeMap::new();
        for kind in ArtifactKind::ALL {
            for level in HarnessLevel::ALL {
                let visible = kind.introduced_at().is_some_and(|from| level >= from);
                entries.insert((kind, level), visible);
            }
        }
        Self { entries }
    }

    pub fn is_visible(&self, kind: ArtifactKind, level: HarnessLevel) -> bool {
        self.entries.get(&(kind, level)).copied().unwrap_or(false)
    }

    pub fn visible_at(&self, level: HarnessLevel) -> BTreeSet<ArtifactKind> {
        ArtifactKind::ALL.into_iter().filter(|k| self.is_visible(*k, level)).collect()
    }
}

/// Artifacts an agent may see at `level`.
pub fn visibility_of(level: HarnessLevel) -> BTreeSet<ArtifactKind> {
    VisibilityMatrix::standard().visible_at(level)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum FailureType {
    #[serde(rename = "F_context")]
    Context,
    #[serde(rename = "F_tool")]
    Tool,
    #[serde(rename = "F_feedback")]
    Feedback,
    #[serde(rename = "F_verify")]
    Verify,
    #[serde(rename = "F_recovery")]
    Recovery,
    #[serde(rename = "F_entropy")]
    Entropy,
    #[serde(rename = "F_model")]
    Model,
    #[serde(rename = "F_unknown")]
    Unknown,
}

impl FailureType {
    pub const ALL: [FailureType; 8] = [
        Self::Context,
        Self::Tool,
        Self::Feedback,
        Self::Verify,
        Self::Recovery,
        Self::Entropy,
        Self::Model,
        Self::Unknown,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Context => "F_context",
            Self::Tool => "F_tool",
            Self::Feedback => "F_feedback",
            Self::Verify => "F_verify",
            Self::Recovery => "F_recovery",
            Self::Entropy => "F_entropy",
            Self::Model => "F_model",
            Self::Unknown => "F_unknown",
        }
    }
}

impl fmt::Display for FailureType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutcomeLabel {
    AutonomousVerifiedSuccess,
    AssistedVerifiedSuccess,
    UnverifiedSuccess,
    Failed,
    UnsafeInvalid,
}

impl OutcomeLabel {
    pub const ALL: [OutcomeLabel; 5] = [
        Self::AutonomousVerifiedSuccess,
        Self::AssistedVerifiedSuccess,
        Self::UnverifiedSuccess,
        Self::Failed,
        Self::UnsafeInvalid,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::AutonomousVerifiedSuccess => "autonomous_verified_success",
            Self::AssistedVerifiedSuccess => "assisted_verified_success",
            Self::UnverifiedSuccess => "unverified_success",
            Self::Failed => "failed",
            Self::UnsafeInvalid => "unsafe_invalid",
        }
    }

    pub fn is_success(self) -> bool {
        matches!(self, Self::AutonomousVerifiedSuccess | Self::AssistedVerifiedSuccess | Self::UnverifiedSuccess)
    }
}

impl fmt::Display for OutcomeLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Whether an agent may ask a human for help during an episode.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InterventionMode {
    #[default]
    NoneAllowed,
    PromptAllowed,
}

impl InterventionMode {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::NoneAllowed => "none_allowed",
            Self::PromptAllowed => "prompt_allowed",
        }
    }
}

impl FromStr for InterventionMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "none_allowed" => Ok(Self::NoneAllowed),
            "prompt_allowed" => Ok(Self::PromptAllowed),
            other => Err(format!("unknown intervention policy `{other}`")),
        }
    }
}

/// How a requirement is evidenced during verification.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RequirementKind {
    CorrectedBehavior,
    PreservedBehavior,
    TestCoverage,
    RegressionIntegrity,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Requirement {
    pub req_id: String,
    pub statement: String,
    pub kind: RequirementKind,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSpec {
    pub task_id: String,
    pub title: String,
    pub objective: String,
    pub requirements: Vec<Requirement>,
    #[serde(default)]
    pub constraints: Vec<String>,
    pub success_criteria: String,
    pub repo_id: String,
    pub initial_commit: String,
}

impl TaskSpec {
    pub fn from_toml(text: &str) -> Result<Self, toml::de::Error> {
        toml::from_str(text)
    }

    pub fn requirement(&self, req_id: &str) -> Option<&Requirement> {
        self.requirements.iter().find(|r| r.req_id == req_id)
    }

    /// Agent-facing task description (`TASK.md`).
    pub fn render_markdown(&self) -> String {
        let mut out = format!(
            "# {}: {}\n\n## Objective\n\n{}\n\n## Requirements\n\n",
            self.task_id,
            self.title,
            self.objective.trim()
        );
        for r in &self.requirements {
            out.push_str(&format!("- {}: {}\n", r.req_id, r.statement));
        }
        out.push_str("\n## Constraints\n\n");
        if self.constraints.is_empty() {
            out.push_str("None stated.\n");
        } else {
            for c in &self.constraints {
                out.push_str(&format!("- {c}\n"));
            }
        }
        out.push_str(&format!("\n## Success criteria\n\n{}\n", self.success_criteria.trim()));
        out
    }
}

/// One violated TaskSpec invariant.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskViolation {
    pub field: String,
    pub message: String,
}

impl fmt::Display for TaskViolation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.field, self.message)
    }
}

/// Empty result means the task is valid.
pub fn validate_task_spec(spec: &TaskSpec) -> Vec<TaskViolation> {
    let mut out = Vec::new();
    let mut push = |field: &str, message: String| out.push(TaskViolation { field: field.to_string(), message });
    if spec.task_id.trim().is_empty() {
        push("task_id", "task_id empty".to_string());
    }
    if spec.requirements.is_empty() {
        push("requirements", "requirements empty".to_string());
    }
    let mut seen = HashSet::new();
    for r in &spec.requirements {
        if r.req_id.trim().is_empty() {
            push("requirements", "requirement with empty req_id".to_string());
        } else if !seen.insert(r.req_id.as_str()) {
            push("requirements", format!("duplicate req_id {}", r.req_id));
        }
        if r.statement.trim().is_empty() {
            push("requirements", format!("requirement {} has an empty statement", r.req_id));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec() -> TaskSpec {
        TaskSpec::from_toml(include_str!("../corpus/repoA-T1/task.toml")).unwrap()
    }

    #[test]
    fn ladder_sizes_match_matrix() {
        let sizes: Vec<usize> = HarnessLevel::ALL.iter().map(|l| visibility_of(*l).len()).collect();
        assert_eq!(sizes, vec![2, 5, 11, 16]);
    }

    #[test]
    fn h0_and_h1_sets() {
        use ArtifactKind::*;
        assert_eq!(visibility_of(HarnessLevel::H0), BTreeSet::from([TaskDescription, RepositoryFiles]));
        assert_eq!(
            visibility_of(HarnessLevel::H1),
            BTreeSet::from([TaskDescription, RepositoryFiles, ToolRegistry, TestCommandRegistry, ToolUsageProtocol])
        );
        let h3 = visibility_of(HarnessLevel::H3);
        assert!(!h3.contains(&HiddenEvaluatorNotes));
        assert_eq!(h3.len(), ArtifactKind::ALL.len() - 1);
    }

    #[test]
    fn artifact_paths_round_trip() {
        for k in ArtifactKind::ALL {
            if let Some(p) = k.workspace_path() {
                assert_eq!(ArtifactKind::from_workspace_path(&p), Some(k));
            }
        }
        assert_eq!(ArtifactKind::ToolRegistry.workspace_path().unwrap(), "harness/TOOL_REGISTRY.md");
        assert_eq!(ArtifactKind::TaskState.workspace_path().unwrap(), "harness/TASK_STATE.md");
    }

    #[test]
    fn level_parse() {
        assert_eq!("h2".parse::<HarnessLevel>().unwrap(), HarnessLevel::H2);
        assert!("H9".parse::<HarnessLevel>().is_err());
    }

    #[test]
    fn fixture_spec_is_valid() {
        let s = spec();
        assert_eq!(s.requirements.len(), 5);
        assert!(validate_task_spec(&s).is_empty());
        assert!(s.constraints.is_empty());
    }

    #[test]
    fn empty_requirements_rejected() {
        let mut s = spec();
        s.requirements.clear();
        let v = validate_task_spec(&s);
        assert_eq!(v.len(), 1);
        assert_eq!(v[0].message, "requirements empty");
    }

    #[test]
    fn duplicate_req_id_named() {
        let mut s = spec();
        s.requirements[1].req_id = "R1".to_string();
        let v = validate_task_spec(&s);
        assert!(v.iter().any(|x| x.message.contains("R1")), "{v:?}");
    }

    #[test]
    fn serde_names() {
        assert_eq!(serde_json::to_string(&FailureType::Context).unwrap(), "\"F_context\"");
        assert_eq!(
            serde_json::to_string(&OutcomeLabel::AutonomousVerifiedSuccess).unwrap(),
            "\"autonomous_verified_success\""
        );
        assert_eq!(serde_json::to_string(&HarnessLevel::H2).unwrap(), "\"H2\"");
    }
}
