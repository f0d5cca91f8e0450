//! The agent contract: observations in, actions out.

mod model;
mod permission;
mod runner;
mod scripted;

pub use model::{ModelAdapter, ModelAgent, ModelClient};
pub use permission::{
    check_permission, AnswerRule, ApprovalRule, InterventionPolicy, PermissionBoundary, PermissionDecision,
};
pub use runner::{run_episode, EpisodeConfig, RunError, DEFAULT_STEP_BUDGET};
pub use scripted::{AgentScript, Guard, ScriptError, ScriptStep, ScriptedAgent};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::episode::{FailureType, HarnessLevel};
use crate::tools::ToolResult;
use crate::trace::VerificationType;

/// An error raised by agent code; ends the episode.
#[derive(Debug, Clone, Error, PartialEq, Eq)]
#[error("agent fault: {0}")]
pub struct AgentFault(pub String);

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileView {
    pub path: String,
    pub content: String,
}

/// What the agent sees before choosing its next action. The per-step fields
/// describe the result of the previous action only.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Observation {
    pub level: HarnessLevel,
    pub task_text: String,
    pub visible_files: Vec<String>,
    pub step_budget_remaining: u32,
    pub last_tool_result: Option<ToolResult>,
    pub last_file: Option<FileView>,
    pub last_diff: Option<String>,
    /// Runner feedback such as a denial or an intervention answer.
    pub message: Option<String>,
}

/// How a file read contributed, recorded as a context event for project
/// memory reads.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ContextNote {
    pub contribution: String,
    #[serde(default)]
    pub influenced_decision: bool,
}

/// Declares that a tool run is verification evidence.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VerificationNote {
    pub vtype: VerificationType,
    #[serde(default)]
    pub covers: Vec<String>,
    #[serde(default)]
    pub interpretation: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Report {
    /// Ask the runner to build the structured verification report from the
    /// verification trace.
    Verification { summary: String },
    Attribution {
        observed: String,
        expected: String,
        failure_type: FailureType,
        evidence: String,
        alternatives: Vec<String>,
        next_action: String,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "action", rename_all = "snake_case", deny_unknown_fields)]
pub enum AgentAction {
    ReadFile {
        path: String,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        note: Option<ContextNote>,
    },
    EditFile {
        path: String,
        content: String,
    },
    /// `command` is `test:<name>`, `check:<id>` or a shell command.
    RunTool {
        command: String,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        verification: Option<VerificationNote>,
    },
    WriteReport {
        report: Report,
    },
    UpdateTaskState {
        text: String,
    },
    InspectDiff,
    DeclareComplete,
    RequestIntervention {
        question: String,
    },
}

pub trait Agent {
    fn id(&self) -> &str;
    fn next_action(&mut self, obs: &Observation) -> Result<AgentAction, AgentFault>;
}
