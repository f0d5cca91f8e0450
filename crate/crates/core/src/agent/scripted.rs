//! Deterministic agents that replay a TOML action script.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{Agent, AgentAction, AgentFault, ContextNote, Observation, Report, VerificationNote};
use crate::episode::{ArtifactKind, FailureType, HarnessLevel, TaskSpec, VisibilityMatrix};
use crate::snapshot::Tree;
use crate::verify::CheckRegistry;

#[derive(Debug, Error)]
pub enum ScriptError {
    #[error("malformed script {path}: {message}")]
    Parse { path: PathBuf, message: String },
    #[error("script references missing: {}", .0.join("; "))]
    ReferenceMissing(Vec<String>),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

/// Expected observation after a step; a mismatch is an agent fault.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Guard {
    pub stdout_contains: Option<String>,
    pub exit_code: Option<i32>,
    pub timed_out: Option<bool>,
    pub file_contains: Option<String>,
}

impl Guard {
    pub fn check(&self, obs: &Observation) -> Result<(), String> {
        let tool = obs.last_tool_result.as_ref();
        if let Some(s) = &self.stdout_contains {
            match tool {
                Some(t) if t.stdout.contains(s.as_str()) => {}
                Some(t) => return Err(format!("stdout lacks {s:?}; got {:?}", t.stdout.trim_end())),
                None => return Err("no tool result".into()),
            }
        }
        if let Some(code) = self.exit_code {
            match tool {
                Some(t) if t.exit_code == Some(code) => {}
                Some(t) => return Err(format!("exit code {:?}, expected {code}", t.exit_code)),
                None => return Err("no tool result".into()),
            }
        }
        if let Some(to) = self.timed_out {
            if tool.map(|t| t.timed_out) != Some(to) {
                return Err(format!("timed_out is not {to}"));
            }
        }
        if let Some(s) = &self.file_contains {
            match &obs.last_file {
                Some(f) if f.content.contains(s.as_str()) => {}
                Some(f) => return Err(format!("{} lacks {s:?}", f.path)),
                None => return Err("no file was read".into()),
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ScriptStep {
    pub action: AgentAction,
    pub expect: Option<Guard>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AgentScript {
    pub name: String,
    pub level: HarnessLevel,
    pub description: String,
    pub steps: Vec<ScriptStep>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawScript {
    name: String,
    level: HarnessLevel,
    #[serde(default)]
    description: String,
    steps: Vec<RawStep>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawStep {
    action: String,
    path: Option<String>,
    content: Option<String>,
    content_from: Option<String>,
    contribution: Option<String>,
    influenced_decision: Option<bool>,
    command: Option<String>,
    verification: Option<VerificationNote>,
    summary: Option<String>,
    observed: Option<String>,
    expected: Option<String>,
    failure_type: Option<FailureType>,
    evidence: Option<String>,
    alternatives: Option<Vec<String>>,
    next_action: Option<String>,
    text: Option<String>,
    question: Option<String>,
    expect: Option<Guard>,
}

fn need<T>(v: Option<T>, field: &str, i: usize, action: &str) -> Result<T, String> {
    v.ok_or_else(|| format!("step {}: {action} needs `{field}`", i + 1))
}

impl RawStep {
    fn into_step(self, i: usize, payload_root: &Path) -> Result<ScriptStep, String> {
        let a = self.action.as_str();
        let action = match a {
            "read_file" => AgentAction::ReadFile {
                path: need(self.path, "path", i, a)?,
                note: self.contribution.map(|contribution| ContextNote {
                    contribution,
                    influenced_decision: self.influenced_decision.unwrap_or(false),
                }),
            },
            "edit_file" => {
                let path = need(self.path, "path", i, a)?;
                let content = match (self.content, self.content_from) {
                    (Some(c), None) => c,
                    (None, Some(from)) => {
                        let p = payload_root.join(&from);
                        fs::read_to_string(&p).map_err(|_| format!("step {}: payload {from} not found", i + 1))?
                    }
                    _ => {
                        return Err(format!("step {}: edit_file needs exactly one of `content`, `content_from`", i + 1))
                    }
                };
                AgentAction::EditFile { path, content }
            }
            "run_tool" => {
                AgentAction::RunTool { command: need(self.command, "command", i, a)?, verification: self.verification }
            }
            "write_report" => {
                AgentAction::WriteReport { report: Report::Verification { summary: self.summary.unwrap_or_default() } }
            }
            "write_attribution" => AgentAction::WriteReport {
                report: Report::Attribution {
                    observed: need(self.observed, "observed", i, a)?,
                    expected: need(self.expected, "expected", i, a)?,
                    failure_type: need(self.failure_type, "failure_type", i, a)?,
                    evidence: need(self.evidence, "evidence", i, a)?,
                    alternatives: self.alternatives.unwrap_or_default(),
                    next_action: need(self.next_action, "next_action", i, a)?,
                },
            },
            "update_task_state" => AgentAction::UpdateTaskState { text: need(self.text, "text", i, a)? },
            "inspect_diff" => AgentAction::InspectDiff,
            "declare_complete" => AgentAction::DeclareComplete,
            "request_intervention" => {
                AgentAction::RequestIntervention { question: need(self.question, "question", i, a)? }
            }
            other => return Err(format!("step {}: unknown action `{other}`", i + 1)),
        };
        Ok(ScriptStep { action, expect: self.expect })
    }
}

impl AgentScript {
    /// Parse a script; `content_from` payloads resolve against `payload_root`.
    pub fn parse(text: &str, payload_root: &Path, origin: &Path) -> Result<Self, ScriptError> {
        let parse_err = |message: String| ScriptError::Parse { path: origin.to_path_buf(), message };
        let raw: RawScript = toml::from_str(text).map_err(|e| parse_err(e.to_string()))?;
        let mut steps = Vec::with_capacity(raw.steps.len());
        let mut missing = Vec::new();
        for (i, s) in raw.steps.into_iter().enumerate() {
            match s.into_step(i, payload_root) {
                Ok(step) => steps.push(step),
                Err(e) if e.contains("payload") => missing.push(e),
                Err(e) => return Err(parse_err(e)),
            }
        }
        if !missing.is_empty() {
            return Err(ScriptError::ReferenceMissing(missing));
        }
        Ok(Self { name: raw.name, level: raw.level, description: raw.description, steps })
    }

    /// Load `<task_dir>/agents/<name>.toml`.
    pub fn load(task_dir: &Path, name: &str) -> Result<Self, ScriptError> {
        let path = task_dir.join("agents").join(format!("{name}.toml"));
        let text = fs::read_to_string(&path).map_err(|source| ScriptError::Io { path: path.clone(), source })?;
        Self::parse(&text, task_dir, &path)
    }

    /// Every file, command reference and requirement the script names must
    /// exist for its task at its level.
    pub fn validate(&self, task: &TaskSpec, registry: &CheckRegistry, repo: &Tree) -> Vec<String> {
        let matrix = VisibilityMatrix::standard();
        let mut out = Vec::new();
        let mut created: BTreeSet<&str> = BTreeSet::new();
        for (i, step) in self.steps.iter().enumerate() {
            let n = i + 1;
            match &step.action {
                AgentAction::ReadFile { path, .. } => {
                    let ok = match ArtifactKind::from_workspace_path(path) {
                        Some(kind) => matrix.is_visible(kind, self.level),
                        None => repo.files.contains_key(path) || created.contains(path.as_str()),
                    };
                    if !ok {
                        out.push(format!("step {n}: {path} does not exist at {}", self.level));
                    }
                }
                AgentAction::EditFile { path, .. } => {
                    created.insert(path);
                }
                AgentAction::RunTool { command, verification } => {
                    if let Some(name) = command.strip_prefix("test:") {
                        if registry.test_commands.iter().all(|t| t.name != name) {
                            out.push(format!("step {n}: unknown test command {name}"));
                        }
                    }
                    if let Some(id) = command.strip_prefix("check:") {
                        if registry.checks.iter().all(|c| c.check_id != id) {
                            out.push(format!("step {n}: unknown check {id}"));
                        }
                    }
                    for r in verification.iter().flat_map(|v| &v.covers) {
                        if task.requirement(r).is_none() {
                            out.push(format!("step {n}: unknown requirement {r}"));
                        }
                    }
                }
                _ => {}
            }
        }
        out
    }
}

/// Replays an [`AgentScript`]. Before each step it checks the previous
/// step's guard against the current observation.
#[derive(Debug, Clone)]
pub struct ScriptedAgent {
    script: AgentScript,
    cursor: usize,
}

impl ScriptedAgent {
    pub fn new(script: AgentScript) -> Self {
        Self { script, cursor: 0 }
    }

    /// Load and validate a shipped script.
    pub fn load(
        task_dir: &Path,
        name: &str,
        task: &TaskSpec,
        registry: &CheckRegistry,
        repo: &Tree,
    ) -> Result<Self, ScriptError> {
        let script = AgentScript::load(task_dir, name)?;
        let problems = script.validate(task, registry, repo);
        if !problems.is_empty() {
            return Err(ScriptError::ReferenceMissing(problems));
        }
        Ok(Self::new(script))
    }

    pub fn script(&self) -> &AgentScript {
        &self.script
    }
}

impl Agent for ScriptedAgent {
    fn id(&self) -> &str {
        &self.script.name
    }

    fn next_action(&mut self, obs: &Observation) -> Result<AgentAction, AgentFault> {
        if self.cursor > 0 {
            if let Some(guard) = &self.script.steps[self.cursor - 1].expect {
                guard.check(obs).map_err(|e| AgentFault(format!("guard of step {} failed: {e}", self.cursor)))?;
            }
        }
        let step = self
            .script
            .steps
            .get(self.cursor)
            .ok_or_else(|| AgentFault("script ended without declare_complete".into()))?;
        self.cursor += 1;
        Ok(step.action.clone())
    }
}
