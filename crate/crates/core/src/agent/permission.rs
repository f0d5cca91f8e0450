//! Permission boundary, approval gates and intervention policy.

use std::path::{Component, Path};

use glob::Pattern;
use serde::{Deserialize, Serialize};

use super::AgentAction;
use crate::episode::InterventionMode;
use crate::trace::{Avoidability, Burden};

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PermissionBoundary {
    #[serde(default)]
    pub allowed_commands: Vec<String>,
    /// Neither readable nor writable.
    #[serde(default)]
    pub forbidden_paths: Vec<String>,
    /// Readable but not writable by the agent.
    #[serde(default)]
    pub read_only_paths: Vec<String>,
    #[serde(default)]
    pub approval_required: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "decision", rename_all = "snake_case")]
pub enum PermissionDecision {
    Allow,
    Deny { reason: String },
    RequireApproval { pattern: String },
}

fn matching<'a>(patterns: &'a [String], s: &str) -> Option<&'a str> {
    patterns
        .iter()
        .find(|p| Pattern::new(p).map(|pat| pat.matches(s)).unwrap_or(false) || p.as_str() == s)
        .map(String::as_str)
}

impl PermissionBoundary {
    pub fn from_toml(text: &str) -> Result<Self, String> {
        let b: Self = toml::from_str(text).map_err(|e| e.to_string())?;
        let problems = b.validate();
        if problems.is_empty() {
            Ok(b)
        } else {
            Err(problems.join("; "))
        }
    }

    /// Patterns must compile, and forbidden/approval patterns may not also
    /// be allowed.
    pub fn validate(&self) -> Vec<String> {
        let mut out = Vec::new();
        for p in self
            .allowed_commands
            .iter()
            .chain(&self.forbidden_paths)
            .chain(&self.read_only_paths)
            .chain(&self.approval_required)
        {
            if let Err(e) = Pattern::new(p) {
                out.push(format!("bad pattern `{p}`: {e}"));
            }
        }
        for p in self.forbidden_paths.iter().chain(&self.approval_required) {
            if self.allowed_commands.contains(p) {
                out.push(format!("pattern `{p}` is both allowed and restricted"));
            }
        }
        out
    }

    fn path_decision(&self, path: &str, write: bool) -> PermissionDecision {
        let p = Path::new(path);
        if path.is_empty() || p.is_absolute() || p.components().any(|c| !matches!(c, Component::Normal(_))) {
            return PermissionDecision::Deny { reason: format!("path `{path}` leaves the workspace") };
        }
        if let Some(pat) = matching(&self.forbidden_paths, path) {
            return PermissionDecision::Deny { reason: format!("path `{path}` is forbidden by `{pat}`") };
        }
        if write {
            if let Some(pat) = matching(&self.read_only_paths, path) {
                return PermissionDecision::Deny { reason: format!("path `{path}` is read-only by `{pat}`") };
            }
        }
        PermissionDecision::Allow
    }

    /// Decision for a resolved shell command.
    pub fn command_decision(&self, command: &str) -> PermissionDecision {
        if let Some(pat) = matching(&self.approval_required, command) {
            return PermissionDecision::RequireApproval { pattern: pat.to_string() };
        }
        if matching(&self.allowed_commands, command).is_some() {
            PermissionDecision::Allow
        } else {
            PermissionDecision::Deny { reason: format!("command `{command}` is not allowed") }
        }
    }
}

/// Deterministic, pattern-based. `RunTool` is judged on its command string;
/// the runner re-checks registry references after resolving them.
pub fn check_permission(action: &AgentAction, boundary: &PermissionBoundary) -> PermissionDecision {
    match action {
        AgentAction::ReadFile { path, .. } => boundary.path_decision(path, false),
        AgentAction::EditFile { path, .. } => boundary.path_decision(path, true),
        AgentAction::RunTool { command, .. } => {
            if command.starts_with("test:") || command.starts_with("check:") {
                PermissionDecision::Allow
            } else {
                boundary.command_decision(command)
            }
        }
        _ => PermissionDecision::Allow,
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ApprovalRule {
    pub pattern: String,
    pub approve: bool,
}

/// Pre-registered answer to an intervention request.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnswerRule {
    pub question_contains: String,
    pub answer: String,
    pub avoidability: Avoidability,
    pub burden: Burden,
    #[serde(default)]
    pub harness_gap: Option<String>,
}

/// Non-interactive resolution of approvals and intervention requests.
/// Approvals not matched by a rule are denied.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InterventionPolicy {
    pub mode: InterventionMode,
    pub approvals: Vec<ApprovalRule>,
    pub answers: Vec<AnswerRule>,
}

impl InterventionPolicy {
    pub fn from_toml(text: &str) -> Result<Self, String> {
        toml::from_str(text).map_err(|e| e.to_string())
    }

    pub fn approves(&self, subject: &str) -> bool {
        self.approvals
            .iter()
            .find(|r| Pattern::new(&r.pattern).map(|p| p.matches(subject)).unwrap_or(false))
            .is_some_and(|r| r.approve)
    }

    pub fn answer(&self, question: &str) -> Option<&AnswerRule> {
        self.answers.iter().find(|a| question.contains(&a.question_contains))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn boundary() -> PermissionBoundary {
        PermissionBoundary::from_toml(include_str!("../../corpus/repoA-T1/permissions.toml")).unwrap()
    }

    fn edit(path: &str) -> AgentAction {
        AgentAction::EditFile { path: path.into(), content: String::new() }
    }

    fn run(cmd: &str) -> AgentAction {
        AgentAction::RunTool { command: cmd.into(), verification: None }
    }

    #[test]
    fn forbidden_edit_is_denied() {
        let b = boundary();
        assert!(matches!(check_permission(&edit(".harnesslab/manifest"), &b), PermissionDecision::Deny { .. }));
        assert!(matches!(check_permission(&edit("harness/AGENT_GUIDE.md"), &b), PermissionDecision::Deny { .. }));
        assert!(matches!(check_permission(&edit("../outside"), &b), PermissionDecision::Deny { .. }));
        assert_eq!(check_permission(&edit("src/validation/validator.sh"), &b), PermissionDecision::Allow);
    }

    #[test]
    fn reads_of_source_and_memory_allowed() {
        let b = boundary();
        let read = |p: &str| AgentAction::ReadFile { path: p.into(), note: None };
        assert_eq!(check_permission(&read("src/validation/validator.sh"), &b), PermissionDecision::Allow);
        assert_eq!(check_permission(&read("harness/ARCHITECTURE.md"), &b), PermissionDecision::Allow);
        assert!(matches!(check_permission(&read(".harnesslab/baseline/x"), &b), PermissionDecision::Deny { .. }));
    }

    #[test]
    fn commands() {
        let b = boundary();
        assert_eq!(
            check_permission(&run("rm -rf src"), &b),
            PermissionDecision::RequireApproval { pattern: "rm *".into() }
        );
        assert_eq!(
            check_permission(&run("sh scripts/run_tests.sh tests/test_login.sh"), &b),
            PermissionDecision::Allow
        );
        assert_eq!(check_permission(&run("sh src/api/login_controller.sh alice ''"), &b), PermissionDecision::Allow);
        assert!(matches!(check_permission(&run("curl example.com"), &b), PermissionDecision::Deny { .. }));
    }

    #[test]
    fn overlapping_patterns_are_invalid() {
        let b = PermissionBoundary {
            allowed_commands: vec!["rm *".into()],
            approval_required: vec!["rm *".into()],
            ..Default::default()
        };
        assert_eq!(b.validate().len(), 1);
    }

    #[test]
    fn approvals_default_to_deny() {
        let mut p = InterventionPolicy::default();
        assert!(!p.approves("rm x"));
        p.approvals.push(ApprovalRule { pattern: "rm scratch*".into(), approve: true });
        assert!(p.approves("rm scratch.txt"));
        assert!(!p.approves("rm src"));
    }
}
