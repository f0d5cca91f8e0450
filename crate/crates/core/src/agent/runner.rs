//! The observe/act loop of one episode.

use std::fs;
use std::path::Path;

use thiserror::Error;

use super::{
    check_permission, Agent, AgentAction, AgentFault, ContextNote, FileView, InterventionPolicy, Observation,
    PermissionBoundary, PermissionDecision, Report, VerificationNote,
};
use crate::adjudicate::{adjudicate, audit_entropy, AdjudicateError, AdjudicationConfig, EvaluatorPack};
use crate::episode::{ArtifactKind, HarnessLevel, InterventionMode, TaskSpec, VisibilityMatrix};
use crate::materialize::{MaterializeError, WorkspaceManifest, HARNESSLAB_DIR};
use crate::snapshot::{unified_diff, Tree};
use crate::tools::{
    run_check_with, run_command_with, CheckList, TestCommandRegistry, ToolConfig, ToolError, ToolResult,
    DEFAULT_TOOL_TIMEOUT_MS,
};
use crate::trace::{
    assemble_package, collect_package, verification_report_path, ActionEvent, ActionOp, AttributionEvent, Avoidability,
    Burden, ContextEvent, EntropyEvent, EpisodePackage, EpisodeStatus, InterventionEvent, OutcomeEvent, Termination,
    ToolEvent, TraceError, TraceEvent, TraceRecorder, VerificationEvent, VerificationResult,
};
use crate::verify::{build_report, coverage, VerificationReport, VerifyError};

pub const DEFAULT_STEP_BUDGET: u32 = 200;

#[derive(Debug, Error)]
pub enum RunError {
    #[error("step budget must be positive")]
    ZeroBudget,
    #[error("workspace is for task {workspace}, not {task}")]
    TaskMismatch { workspace: String, task: String },
    #[error("episode already started in this workspace")]
    AlreadyStarted,
    #[error(transparent)]
    Materialize(#[from] MaterializeError),
    #[error(transparent)]
    Trace(#[from] TraceError),
    #[error(transparent)]
    Tool(#[from] ToolError),
    #[error(transparent)]
    Verify(#[from] VerifyError),
    #[error(transparent)]
    Adjudicate(#[from] AdjudicateError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone)]
pub struct EpisodeConfig {
    pub step_budget: u32,
    pub boundary: PermissionBoundary,
    pub policy: InterventionPolicy,
    pub tool: ToolConfig,
    /// Timeout for raw commands and checks; registered test commands carry
    /// their own.
    pub tool_timeout_ms: u64,
    pub adjudication: AdjudicationConfig,
}

impl Default for EpisodeConfig {
    fn default() -> Self {
        Self {
            step_budget: DEFAULT_STEP_BUDGET,
            boundary: PermissionBoundary::default(),
            policy: InterventionPolicy::default(),
            tool: ToolConfig::default(),
            tool_timeout_ms: DEFAULT_TOOL_TIMEOUT_MS,
            adjudication: AdjudicationConfig::default(),
        }
    }
}

/// A failed tool call whose event is written once recovery is known.
struct Pending {
    action_seq: u64,
    key: String,
    result: ToolResult,
}

struct Episode<'a> {
    ws: &'a Path,
    task: &'a TaskSpec,
    level: HarnessLevel,
    config: &'a EpisodeConfig,
    rec: TraceRecorder,
    pending: Vec<Pending>,
    verification: Vec<VerificationEvent>,
    report: Option<VerificationReport>,
}

enum Step {
    Continue,
    Done,
}

impl<'a> Episode<'a> {
    fn action(&mut self, op: ActionOp, target: &str, note: impl Into<String>) -> Result<u64, RunError> {
        let seq = self.rec.next_seq();
        Ok(self.rec.append(TraceEvent::Action(ActionEvent {
            seq,
            op,
            target: target.to_string(),
            note: note.into(),
        }))?)
    }

    fn intervention(
        &mut self,
        description: String,
        avoidability: Avoidability,
        burden: Burden,
        gap: Option<String>,
    ) -> Result<(), RunError> {
        let seq = self.rec.next_seq();
        self.rec.append(TraceEvent::Intervention(InterventionEvent {
            seq,
            description,
            avoidability,
            burden,
            harness_gap: gap,
        }))?;
        Ok(())
    }

    fn harness_file(&self, kind: ArtifactKind) -> Option<String> {
        if !VisibilityMatrix::standard().is_visible(kind, self.level) {
            return None;
        }
        fs::read_to_string(self.ws.join(kind.workspace_path()?)).ok()
    }

    /// Resolve a command reference and run it. Returns the resolved command,
    /// the tool result and, for checks, whether the check passed.
    fn run_ref(&mut self, command: &str) -> Result<(String, ToolResult, Option<bool>), RunError> {
        enum Target {
            Shell(String, u64),
            Check(crate::tools::DeterministicCheck),
            Missing(String),
        }
        let target = if let Some(name) = command.strip_prefix("test:") {
            match self.harness_file(ArtifactKind::TestCommandRegistry) {
                None => Target::Missing(format!("no test command registry at {}", self.level)),
                Some(md) => match TestCommandRegistry::from_markdown(&md)?.get(name) {
                    Some(t) => Target::Shell(t.command.clone(), t.timeout_ms()),
                    None => Target::Missing(format!("unknown test command `{name}`")),
                },
            }
        } else if let Some(id) = command.strip_prefix("check:") {
            match self.harness_file(ArtifactKind::DeterministicCheckRegistry) {
                None => Target::Missing(format!("no deterministic check registry at {}", self.level)),
                Some(md) => match CheckList::from_markdown(&md)?.get(id) {
                    Some(c) => Target::Check(c.clone()),
                    None => Target::Missing(format!("unknown check `{id}`")),
                },
            }
        } else {
            Target::Shell(command.to_string(), self.config.tool_timeout_ms)
        };

        let resolved = match &target {
            Target::Shell(c, _) => c.clone(),
            Target::Check(c) => c.command.clone(),
            Target::Missing(_) => command.to_string(),
        };
        if let Target::Missing(reason) = target {
            return Ok((resolved.clone(), ToolResult::not_run(&resolved, &reason), None));
        }
        // Raw commands were already checked against the boundary; registry
        // references are checked once resolved.
        let is_ref = command.starts_with("test:") || command.starts_with("check:");
        if let Some(reason) = if is_ref { self.command_denied(&resolved)? } else { None } {
            return Ok((resolved.clone(), ToolResult::not_run(&resolved, &reason), None));
        }
        Ok(match target {
            Target::Shell(c, timeout) => {
                let r = run_command_with(&c, self.ws, timeout, &self.config.tool)?;
                (c, r, None)
            }
            Target::Check(check) => {
                let r = run_check_with(&check, self.ws, self.config.tool_timeout_ms, &self.config.tool)?;
                (check.command.clone(), r.tool, Some(r.passed))
            }
            Target::Missing(_) => unreachable!(),
        })
    }

    /// `None` if the command may run; otherwise the denial reason.
    fn command_denied(&mut self, command: &str) -> Result<Option<String>, RunError> {
        match self.config.boundary.command_decision(command) {
            PermissionDecision::Allow => Ok(None),
            PermissionDecision::Deny { reason } => Ok(Some(reason)),
            PermissionDecision::RequireApproval { pattern } => self.approval(command, &pattern),
        }
    }

    fn approval(&mut self, subject: &str, pattern: &str) -> Result<Option<String>, RunError> {
        let policy = &self.config.policy;
        if policy.mode == InterventionMode::NoneAllowed {
            return Ok(Some(format!("`{subject}` needs approval ({pattern}); interventions are not allowed")));
        }
        let granted = policy.approves(subject);
        let verdict = if granted { "granted" } else { "denied" };
        self.intervention(format!("approval for `{subject}` {verdict}"), Avoidability::Unavoidable, Burden::Low, None)?;
        Ok((!granted).then(|| format!("approval for `{subject}` denied")))
    }

    fn record_tool(&mut self, action_seq: u64, key: String, result: ToolResult) -> Result<(), RunError> {
        if result.failure_type.is_some() {
            self.pending.push(Pending { action_seq, key, result });
            return Ok(());
        }
        let (recovered, rest): (Vec<Pending>, Vec<Pending>) =
            std::mem::take(&mut self.pending).into_iter().partition(|p| p.key == key);
        self.pending = rest;
        for p in recovered {
            self.flush(p, true)?;
        }
        let seq = self.rec.next_seq();
        self.rec.append(TraceEvent::Tool(ToolEvent { seq, action_seq: Some(action_seq), result }))?;
        Ok(())
    }

    fn flush(&mut self, p: Pending, recovered: bool) -> Result<(), RunError> {
        let mut result = p.result;
        result.recovered = Some(recovered);
        let seq = self.rec.next_seq();
        self.rec.append(TraceEvent::Tool(ToolEvent { seq, action_seq: Some(p.action_seq), result }))?;
        Ok(())
    }

    fn verify(&mut self, note: &VerificationNote, method: String, result: VerificationResult) -> Result<(), RunError> {
        let seq = self.rec.next_seq();
        let event = VerificationEvent {
            seq,
            vtype: note.vtype,
            method,
            result,
            covers: note.covers.clone(),
            interpretation: note.interpretation.clone(),
        };
        self.rec.append(TraceEvent::Verification(event.clone()))?;
        self.verification.push(event);
        Ok(())
    }

    fn deny(&mut self, op: ActionOp, target: &str, reason: &str, obs: &mut Observation) -> Result<(), RunError> {
        self.action(op, target, format!("denied: {reason}"))?;
        obs.message = Some(format!("denied: {reason}"));
        Ok(())
    }

    fn step(&mut self, action: AgentAction, obs: &mut Observation) -> Result<Result<Step, AgentFault>, RunError> {
        if let AgentAction::RunTool { verification: Some(v), .. } = &action {
            if let Some(r) = v.covers.iter().find(|r| self.task.requirement(r).is_none()) {
                return Ok(Err(AgentFault(format!("verification covers unknown requirement {r}"))));
            }
        }
        let mut decision = check_permission(&action, &self.config.boundary);
        if let PermissionDecision::RequireApproval { pattern } = &decision {
            let subject = match &action {
                AgentAction::RunTool { command, .. } => command.clone(),
                AgentAction::EditFile { path, .. } | AgentAction::ReadFile { path, .. } => path.clone(),
                _ => String::new(),
            };
            decision = match self.approval(&subject, &pattern.clone())? {
                None => PermissionDecision::Allow,
                Some(reason) => PermissionDecision::Deny { reason },
            };
        }

        match action {
            AgentAction::ReadFile { path, note } => {
                if let PermissionDecision::Deny { reason } = decision {
                    self.deny(ActionOp::ReadFile, &path, &reason, obs)?;
                    return Ok(Ok(Step::Continue));
                }
                self.read_file(&path, note, obs)?;
            }
            AgentAction::EditFile { path, content } => {
                if let PermissionDecision::Deny { reason } = decision {
                    self.deny(ActionOp::EditFile, &path, &reason, obs)?;
                    return Ok(Ok(Step::Continue));
                }
                let full = self.ws.join(&path);
                if let Some(parent) = full.parent() {
                    fs::create_dir_all(parent)?;
                }
                fs::write(full, content)?;
                self.action(ActionOp::EditFile, &path, "")?;
            }
            AgentAction::RunTool { command, verification } => {
                let (action_seq, (resolved, result, passed)) = match decision {
                    PermissionDecision::Deny { reason } => {
                        let seq = self.action(ActionOp::RunTool, &command, format!("denied: {reason}"))?;
                        obs.message = Some(format!("denied: {reason}"));
                        (seq, (command.clone(), ToolResult::not_run(&command, &reason), None))
                    }
                    _ => {
                        let seq = self.action(ActionOp::RunTool, &command, "")?;
                        (seq, self.run_ref(&command)?)
                    }
                };
                if let Some(note) = &verification {
                    let vresult = if result.timed_out {
                        VerificationResult::TimedOut
                    } else if !result.completed() {
                        VerificationResult::Inconclusive
                    } else if passed.unwrap_or_else(|| result.succeeded()) {
                        VerificationResult::Pass
                    } else {
                        VerificationResult::Fail
                    };
                    let method = match command.strip_prefix("check:") {
                        Some(id) => format!("{id}: {resolved}"),
                        None => resolved.clone(),
                    };
                    self.verify(note, method, vresult)?;
                }
                obs.last_tool_result = Some(result.clone());
                self.record_tool(action_seq, resolved, result)?;
            }
            AgentAction::WriteReport { report } => match report {
                Report::Attribution { observed, expected, failure_type, evidence, alternatives, next_action } => {
                    self.action(ActionOp::WriteReport, "attribution", "")?;
                    let seq = self.rec.next_seq();
                    self.rec.append(TraceEvent::Attribution(AttributionEvent {
                        seq,
                        observed,
                        expected,
                        failure_type,
                        evidence,
                        alternatives,
                        next_action,
                    }))?;
                }
                Report::Verification { summary } => {
                    self.action(ActionOp::WriteReport, "verification_report", "")?;
                    let cov = coverage(&self.verification, self.task)?;
                    let mut report = build_report(&cov, &self.verification, false);
                    report.summary = summary;
                    obs.message = Some(report.render_markdown());
                    self.report = Some(report);
                }
            },
            AgentAction::UpdateTaskState { text } => {
                let kind = ArtifactKind::TaskState;
                let path = kind.workspace_path().expect("task state has a path");
                if !VisibilityMatrix::standard().is_visible(kind, self.level) {
                    self.deny(ActionOp::UpdateTaskState, &path, &format!("no task state at {}", self.level), obs)?;
                } else {
                    let mut body = text;
                    if !body.ends_with('\n') {
                        body.push('\n');
                    }
                    fs::write(self.ws.join(&path), body)?;
                    self.action(ActionOp::UpdateTaskState, &path, "")?;
                }
            }
            AgentAction::InspectDiff => {
                let baseline = Tree::load(&WorkspaceManifest::baseline_dir(self.ws), |_| false)?;
                let current = Tree::load_repo(self.ws)?;
                obs.last_diff = Some(unified_diff(&baseline, &current));
                self.action(ActionOp::InspectDiff, "", "")?;
            }
            AgentAction::DeclareComplete => {
                self.action(ActionOp::DeclareComplete, "", "")?;
                return Ok(Ok(Step::Done));
            }
            AgentAction::RequestIntervention { question } => {
                let policy = &self.config.policy;
                if policy.mode == InterventionMode::NoneAllowed {
                    obs.message = Some("interventions are not allowed".to_string());
                } else if let Some(rule) = policy.answer(&question).cloned() {
                    self.intervention(
                        format!("Q: {question} A: {}", rule.answer),
                        rule.avoidability,
                        rule.burden,
                        rule.harness_gap.clone(),
                    )?;
                    obs.message = Some(rule.answer);
                } else {
                    obs.message = Some("no answer available".to_string());
                }
            }
        }
        Ok(Ok(Step::Continue))
    }

    fn read_file(&mut self, path: &str, note: Option<ContextNote>, obs: &mut Observation) -> Result<(), RunError> {
        let Ok(content) = fs::read_to_string(self.ws.join(path)) else {
            self.action(ActionOp::ReadFile, path, "not found")?;
            obs.message = Some(format!("no such file: {path}"));
            return Ok(());
        };
        self.action(ActionOp::ReadFile, path, "")?;
        if self.level >= HarnessLevel::H2 && path.starts_with("harness/") {
            if let Some(kind) = ArtifactKind::from_workspace_path(path) {
                let note = note.unwrap_or(ContextNote { contribution: String::new(), influenced_decision: false });
                let seq = self.rec.next_seq();
                self.rec.append(TraceEvent::Context(ContextEvent {
                    seq,
                    artifact: kind,
                    contribution: note.contribution,
                    influenced_decision: note.influenced_decision,
                }))?;
            }
        }
        obs.last_file = Some(FileView { path: path.to_string(), content });
        Ok(())
    }
}

fn visible_files(ws: &Path) -> Result<Vec<String>, std::io::Error> {
    let tree = Tree::load(ws, |rel| rel == HARNESSLAB_DIR || rel.starts_with(".harnesslab/"))?;
    Ok(tree.files.into_keys().collect())
}

/// Drive `agent` on a materialized workspace until it declares completion,
/// faults or runs out of steps; then audit, adjudicate and return the
/// package.
pub fn run_episode(
    agent: &mut dyn Agent,
    workspace: &Path,
    task: &TaskSpec,
    evaluator: &EvaluatorPack,
    config: &EpisodeConfig,
) -> Result<EpisodePackage, RunError> {
    if config.step_budget == 0 {
        return Err(RunError::ZeroBudget);
    }
    let manifest = WorkspaceManifest::load(workspace)?;
    if manifest.task_id != task.task_id {
        return Err(RunError::TaskMismatch { workspace: manifest.task_id, task: task.task_id.clone() });
    }
    if EpisodeStatus::read(workspace)?.is_some() {
        return Err(RunError::AlreadyStarted);
    }
    let rec = TraceRecorder::open(workspace, manifest.level)?;
    if rec.last_seq() > 0 {
        return Err(RunError::AlreadyStarted);
    }
    let mut ep = Episode {
        ws: workspace,
        task,
        level: manifest.level,
        config,
        rec,
        pending: Vec::new(),
        verification: Vec::new(),
        report: None,
    };
    let task_text = fs::read_to_string(workspace.join("TASK.md")).unwrap_or_else(|_| task.render_markdown());
    let mut obs = Observation {
        level: manifest.level,
        task_text,
        visible_files: visible_files(workspace)?,
        step_budget_remaining: config.step_budget,
        last_tool_result: None,
        last_file: None,
        last_diff: None,
        message: None,
    };

    let mut termination = Termination::BudgetExhausted;
    let mut detail = format!("step budget of {} exhausted", config.step_budget);
    for used in 0..config.step_budget {
        obs.step_budget_remaining = config.step_budget - used;
        let action = match agent.next_action(&obs) {
            Ok(a) => a,
            Err(fault) => {
                termination = Termination::AgentFault;
                detail = fault.0;
                break;
            }
        };
        obs.last_tool_result = None;
        obs.last_file = None;
        obs.last_diff = None;
        obs.message = None;
        match ep.step(action, &mut obs)? {
            Ok(Step::Done) => {
                termination = Termination::DeclaredComplete;
                detail.clear();
                break;
            }
            Ok(Step::Continue) => {}
            Err(fault) => {
                termination = Termination::AgentFault;
                detail = fault.0;
                break;
            }
        }
        obs.visible_files = visible_files(workspace)?;
    }

    for p in std::mem::take(&mut ep.pending) {
        ep.flush(p, false)?;
    }
    if let Some(mut report) = ep.report.take() {
        report.declared_complete = termination == Termination::DeclaredComplete;
        fs::write(
            verification_report_path(workspace),
            serde_json::to_string_pretty(&report).map_err(TraceError::from)? + "\n",
        )?;
    }
    EpisodeStatus { agent_id: agent.id().to_string(), termination, detail, intervention_policy: config.policy.mode }
        .write(workspace)?;

    let audit =
        audit_entropy(&WorkspaceManifest::baseline_dir(workspace), workspace, evaluator, &config.adjudication.entropy)?;
    for finding in audit.findings {
        let seq = ep.rec.next_seq();
        ep.rec.append(TraceEvent::Entropy(EntropyEvent { seq, finding }))?;
    }

    let pkg = collect_package(workspace)?;
    let record = adjudicate(&pkg, evaluator, workspace, &config.adjudication)?;
    let seq = ep.rec.next_seq();
    ep.rec.append(TraceEvent::Outcome(OutcomeEvent { seq, record }))?;
    Ok(assemble_package(workspace)?)
}
