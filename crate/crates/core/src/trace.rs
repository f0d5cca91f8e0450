//! The eight episode traces: typed events, append-only JSONL recording with
//! per-kind schema checks, and episode package assembly, export and
//! validation.
//!
//! Layout inside a workspace:
//!
//! ```text
//! .harnesslab/manifest.json
//! .harnesslab/status.json
//! .harnesslab/baseline/...            repository at materialization time
//! .harnesslab/traces/<kind>.jsonl
//! .harnesslab/verification_report.json
//! ```
//!
//! Exported package directory:
//!
//! ```text
//! package.json  traces/<kind>.jsonl  patch.diff
//! verification_report.json  verification_report.md  outcome.json
//! ```

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs::{self, File, OpenOptions};
use std::io::{self, BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::adjudicate::OutcomeRecord;
use crate::episode::{ArtifactKind, FailureType, HarnessLevel, InterventionMode, OutcomeLabel};
use crate::materialize::{WorkspaceManifest, HARNESSLAB_DIR};
use crate::snapshot::{self, Tree};
use crate::tools::ToolResult;
use crate::verify::VerificationReport;

pub const SCHEMA_VERSION: &str = "harnesslab.trace/1";

#[derive(Debug, Error)]
pub enum TraceError {
    #[error("schema violation in {kind} event: {message}")]
    Schema { kind: TraceKind, message: String },
    #[error("seq regression: {seq} does not exceed last seq {last}")]
    SeqRegression { seq: u64, last: u64 },
    #[error("episode {0} is unfinished")]
    Unfinished(String),
    #[error("episode {0} has no outcome record")]
    MissingOutcome(String),
    #[error("malformed package: {0}")]
    Malformed(String),
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TraceKind {
    Action,
    Tool,
    Context,
    Verification,
    Attribution,
    Intervention,
    Entropy,
    Outcome,
}

impl TraceKind {
    pub const ALL: [TraceKind; 8] = [
        Self::Action,
        Self::Tool,
        Self::Context,
        Self::Verification,
        Self::Attribution,
        Self::Intervention,
        Self::Entropy,
        Self::Outcome,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Action => "action",
            Self::Tool => "tool",
            Self::Context => "context",
            Self::Verification => "verification",
            Self::Attribution => "attribution",
            Self::Intervention => "intervention",
            Self::Entropy => "entropy",
            Self::Outcome => "outcome",
        }
    }

    pub fn file_name(self) -> String {
        format!("{}.jsonl", self.as_str())
    }
}

impl fmt::Display for TraceKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TraceKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL.into_iter().find(|k| k.as_str() == s).ok_or_else(|| format!("unknown trace kind `{s}`"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActionOp {
    ReadFile,
    EditFile,
    RunTool,
    WriteReport,
    UpdateTaskState,
    InspectDiff,
    DeclareComplete,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ActionEvent {
    pub seq: u64,
    pub op: ActionOp,
    pub target: String,
    #[serde(default)]
    pub note: String,
}

/// A tool-runtime result, linked to the `run_tool` action that caused it.
/// Written once the recovery status is known.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ToolEvent {
    pub seq: u64,
    pub action_seq: Option<u64>,
    pub result: ToolResult,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ContextEvent {
    pub seq: u64,
    pub artifact: ArtifactKind,
    pub contribution: String,
    pub influenced_decision: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VerificationType {
    BugReproduction,
    DeterministicCheck,
    RegisteredTest,
    TargetedTest,
    FullRegression,
    Lint,
    PatchReview,
    ManualEvaluatorCheck,
}

impl VerificationType {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::BugReproduction => "bug_reproduction",
            Self::DeterministicCheck => "deterministic_check",
            Self::RegisteredTest => "registered_test",
            Self::TargetedTest => "targeted_test",
            Self::FullRegression => "full_regression",
            Self::Lint => "lint",
            Self::PatchReview => "patch_review",
            Self::ManualEvaluatorCheck => "manual_evaluator_check",
        }
    }

    /// Evaluator evidence never counts towards the agent's own verification.
    pub fn is_evaluator_side(self) -> bool {
        matches!(self, Self::PatchReview | Self::ManualEvaluatorCheck)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VerificationResult {
    Pass,
    Fail,
    TimedOut,
    Inconclusive,
}

impl VerificationResult {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Pass => "pass",
            Self::Fail => "fail",
            Self::TimedOut => "timed_out",
            Self::Inconclusive => "inconclusive",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VerificationEvent {
    pub seq: u64,
    pub vtype: VerificationType,
    pub method: String,
    pub result: VerificationResult,
    pub covers: Vec<String>,
    #[serde(default)]
    pub interpretation: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttributionEvent {
    pub seq: u64,
    pub observed: String,
    pub expected: String,
    pub failure_type: FailureType,
    pub evidence: String,
    pub alternatives: Vec<String>,
    pub next_action: String,
}

impl AttributionEvent {
    /// All six content fields are present.
    pub fn is_complete(&self) -> bool {
        !self.observed.trim().is_empty()
            && !self.expected.trim().is_empty()
            && !self.evidence.trim().is_empty()
            && !self.next_action.trim().is_empty()
            && self.alternatives.iter().any(|a| !a.trim().is_empty())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Avoidability {
    AvoidableMissingHarness,
    Unavoidable,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Burden {
    Low,
    Medium,
    High,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InterventionEvent {
    pub seq: u64,
    pub description: String,
    pub avoidability: Avoidability,
    pub burden: Burden,
    #[serde(default)]
    pub harness_gap: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EntropyCategory {
    Code,
    Documentation,
    Dependency,
    Test,
    FileResidue,
    Architecture,
    Workflow,
}

impl EntropyCategory {
    pub const ALL: [EntropyCategory; 7] = [
        Self::Code,
        Self::Documentation,
        Self::Dependency,
        Self::Test,
        Self::FileResidue,
        Self::Architecture,
        Self::Workflow,
    ];
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EntropyFinding {
    pub category: EntropyCategory,
    pub severity: u8,
    pub description: String,
    pub paths: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EntropyEvent {
    pub seq: u64,
    pub finding: EntropyFinding,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutcomeEvent {
    pub seq: u64,
    pub record: OutcomeRecord,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum TraceEvent {
    Action(ActionEvent),
    Tool(ToolEvent),
    Context(ContextEvent),
    Verification(VerificationEvent),
    Attribution(AttributionEvent),
    Intervention(InterventionEvent),
    Entropy(EntropyEvent),
    Outcome(OutcomeEvent),
}

impl TraceEvent {
    pub fn kind(&self) -> TraceKind {
        match self {
            Self::Action(_) => TraceKind::Action,
            Self::Tool(_) => TraceKind::Tool,
            Self::Context(_) => TraceKind::Context,
            Self::Verification(_) => TraceKind::Verification,
            Self::Attribution(_) => TraceKind::Attribution,
            Self::Intervention(_) => TraceKind::Intervention,
            Self::Entropy(_) => TraceKind::Entropy,
            Self::Outcome(_) => TraceKind::Outcome,
        }
    }

    pub fn seq(&self) -> u64 {
        match self {
            Self::Action(e) => e.seq,
            Self::Tool(e) => e.seq,
            Self::Context(e) => e.seq,
            Self::Verification(e) => e.seq,
            Self::Attribution(e) => e.seq,
            Self::Intervention(e) => e.seq,
            Self::Entropy(e) => e.seq,
            Self::Outcome(e) => e.seq,
        }
    }

    fn to_value(&self) -> Result<Value, serde_json::Error> {
        serde_json::to_value(self)
    }
}

fn parse_as<T: DeserializeOwned>(kind: TraceKind, value: Value) -> Result<T, TraceError> {
    serde_json::from_value(value).map_err(|e| TraceError::Schema { kind, message: e.to_string() })
}

/// Parse and check one record against the schema of `kind`. `level`, when
/// known, enables the level-dependent rules (context artifacts must be
/// visible at the episode's level).
pub fn validate_event(kind: TraceKind, value: Value, level: Option<HarnessLevel>) -> Result<TraceEvent, TraceError> {
    let schema = |message: String| TraceError::Schema { kind, message };
    let event = match kind {
        TraceKind::Action => TraceEvent::Action(parse_as(kind, value)?),
        TraceKind::Tool => {
            let e: ToolEvent = parse_as(kind, value)?;
            let failed = e.result.timed_out || e.result.exit_code != Some(0);
            if failed != e.result.failure_type.is_some() {
                return Err(schema("failure_type must be present iff the call failed".into()));
            }
            if e.result.timed_out && e.result.exit_code.is_some() {
                return Err(schema("timed-out call cannot carry an exit code".into()));
            }
            TraceEvent::Tool(e)
        }
        TraceKind::Context => {
            let e: ContextEvent = parse_as(kind, value)?;
            if !e.artifact.is_harness_file() || e.artifact == ArtifactKind::HiddenEvaluatorNotes {
                return Err(schema(format!("{} is not a project-memory artifact", e.artifact)));
            }
            if let Some(level) = level {
                if !crate::episode::VisibilityMatrix::standard().is_visible(e.artifact, level) {
                    return Err(schema(format!("{} is not visible at {level}", e.artifact)));
                }
            }
            TraceEvent::Context(e)
        }
        TraceKind::Verification => TraceEvent::Verification(parse_as(kind, value)?),
        TraceKind::Attribution => TraceEvent::Attribution(parse_as(kind, value)?),
        TraceKind::Intervention => {
            let e: InterventionEvent = parse_as(kind, value)?;
            let gap = e.harness_gap.as_deref().is_some_and(|g| !g.trim().is_empty());
            if e.avoidability == Avoidability::AvoidableMissingHarness && !gap {
                return Err(schema("avoidable_missing_harness intervention needs a harness_gap".into()));
            }
            TraceEvent::Intervention(e)
        }
        TraceKind::Entropy => {
            let e: EntropyEvent = parse_as(kind, value)?;
            if e.finding.severity > 3 {
                return Err(schema(format!("severity {} outside 0..=3", e.finding.severity)));
            }
            TraceEvent::Entropy(e)
        }
        TraceKind::Outcome => TraceEvent::Outcome(parse_as(kind, value)?),
    };
    Ok(event)
}

/// Per-kind event lists of one episode.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Traces {
    pub action: Vec<ActionEvent>,
    pub tool: Vec<ToolEvent>,
    pub context: Vec<ContextEvent>,
    pub verification: Vec<VerificationEvent>,
    pub attribution: Vec<AttributionEvent>,
    pub intervention: Vec<InterventionEvent>,
    pub entropy: Vec<EntropyEvent>,
    pub outcome: Vec<OutcomeEvent>,
}

impl Traces {
    pub fn len(&self, kind: TraceKind) -> usize {
        match kind {
            TraceKind::Action => self.action.len(),
            TraceKind::Tool => self.tool.len(),
            TraceKind::Context => self.context.len(),
            TraceKind::Verification => self.verification.len(),
            TraceKind::Attribution => self.attribution.len(),
            TraceKind::Intervention => self.intervention.len(),
            TraceKind::Entropy => self.entropy.len(),
            TraceKind::Outcome => self.outcome.len(),
        }
    }

    pub fn push(&mut self, event: TraceEvent) {
        match event {
            TraceEvent::Action(e) => self.action.push(e),
            TraceEvent::Tool(e) => self.tool.push(e),
            TraceEvent::Context(e) => self.context.push(e),
            TraceEvent::Verification(e) => self.verification.push(e),
            TraceEvent::Attribution(e) => self.attribution.push(e),
            TraceEvent::Intervention(e) => self.intervention.push(e),
            TraceEvent::Entropy(e) => self.entropy.push(e),
            TraceEvent::Outcome(e) => self.outcome.push(e),
        }
    }

    /// Events of one kind, in file order.
    pub fn events(&self, kind: TraceKind) -> Vec<TraceEvent> {
        match kind {
            TraceKind::Action => self.action.iter().cloned().map(TraceEvent::Action).collect(),
            TraceKind::Tool => self.tool.iter().cloned().map(TraceEvent::Tool).collect(),
            TraceKind::Context => self.context.iter().cloned().map(TraceEvent::Context).collect(),
            TraceKind::Verification => self.verification.iter().cloned().map(TraceEvent::Verification).collect(),
            TraceKind::Attribution => self.attribution.iter().cloned().map(TraceEvent::Attribution).collect(),
            TraceKind::Intervention => self.intervention.iter().cloned().map(TraceEvent::Intervention).collect(),
            TraceKind::Entropy => self.entropy.iter().cloned().map(TraceEvent::Entropy).collect(),
            TraceKind::Outcome => self.outcome.iter().cloned().map(TraceEvent::Outcome).collect(),
        }
    }

    pub fn total_entropy_severity(&self) -> u32 {
        self.entropy.iter().map(|e| u32::from(e.finding.severity)).sum()
    }

    /// Load `<dir>/<kind>.jsonl` for every kind; missing files are empty.
    pub fn load_dir(dir: &Path, level: Option<HarnessLevel>) -> Result<Self, TraceError> {
        let mut traces = Traces::default();
        for kind in TraceKind::ALL {
            let path = dir.join(kind.file_name());
            if !path.exists() {
                continue;
            }
            for (lineno, line) in BufReader::new(File::open(&path)?).lines().enumerate() {
                let line = line?;
                if line.trim().is_empty() {
                    continue;
                }
                let value: Value = serde_json::from_str(&line)
                    .map_err(|e| TraceError::Schema { kind, message: format!("line {}: {e}", lineno + 1) })?;
                traces.push(validate_event(kind, value, level)?);
            }
        }
        Ok(traces)
    }

    pub fn write_dir(&self, dir: &Path) -> Result<(), TraceError> {
        fs::create_dir_all(dir)?;
        for kind in TraceKind::ALL {
            let mut out = String::new();
            for e in self.events(kind) {
                out.push_str(&serde_json::to_string(&e)?);
                out.push('\n');
            }
            fs::write(dir.join(kind.file_name()), out)?;
        }
        Ok(())
    }
}

/// Append-only writer for one episode's traces. `seq` is one logical clock
/// shared by all eight files.
#[derive(Debug)]
pub struct TraceRecorder {
    dir: PathBuf,
    level: HarnessLevel,
    last_seq: u64,
}

impl TraceRecorder {
    pub fn traces_dir(workspace: &Path) -> PathBuf {
        workspace.join(HARNESSLAB_DIR).join("traces")
    }

    /// Open the recorder of a materialized workspace, resuming after the
    /// highest seq already on disk.
    pub fn open(workspace: &Path, level: HarnessLevel) -> Result<Self, TraceError> {
        let dir = Self::traces_dir(workspace);
        fs::create_dir_all(&dir)?;
        let existing = Traces::load_dir(&dir, Some(level))?;
        let last_seq = TraceKind::ALL.iter().flat_map(|k| existing.events(*k)).map(|e| e.seq()).max().unwrap_or(0);
        Ok(Self { dir, level, last_seq })
    }

    pub fn next_seq(&self) -> u64 {
        self.last_seq + 1
    }

    pub fn last_seq(&self) -> u64 {
        self.last_seq
    }

    pub fn level(&self) -> HarnessLevel {
        self.level
    }

    pub fn append(&mut self, event: TraceEvent) -> Result<u64, TraceError> {
        let kind = event.kind();
        let value = event.to_value()?;
        self.append_value(kind, value)
    }

    /// Validate an untyped record and append it.
    pub fn append_value(&mut self, kind: TraceKind, value: Value) -> Result<u64, TraceError> {
        let event = validate_event(kind, value, Some(self.level))?;
        let seq = event.seq();
        if seq <= self.last_seq {
            return Err(TraceError::SeqRegression { seq, last: self.last_seq });
        }
        let mut line = serde_json::to_string(&event)?;
        line.push('\n');
        let mut f = OpenOptions::new().create(true).append(true).open(self.dir.join(kind.file_name()))?;
        f.write_all(line.as_bytes())?;
        f.sync_data()?;
        self.last_seq = seq;
        Ok(seq)
    }

    pub fn load(&self) -> Result<Traces, TraceError> {
        Traces::load_dir(&self.dir, Some(self.level))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    DeclaredComplete,
    BudgetExhausted,
    AgentFault,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EpisodeStatus {
    pub agent_id: String,
    pub termination: Termination,
    #[serde(default)]
    pub detail: String,
    #[serde(default)]
    pub intervention_policy: InterventionMode,
}

impl EpisodeStatus {
    fn path(workspace: &Path) -> PathBuf {
        workspace.join(HARNESSLAB_DIR).join("status.json")
    }

    pub fn write(&self, workspace: &Path) -> Result<(), TraceError> {
        fs::write(Self::path(workspace), serde_json::to_string_pretty(self)? + "\n")?;
        Ok(())
    }

    pub fn read(workspace: &Path) -> Result<Option<Self>, TraceError> {
        let p = Self::path(workspace);
        if !p.exists() {
            return Ok(None);
        }
        Ok(Some(serde_json::from_str(&fs::read_to_string(p)?)?))
    }
}

/// Auditable record of one episode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EpisodePackage {
    pub schema_version: String,
    pub episode_id: String,
    pub agent_id: String,
    pub level: HarnessLevel,
    pub task_id: String,
    pub repo_revision: String,
    pub termination: Termination,
    pub intervention_policy: InterventionMode,
    pub traces: Traces,
    pub patch: String,
    /// Present only when the agent wrote a verification report.
    pub verification_report: Option<VerificationReport>,
    pub outcome: Option<OutcomeRecord>,
}

impl EpisodePackage {
    pub fn label(&self) -> Option<OutcomeLabel> {
        self.outcome.as_ref().map(|o| o.label)
    }

    pub fn read_paths(&self) -> BTreeSet<&str> {
        self.traces.action.iter().filter(|a| a.op == ActionOp::ReadFile).map(|a| a.target.as_str()).collect()
    }

    pub fn edited_paths(&self) -> BTreeSet<&str> {
        self.traces
            .action
            .iter()
            .filter(|a| a.op == ActionOp::EditFile && !a.note.starts_with("denied"))
            .map(|a| a.target.as_str())
            .collect()
    }

    pub fn declared_complete(&self) -> bool {
        self.traces.action.iter().any(|a| a.op == ActionOp::DeclareComplete)
    }

    /// Write the package directory. Existing files are overwritten.
    pub fn write_dir(&self, dir: &Path) -> Result<(), TraceError> {
        fs::create_dir_all(dir)?;
        self.traces.write_dir(&dir.join("traces"))?;
        fs::write(dir.join("patch.diff"), &self.patch)?;
        let report_json = dir.join("verification_report.json");
        let report_md = dir.join("verification_report.md");
        match &self.verification_report {
            Some(r) => {
                fs::write(&report_json, serde_json::to_string_pretty(r)? + "\n")?;
                fs::write(&report_md, r.render_markdown())?;
            }
            None => {
                for p in [&report_json, &report_md] {
                    if p.exists() {
                        fs::remove_file(p)?;
                    }
                }
            }
        }
        let outcome = dir.join("outcome.json");
        match &self.outcome {
            Some(o) => fs::write(&outcome, serde_json::to_string_pretty(o)? + "\n")?,
            None if outcome.exists() => fs::remove_file(&outcome)?,
            None => {}
        }
        let files: Vec<Value> = TraceKind::ALL
            .iter()
            .map(|k| json!({"kind": k, "file": format!("traces/{}", k.file_name()), "events": self.traces.len(*k)}))
            .collect();
        let manifest = json!({
            "schema_version": self.schema_version,
            "episode_id": self.episode_id,
            "agent_id": self.agent_id,
            "level": self.level,
            "task_id": self.task_id,
            "repo_revision": self.repo_revision,
            "termination": self.termination,
            "intervention_policy": self.intervention_policy,
            "files": files,
        });
        fs::write(dir.join("package.json"), serde_json::to_string_pretty(&manifest)? + "\n")?;
        Ok(())
    }

    pub fn read_dir(dir: &Path) -> Result<Self, TraceError> {
        let manifest: PackageManifest = serde_json::from_str(
            &fs::read_to_string(dir.join("package.json"))
                .map_err(|e| TraceError::Malformed(format!("package.json: {e}")))?,
        )?;
        let traces = Traces::load_dir(&dir.join("traces"), Some(manifest.level))?;
        let patch = fs::read_to_string(dir.join("patch.diff")).unwrap_or_default();
        let report_path = dir.join("verification_report.json");
        let verification_report =
            if report_path.exists() { Some(serde_json::from_str(&fs::read_to_string(report_path)?)?) } else { None };
        let outcome_path = dir.join("outcome.json");
        let outcome =
            if outcome_path.exists() { Some(serde_json::from_str(&fs::read_to_string(outcome_path)?)?) } else { None };
        Ok(Self {
            schema_version: manifest.schema_version,
            episode_id: manifest.episode_id,
            agent_id: manifest.agent_id,
            level: manifest.level,
            task_id: manifest.task_id,
            repo_revision: manifest.repo_revision,
            termination: manifest.termination,
            intervention_policy: manifest.intervention_policy,
            traces,
            patch,
            verification_report,
            outcome,
        })
    }
}

#[derive(Debug, Deserialize)]
struct PackageManifest {
    schema_version: String,
    episode_id: String,
    agent_id: String,
    level: HarnessLevel,
    task_id: String,
    repo_revision: String,
    termination: Termination,
    #[serde(default)]
    intervention_policy: InterventionMode,
}

pub fn verification_report_path(workspace: &Path) -> PathBuf {
    workspace.join(HARNESSLAB_DIR).join("verification_report.json")
}

/// Everything recorded for a finished episode; `outcome` is taken from the
/// outcome trace if one was written.
pub fn collect_package(workspace: &Path) -> Result<EpisodePackage, TraceError> {
    let manifest = WorkspaceManifest::load(workspace).map_err(|e| TraceError::Malformed(e.to_string()))?;
    let status = EpisodeStatus::read(workspace)?.ok_or_else(|| TraceError::Unfinished(manifest.episode_id.clone()))?;
    let traces = Traces::load_dir(&TraceRecorder::traces_dir(workspace), Some(manifest.level))?;
    let baseline = Tree::load(&WorkspaceManifest::baseline_dir(workspace), |_| false)?;
    let current = Tree::load_repo(workspace)?;
    let patch = snapshot::unified_diff(&baseline, &current);
    let report_path = verification_report_path(workspace);
    let verification_report =
        if report_path.exists() { Some(serde_json::from_str(&fs::read_to_string(report_path)?)?) } else { None };
    let outcome = traces.outcome.last().map(|e| e.record.clone());
    Ok(EpisodePackage {
        schema_version: SCHEMA_VERSION.to_string(),
        episode_id: manifest.episode_id,
        agent_id: status.agent_id,
        level: manifest.level,
        task_id: manifest.task_id,
        repo_revision: manifest.repo_revision,
        termination: status.termination,
        intervention_policy: status.intervention_policy,
        traces,
        patch,
        verification_report,
        outcome,
    })
}

/// Assemble the package of a finished, adjudicated episode.
pub fn assemble_package(workspace: &Path) -> Result<EpisodePackage, TraceError> {
    let pkg = collect_package(workspace)?;
    if pkg.outcome.is_none() {
        return Err(TraceError::MissingOutcome(pkg.episode_id));
    }
    Ok(pkg)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PackageViolation {
    pub rule: String,
    pub message: String,
}

impl fmt::Display for PackageViolation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{}] {}", self.rule, self.message)
    }
}

fn violation(rule: &str, message: impl Into<String>) -> PackageViolation {
    PackageViolation { rule: rule.to_string(), message: message.into() }
}

/// Structural checks over a package. Empty result means clean.
pub fn validate_package(pkg: &EpisodePackage) -> Vec<PackageViolation> {
    let mut out = Vec::new();

    if pkg.schema_version != SCHEMA_VERSION {
        out.push(violation("schema", format!("unsupported schema version {}", pkg.schema_version)));
    }

    // Per-kind schemas (re-checked from the serialized form) and per-trace
    // seq monotonicity.
    let mut all_seqs: BTreeMap<u64, TraceKind> = BTreeMap::new();
    for kind in TraceKind::ALL {
        let mut last = 0;
        for event in pkg.traces.events(kind) {
            match event.to_value().map_err(TraceError::from).and_then(|v| validate_event(kind, v, Some(pkg.level))) {
                Ok(_) => {}
                Err(e) => out.push(violation("schema", e.to_string())),
            }
            let seq = event.seq();
            if seq <= last {
                out.push(violation("seq", format!("{kind} trace: seq {seq} does not exceed {last}")));
            }
            last = seq;
            if let Some(other) = all_seqs.insert(seq, kind) {
                out.push(violation("seq", format!("seq {seq} used by both {other} and {kind}")));
            }
        }
    }

    if !pkg.patch.is_empty() && pkg.traces.action.is_empty() {
        out.push(violation("action", "patch present but action trace empty"));
    }

    if pkg.level == HarnessLevel::H3 {
        if let Some(msg) = missing_h3_attribution(&pkg.traces) {
            out.push(violation("attribution", format!("H3 attribution missing: {msg}")));
        }
    }

    match (&pkg.outcome, pkg.traces.outcome.len()) {
        (None, _) => out.push(violation("outcome", "outcome record missing")),
        (Some(_), 0) => out.push(violation("outcome", "outcome trace empty")),
        (Some(o), 1) => {
            if &pkg.traces.outcome[0].record != o {
                out.push(violation("outcome", "outcome.json differs from the outcome trace"));
            }
        }
        (Some(_), n) => out.push(violation("outcome", format!("{n} outcome records; expected exactly one"))),
    }

    if let Some(o) = &pkg.outcome {
        let mhi =
            pkg.traces.intervention.iter().filter(|i| i.avoidability == Avoidability::AvoidableMissingHarness).count();
        if o.mhi_count != mhi {
            out.push(violation(
                "outcome",
                format!("mhi_count {} but {mhi} missing-harness interventions", o.mhi_count),
            ));
        }
    }
    out
}

/// A failed verification that is followed by an edit needs an attribution
/// between the two.
fn missing_h3_attribution(traces: &Traces) -> Option<String> {
    let edits: Vec<u64> = traces.action.iter().filter(|a| a.op == ActionOp::EditFile).map(|a| a.seq).collect();
    for v in traces.verification.iter().filter(|v| v.result == VerificationResult::Fail) {
        let Some(next_edit) = edits.iter().copied().find(|s| *s > v.seq) else {
            continue;
        };
        let attributed = traces.attribution.iter().any(|a| a.seq > v.seq && a.seq < next_edit);
        if !attributed {
            return Some(format!(
                "failed {} at seq {} is followed by an edit at seq {next_edit} without a diagnosis",
                v.vtype.as_str(),
                v.seq
            ));
        }
    }
    None
}

/// Validate an exported package directory line by line, so that malformed
/// records are reported rather than aborting the read.
pub fn validate_package_dir(dir: &Path) -> Vec<PackageViolation> {
    let mut out = Vec::new();
    let manifest: Option<PackageManifest> =
        fs::read_to_string(dir.join("package.json")).ok().and_then(|s| serde_json::from_str(&s).ok());
    let Some(manifest) = manifest else {
        out.push(violation("package", "package.json missing or malformed"));
        return out;
    };
    for kind in TraceKind::ALL {
        let path = dir.join("traces").join(kind.file_name());
        let Ok(text) = fs::read_to_string(&path) else {
            out.push(violation("package", format!("missing trace file traces/{}", kind.file_name())));
            continue;
        };
        for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let parsed = serde_json::from_str::<Value>(line)
                .map_err(|e| e.to_string())
                .and_then(|v| validate_event(kind, v, Some(manifest.level)).map_err(|e| e.to_string()));
            if let Err(e) = parsed {
                out.push(violation("schema", format!("traces/{} line {}: {e}", kind.file_name(), i + 1)));
            }
        }
    }
    if !dir.join("outcome.json").exists() {
        out.push(violation("outcome", "outcome.json missing"));
    }
    if !out.is_empty() {
        return out;
    }
    match EpisodePackage::read_dir(dir) {
        Ok(pkg) => out.extend(validate_package(&pkg)),
        Err(e) => out.push(violation("package", e.to_string())),
    }
    out
}

/// Machine-readable description of every trace schema.
pub fn schema_document() -> Value {
    fn enumeration<T: Serialize>(values: &[T]) -> Value {
        Value::Array(values.iter().map(|v| serde_json::to_value(v).unwrap()).collect())
    }
    use ActionOp::*;
    use VerificationType as V;
    let failure_types = enumeration(&FailureType::ALL);
    json!({
        "schema_version": SCHEMA_VERSION,
        "format": "one JSON object per line (JSONL), UTF-8; seq is a single clock shared by all traces of an episode",
        "kinds": {
            "action": {
                "fields": {"seq": "integer", "op": "enum", "target": "string", "note": "string"},
                "op": enumeration(&[ReadFile, EditFile, RunTool, WriteReport, UpdateTaskState, InspectDiff, DeclareComplete]),
            },
            "tool": {
                "fields": {"seq": "integer", "action_seq": "integer|null", "result": {
                    "command": "string", "exit_code": "integer|null", "duration_ms": "integer",
                    "timed_out": "boolean", "stdout": "string", "stderr": "string",
                    "stdout_truncated": "boolean", "stderr_truncated": "boolean",
                    "failure_type": "FailureType|null", "recovered": "boolean|null"}},
                "rules": ["failure_type present iff exit_code != 0 or timed_out", "timed_out implies exit_code null"],
            },
            "context": {
                "fields": {"seq": "integer", "artifact": "ArtifactKind", "contribution": "string", "influenced_decision": "boolean"},
                "rules": ["artifact is a harness artifact visible at the episode level"],
            },
            "verification": {
                "fields": {"seq": "integer", "vtype": "enum", "method": "string", "result": "enum", "covers": "array<string>", "interpretation": "string"},
                "vtype": enumeration(&[V::BugReproduction, V::DeterministicCheck, V::RegisteredTest, V::TargetedTest, V::FullRegression, V::Lint, V::PatchReview, V::ManualEvaluatorCheck]),
                "result": enumeration(&[VerificationResult::Pass, VerificationResult::Fail, VerificationResult::TimedOut, VerificationResult::Inconclusive]),
            },
            "attribution": {
                "fields": {"seq": "integer", "observed": "string", "expected": "string", "failure_type": "FailureType", "evidence": "string", "alternatives": "array<string>", "next_action": "string"},
            },
            "intervention": {
                "fields": {"seq": "integer", "description": "string", "avoidability": "enum", "burden": "enum", "harness_gap": "string|null"},
                "avoidability": enumeration(&[Avoidability::AvoidableMissingHarness, Avoidability::Unavoidable]),
                "burden": enumeration(&[Burden::Low, Burden::Medium, Burden::High]),
                "rules": ["avoidable_missing_harness requires harness_gap"],
            },
            "entropy": {
                "fields": {"seq": "integer", "finding": {"category": "enum", "severity": "integer 0..=3", "description": "string", "paths": "array<string>"}},
                "category": enumeration(&EntropyCategory::ALL),
            },
            "outcome": {
                "fields": {"seq": "integer", "record": "OutcomeRecord"},
                "label": enumeration(&OutcomeLabel::ALL),
            },
        },
        "FailureType": failure_types,
        "ArtifactKind": enumeration(&ArtifactKind::ALL),
    })
}
