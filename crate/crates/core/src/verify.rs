//! Check registry, requirement coverage over the verification trace, the
//! structured verification report, and the evidence-sufficiency rule table.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::episode::{RequirementKind, TaskSpec};
use crate::tools::{CheckList, DeterministicCheck, TestCommand, TestCommandRegistry};
use crate::trace::{VerificationEvent, VerificationResult, VerificationType};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum VerifyError {
    #[error("verification event {seq} references unknown requirement {req_id}")]
    UnknownRequirement { seq: u64, req_id: String },
}

/// Checks and test commands for one task, as stored in `registry.toml`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckRegistry {
    pub task_id: String,
    #[serde(default)]
    pub checks: Vec<DeterministicCheck>,
    #[serde(default)]
    pub test_commands: Vec<TestCommand>,
}

impl CheckRegistry {
    pub fn test_command_registry(&self) -> TestCommandRegistry {
        TestCommandRegistry { test_commands: self.test_commands.clone() }
    }

    pub fn check_list(&self) -> CheckList {
        CheckList { checks: self.checks.clone() }
    }

    /// Registry invariants against its task; empty means valid.
    pub fn validate(&self, task: &TaskSpec) -> Vec<String> {
        let mut out = Vec::new();
        if self.task_id != task.task_id {
            out.push(format!("registry is for {} but task is {}", self.task_id, task.task_id));
        }
        let mut ids = HashSet::new();
        for c in &self.checks {
            if !ids.insert(c.check_id.as_str()) {
                out.push(format!("duplicate check_id {}", c.check_id));
            }
            if c.expected_substring.is_empty() {
                out.push(format!("check {} has an empty expected_substring", c.check_id));
            }
            if task.requirement(&c.covers).is_none() {
                out.push(format!("check {} covers unknown requirement {}", c.check_id, c.covers));
            }
        }
        let mut names = HashSet::new();
        for t in &self.test_commands {
            if !names.insert(t.name.as_str()) {
                out.push(format!("duplicate test command {}", t.name));
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CoverageStatus {
    CoveredPass,
    CoveredFail,
    PartiallyCovered,
    Uncovered,
}

impl CoverageStatus {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::CoveredPass => "covered_pass",
            Self::CoveredFail => "covered_fail",
            Self::PartiallyCovered => "partially_covered",
            Self::Uncovered => "uncovered",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvidenceRef {
    pub seq: u64,
    pub vtype: VerificationType,
    pub method: String,
    pub result: VerificationResult,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RequirementCoverage {
    pub req_id: String,
    pub statement: String,
    pub kind: RequirementKind,
    pub status: CoverageStatus,
    /// Covering events in seq order.
    pub evidence: Vec<EvidenceRef>,
}

/// Requirement coverage in task order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CoverageMap {
    pub requirements: Vec<RequirementCoverage>,
}

impl CoverageMap {
    pub fn get(&self, req_id: &str) -> Option<&RequirementCoverage> {
        self.requirements.iter().find(|r| r.req_id == req_id)
    }

    pub fn status(&self, req_id: &str) -> Option<CoverageStatus> {
        self.get(req_id).map(|r| r.status)
    }
}

/// Status of one requirement from its covering events in seq order: a fail
/// that no later pass supersedes wins; otherwise any pass covers it; events
/// that only timed out or were inconclusive leave it partially covered.
fn status_of(events: &[EvidenceRef]) -> CoverageStatus {
    let last_pass = events.iter().filter(|e| e.result == VerificationResult::Pass).map(|e| e.seq).max();
    let last_fail = events.iter().filter(|e| e.result == VerificationResult::Fail).map(|e| e.seq).max();
    match (last_pass, last_fail) {
        (_, Some(f)) if last_pass.is_none_or(|p| p < f) => CoverageStatus::CoveredFail,
        (Some(_), _) => CoverageStatus::CoveredPass,
        _ if events.is_empty() => CoverageStatus::Uncovered,
        _ => CoverageStatus::PartiallyCovered,
    }
}

pub fn coverage(trace: &[VerificationEvent], task: &TaskSpec) -> Result<CoverageMap, VerifyError> {
    for e in trace {
        for r in &e.covers {
            if task.requirement(r).is_none() {
                return Err(VerifyError::UnknownRequirement { seq: e.seq, req_id: r.clone() });
            }
        }
    }
    let mut ordered: Vec<&VerificationEvent> = trace.iter().collect();
    ordered.sort_by_key(|e| e.seq);
    let requirements = task
        .requirements
        .iter()
        .map(|req| {
            let evidence: Vec<EvidenceRef> = ordered
                .iter()
                .filter(|e| e.covers.iter().any(|c| c == &req.req_id))
                .map(|e| EvidenceRef { seq: e.seq, vtype: e.vtype, method: e.method.clone(), result: e.result })
                .collect();
            RequirementCoverage {
                req_id: req.req_id.clone(),
                statement: req.statement.clone(),
                kind: req.kind,
                status: status_of(&evidence),
                evidence,
            }
        })
        .collect();
    Ok(CoverageMap { requirements })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VerificationReport {
    pub rows: Vec<RequirementCoverage>,
    pub limitations: Vec<String>,
    pub declared_complete: bool,
    #[serde(default)]
    pub summary: String,
}

impl VerificationReport {
    pub fn uncovered(&self) -> Vec<&str> {
        self.rows.iter().filter(|r| r.status == CoverageStatus::Uncovered).map(|r| r.req_id.as_str()).collect()
    }

    pub fn render_markdown(&self) -> String {
        let mut out = String::from("# Verification report\n\n");
        if !self.summary.is_empty() {
            out.push_str(&self.summary);
            out.push_str("\n\n");
        }
        out.push_str("| Requirement | Status | Evidence |\n|-------------|--------|----------|\n");
        for row in &self.rows {
            let evidence = if row.evidence.is_empty() {
                "none".to_string()
            } else {
                row.evidence
                    .iter()
                    .map(|e| format!("#{} {} {}: `{}`", e.seq, e.vtype.as_str(), e.result.as_str(), e.method))
                    .collect::<Vec<_>>()
                    .join("<br>")
            };
            let status = if row.status == CoverageStatus::Uncovered {
                "**UNCOVERED**".to_string()
            } else {
                row.status.as_str().to_string()
            };
            out.push_str(&format!("| {} | {} | {} |\n", row.req_id, status, evidence));
        }
        out.push_str("\n## Limitations\n\n");
        if self.limitations.is_empty() {
            out.push_str("None.\n");
        } else {
            for l in &self.limitations {
                out.push_str(&format!("- {l}\n"));
            }
        }
        out.push_str(&format!("\nDeclared complete: {}\n", self.declared_complete));
        out
    }
}

fn human(s: &str) -> String {
    s.replace('_', " ")
}

/// One row per requirement; every timed-out or inconclusive covering event
/// becomes a limitation.
pub fn build_report(
    coverage: &CoverageMap,
    trace: &[VerificationEvent],
    declared_complete: bool,
) -> VerificationReport {
    let mut ordered: Vec<&VerificationEvent> = trace.iter().collect();
    ordered.sort_by_key(|e| e.seq);
    let limitations = ordered
        .iter()
        .filter(|e| matches!(e.result, VerificationResult::TimedOut | VerificationResult::Inconclusive))
        .filter(|e| !e.covers.is_empty())
        .map(|e| {
            format!(
                "{} {} (seq {}, covers {}): {}",
                human(e.vtype.as_str()),
                human(e.result.as_str()),
                e.seq,
                e.covers.join(", "),
                e.method
            )
        })
        .collect();
    VerificationReport { rows: coverage.requirements.clone(), limitations, declared_complete, summary: String::new() }
}

/// One way a requirement can be evidenced.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Acceptance {
    pub status: CoverageStatus,
    pub vtypes: Vec<VerificationType>,
    pub results: Vec<VerificationResult>,
    /// The evidencing event's method must name a test file added by the patch.
    #[serde(default)]
    pub names_new_test: bool,
    /// The report must list the evidencing event among its limitations.
    #[serde(default)]
    pub requires_limitation: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvidenceRule {
    pub kind: RequirementKind,
    pub accept: Vec<Acceptance>,
}

/// What counts as sufficient agent-side evidence, per requirement kind.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SufficiencyRules {
    pub rules: Vec<EvidenceRule>,
}

impl Default for SufficiencyRules {
    fn default() -> Self {
        use VerificationResult as R;
        use VerificationType as V;
        let behavior = vec![Acceptance {
            status: CoverageStatus::CoveredPass,
            vtypes: vec![V::DeterministicCheck, V::RegisteredTest, V::TargetedTest],
            results: vec![R::Pass],
            names_new_test: false,
            requires_limitation: false,
        }];
        Self {
            rules: vec![
                EvidenceRule { kind: RequirementKind::CorrectedBehavior, accept: behavior.clone() },
                EvidenceRule { kind: RequirementKind::PreservedBehavior, accept: behavior },
                EvidenceRule {
                    kind: RequirementKind::TestCoverage,
                    accept: vec![Acceptance {
                        status: CoverageStatus::CoveredPass,
                        vtypes: vec![V::TargetedTest],
                        results: vec![R::Pass],
                        names_new_test: true,
                        requires_limitation: false,
                    }],
                },
                EvidenceRule {
                    kind: RequirementKind::RegressionIntegrity,
                    accept: vec![
                        Acceptance {
                            status: CoverageStatus::CoveredPass,
                            vtypes: vec![V::FullRegression],
                            results: vec![R::Pass],
                            names_new_test: false,
                            requires_limitation: false,
                        },
                        Acceptance {
                            status: CoverageStatus::PartiallyCovered,
                            vtypes: vec![V::FullRegression],
                            results: vec![R::TimedOut, R::Inconclusive],
                            names_new_test: false,
                            requires_limitation: true,
                        },
                    ],
                },
            ],
        }
    }
}

impl SufficiencyRules {
    pub fn from_toml(text: &str) -> Result<Self, toml::de::Error> {
        toml::from_str(text)
    }

    pub fn for_kind(&self, kind: RequirementKind) -> &[Acceptance] {
        self.rules.iter().find(|r| r.kind == kind).map(|r| r.accept.as_slice()).unwrap_or(&[])
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RequirementVerdict {
    pub req_id: String,
    pub sufficient: bool,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SufficiencyVerdict {
    pub sufficient: bool,
    pub requirements: Vec<RequirementVerdict>,
}

/// Apply the rule table to every row of an agent-written report.
/// `new_test_paths` are the test files the patch adds.
pub fn evaluate_sufficiency(
    report: &VerificationReport,
    rules: &SufficiencyRules,
    new_test_paths: &[String],
) -> SufficiencyVerdict {
    let requirements: Vec<RequirementVerdict> = report
        .rows
        .iter()
        .map(|row| {
            let accepted = rules.for_kind(row.kind).iter().find(|a| acceptance_holds(a, row, report, new_test_paths));
            match accepted {
                Some(a) => RequirementVerdict {
                    req_id: row.req_id.clone(),
                    sufficient: true,
                    reason: format!("{} via {}", row.status.as_str(), vtypes_str(&a.vtypes)),
                },
                None => RequirementVerdict {
                    req_id: row.req_id.clone(),
                    sufficient: false,
                    reason: format!("{} with no accepted evidence", row.status.as_str()),
                },
            }
        })
        .collect();
    SufficiencyVerdict {
        sufficient: !requirements.is_empty() && requirements.iter().all(|r| r.sufficient),
        requirements,
    }
}

fn vtypes_str(v: &[VerificationType]) -> String {
    v.iter().map(|t| t.as_str()).collect::<Vec<_>>().join("|")
}

fn acceptance_holds(
    a: &Acceptance,
    row: &RequirementCoverage,
    report: &VerificationReport,
    new_tests: &[String],
) -> bool {
    if row.status != a.status {
        return false;
    }
    row.evidence.iter().any(|e| {
        !e.vtype.is_evaluator_side()
            && a.vtypes.contains(&e.vtype)
            && a.results.contains(&e.result)
            && (!a.names_new_test || new_tests.iter().any(|t| e.method.contains(t.as_str())))
            && (!a.requires_limitation || report.limitations.iter().any(|l| l.contains(&format!("(seq {},", e.seq))))
    })
}
