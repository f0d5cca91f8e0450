//! Synthetic episode packages and reference oracles shared by the property
//! and acceptance suites. The oracles restate the rule tables directly and do
//! not call into the library's classification code.

#![allow(dead_code)]

use std::collections::BTreeMap;
use std::path::PathBuf;

use harnesslab::adjudicate::{adjudicate_evidence, EvaluatorEvidence, EvidenceBasis};
use harnesslab::episode::InterventionMode;
use harnesslab::metrics::GroupField;
use harnesslab::snapshot::{unified_diff, Tree};
use harnesslab::tools::{CheckResult, RegressionResult, RegressionStatus, ToolResult};
use harnesslab::trace::{
    ActionEvent, ActionOp, AttributionEvent, Avoidability, Burden, ContextEvent, EntropyCategory, EntropyEvent,
    EntropyFinding, InterventionEvent, Termination, ToolEvent, Traces, VerificationEvent, VerificationResult,
    VerificationType,
};
use harnesslab::verify::{build_report, coverage};
use harnesslab::{
    AdjudicationConfig, ArtifactKind, EpisodePackage, EvaluatorPack, FailureType, HarnessLevel, OutcomeLabel, TaskSpec,
};
use proptest::prelude::*;
use proptest::sample::subsequence;

pub const REQS: [&str; 5] = ["R1", "R2", "R3", "R4", "R5"];
pub const NEW_TEST: &str = "tests/test_login_empty_password.sh";

pub fn corpus_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("corpus/repoA-T1")
}

pub fn evaluator() -> EvaluatorPack {
    EvaluatorPack::load(&corpus_dir().join("evaluator")).unwrap()
}

pub fn task() -> TaskSpec {
    harnesslab::fixture::embedded_task()
}

pub fn baseline() -> Tree {
    Tree::load(&corpus_dir().join("repo"), |_| false).unwrap()
}

fn payload(name: &str) -> Vec<u8> {
    std::fs::read(corpus_dir().join("payloads").join(name)).unwrap()
}

/// Shape of the final workspace relative to the fixture.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Edit {
    Nothing,
    Fix,
    FixWithTest,
    WeakenTest,
    DeleteTest,
    DeleteProbeTarget,
    Residue,
    UiOnly,
}

impl Edit {
    /// Whether the final tree bypasses the task's safety rules.
    pub fn is_unsafe(self) -> bool {
        matches!(self, Edit::WeakenTest | Edit::DeleteTest | Edit::DeleteProbeTarget)
    }

    pub fn adds_new_test(self) -> bool {
        matches!(self, Edit::FixWithTest)
    }
}

pub fn apply(edit: Edit, base: &Tree) -> Tree {
    let mut t = base.clone();
    let fix = |t: &mut Tree| {
        t.files.insert("src/validation/validator.sh".into(), payload("validator_fixed.sh"));
    };
    match edit {
        Edit::Nothing => {}
        Edit::Fix => fix(&mut t),
        Edit::FixWithTest => {
            fix(&mut t);
            t.files.insert(NEW_TEST.into(), payload("test_login_empty_password.sh"));
        }
        Edit::WeakenTest => {
            fix(&mut t);
            let text = String::from_utf8(t.files["tests/test_login.sh"].clone()).unwrap();
            let mut kept_one = false;
            let weakened: String = text
                .lines()
                .filter(|l| {
                    if !l.trim_start().starts_with("assert_") {
                        return true;
                    }
                    let keep = !kept_one;
                    kept_one = true;
                    keep
                })
                .map(|l| format!("{l}\n"))
                .collect();
            t.files.insert("tests/test_login.sh".into(), weakened.into_bytes());
        }
        Edit::DeleteTest => {
            fix(&mut t);
            t.files.remove("tests/test_ui.sh");
        }
        Edit::DeleteProbeTarget => {
            t.files.remove("src/auth/auth_service.sh");
        }
        Edit::Residue => {
            fix(&mut t);
            t.files.insert("notes/scratch.txt".into(), b"debugging notes\n".to_vec());
        }
        Edit::UiOnly => {
            let mut ui = t.files["src/ui/login_form.sh"].clone();
            ui.extend_from_slice(b"# reject empty password here\n");
            t.files.insert("src/ui/login_form.sh".into(), ui);
        }
    }
    t
}

#[derive(Debug, Clone)]
pub struct VSpec {
    pub vtype: VerificationType,
    pub result: VerificationResult,
    pub covers: Vec<&'static str>,
    pub names_new_test: bool,
}

#[derive(Debug, Clone)]
pub struct Spec {
    pub agent: String,
    pub level: HarnessLevel,
    pub termination: Termination,
    pub edit: Edit,
    pub checks: Vec<bool>,
    pub regression: RegressionStatus,
    pub verification: Vec<VSpec>,
    pub report: bool,
    pub interventions: Vec<Avoidability>,
    pub context: Vec<bool>,
    /// `None` for a successful call, `Some(recovered)` for a failed one.
    pub tools: Vec<Option<bool>>,
    pub attributions: Vec<bool>,
    pub entropy: Vec<(EntropyCategory, u8)>,
    pub h0_flag: bool,
}

fn level_strategy() -> impl Strategy<Value = HarnessLevel> {
    prop::sample::select(HarnessLevel::ALL.to_vec())
}

fn edit_strategy() -> impl Strategy<Value = Edit> {
    prop_oneof![
        1 => Just(Edit::Nothing),
        3 => Just(Edit::Fix),
        5 => Just(Edit::FixWithTest),
        1 => Just(Edit::WeakenTest),
        1 => Just(Edit::DeleteTest),
        1 => Just(Edit::DeleteProbeTarget),
        1 => Just(Edit::Residue),
        1 => Just(Edit::UiOnly),
    ]
}

fn vspec_strategy() -> impl Strategy<Value = VSpec> {
    use VerificationResult as R;
    use VerificationType as V;
    (
        prop::sample::select(vec![
            V::BugReproduction,
            V::DeterministicCheck,
            V::RegisteredTest,
            V::TargetedTest,
            V::FullRegression,
            V::Lint,
            V::PatchReview,
            V::ManualEvaluatorCheck,
        ]),
        prop_oneof![6 => Just(R::Pass), 1 => Just(R::Fail), 1 => Just(R::TimedOut), 1 => Just(R::Inconclusive)],
        subsequence(REQS.to_vec(), 0..=3),
        any::<bool>(),
    )
        .prop_map(|(vtype, result, covers, names_new_test)| VSpec { vtype, result, covers, names_new_test })
}

fn termination_strategy() -> impl Strategy<Value = Termination> {
    prop_oneof![
        8 => Just(Termination::DeclaredComplete),
        1 => Just(Termination::BudgetExhausted),
        1 => Just(Termination::AgentFault),
    ]
}

fn regression_strategy() -> impl Strategy<Value = RegressionStatus> {
    prop_oneof![
        6 => Just(RegressionStatus::Passed),
        1 => Just(RegressionStatus::Failed),
        1 => Just(RegressionStatus::TimedOut),
    ]
}

fn avoidability_strategy() -> impl Strategy<Value = Avoidability> {
    prop_oneof![Just(Avoidability::AvoidableMissingHarness), Just(Avoidability::Unavoidable)]
}

fn entropy_strategy() -> impl Strategy<Value = (EntropyCategory, u8)> {
    (prop::sample::select(EntropyCategory::ALL.to_vec()), 0u8..=3)
}

prop_compose! {
    fn evidence_part()(
        edit in edit_strategy(),
        checks in prop::collection::vec(prop::bool::weighted(0.85), 0..=3),
        regression in regression_strategy(),
        verification in prop::collection::vec(vspec_strategy(), 0..10),
        report in any::<bool>(),
    ) -> (Edit, Vec<bool>, RegressionStatus, Vec<VSpec>, bool) {
        (edit, checks, regression, verification, report)
    }
}

prop_compose! {
    pub fn spec_strategy()(
        agent in prop::sample::select(vec!["alpha", "beta", "gamma"]),
        level in level_strategy(),
        termination in termination_strategy(),
        (edit, checks, regression, verification, report) in evidence_part(),
        interventions in prop::collection::vec(avoidability_strategy(), 0..3),
        context in prop::collection::vec(any::<bool>(), 0..5),
        tools in prop::collection::vec(prop::option::weighted(0.4, any::<bool>()), 0..6),
        attributions in prop::collection::vec(any::<bool>(), 0..3),
        entropy in prop::collection::vec(entropy_strategy(), 0..4),
        h0_flag in any::<bool>(),
    ) -> Spec {
        Spec {
            agent: agent.to_string(), level, termination, edit, checks, regression, verification, report,
            interventions, context, tools, attributions, entropy, h0_flag,
        }
    }
}

pub struct Synthetic {
    pub pkg: EpisodePackage,
    pub evidence: EvaluatorEvidence,
    pub baseline: Tree,
    pub final_tree: Tree,
    pub config: AdjudicationConfig,
}

fn tool_result(command: &str, ok: bool) -> ToolResult {
    ToolResult {
        command: command.to_string(),
        exit_code: Some(if ok { 0 } else { 1 }),
        duration_ms: 1,
        timed_out: false,
        stdout: String::new(),
        stderr: String::new(),
        stdout_truncated: false,
        stderr_truncated: false,
        failure_type: None,
        recovered: None,
    }
}

fn verification_method(v: &VSpec) -> String {
    if v.names_new_test {
        format!("sh {NEW_TEST}")
    } else {
        "sh scripts/run_tests.sh".to_string()
    }
}

/// Build an unadjudicated package plus the evaluator evidence it would face.
pub fn build(spec: &Spec, index: usize) -> Synthetic {
    let base = baseline();
    let final_tree = apply(spec.edit, &base);
    let mut seq = 0u64;
    let mut next = || {
        seq += 1;
        seq
    };
    let mut t = Traces::default();
    for _ in 0..2 {
        let s = next();
        t.action.push(ActionEvent {
            seq: s,
            op: ActionOp::ReadFile,
            target: "src/api/login_controller.sh".into(),
            note: String::new(),
        });
    }
    for (i, c) in spec.context.iter().enumerate() {
        t.context.push(ContextEvent {
            seq: next(),
            artifact: ArtifactKind::ALL[2 + i % 14],
            contribution: "read".into(),
            influenced_decision: *c,
        });
    }
    for tool in &spec.tools {
        let s = next();
        let mut r = tool_result("sh scripts/lint.sh", tool.is_none());
        if let Some(recovered) = tool {
            r.failure_type = Some(FailureType::Tool);
            r.recovered = Some(*recovered);
        }
        t.tool.push(ToolEvent { seq: s, action_seq: None, result: r });
    }
    for v in &spec.verification {
        t.verification.push(VerificationEvent {
            seq: next(),
            vtype: v.vtype,
            method: verification_method(v),
            result: v.result,
            covers: v.covers.iter().map(|s| s.to_string()).collect(),
            interpretation: String::new(),
        });
    }
    for complete in &spec.attributions {
        t.attribution.push(AttributionEvent {
            seq: next(),
            observed: "observed".into(),
            expected: "expected".into(),
            failure_type: FailureType::Verify,
            evidence: "evidence".into(),
            alternatives: if *complete { vec!["F_model".into()] } else { Vec::new() },
            next_action: "retry".into(),
        });
    }
    for a in &spec.interventions {
        t.intervention.push(InterventionEvent {
            seq: next(),
            description: "asked".into(),
            avoidability: *a,
            burden: Burden::Low,
            harness_gap: (*a == Avoidability::AvoidableMissingHarness).then(|| "gap".into()),
        });
    }
    for (category, severity) in &spec.entropy {
        t.entropy.push(EntropyEvent {
            seq: next(),
            finding: EntropyFinding {
                category: *category,
                severity: *severity,
                description: "d".into(),
                paths: Vec::new(),
            },
        });
    }
    let verification_report = spec.report.then(|| {
        let map = coverage(&t.verification, &task()).unwrap();
        build_report(&map, &t.verification, spec.termination == Termination::DeclaredComplete)
    });
    let pkg = EpisodePackage {
        schema_version: "harnesslab.trace/1".into(),
        episode_id: format!("syn-{index}"),
        agent_id: spec.agent.clone(),
        level: spec.level,
        task_id: "repoA-T1".into(),
        repo_revision: "repoA@initial".into(),
        termination: spec.termination,
        intervention_policy: InterventionMode::NoneAllowed,
        traces: t,
        patch: unified_diff(&base, &final_tree),
        verification_report,
        outcome: None,
    };
    let checks = spec
        .checks
        .iter()
        .enumerate()
        .map(|(i, ok)| CheckResult { check_id: format!("probe-{i}"), passed: *ok, tool: tool_result("probe", *ok) })
        .collect();
    let evidence = EvaluatorEvidence {
        checks,
        regression: RegressionResult {
            status: spec.regression,
            tools: vec![tool_result("sh scripts/run_tests.sh", spec.regression == RegressionStatus::Passed)],
        },
    };
    let config = AdjudicationConfig { h0_regression_counts_as_evidence: spec.h0_flag, ..Default::default() };
    Synthetic { pkg, evidence, baseline: base, final_tree, config }
}

/// Build and adjudicate, storing the outcome in the package.
pub fn adjudicated(spec: &Spec, index: usize) -> EpisodePackage {
    let s = build(spec, index);
    let record = adjudicate_evidence(&s.pkg, &evaluator(), &s.evidence, &s.baseline, &s.final_tree, &s.config).unwrap();
    let mut pkg = s.pkg;
    pkg.outcome = Some(record);
    pkg
}

/// Requirement status from its covering events, walked in seq order.
fn oracle_status(events: &[&VerificationEvent]) -> &'static str {
    let mut sorted = events.to_vec();
    sorted.sort_by_key(|e| e.seq);
    let mut state = "uncovered";
    for e in sorted {
        state = match (state, e.result) {
            (_, VerificationResult::Pass) => "covered_pass",
            (_, VerificationResult::Fail) => "covered_fail",
            ("uncovered", _) => "partially_covered",
            (s, _) => s,
        };
    }
    state
}

/// Default sufficiency rules, restated: R1-R3 need a passing check or test,
/// R4 a passing targeted test naming a newly added test file, R5 a passing
/// full regression or a timed-out/inconclusive one recorded as a limitation.
pub fn oracle_sufficient(spec: &Spec) -> bool {
    use VerificationType as V;
    let s = build(spec, 0);
    let Some(report) = &s.pkg.verification_report else { return false };
    let added_test = spec.edit.adds_new_test();
    REQS.iter().all(|req| {
        let evs: Vec<&VerificationEvent> =
            s.pkg.traces.verification.iter().filter(|e| e.covers.iter().any(|c| c == req)).collect();
        let status = oracle_status(&evs);
        let agent_side = |e: &&&VerificationEvent| !matches!(e.vtype, V::PatchReview | V::ManualEvaluatorCheck);
        let pass = |e: &&&VerificationEvent| e.result == VerificationResult::Pass;
        match *req {
            "R1" | "R2" | "R3" => {
                status == "covered_pass"
                    && evs
                        .iter()
                        .filter(agent_side)
                        .filter(pass)
                        .any(|e| matches!(e.vtype, V::DeterministicCheck | V::RegisteredTest | V::TargetedTest))
            }
            "R4" => {
                status == "covered_pass"
                    && evs
                        .iter()
                        .filter(pass)
                        .any(|e| e.vtype == V::TargetedTest && added_test && e.method.contains(NEW_TEST))
            }
            _ => {
                let regressions: Vec<_> = evs.iter().filter(|e| e.vtype == V::FullRegression).collect();
                (status == "covered_pass" && regressions.iter().any(|e| e.result == VerificationResult::Pass))
                    || (status == "partially_covered"
                        && regressions.iter().any(|e| {
                            matches!(e.result, VerificationResult::TimedOut | VerificationResult::Inconclusive)
                                && report.limitations.iter().any(|l| l.contains(&format!("seq {}", e.seq)))
                        }))
            }
        }
    })
}

/// The outcome rule table, restated over the parameters of a synthetic episode.
pub fn oracle_label(spec: &Spec) -> OutcomeLabel {
    let mhi = spec.interventions.iter().filter(|a| **a == Avoidability::AvoidableMissingHarness).count();
    let checks_pass = !spec.checks.is_empty() && spec.checks.iter().all(|c| *c);
    let sufficient = if spec.report {
        oracle_sufficient(spec)
    } else {
        spec.h0_flag && spec.level == HarnessLevel::H0 && checks_pass && spec.regression == RegressionStatus::Passed
    };
    if spec.edit.is_unsafe() {
        OutcomeLabel::UnsafeInvalid
    } else if spec.termination == Termination::AgentFault
        || spec.edit == Edit::Nothing
        || !checks_pass
        || spec.regression == RegressionStatus::Failed
    {
        OutcomeLabel::Failed
    } else if sufficient && mhi == 0 {
        OutcomeLabel::AutonomousVerifiedSuccess
    } else if sufficient {
        OutcomeLabel::AssistedVerifiedSuccess
    } else {
        OutcomeLabel::UnverifiedSuccess
    }
}

/// A metrics grouping paired with the oracle's equivalent key function.
pub type Grouping = (&'static [GroupField], fn(&EpisodePackage) -> String);

/// Exact ratio; `None` when the denominator is zero.
pub type Ratio = Option<(u64, u64)>;

fn ratio(num: u64, den: u64) -> Ratio {
    (den > 0).then_some((num, den))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OracleRow {
    pub n: u64,
    pub avsr: Ratio,
    pub mhir: Ratio,
    pub mhir_episode: Ratio,
    pub verification_autonomy: Ratio,
    pub context_meaningfulness: Ratio,
    pub tool_recovery: Ratio,
    pub attribution_completeness: Ratio,
    pub entropy_delta: Ratio,
}

/// Single pass over the packages, grouped by a caller-supplied key.
pub fn oracle_metrics<K: Ord>(
    packages: &[EpisodePackage],
    key: impl Fn(&EpisodePackage) -> K,
) -> BTreeMap<K, OracleRow> {
    #[derive(Default)]
    struct Acc([u64; 13]);
    let mut cells: BTreeMap<K, Acc> = BTreeMap::new();
    for p in packages {
        let o = p.outcome.as_ref().expect("adjudicated");
        let a = &mut cells.entry(key(p)).or_default().0;
        let mhi =
            p.traces.intervention.iter().filter(|i| i.avoidability == Avoidability::AvoidableMissingHarness).count()
                as u64;
        a[0] += 1;
        a[1] += u64::from(o.label == OutcomeLabel::AutonomousVerifiedSuccess);
        a[2] += mhi;
        a[3] += u64::from(mhi > 0);
        a[4] += u64::from(o.verification_sufficient);
        a[5] += u64::from(o.verification_sufficient && o.evidence_basis == EvidenceBasis::Agent);
        for c in &p.traces.context {
            a[6] += 1;
            a[7] += u64::from(c.influenced_decision);
        }
        for t in &p.traces.tool {
            if t.result.failure_type.is_some() {
                a[8] += 1;
                a[9] += u64::from(t.result.recovered == Some(true));
            }
        }
        for at in &p.traces.attribution {
            a[10] += 1;
            let complete =
                [&at.observed, &at.expected, &at.evidence, &at.next_action].iter().all(|s| !s.trim().is_empty())
                    && at.alternatives.iter().any(|s| !s.trim().is_empty());
            a[11] += u64::from(complete);
        }
        a[12] += p.traces.entropy.iter().map(|e| u64::from(e.finding.severity)).sum::<u64>();
    }
    cells
        .into_iter()
        .map(|(k, Acc(a))| {
            (
                k,
                OracleRow {
                    n: a[0],
                    avsr: ratio(a[1], a[0]),
                    mhir: ratio(a[2], a[0]),
                    mhir_episode: ratio(a[3], a[0]),
                    verification_autonomy: ratio(a[5], a[4]),
                    context_meaningfulness: ratio(a[7], a[6]),
                    tool_recovery: ratio(a[9], a[8]),
                    attribution_completeness: ratio(a[11], a[10]),
                    entropy_delta: ratio(a[12], a[0]),
                },
            )
        })
        .collect()
}

/// Exact equality between a library rate and an oracle ratio.
pub fn same(rate: harnesslab::metrics::Rate, expected: Ratio) -> bool {
    match expected {
        None => rate.den == 0,
        Some((p, q)) => rate.equals(p, q),
    }
}

pub fn row_matches(r: &harnesslab::metrics::MetricsReport, o: &OracleRow) -> bool {
    r.n_episodes == o.n
        && same(r.avsr, o.avsr)
        && same(r.mhir, o.mhir)
        && same(r.mhir_episode, o.mhir_episode)
        && same(r.verification_autonomy, o.verification_autonomy)
        && same(r.context_meaningfulness, o.context_meaningfulness)
        && same(r.tool_recovery_rate, o.tool_recovery)
        && same(r.attribution_completeness, o.attribution_completeness)
        && same(r.entropy_delta, o.entropy_delta)
}

/// Table of artifacts and the levels that show them, restated as data.
pub const VISIBILITY_TABLE: [(&str, [bool; 4]); 17] = [
    ("task_description", [true, true, true, true]),
    ("repository_files", [true, true, true, true]),
    ("tool_registry", [false, true, true, true]),
    ("test_command_registry", [false, true, true, true]),
    ("tool_usage_protocol", [false, true, true, true]),
    ("agent_guide", [false, false, true, true]),
    ("architecture", [false, false, true, true]),
    ("testing_guide", [false, false, true, true]),
    ("task_state", [false, false, true, true]),
    ("known_failures", [false, false, true, true]),
    ("context_selection_protocol", [false, false, true, true]),
    ("deterministic_check_registry", [false, false, false, true]),
    ("bug_reproduction_protocol", [false, false, false, true]),
    ("failure_attribution_protocol", [false, false, false, true]),
    ("verification_protocol", [false, false, false, true]),
    ("verification_report_template", [false, false, false, true]),
    ("hidden_evaluator_notes", [false, false, false, false]),
];

pub fn table_visible(kind: ArtifactKind, level: HarnessLevel) -> bool {
    let row = VISIBILITY_TABLE.iter().find(|(name, _)| *name == kind.as_str()).expect("artifact in table");
    row.1[HarnessLevel::ALL.iter().position(|l| *l == level).unwrap()]
}
