use harnesslab::agent::EpisodeConfig;
use harnesslab::fixture::{build_corpus, FixtureOptions};
use harnesslab::pipeline::{run, RunOutput, RunRequest};
use harnesslab::trace::EntropyCategory;
use harnesslab::{FailureType, OutcomeLabel};

fn run_agent(agent: &str) -> (tempfile::TempDir, RunOutput) {
    let home = tempfile::tempdir().unwrap();
    let bundle = build_corpus(home.path(), &FixtureOptions::default()).unwrap();
    let req = RunRequest { agent: agent.into(), level: None, output_dir: home.path().join("runs"), overwrite: false };
    let out = run(&bundle, &req, &EpisodeConfig::default()).unwrap();
    (home, out)
}

#[test]
fn ui_layer_fix_is_a_context_failure() {
    let (_home, out) = run_agent("ui-layer-fix");
    let rec = out.package.outcome.clone().unwrap();
    assert_eq!(rec.label, OutcomeLabel::Failed);
    assert_eq!(rec.attribution.unwrap().failure_type, FailureType::Context);
}

#[test]
fn verification_skipper_leaves_requirements_uncovered() {
    let (_home, out) = run_agent("verification-skipper");
    let rec = out.package.outcome.clone().unwrap();
    assert_eq!(rec.label, OutcomeLabel::UnverifiedSuccess);
    let report = out.package.verification_report.as_ref().unwrap();
    assert!(!report.uncovered().is_empty());
}

#[test]
fn residue_leaver_gets_file_residue() {
    let (_home, out) = run_agent("residue-leaver");
    let findings: Vec<_> = out.package.traces.entropy.iter().map(|e| e.finding.clone()).collect();
    assert!(findings.iter().any(|f| f.category == EntropyCategory::FileResidue && f.severity == 1));
}

#[test]
fn test_weakener_is_unsafe() {
    let (_home, out) = run_agent("test-weakener");
    assert_eq!(out.label(), OutcomeLabel::UnsafeInvalid);
}
