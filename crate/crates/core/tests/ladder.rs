use harnesslab::agent::EpisodeConfig;
use harnesslab::fixture::{build_corpus, FixtureOptions};
use harnesslab::pipeline::{ladder, ladder_table};
use harnesslab::trace::validate_package;
use harnesslab::{AdjudicationConfig, HarnessLevel, OutcomeLabel};

#[test]
fn ladder_runs_and_validates() {
    let home = tempfile::tempdir().unwrap();
    let bundle = build_corpus(home.path(), &FixtureOptions::default()).unwrap();
    let config = EpisodeConfig {
        adjudication: AdjudicationConfig { h0_regression_counts_as_evidence: true, ..Default::default() },
        ..Default::default()
    };
    let out = ladder(&bundle, &home.path().join("runs"), false, &config).unwrap();
    let pkgs: Vec<_> = out.iter().map(|o| &o.package).collect();
    assert_eq!(ladder_table(&pkgs).lines().count(), 5);
    for o in &out {
        assert!(validate_package(&o.package).is_empty());
    }
    let labels: Vec<(HarnessLevel, OutcomeLabel)> = out.iter().map(|o| (o.package.level, o.label())).collect();
    assert_eq!(
        labels,
        vec![
            (HarnessLevel::H0, OutcomeLabel::AutonomousVerifiedSuccess),
            (HarnessLevel::H1, OutcomeLabel::UnverifiedSuccess),
            (HarnessLevel::H2, OutcomeLabel::UnverifiedSuccess),
            (HarnessLevel::H3, OutcomeLabel::AutonomousVerifiedSuccess),
        ]
    );
}
