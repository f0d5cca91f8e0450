mod common;

use common::*;
use harnesslab::episode::VisibilityMatrix;
use harnesslab::metrics::{compute_metrics, Counts, GroupField};
use harnesslab::trace::{VerificationEvent, VerificationResult, VerificationType};
use harnesslab::verify::coverage;
use harnesslab::{ArtifactKind, EpisodePackage, HarnessLevel, OutcomeLabel};
use proptest::prelude::*;

fn kind_strategy() -> impl Strategy<Value = ArtifactKind> {
    prop::sample::select(ArtifactKind::ALL.to_vec())
}

fn level_strategy() -> impl Strategy<Value = HarnessLevel> {
    prop::sample::select(HarnessLevel::ALL.to_vec())
}

fn package_set(max: usize) -> impl Strategy<Value = Vec<EpisodePackage>> {
    prop::collection::vec(spec_strategy(), 1..=max)
        .prop_map(|specs| specs.iter().enumerate().map(|(i, s)| adjudicated(s, i)).collect())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn visibility_matches_table(kind in kind_strategy(), level in level_strategy()) {
        let m = VisibilityMatrix::standard();
        prop_assert_eq!(m.is_visible(kind, level), table_visible(kind, level));
    }

    #[test]
    fn visibility_is_monotonic(kind in kind_strategy(), a in level_strategy(), b in level_strategy()) {
        let m = VisibilityMatrix::standard();
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        prop_assert!(!m.is_visible(kind, lo) || m.is_visible(kind, hi));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(500))]

    #[test]
    fn adjudication_is_total_and_follows_rule_table(spec in spec_strategy()) {
        let pkg = adjudicated(&spec, 0);
        let rec = pkg.outcome.as_ref().unwrap();
        prop_assert!(OutcomeLabel::ALL.contains(&rec.label));
        prop_assert_eq!(rec.label, oracle_label(&spec));
        prop_assert_eq!(rec.label == OutcomeLabel::UnsafeInvalid, !rec.safety_violations.is_empty());
        prop_assert_eq!(
            rec.attribution.is_some(),
            matches!(rec.label, OutcomeLabel::Failed | OutcomeLabel::UnsafeInvalid)
        );
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn metrics_match_counting_oracle(packages in package_set(10)) {
        let groupings: [Grouping; 3] = [
            (&[], |_| String::new()),
            (&[GroupField::Level], |p| p.level.to_string()),
            (&[GroupField::Agent], |p| p.agent_id.clone()),
        ];
        for (grouping, key) in groupings {
            let reports = compute_metrics(&packages, grouping).unwrap();
            let oracle = oracle_metrics(&packages, key);
            prop_assert_eq!(reports.len(), oracle.len());
            for (r, (_, o)) in reports.iter().zip(&oracle) {
                prop_assert!(row_matches(r, o), "{:?} vs {:?}", r, o);
            }
        }
    }

    #[test]
    fn metrics_ignore_package_order(packages in package_set(8), seed in any::<u64>()) {
        let mut shuffled = packages.clone();
        let n = shuffled.len();
        for i in (1..n).rev() {
            shuffled.swap(i, (seed as usize).wrapping_mul(i + 7) % (i + 1));
        }
        let grouping = [GroupField::Agent, GroupField::Level];
        prop_assert_eq!(compute_metrics(&packages, &grouping).unwrap(), compute_metrics(&shuffled, &grouping).unwrap());
    }

    #[test]
    fn counts_are_additive(packages in package_set(8), split in any::<prop::sample::Index>()) {
        let at = split.index(packages.len() + 1);
        let (a, b) = packages.split_at(at);
        let total = |ps: &[EpisodePackage]| {
            let mut c = Counts::default();
            for p in ps {
                c.add(&Counts::of(p).unwrap());
            }
            c
        };
        let mut sum = total(a);
        sum.add(&total(b));
        prop_assert_eq!(sum, total(&packages));
        prop_assert_eq!(compute_metrics(&packages, &[]).unwrap()[0].counts, sum);
    }
}

fn verification_events() -> impl Strategy<Value = Vec<VerificationEvent>> {
    use VerificationResult as R;
    use VerificationType as V;
    prop::collection::vec(
        (
            prop::sample::select(vec![V::DeterministicCheck, V::TargetedTest, V::FullRegression, V::PatchReview]),
            prop::sample::select(vec![R::Pass, R::Fail, R::TimedOut, R::Inconclusive]),
            prop::sample::subsequence(REQS.to_vec(), 0..=5),
        ),
        0..12,
    )
    .prop_map(|evs| {
        evs.into_iter()
            .enumerate()
            .map(|(i, (vtype, result, covers))| VerificationEvent {
                seq: i as u64 + 1,
                vtype,
                method: "m".into(),
                result,
                covers: covers.into_iter().map(String::from).collect(),
                interpretation: String::new(),
            })
            .collect()
    })
}

proptest! {
    #[test]
    fn coverage_ignores_event_order(events in verification_events(), rotate in any::<prop::sample::Index>()) {
        let task = task();
        let mut shuffled = events.clone();
        shuffled.reverse();
        if !shuffled.is_empty() {
            let k = rotate.index(shuffled.len());
            shuffled.rotate_left(k);
        }
        prop_assert_eq!(coverage(&events, &task).unwrap(), coverage(&shuffled, &task).unwrap());
    }

    #[test]
    fn every_requirement_gets_one_row(events in verification_events()) {
        let task = task();
        let map = coverage(&events, &task).unwrap();
        let ids: Vec<&str> = map.requirements.iter().map(|r| r.req_id.as_str()).collect();
        prop_assert_eq!(ids, REQS.to_vec());
    }
}
