//! Helpers shared by the integration suites.

use retest_core::pipeline::ReportBundle;
use retest_core::simulate::Fixture;
use retest_core::IccKind;

/// Every disagreement between a bundle and the fixture's ground truth.
pub fn truth_mismatches(fixture: &Fixture, bundle: &ReportBundle) -> Vec<String> {
    let truth = &fixture.truth;
    let mut bad = Vec::new();
    for t in &truth.reliability {
        let decision = bundle.decision(&t.model_id, &t.metric_id).map(|d| d.decision);
        if decision != Some(t.screening) {
            bad.push(format!("{}/{} screening {decision:?} != {:?}", t.model_id, t.metric_id, t.screening));
        }
        let got = bundle.result(&t.model_id, &t.metric_id);
        let classes = (got.map(|r| r.class31), got.map(|r| r.class3k));
        if classes != (t.class31, t.class3k) {
            bad.push(format!("{}/{} classes {classes:?} != {:?}", t.model_id, t.metric_id, (t.class31, t.class3k)));
        }
    }
    for track in IccKind::BOTH {
        let got = match track {
            IccKind::Single => bundle.rt_single.clone(),
            IccKind::Average => bundle.rt_average.clone(),
        }
        .unwrap_or_default();
        let mut want = truth.rt_set(track).to_vec();
        want.sort();
        let mut got_sorted = got.clone();
        got_sorted.sort();
        if got_sorted != want {
            bad.push(format!("{} RT set {} != {}", track.as_str(), got.len(), want.len()));
        }
    }
    let mut n_agreement = 0;
    for t in &truth.agreement {
        let got = bundle
            .agreement_for(t.track)
            .find(|r| r.pair_label == t.pair_label && r.metric_id == t.metric_id)
            .and_then(|r| r.agreement_class);
        n_agreement += 1;
        if got != Some(t.class) {
            bad.push(format!("{} {} {} agreement {got:?} != {:?}", t.track.as_str(), t.pair_label, t.metric_id, t.class));
        }
    }
    if bundle.agreement.len() != n_agreement {
        bad.push(format!("{} agreement results, truth has {n_agreement}", bundle.agreement.len()));
    }
    bad
}
