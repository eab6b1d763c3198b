mod common;

use common::model_gradient_report;

fn check(with_gcn: bool, mini_batch: usize) {
    let (report, elements) = model_gradient_report(with_gcn, mini_batch);
    for f in report.failures.iter().take(10) {
        eprintln!("{f}");
    }
    assert!(report.passed(), "max relative error {:.3e}", report.max_rel_error);
    assert_eq!(report.checked, elements);
    if with_gcn {
        assert!(report.per_param_max.contains_key("gcn.p"));
        assert!(report.per_param_max.contains_key("gcn.q"));
    }
}

#[test]
fn device_model_gradients_match_finite_differences() {
    check(false, 4);
    check(false, 2);
}

#[test]
fn corrected_model_gradients_match_finite_differences() {
    check(true, 4);
    check(true, 3);
}
