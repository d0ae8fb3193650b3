mod support;

use support::{metric_oracle_errors, oracle_f1};
use tov_core::probe::f1_scores;

#[test]
fn metrics_match_double_loop_oracles() {
    let e = metric_oracle_errors(41, 200);
    assert!(e.std <= 1e-10, "{e:?}");
    assert!(e.corr <= 1e-10, "{e:?}");
    assert!(e.spectrum <= 1e-10, "{e:?}");
    assert!(e.cosine <= 1e-10, "{e:?}");
    assert!(e.f1 <= 1e-12, "{e:?}");
}

#[test]
fn f1_of_classes_absent_from_both_sides_is_ignored() {
    let preds = [0, 0, 1, 3];
    let labels = [0, 1, 1, 3];
    let r = f1_scores(&preds, &labels, 6).unwrap();
    let (m, _, _) = oracle_f1(&preds, &labels, 6);
    assert_eq!(r.macro_f1, m);
    assert!((m - (2.0 / 3.0 + 2.0 / 3.0 + 1.0) / 3.0).abs() < 1e-15);
}
