//! End-to-end parameter gradients of every loss through a two-hidden-layer
//! network, checked against central finite differences.

mod common;

use common::gradcheck::{case, max_relative_error, specs, DIMS, TOLERANCE};
use subgroup_kd::model::MlpModel;

#[test]
fn parameter_gradients_match_central_differences() {
    let mut failures = Vec::new();
    for seed in 0..20 {
        let c = case(seed);
        for (name, spec) in specs(seed) {
            let err = max_relative_error(&c, &spec);
            if !(err < TOLERANCE) {
                failures.push(format!("{name} seed {seed}: {err:.3e}"));
            }
        }
    }
    assert!(failures.is_empty(), "gradient mismatches: {failures:?}");
}

#[test]
fn parameter_count_matches_layout() {
    let m = MlpModel::init(&DIMS, 0).unwrap();
    assert_eq!(m.num_params(), 4 * 16 + 16 + 16 * 16 + 16 + 16 * 5 + 5);
    assert_eq!(m.flat_params().len(), m.num_params());
}
