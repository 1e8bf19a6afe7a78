mod common;

use common::{layer_gradient_error, loss_gradient_error, LAYER_CASES, LOSS_CASES};

const INSTANCES: u64 = 100;
const TOLERANCE: f64 = 1e-4;

#[test]
fn every_layer_type_matches_finite_differences() {
    for (name, kind, mode) in LAYER_CASES {
        let worst = (0..INSTANCES)
            .map(|s| layer_gradient_error(kind, mode, s))
            .fold(0.0, f64::max);
        assert!(worst < TOLERANCE, "{name}: worst relative error {worst:e}");
    }
}

#[test]
fn every_adapter_objective_matches_finite_differences() {
    for case in LOSS_CASES {
        let worst = (0..INSTANCES)
            .map(|s| loss_gradient_error(case, 1000 + s))
            .fold(0.0, f64::max);
        assert!(worst < TOLERANCE, "{case}: worst relative error {worst:e}");
    }
}
