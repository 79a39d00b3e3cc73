mod common;

use common::*;

#[test]
fn every_kernel_matches_central_differences() {
    let mut failures = Vec::new();
    for (i, (name, case)) in kernel_cases().into_iter().enumerate() {
        let worst = kernel_worst(case, KERNEL_TRIALS, 100 + i as u64);
        if !(worst < KERNEL_TOL) {
            failures.push(format!("{name}: {worst:e}"));
        }
    }
    assert!(failures.is_empty(), "{failures:?}");
}

#[test]
fn full_models_match_central_differences() {
    for (name, worst) in model_gradient_suite(7) {
        assert!(worst < MODEL_TOL, "{name}: {worst:e}");
    }
}
