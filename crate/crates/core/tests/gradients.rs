mod common;

use common::grad_suite::{self as suite, Checks, ModelCheck, TOL};

fn assert_ops(run: fn(&mut Checks)) {
    let mut checks = Checks::new();
    run(&mut checks);
    assert!(!checks.is_empty());
    for (label, e) in checks {
        assert!(e < TOL, "{label}: relative error {e:e}");
    }
}

fn assert_model(c: ModelCheck) {
    assert!(c.rel_err < TOL, "relative error {:e}", c.rel_err);
    assert!(c.ok(), "{} of {} probes crossed a kink", c.skipped, c.probes);
}

#[test]
fn conv2d_all_inputs() {
    assert_ops(suite::conv2d_all_inputs);
}

#[test]
fn batch_norm_both_modes() {
    assert_ops(suite::batch_norm_both_modes);
}

#[test]
fn pointwise_ops() {
    assert_ops(suite::pointwise_ops);
}

#[test]
fn pooling_and_resizing() {
    assert_ops(suite::pooling_and_resizing);
}

#[test]
fn cross_entropy_with_ignored_pixels() {
    assert_ops(suite::cross_entropy_with_ignored_pixels);
}

#[test]
fn full_model_inference_mode() {
    assert_model(suite::full_model_inference_mode());
}

#[test]
fn full_model_training_mode() {
    assert_model(suite::full_model_training_mode());
}

#[test]
fn pyramid_and_mobilenet_models() {
    suite::pyramid_and_mobilenet_models().into_iter().for_each(assert_model);
}
