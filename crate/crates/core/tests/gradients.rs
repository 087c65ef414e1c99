//! Central finite-difference checks of every training objective.

mod common;

use common::grad::*;
use sgalign_core::align::mapper_step;

fn assert_report(report: Report) {
    assert!(!report.is_empty());
    for (label, e) in report {
        assert!(e < TOLERANCE, "{label}: relative error {e}");
    }
}

#[test]
fn xe_gradient_through_whole_pipeline() {
    assert_report(xe_report());
}

#[test]
fn policy_surrogate_gradient() {
    assert_report(policy_report());
}

#[test]
fn discriminator_objectives() {
    assert_report(discriminator_report());
}

#[test]
fn mapper_objectives_with_cycle() {
    assert_report(mapper_report());
}

#[test]
fn cycle_alone() {
    let (g0, ri, rs, s) = cycle_setup();
    let (losses, step) = mapper_step(&g0, &ri, &rs, s).unwrap();
    assert!((losses.gan_is - 1.0).abs() < 1e-12 && (losses.gan_si - 1.0).abs() < 1e-12);
    assert!((step.loss - 2.0 - losses.cycle).abs() < 1e-12);
    assert!(losses.cycle > 0.0);
    assert_report(cycle_report());
}
