//! Analytic gradients against central finite differences.

mod common;

use common::cases;
use common::{worst_over_seeds, FD_TOL};

fn check(name: &str) {
    let (_, case) = cases::all().into_iter().find(|(n, _)| *n == name).unwrap();
    let r = worst_over_seeds(case);
    assert!(
        r.passes(),
        "{name}: worst relative error {:.3e} (tolerance {FD_TOL:.0e}), smallest gradient norm {:.3e}",
        r.rel_err,
        r.analytic_norm
    );
}

#[test]
fn backbone_input() {
    check("backbone (input)");
}

#[test]
fn frm() {
    check("frm");
}

#[test]
fn deformable_features() {
    check("deformable attention (features)");
}

#[test]
fn deformable_offsets() {
    check("deformable attention (offsets)");
}

#[test]
fn cross_attention() {
    check("cross attention");
}

#[test]
fn ffm_with_deformable_core() {
    check("ffm (deform core)");
}

#[test]
fn pixel_decoder() {
    check("pixel decoder");
}

#[test]
fn transformer_decoder() {
    check("transformer decoder");
}

#[test]
fn lse_aggregation() {
    check("lse aggregation");
}

#[test]
fn mask_bce() {
    check("mask bce");
}

#[test]
fn dice() {
    check("dice");
}

#[test]
fn set_loss() {
    check("set loss");
}

#[test]
fn pixel_loss() {
    check("pixel loss");
}

#[test]
fn total_loss() {
    check("total loss");
}

#[test]
fn every_case_has_a_test() {
    assert_eq!(cases::all().len(), 14);
}
