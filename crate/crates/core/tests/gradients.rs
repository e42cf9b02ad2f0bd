//! Finite-difference checks of every differentiable primitive, the
//! composite layers and the full training objective.

mod common;

use common::TOL;

#[test]
fn every_primitive() {
    let mut failures = Vec::new();
    for (name, op) in common::primitives() {
        let report = common::check_op(op);
        assert!(report.checked > 0, "{name}: nothing checked");
        if report.max_rel_err >= TOL {
            failures.push(format!("{name}: {:.3e} at {:?}", report.max_rel_err, report.worst));
        }
    }
    assert!(failures.is_empty(), "{failures:#?}");
}

#[test]
fn mlp_forward_blocks() {
    let report = common::mlp_forward_blocks();
    assert!(report.max_rel_err < TOL, "{report:?}");
}

#[test]
fn gru_cell() {
    let report = common::gru_cell();
    assert!(report.max_rel_err < TOL, "{report:?}");
}

#[test]
fn swav_cross_entropy_reaches_features_and_prototypes() {
    let report = common::swav_objective();
    assert!(report.checked >= 12 + 20);
    assert!(report.max_rel_err < TOL, "{report:?}");
}

#[test]
fn full_objective_on_three_node_instance() {
    let (report, scalars) = common::full_objective();
    assert!(report.checked > scalars / 2, "{report:?}");
    assert!(report.max_rel_err < TOL, "{report:?}");
}
