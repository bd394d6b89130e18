//! Analytic gradients against central finite differences.
#![cfg(not(feature = "f32"))]

mod common;

use common::{network_checks, op_checks};

#[test]
fn every_op_matches_finite_differences() {
    let checks = op_checks();
    for c in &checks {
        assert!(c.trials >= 100, "{}: {} trials", c.name, c.trials);
        assert!(c.ok(), "{}: worst relative error {:.3e}", c.name, c.worst);
    }
}

#[test]
fn every_network_matches_finite_differences() {
    for c in network_checks(120) {
        assert!(c.ok(), "{}: worst relative error {:.3e}", c.name, c.worst);
    }
}

#[test]
fn rel_err_floor() {
    assert_eq!(common::rel_err(0.0, 0.0), 0.0);
    assert!((common::rel_err(2.0, 1.0) - 0.5).abs() < 1e-15);
    assert!((common::rel_err(1e-9, 0.0) - 1e-3).abs() < 1e-15);
}

#[test]
fn checker_flags_a_wrong_gradient() {
    use fesvibs::autodiff::Tensor;
    // f(x) = sum x^3 with the derivative misreported as 3x^2 + x.
    let x = Tensor::new([4], vec![0.5, -1.0, 2.0, 0.3]).unwrap();
    let c = common::check("cube", vec![x], 100, 0, |ts, _| {
        let v = ts[0].data();
        let f = v.iter().map(|a| (a * a * a) as f64).sum();
        (f, vec![Some(ts[0].map(|a| 3.0 * a * a + a))])
    });
    assert!(!c.ok(), "worst {:.3e}", c.worst);
}
