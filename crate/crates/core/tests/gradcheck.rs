//! Analytic gradients against central finite differences in f64.

mod common;

use common::{all_ops, INSTANCES, TOL};

#[test]
fn every_op_matches_finite_differences() {
    let report = all_ops();
    for (name, worst) in &report {
        println!("{name:>20}: {INSTANCES} instances, worst relative error {worst:.2e}");
    }
    for (name, worst) in &report {
        assert!(*worst <= TOL, "{name}: relative gradient error {worst:e}");
    }
    assert!(report.len() >= 28);
}
