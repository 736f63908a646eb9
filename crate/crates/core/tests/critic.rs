//! Cost critics on a chain whose cost-to-go is known in closed form.

mod common;

use common::chain::{cost_to_go, fit_chain};

#[test]
fn chain_cost_to_go() {
    assert_eq!([0, 1, 2, 3].map(cost_to_go), [2.0, 1.0, 1.0, 0.0]);
}

#[test]
fn fitted_chain_critics_cover_the_bellman_bound() {
    let fit = fit_chain(0, 3000, 400);
    assert_eq!(fit.transitions, 1200);
    assert!(fit.within_tol as f64 >= 0.99 * fit.transitions as f64, "{fit:?}");
    assert!(fit.max_value_error < 0.05, "{fit:?}");
}
