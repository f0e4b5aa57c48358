use std::sync::Arc;

use bellnet_core::bellman::{bellman_apply, iterate_fixed};
use bellnet_core::catalog;
use bellnet_core::grid::{GridDomain, GridFunction, GridShape};
use bellnet_core::trajectory::SimConfig;

#[test]
fn constant_reward_matches_closed_form() {
    let (r0, lambda, delta, horizon) = (2.0, 0.7, 0.25, 1.0);
    let spec = catalog::constant_drift(0.3, 0.4, r0, lambda, delta, horizon).unwrap();
    let shape = GridShape { time_nodes: 5, state_nodes: vec![5], action_nodes: vec![3] };
    let dom = Arc::new(GridDomain::for_spec(&spec, &shape).unwrap());
    let sim = SimConfig { substeps_per_delta: 32, n_samples: 64, seed: 3, antithetic: false };
    let n = (horizon / delta) as usize;
    let trace = iterate_fixed(&spec, &GridFunction::zeros(dom.clone()), n, &sim).unwrap();
    let q = trace.last();

    // Left-endpoint quadrature of e^{-λu} over one hold overshoots by at most
    // λ δ Δu / 2 per unit reward; n holds accumulate at most n of those.
    let du = delta / sim.substeps_per_delta as f64;
    let tol = n as f64 * r0 * lambda * delta * du / 2.0;
    for (j, v) in q.values().iter().enumerate() {
        let t = dom.node(j).coords[0];
        let exact = r0 * (1.0 - (-lambda * (horizon - t)).exp()) / lambda;
        assert!((v - exact).abs() <= tol, "t = {t}: {v} vs {exact} (tol {tol})");
    }
}

#[test]
fn common_random_numbers_keep_the_contraction() {
    let spec = catalog::ou_1d();
    let shape = GridShape { time_nodes: 3, state_nodes: vec![5], action_nodes: vec![3] };
    let dom = Arc::new(GridDomain::for_spec(&spec, &shape).unwrap());
    let sim = SimConfig { substeps_per_delta: 4, n_samples: 256, seed: 1, antithetic: true };
    let beta = spec.discount_factor();
    let u = GridFunction::encode(dom.clone(), |p| (p.coords[1] * 2.0).sin()).unwrap();
    let v = GridFunction::encode(dom, |p| p.coords[1] * p.coords[2] - 0.3).unwrap();
    let bu = bellman_apply(&spec, &u, &sim).unwrap();
    let bv = bellman_apply(&spec, &v, &sim).unwrap();
    // Same paths for both inputs: the running rewards cancel exactly.
    assert!(bu.node_distance(&bv).unwrap() <= beta * u.node_distance(&v).unwrap() * (1.0 + 1e-12));
}
