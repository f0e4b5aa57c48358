use std::sync::Arc;

use proptest::prelude::*;

use bellnet_core::bellman::{bellman_apply, iterate_fixed};
use bellnet_core::catalog;
use bellnet_core::grid::{GridDomain, GridFunction, GridShape};
use bellnet_core::mdp::MdpSpec;
use bellnet_core::net::{FamilyParams, FunctionFamily};
use bellnet_core::stack::{plan_stack, reference_fixed_point, run_stack, LayerBlock};
use bellnet_core::trajectory::SimConfig;

fn appendix(gamma: f64) -> (MdpSpec, Arc<GridDomain>) {
    let spec = catalog::appendix_e_with(gamma, 0.1, None).unwrap();
    let shape = GridShape { time_nodes: 0, state_nodes: vec![11], action_nodes: vec![] };
    let dom = Arc::new(GridDomain::for_spec(&spec, &shape).unwrap());
    (spec, dom)
}

fn node_values() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-2.0f64..2.0, 22)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn bellman_is_a_gamma_contraction(u in node_values(), v in node_values(), gamma in 0.05f64..0.99) {
        let (spec, dom) = appendix(gamma);
        let sim = SimConfig::default();
        let fu = GridFunction::decode(dom.clone(), u).unwrap();
        let fv = GridFunction::decode(dom, v).unwrap();
        let before = fu.node_distance(&fv).unwrap();
        let after = bellman_apply(&spec, &fu, &sim).unwrap().node_distance(&bellman_apply(&spec, &fv, &sim).unwrap()).unwrap();
        prop_assert!(after <= gamma * before * (1.0 + 1e-12) + 1e-15);
    }

    #[test]
    fn bellman_is_monotone(u in node_values(), bump in prop::collection::vec(0.0f64..1.0, 22)) {
        let (spec, dom) = appendix(0.9);
        let sim = SimConfig::default();
        let lo = GridFunction::decode(dom.clone(), u.clone()).unwrap();
        let hi = GridFunction::decode(dom, u.iter().zip(&bump).map(|(a, b)| a + b).collect()).unwrap();
        let (blo, bhi) = (bellman_apply(&spec, &lo, &sim).unwrap(), bellman_apply(&spec, &hi, &sim).unwrap());
        for (a, b) in blo.values().iter().zip(bhi.values()) {
            prop_assert!(a <= b);
        }
    }

    #[test]
    fn constant_shift_is_discounted(u in node_values(), c in -1.0f64..1.0) {
        let (spec, dom) = appendix(0.9);
        let sim = SimConfig::default();
        let q = GridFunction::decode(dom, u).unwrap();
        let shifted = bellman_apply(&spec, &q.map(|x| x + c).unwrap(), &sim).unwrap();
        let base = bellman_apply(&spec, &q, &sim).unwrap();
        for (a, b) in shifted.values().iter().zip(base.values()) {
            prop_assert!((a - b - 0.9 * c).abs() <= 1e-12);
        }
    }

    #[test]
    fn injected_error_follows_recurrence(c in 1e-4f64..0.05, gamma in 0.3f64..0.95, eps in 0.02f64..0.5) {
        let (spec, dom) = appendix(gamma);
        let sim = SimConfig::default();
        let plan = plan_stack(&spec, eps).unwrap();
        let reference = iterate_fixed(&spec, &GridFunction::zeros(dom.clone()), plan.layers, &sim).unwrap();
        let (q_star, _) = reference_fixed_point(&spec, &dom, 5000, 1e-13, &sim).unwrap();
        let trace = run_stack(&spec, &plan, &[LayerBlock::InjectedError(c)], &reference, &q_star, &sim).unwrap();
        prop_assert!(trace.recurrence_violations(gamma, 1e-12).is_empty());
        for rec in &trace.layers {
            let closed = c * (1.0 - gamma.powi(rec.l as i32)) / (1.0 - gamma);
            prop_assert!((rec.e_l - closed).abs() <= 1e-9, "l = {}: {} vs {}", rec.l, rec.e_l, closed);
        }
    }

    #[test]
    fn family_draws_respect_caps(seed in 0u64..10_000, amp in 0.05f64..3.0, lip in 0.5f64..20.0) {
        let (_, dom) = appendix(0.9);
        let params = FamilyParams { amplitude_cap: amp, lipschitz_cap: lip, ..Default::default() };
        let family = FunctionFamily::new(dom, params).unwrap();
        for q in family.sample(6, seed, false).unwrap() {
            prop_assert!(family.contains(&q));
        }
    }
}

#[test]
fn oracle_stack_matches_value_iteration_for_any_depth() {
    let (spec, dom) = appendix(0.9);
    let sim = SimConfig::default();
    for eps in [0.5, 0.1, 0.01] {
        let plan = plan_stack(&spec, eps).unwrap();
        let reference = iterate_fixed(&spec, &GridFunction::zeros(dom.clone()), plan.layers, &sim).unwrap();
        let (q_star, _) = reference_fixed_point(&spec, &dom, 5000, 1e-13, &sim).unwrap();
        let trace = run_stack(&spec, &plan, &[LayerBlock::Oracle], &reference, &q_star, &sim).unwrap();
        for (hat, exact) in trace.iterates.iter().zip(&reference.iterates) {
            assert_eq!(hat.values(), exact.values());
        }
        assert!(trace.final_error <= 0.9f64.powi(plan.layers as i32) * q_star.sup_norm() + 1e-12);
    }
}
