//! Property checks across modules.

use proptest::prelude::*;

use hitdp::density::QuantRule;
use hitdp::kernel::discretize_kernel;
use hitdp::skeleton::{sample_skeleton, SignVec, SkeletonConfig};
use hitdp::solver::{backward_dp, build_tree, leaf_values, policy_value, ActionGridConfig, SolveConfig};
use hitdp::structures::portfolio::TimeCoef;
use hitdp::structures::{Coefficient, Payoff, PdSdeSpec, PdSdeStructure, PortfolioSpec, PortfolioStructure, StateStructure};

fn cfg(values: &[f64]) -> SolveConfig {
    SolveConfig {
        depth: None,
        q: 2,
        rule: QuantRule::Quantile,
        actions: ActionGridConfig { bound: 1.0, points: None, dim: 1, values: Some(values.to_vec()) },
        epsilon_total: 0.01,
        collapse: false,
        state_bin: 1e-3,
        time_bin: None,
        refine: false,
        max_nodes: 1_000_000,
    }
}

fn sde(drift: f64, vol: f64, d: usize, eps: f64) -> PdSdeStructure {
    let spec = PdSdeSpec {
        x0: vec![0.1],
        noise_dim: d,
        drift: vec![Coefficient::Linear { state: -0.3, action: drift, time: 0.0, constant: 0.0 }],
        diffusion: vec![Coefficient::Linear { state: 0.2, action: 0.0, time: 0.0, constant: vol }],
        mixing: None,
    };
    PdSdeStructure::new(spec, eps).unwrap()
}

fn merton(x0: f64, eps: f64) -> PortfolioStructure {
    let spec = PortfolioSpec { r: 0.03, alpha: TimeCoef::Constant(0.05), sigma: TimeCoef::Constant(0.3), gamma: 0.5, x0, horizon: 1.0 };
    PortfolioStructure::new(spec, eps).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn skeleton_paths_are_consistent(eps in 0.1f64..2.0, dim in 1usize..4, steps in 1usize..200, seed: u64) {
        let c = SkeletonConfig::new(eps, dim, 1.0).unwrap().with_steps(steps).unwrap();
        let p = sample_skeleton(&c, seed).unwrap();
        prop_assert_eq!(p.len(), steps);
        let mut t = 0.0;
        let mut level = vec![0i64; dim];
        let mut hits = vec![0usize; dim];
        for (n, s) in p.steps().iter().enumerate() {
            prop_assert!(s.delta_t > 0.0);
            t += s.delta_t;
            prop_assert!((p.time(n + 1) - t).abs() <= 1e-12 * t.max(1.0));
            level[s.sign.coord()] += i64::from(s.sign.sign());
            hits[s.sign.coord()] += 1;
            for (j, l) in level.iter().enumerate() {
                prop_assert_eq!(p.level(j, n + 1), *l);
            }
        }
        for (times, h) in p.per_coordinate_times().iter().zip(&hits) {
            prop_assert_eq!(times.len(), *h);
        }
    }

    #[test]
    fn discretized_kernels_are_probability_measures(l0 in 0.0f64..2.0, l1 in 0.0f64..2.0, q in 1usize..6, eps in 0.2f64..1.5, gauss: bool) {
        let rule = if gauss { QuantRule::Gauss } else { QuantRule::Quantile };
        let lags = [l0 * eps * eps, l1 * eps * eps];
        let k = discretize_kernel(&lags, eps, q, rule).unwrap();
        prop_assert!((k.mass() - 1.0).abs() < 1e-6, "mass {}", k.mass());
        for a in k.atoms() {
            prop_assert!(a.weight >= 0.0 && a.delta_t > 0.0);
        }
    }

    #[test]
    fn wealth_is_positive_and_scales_with_x0(c in 0.1f64..10.0, actions in prop::collection::vec(-1.0f64..1.0, 1..12),
                                               dts in prop::collection::vec(0.001f64..0.5, 12), ups in prop::collection::vec(any::<bool>(), 12)) {
        let (a, b) = (merton(1.0, 0.4), merton(c, 0.4));
        let (mut sa, mut sb) = (a.initial_state(), b.initial_state());
        for (i, u) in actions.iter().enumerate() {
            let sign = SignVec::new(0, if ups[i] { 1 } else { -1 }).unwrap();
            sa = a.step(&sa, &[*u], dts[i], sign).unwrap();
            sb = b.step(&sb, &[*u], dts[i], sign).unwrap();
        }
        prop_assert!(sa.wealth() > 0.0);
        prop_assert!((sb.wealth() - c * sa.wealth()).abs() <= 1e-12 * sb.wealth());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn dp_value_is_positively_homogeneous_in_the_payoff(scale in 0.1f64..10.0, drift in -1.0f64..1.0, depth in 0usize..3) {
        let s = sde(drift, 0.8, 1, 0.5);
        let c = cfg(&[-1.0, 0.0, 1.0]);
        let tree = build_tree(&s, &c, depth).unwrap();
        let one = backward_dp(&s, &tree, &Payoff::Terminal { scale: 1.0 }).unwrap();
        let many = backward_dp(&s, &tree, &Payoff::Terminal { scale }).unwrap();
        prop_assert!((many.value() - scale * one.value()).abs() <= 1e-12 * (1.0 + many.value().abs()));
        prop_assert_eq!(one.policy, many.policy);
    }

    #[test]
    fn richer_grids_never_lower_the_value(drift in -1.0f64..1.0, vol in 0.2f64..1.5, d in 1usize..3) {
        let s = sde(drift, vol, d, 0.6);
        let pay = Payoff::Holder { amplitude: 1.0, frequency: 2.0, phase: 0.2, exponent: 0.7 };
        let coarse = backward_dp(&s, &build_tree(&s, &cfg(&[-1.0, 1.0]), 2).unwrap(), &pay).unwrap().value();
        let fine = backward_dp(&s, &build_tree(&s, &cfg(&[-1.0, 1.0, 0.0]), 2).unwrap(), &pay).unwrap().value();
        prop_assert!(fine >= coarse - 1e-14, "{} < {}", fine, coarse);
    }

    #[test]
    fn fixed_policies_never_beat_the_optimum(drift in -1.0f64..1.0, pick in 0usize..3) {
        let s = sde(drift, 0.7, 1, 0.5);
        let pay = Payoff::Call { strike: 0.0, cap: 1.0 };
        let tree = build_tree(&s, &cfg(&[-1.0, 0.0, 1.0]), 3).unwrap();
        let sol = backward_dp(&s, &tree, &pay).unwrap();
        let leaves = leaf_values(&s, &tree, &pay).unwrap();
        let fixed = policy_value(&tree, &leaves, |n, i| (pick + n + i) % 3);
        for (layer, best_layer) in fixed.iter().zip(&sol.values) {
            for (v, best) in layer.iter().zip(best_layer) {
                prop_assert!(*v <= best + 1e-12);
            }
        }
    }
}

#[test]
fn depth_zero_tree_is_the_payoff_at_the_start() {
    let s = sde(0.5, 1.0, 1, 0.5);
    let tree = build_tree(&s, &cfg(&[-1.0, 1.0]), 0).unwrap();
    assert_eq!(tree.layer_sizes(), vec![1]);
    let sol = backward_dp(&s, &tree, &Payoff::Terminal { scale: 2.0 }).unwrap();
    assert_eq!(sol.value(), 0.2);
}

#[test]
fn constant_payoff_ties_resolve_to_the_first_action() {
    let s = sde(0.5, 1.0, 2, 0.5);
    let tree = build_tree(&s, &cfg(&[0.5, -1.0, 1.0]), 2).unwrap();
    let sol = backward_dp(&s, &tree, &Payoff::Constant { value: 3.0 }).unwrap();
    assert_eq!(sol.value(), 3.0);
    assert!(sol.policy.iter().flatten().all(|&a| a == 0));
}

#[test]
fn optimal_values_are_a_supermartingale_along_every_action() {
    let s = merton(1.0, 0.5);
    let mut c = cfg(&[-1.0, -0.5, 0.0, 0.5, 1.0]);
    c.collapse = true;
    let tree = build_tree(&s, &c, 4).unwrap();
    let sol = backward_dp(&s, &tree, &Payoff::Power { gamma: 0.5 }).unwrap();
    for n in 0..4 {
        for i in 0..tree.layer(n).len() {
            for a in 0..tree.n_actions(n, i) {
                let ker = tree.kernel(n, i);
                let next: f64 = ker.atoms().iter().enumerate().map(|(k, at)| at.weight * sol.values[n + 1][tree.child(n, i, a, k)]).sum();
                assert!(next <= sol.values[n][i] + 1e-12, "layer {n} node {i} action {a}");
            }
        }
    }
}
