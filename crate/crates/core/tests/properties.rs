//! Module invariants as property tests over random instances.

use bilevel_rl::env::{GridWorldSpec, PreferenceProblemSpec};
use bilevel_rl::instances::{random_logits, random_mdp, random_policy, random_rewards};
use bilevel_rl::mdp::{discounted_visitation, exact_return, exact_value_from_table, policy_transition};
use bilevel_rl::policy::{log_policy_grad, softmax};
use bilevel_rl::SimRng;
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn visitation_is_the_restart_chain_fixed_point(seed in any::<u64>(), n in 1usize..6, m in 1usize..4, gamma in 0.3f64..0.99) {
        let mut r = SimRng::seed_from_u64(seed);
        let mdp = random_mdp(&mut r, n, m, gamma);
        let pi = random_policy(&mut r, n, m);
        let d = discounted_visitation(&mdp, &pi).unwrap();
        let chain = policy_transition(&mdp, &pi).unwrap() * gamma + DMatrix::from_fn(n, n, |_, j| (1.0 - gamma) * mdp.rho()[j]);
        prop_assert!((chain.transpose() * &d - &d).amax() <= 1e-10);
        prop_assert!((d.sum() - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn value_is_monotone_in_tau(seed in any::<u64>(), n in 1usize..6, m in 1usize..4, t1 in 0.0f64..2.0, dt in 0.0f64..2.0) {
        let mut r = SimRng::seed_from_u64(seed);
        let mdp = random_mdp(&mut r, n, m, 0.9);
        let rewards = random_rewards(&mut r, n, m);
        let pi = random_policy(&mut r, n, m);
        let v1 = exact_value_from_table(&mdp, &rewards, &pi, t1).unwrap();
        let v2 = exact_value_from_table(&mdp, &rewards, &pi, t1 + dt).unwrap();
        prop_assert!((v1 - v2).max() <= 1e-12);
    }

    #[test]
    fn return_is_lipschitz_in_tau(seed in any::<u64>(), n in 1usize..6, m in 1usize..4, t1 in 0.0f64..2.0, t2 in 0.0f64..2.0) {
        let mut r = SimRng::seed_from_u64(seed);
        let mdp = random_mdp(&mut r, n, m, 0.9);
        let rewards = random_rewards(&mut r, n, m);
        let pi = random_policy(&mut r, n, m);
        let j1 = exact_return(&mdp, &exact_value_from_table(&mdp, &rewards, &pi, t1).unwrap());
        let j2 = exact_return(&mdp, &exact_value_from_table(&mdp, &rewards, &pi, t2).unwrap());
        prop_assert!((j1 - j2).abs() <= (t1 - t2).abs() * (m as f64).ln() / 0.1 + 1e-12);
    }

    #[test]
    fn log_policy_grad_has_l1_norm_at_most_two(seed in any::<u64>(), scale in 0.01f64..200.0, m in 1usize..8) {
        let mut r = SimRng::seed_from_u64(seed);
        let theta = random_logits(&mut r, 3, m) * scale;
        let pi = softmax(&theta).unwrap();
        let g = log_policy_grad(&pi, r.gen_range(0..3), r.gen_range(0..m)).unwrap();
        prop_assert!(g.lp_norm(1) <= 2.0 + 1e-12);
    }

    #[test]
    fn gridworld_rows_are_point_masses(width in 1usize..8, height in 1usize..8) {
        let spec = GridWorldSpec { width, height, ..Default::default() };
        let mdp = spec.mdp().unwrap();
        for s in 0..spec.num_states() {
            for a in 0..4 {
                let succ = mdp.successors(s, a);
                prop_assert_eq!(succ.len(), 1);
                prop_assert_eq!(succ[0].1, 1.0);
            }
        }
    }

    #[test]
    fn preference_loss_ignores_constant_reward_shifts(seed in any::<u64>(), c in -10.0f64..10.0) {
        let mut r = SimRng::seed_from_u64(seed);
        let spec = PreferenceProblemSpec::chain(4, 2, 0.9, 0.1, 3, &mut r).unwrap();
        let upper = spec.upper().unwrap();
        let pi = random_policy(&mut r, 4, 2);
        let x = DVector::from_fn(8, |_, _| r.gen_range(-1.0..1.0));
        let cmp = upper.sample_comparison(&pi, &mut r);
        prop_assert!((upper.loss(&x, &cmp) - upper.loss(&x.add_scalar(c), &cmp)).abs() <= 1e-12);
    }
}
