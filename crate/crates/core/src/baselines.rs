//! Comparison algorithms sharing the run state, schedules and trace format of
//! the proposed method: partial SGD, SPSA finite differences around inner
//! actor-critic solves, and a nested-loop variant. Fixed regularization is
//! the proposed method with a constant `τ` schedule.

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use crate::actor_critic::{actor_critic_update, draw_transition, fast_step, finish_iteration, RunState, StepOptions};
use crate::error::{Error, Result};
use crate::objective::BilevelProblem;
use crate::policy::{softmax, PolicyTable};
use crate::schedule::ScheduleSet;
use crate::SimRng;

/// Alternating descent on `f` in `x` and actor-critic ascent on `J_τ` in `θ`,
/// ignoring how `π*` depends on `x`. One sample per iteration.
pub fn partial_sgd_step(
    state: &mut RunState,
    problem: &BilevelProblem,
    schedules: &ScheduleSet,
    opts: &StepOptions,
) -> Result<()> {
    let sizes = schedules.at(state.k);
    let pi = softmax(&state.theta)?;
    let t = draw_transition(&problem.mdp, &pi, &mut state.cursor, &mut state.rng, opts)?;
    let xi = problem.upper.sample_grad(&state.x, &pi, &mut state.rng);
    state.samples += 1;
    let zero = DMatrix::zeros(0, 0);
    let (f, g) = actor_critic_update(problem, &state.x, &mut state.theta, &mut state.v_hat, &pi, t, &zero, 0.0, &sizes, opts);
    let b = state.bounds;
    state.bound_stats.record_fast(f, b.f(0.0, sizes.tau), g, b.g(sizes.tau));
    state.x.axpy(-sizes.zeta, &xi.x, 1.0);
    problem.project_x(&mut state.x);
    finish_iteration(state, opts)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FiniteDifferenceConfig {
    /// Actor-critic iterations per inner solve.
    pub inner_iters: u64,
    /// Perturbation size.
    pub fd_epsilon: f64,
}

/// Rademacher direction `Δ ∈ {±1}^d`.
pub fn rademacher(rng: &mut SimRng, d: usize) -> DVector<f64> {
    DVector::from_fn(d, |_, _| if rng.gen::<bool>() { 1.0 } else { -1.0 })
}

/// Chain-rule hypergradient estimate `∇_x f(x, π̄) + ⟨∇_π f(x, π̄), (π₊ - π₋)/(2ε)⟩ Δ`
/// from best responses `π₊ ≈ π*(x + εΔ)` and `π₋ ≈ π*(x - εΔ)`, with `π̄` their
/// average. With `Δ ∈ {±1}^d`, `Δ_i^{-1} = Δ_i`.
pub fn spsa_hypergrad(
    problem: &BilevelProblem,
    x: &DVector<f64>,
    delta: &DVector<f64>,
    eps: f64,
    pi_plus: &PolicyTable,
    pi_minus: &PolicyTable,
) -> DVector<f64> {
    let pi_bar = (pi_plus + pi_minus) * 0.5;
    let directional = problem.upper.grad_pi(x, &pi_bar).dot(&((pi_plus - pi_minus) / (2.0 * eps)));
    problem.upper.grad_x(x, &pi_bar) + delta * directional
}

/// SPSA step: two inner actor-critic solves at `x ± εΔ`, warm-started from the
/// previous solves (`θ, V̂` for the plus side, `θ^L, V̂^L` for the minus side),
/// then `x ← x - ζ_k ĝ`. Consumes `2·inner_iters` samples.
pub fn finite_difference_bilevel_step(
    state: &mut RunState,
    problem: &BilevelProblem,
    schedules: &ScheduleSet,
    opts: &StepOptions,
    cfg: &FiniteDifferenceConfig,
) -> Result<()> {
    if cfg.inner_iters == 0 || !(cfg.fd_epsilon > 0.0) {
        return Err(Error::InvalidArgument("finite difference needs inner_iters >= 1 and fd_epsilon > 0".into()));
    }
    let outer = schedules.at(state.k);
    let delta = rademacher(&mut state.rng, problem.dim_x());
    let mut x_plus = &state.x + &delta * cfg.fd_epsilon;
    let mut x_minus = &state.x - &delta * cfg.fd_epsilon;
    problem.project_x(&mut x_plus);
    problem.project_x(&mut x_minus);
    let zero = DMatrix::zeros(0, 0);
    let inner_base = state.k * cfg.inner_iters;
    for j in 0..cfg.inner_iters {
        let mut sizes = schedules.at(inner_base + j);
        sizes.tau = outer.tau;
        for plus in [true, false] {
            let (x, theta, v_hat, cursor) = if plus {
                (&x_plus, &mut state.theta, &mut state.v_hat, &mut state.cursor)
            } else {
                (&x_minus, &mut state.theta_l, &mut state.v_hat_l, &mut state.cursor_l)
            };
            let pi = softmax(theta)?;
            let t = draw_transition(&problem.mdp, &pi, cursor, &mut state.rng, opts)?;
            let (f, g) = actor_critic_update(problem, x, theta, v_hat, &pi, t, &zero, 0.0, &sizes, opts);
            let b = state.bounds;
            state.bound_stats.record_fast(f, b.f(0.0, sizes.tau), g, b.g(sizes.tau));
        }
        state.samples += 2;
    }
    let pi_plus = softmax(&state.theta)?;
    let pi_minus = softmax(&state.theta_l)?;
    // Use the realized perturbation so clamping at the boundary stays consistent.
    let span = (&x_plus - &x_minus) * 0.5;
    let eps_eff = span.amax();
    let grad = if eps_eff > 0.0 {
        spsa_hypergrad(problem, &state.x, &(span / eps_eff), eps_eff, &pi_plus, &pi_minus)
    } else {
        problem.upper.grad_x(&state.x, &pi_plus)
    };
    state.x.axpy(-outer.zeta, &grad, 1.0);
    problem.project_x(&mut state.x);
    finish_iteration(state, opts)
}

/// Nested-loop step: `inner_iters` fast iterations at frozen `x` (step sizes
/// indexed by the global inner counter, `w` and `τ` by the outer counter),
/// then one `x` update with the average of the inner `D` samples. With
/// `inner_iters = 1` this is exactly one single-loop iteration.
pub fn nested_loop_step(
    state: &mut RunState,
    problem: &BilevelProblem,
    schedules: &ScheduleSet,
    opts: &StepOptions,
    inner_iters: u64,
) -> Result<()> {
    if inner_iters == 0 {
        return Err(Error::InvalidArgument("nested loop needs inner_iters >= 1".into()));
    }
    let outer = schedules.at(state.k);
    let mut d_sum = DVector::zeros(problem.dim_x());
    for j in 0..inner_iters {
        let mut sizes = schedules.at(state.k * inner_iters + j);
        sizes.w = outer.w;
        sizes.tau = outer.tau;
        d_sum += fast_step(state, problem, &sizes, opts)?;
    }
    state.x.axpy(-outer.zeta / inner_iters as f64, &d_sum, 1.0);
    problem.project_x(&mut state.x);
    finish_iteration(state, opts)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::actor_critic::{step, Algorithm, Cadence, MetricOptions, RunSpec};
    use crate::instances;
    use crate::operators::sample_d;
    use crate::oracles::{fd_hypergrad_phi_tau, soft_value_iteration, OracleConfig};
    use rand::SeedableRng;
    use std::sync::Arc;

    fn problem(seed: u64) -> BilevelProblem {
        let mut rng = SimRng::seed_from_u64(seed);
        instances::random_bilevel(&mut rng, 3, 2, 2, 0.9, true)
    }

    #[test]
    fn partial_sgd_ignores_x_free_objective() {
        let mut rng = SimRng::seed_from_u64(0);
        let base = instances::random_bilevel(&mut rng, 3, 2, 2, 0.9, false);
        let upper = Arc::new(instances::QuadraticUpper {
            anchor: DVector::from_vec(vec![0.4, -0.2]),
            linear: DMatrix::from_element(3, 2, 0.1),
            curvature: 0.0,
            target: DMatrix::zeros(3, 2),
            radius: 2.0,
        });
        let p = BilevelProblem::new(base.mdp.clone(), base.reward.clone(), upper, base.x_bounds.clone()).unwrap();
        let mut state = RunState::new(&p, DVector::from_vec(vec![0.4, -0.2]), 1.0, 1).unwrap();
        let sched = ScheduleSet::fixed_tau(0.1, 0.1, 0.1, 0.5, 0.2);
        for _ in 0..200 {
            partial_sgd_step(&mut state, &p, &sched, &StepOptions::default()).unwrap();
        }
        assert_eq!(state.x, DVector::from_vec(vec![0.4, -0.2]));
        assert_eq!(state.samples, 200);
    }

    #[test]
    fn partial_sgd_hand_step() {
        let p = problem(2);
        let mut state = RunState::new(&p, DVector::from_vec(vec![0.5, 0.5]), 1.0, 3).unwrap();
        let sched = ScheduleSet::fixed_tau(0.1, 0.1, 0.1, 0.5, 0.2);
        let x = state.x.clone();
        let pi = softmax(&state.theta).unwrap();
        partial_sgd_step(&mut state, &p, &sched, &StepOptions::default()).unwrap();
        let expected = &x - p.upper.grad_x(&x, &pi) * 0.1;
        assert!((state.x - expected).amax() < 1e-15);
    }

    #[test]
    fn partial_sgd_update_is_d_without_penalty() {
        let p = problem(3);
        let x = DVector::from_vec(vec![0.1, -0.3]);
        let pi = softmax(&instances::random_logits(&mut SimRng::seed_from_u64(1), 3, 2)).unwrap();
        let gx = p.upper.grad_x(&x, &pi);
        let t = crate::operators::Transition { s: 0, a: 1, next: 2 };
        let t_l = crate::operators::Transition { s: 2, a: 0, next: 1 };
        let w = 0.2;
        let d = sample_d(&p, &x, t, t_l, &gx, w).unwrap();
        let penalty = (p.reward.grad_x(&x, 0, 1) - p.reward.grad_x(&x, 2, 0)) / ((1.0 - 0.9) * w);
        assert!((d - penalty - gx).amax() < 1e-12);
    }

    fn oracle_responses(p: &BilevelProblem, x: &DVector<f64>, delta: &DVector<f64>, eps: f64, tau: f64) -> (PolicyTable, PolicyTable) {
        let cfg = OracleConfig::default();
        let plus = soft_value_iteration(&p.mdp, p.reward.as_ref(), &(x + delta * eps), tau, &cfg).unwrap();
        let minus = soft_value_iteration(&p.mdp, p.reward.as_ref(), &(x - delta * eps), tau, &cfg).unwrap();
        (plus.pi, minus.pi)
    }

    fn averaged_spsa(p: &BilevelProblem, x: &DVector<f64>, eps: f64, tau: f64) -> DVector<f64> {
        let mut avg = DVector::zeros(2);
        for signs in [[1.0, 1.0], [1.0, -1.0], [-1.0, 1.0], [-1.0, -1.0]] {
            let delta = DVector::from_vec(signs.to_vec());
            let (pp, pm) = oracle_responses(p, x, &delta, eps, tau);
            avg += spsa_hypergrad(p, x, &delta, eps, &pp, &pm) / 4.0;
        }
        avg
    }

    #[test]
    fn spsa_with_exact_inner_matches_fd_hypergrad() {
        let p = problem(5);
        let x = DVector::from_vec(vec![0.2, -0.4]);
        let tau = 0.3;
        let truth = fd_hypergrad_phi_tau(&p, &x, tau, &OracleConfig::default()).unwrap();
        let est = averaged_spsa(&p, &x, 1e-3, tau);
        let rel = crate::fd::relative_error(est.as_slice(), truth.as_slice(), 1e-12);
        assert!(rel < 1e-2, "relative error {rel}");

        // Richardson trend: halving ε shrinks the error roughly fourfold.
        let e1 = (averaged_spsa(&p, &x, 0.2, tau) - &truth).norm();
        let e2 = (averaged_spsa(&p, &x, 0.1, tau) - &truth).norm();
        assert!(e2 < 0.5 * e1, "{e1} -> {e2}");
    }

    #[test]
    fn scalar_spsa_is_two_point_difference() {
        let mut rng = SimRng::seed_from_u64(7);
        let p = instances::random_bilevel(&mut rng, 3, 2, 1, 0.9, true);
        let x = DVector::from_vec(vec![0.3]);
        let (eps, tau) = (1e-2, 0.4);
        let delta = DVector::from_vec(vec![-1.0]);
        let (pp, pm) = oracle_responses(&p, &x, &delta, eps, tau);
        let g = spsa_hypergrad(&p, &x, &delta, eps, &pp, &pm);
        let pi_bar = (&pp + &pm) * 0.5;
        let manual = p.upper.grad_x(&x, &pi_bar)[0] - p.upper.grad_pi(&x, &pi_bar).dot(&(&pp - &pm)) / (2.0 * eps);
        assert!((g[0] - manual).abs() < 1e-14);
    }

    #[test]
    fn finite_difference_sample_accounting() {
        let p = problem(6);
        let mut state = RunState::new(&p, DVector::zeros(2), 1.0, 2).unwrap();
        let cfg = FiniteDifferenceConfig { inner_iters: 25, fd_epsilon: 0.05 };
        let sched = ScheduleSet::decaying(0.01, 0.1, 0.1, 0.5, 0.5);
        for _ in 0..3 {
            finite_difference_bilevel_step(&mut state, &p, &sched, &StepOptions::default(), &cfg).unwrap();
        }
        assert_eq!(state.samples, 150);
        assert_eq!(state.k, 3);
    }

    #[test]
    fn nested_with_one_inner_iteration_is_single_loop() {
        let p = problem(8);
        let sched = ScheduleSet::decaying(0.05, 0.1, 0.1, 0.5, 0.5);
        let mut a = RunState::new(&p, DVector::from_vec(vec![0.1, 0.2]), 1.0, 4).unwrap();
        let mut b = a.clone();
        for _ in 0..300 {
            step(&mut a, &p, &sched, &StepOptions::default()).unwrap();
            nested_loop_step(&mut b, &p, &sched, &StepOptions::default(), 1).unwrap();
        }
        assert_eq!(a.x, b.x);
        assert_eq!(a.theta, b.theta);
        assert_eq!(a.v_hat_l, b.v_hat_l);
    }

    #[test]
    fn nested_inner_policies_approach_best_responses() {
        let p = problem(9);
        let (w, tau) = (0.5, 0.5);
        let sched = ScheduleSet {
            zeta0: 0.0,
            alpha0: 0.01,
            beta0: 1.0,
            c_beta: 0.55,
            c_w: 0.0,
            ..ScheduleSet::fixed_tau(0.0, 0.01, 1.0, w, tau)
        };
        let mut state = RunState::new(&p, DVector::from_vec(vec![0.2, 0.1]), 1.0, 10).unwrap();
        let opts = StepOptions { mode: crate::actor_critic::SamplingMode::Iid, ..Default::default() };
        nested_loop_step(&mut state, &p, &sched, &opts, 1_000_000).unwrap();
        let cfg = OracleConfig::default();
        let hg = crate::oracles::penalty_hypergrad(&p, &state.x, w, tau, &cfg).unwrap();
        let pi = softmax(&state.theta).unwrap();
        let pi_l = softmax(&state.theta_l).unwrap();
        let (e, e_l) = ((pi - &hg.lower.soft.pi).amax(), (pi_l - &hg.lagrangian.eval.pi).amax());
        assert!(e < 5e-3 && e_l < 5e-3, "{e} {e_l}");
    }

    #[test]
    fn baselines_share_trace_format() {
        let p = problem(11);
        for algorithm in [
            Algorithm::PartialSgd,
            Algorithm::NestedLoop { inner_iters: 10 },
            Algorithm::FiniteDifference { inner_iters: 10, fd_epsilon: 0.05 },
        ] {
            let spec = RunSpec {
                algorithm,
                schedules: ScheduleSet::decaying(0.01, 0.1, 0.1, 0.5, 0.5),
                strict: false,
                step: StepOptions::default(),
                iterations: 1000,
                sample_budget: Some(400),
                cadence: Cadence::Every(5),
                metrics: MetricOptions::default(),
                oracle: OracleConfig::default(),
                seed: 1,
                x0: DVector::zeros(2),
            };
            let out = crate::actor_critic::run(&p, &spec).unwrap();
            assert!(out.failure.is_none());
            let last = out.records.last().unwrap();
            assert!(last.samples >= 400 && last.phi.is_finite());
            assert_eq!(out.state.bound_stats.violations(), 0);
        }
    }
}
