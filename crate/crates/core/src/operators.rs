//! Stochastic update operators `D`, `F`, `G`, their exact expectations by
//! enumeration, and the bounds on their samples.
//!
//! Orientation: the policy update ascends `F`, so `F̄_{0,τ} = ∇_θ J_τ` and
//! `F̄_{w,τ} = -∇_θ(w·L_{w,τ})`. The upper variable descends `D`. Critic values
//! live in the shifted frame `V' = V - r_min/(1-γ)`, and sampled rewards are
//! shifted to match; with a `-V'(s)` baseline the shift cancels.
//!
//! Policy-gradient samples carry the factor `1/(1-γ)`, so their expectation is
//! the true derivative of the return.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::mdp::{discounted_visitation, grad_x_return, TabularMdp};
use crate::objective::BilevelProblem;
use crate::policy::{entropy, softmax, softmax_pullback, Logits, PolicyTable};

/// Largest `|S|·|A|·|S|` the enumerated expectations will walk.
pub const ENUMERATION_LIMIT: usize = 1 << 22;

/// One environment transition `(s, a, s')`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Transition {
    pub s: usize,
    pub a: usize,
    pub next: usize,
}

/// Variants of the policy operator.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct OperatorOptions {
    /// Subtract `V̂(s)` inside the policy-gradient TD term. Off reproduces the
    /// plain `r + γV̂(s')` critic signal; expectations are unchanged.
    pub td_baseline: bool,
    /// Put `τE(π,s)` inside the score-function term instead of differentiating
    /// the entropy directly. Biased when `τ > 0`.
    pub literal_entropy_bonus: bool,
}

impl Default for OperatorOptions {
    fn default() -> Self {
        Self { td_baseline: true, literal_entropy_bonus: false }
    }
}

fn horizon(mdp: &TabularMdp) -> f64 {
    1.0 / (1.0 - mdp.gamma())
}

/// `D = ∇̃_x f(x, π^L, ξ) + (∇_x r_x(s,a) - ∇_x r_x(s̄,ā)) / ((1-γ) w)`, with
/// `(s,a)` drawn under `π_θ` and `(s̄,ā)` under `π_{θ^L}`.
pub fn sample_d(
    problem: &BilevelProblem,
    x: &DVector<f64>,
    t: Transition,
    t_l: Transition,
    upper_grad_x: &DVector<f64>,
    w: f64,
) -> Result<DVector<f64>> {
    if !(w > 0.0) {
        return Err(Error::InvalidArgument(format!("D needs w > 0, got {w}")));
    }
    let scale = horizon(&problem.mdp) / w;
    let mut d = upper_grad_x.clone();
    d.axpy(scale, &problem.reward.grad_x(x, t.s, t.a), 1.0);
    d.axpy(-scale, &problem.reward.grad_x(x, t_l.s, t_l.a), 1.0);
    Ok(d)
}

/// Score-function weight multiplying `∇_θ log π(a|s)` in [`sample_f`].
fn policy_td(
    problem: &BilevelProblem,
    x: &DVector<f64>,
    pi: &PolicyTable,
    v_hat: &DVector<f64>,
    t: Transition,
    tau: f64,
    opts: OperatorOptions,
) -> f64 {
    let gamma = problem.mdp.gamma();
    let mut delta = problem.shifted_reward(x, t.s, t.a) + gamma * v_hat[t.next];
    if opts.td_baseline {
        delta -= v_hat[t.s];
    }
    if opts.literal_entropy_bonus {
        delta += tau * entropy(pi, t.s);
    }
    delta
}

/// Adds `c·[δ ∇_θ log π(a|s) + τ ∇_θ E(π,s)]` to row `s` of `out`.
fn add_policy_term(
    out: &mut DMatrix<f64>,
    pi: &PolicyTable,
    s: usize,
    a: usize,
    delta: f64,
    tau: f64,
    c: f64,
    opts: OperatorOptions,
) {
    let ent = if opts.literal_entropy_bonus || tau == 0.0 { None } else { Some(entropy(pi, s)) };
    for b in 0..pi.ncols() {
        let p = pi[(s, b)];
        let mut v = delta * (if a == b { 1.0 } else { 0.0 } - p);
        if let Some(e) = ent {
            if p > 0.0 {
                v -= tau * p * (p.ln() + e);
            }
        }
        out[(s, b)] += c * v;
    }
}

/// `F_{w,τ} = c[(r' + γV̂(s') - V̂(s)) ∇_θ log π_θ(a|s) + τ ∇_θ E(π_θ,s)] - w ∇̃_θ f(x, π_θ, ξ)`
/// with `c = 1/(1-γ)`. `upper_grad_pi` is the sampled `∇̃_π f`; it is pulled
/// back through the softmax and ignored when `w = 0`.
#[allow(clippy::too_many_arguments)]
pub fn sample_f(
    problem: &BilevelProblem,
    x: &DVector<f64>,
    theta: &Logits,
    v_hat: &DVector<f64>,
    t: Transition,
    upper_grad_pi: &DMatrix<f64>,
    w: f64,
    tau: f64,
    opts: OperatorOptions,
) -> Result<DMatrix<f64>> {
    let pi = softmax(theta)?;
    Ok(sample_f_with_policy(problem, x, &pi, v_hat, t, upper_grad_pi, w, tau, opts))
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn sample_f_with_policy(
    problem: &BilevelProblem,
    x: &DVector<f64>,
    pi: &PolicyTable,
    v_hat: &DVector<f64>,
    t: Transition,
    upper_grad_pi: &DMatrix<f64>,
    w: f64,
    tau: f64,
    opts: OperatorOptions,
) -> DMatrix<f64> {
    let mut out = if w != 0.0 {
        softmax_pullback(pi, upper_grad_pi) * -w
    } else {
        DMatrix::zeros(pi.nrows(), pi.ncols())
    };
    let delta = policy_td(problem, x, pi, v_hat, t, tau, opts);
    add_policy_term(&mut out, pi, t.s, t.a, delta, tau, horizon(&problem.mdp), opts);
    out
}

/// TD error `r' + τE(π,s) + γV̂(s') - V̂(s)`, the only nonzero entry of `G`.
pub fn td_error(
    problem: &BilevelProblem,
    x: &DVector<f64>,
    pi: &PolicyTable,
    v_hat: &DVector<f64>,
    t: Transition,
    tau: f64,
) -> f64 {
    problem.shifted_reward(x, t.s, t.a) + tau * entropy(pi, t.s) + problem.mdp.gamma() * v_hat[t.next]
        - v_hat[t.s]
}

/// `G = e_s (r' + τE(π_θ,s) + γV̂(s') - V̂(s))`.
pub fn sample_g(
    problem: &BilevelProblem,
    x: &DVector<f64>,
    theta: &Logits,
    v_hat: &DVector<f64>,
    t: Transition,
    tau: f64,
) -> Result<DVector<f64>> {
    let pi = softmax(theta)?;
    let mut g = DVector::zeros(problem.mdp.num_states());
    g[t.s] = td_error(problem, x, &pi, v_hat, t, tau);
    Ok(g)
}

/// `D̄ = ∇_x f(x, π^L) + (∇_x J(x, π) - ∇_x J(x, π^L)) / w`.
pub fn expected_d(
    problem: &BilevelProblem,
    x: &DVector<f64>,
    pi: &PolicyTable,
    pi_l: &PolicyTable,
    w: f64,
) -> Result<DVector<f64>> {
    if !(w > 0.0) {
        return Err(Error::InvalidArgument(format!("D needs w > 0, got {w}")));
    }
    let reward = problem.reward.as_ref();
    let gj = grad_x_return(&problem.mdp, reward, x, pi)?;
    let gj_l = grad_x_return(&problem.mdp, reward, x, pi_l)?;
    Ok(problem.upper.grad_x(x, pi_l) + (gj - gj_l) / w)
}

fn guard(mdp: &TabularMdp) -> Result<()> {
    let size = mdp.num_states() * mdp.num_actions() * mdp.num_states();
    if size > ENUMERATION_LIMIT {
        return Err(Error::EnumerationTooLarge { size, limit: ENUMERATION_LIMIT });
    }
    Ok(())
}

/// Calls `visit(weight, transition)` for every `(s, a, s')` with positive
/// probability under `s ~ d_ρ^π, a ~ π, s' ~ P`.
fn enumerate(mdp: &TabularMdp, pi: &PolicyTable, mut visit: impl FnMut(f64, Transition)) -> Result<()> {
    guard(mdp)?;
    let d = discounted_visitation(mdp, pi)?;
    for s in 0..mdp.num_states() {
        for a in 0..mdp.num_actions() {
            let w = d[s] * pi[(s, a)];
            if w == 0.0 {
                continue;
            }
            for &(next, p) in mdp.successors(s, a) {
                visit(w * p, Transition { s, a, next });
            }
        }
    }
    Ok(())
}

/// `F̄_{w,τ}(x, θ, V)` by enumeration, with the exact `∇_π f` in place of `ξ`.
pub fn expected_f(
    problem: &BilevelProblem,
    x: &DVector<f64>,
    theta: &Logits,
    v_hat: &DVector<f64>,
    w: f64,
    tau: f64,
    opts: OperatorOptions,
) -> Result<DMatrix<f64>> {
    let pi = softmax(theta)?;
    let c = horizon(&problem.mdp);
    let mut out = if w != 0.0 {
        softmax_pullback(&pi, &problem.upper.grad_pi(x, &pi)) * -w
    } else {
        DMatrix::zeros(pi.nrows(), pi.ncols())
    };
    enumerate(&problem.mdp, &pi, |weight, t| {
        let delta = policy_td(problem, x, &pi, v_hat, t, tau, opts);
        add_policy_term(&mut out, &pi, t.s, t.a, delta, tau, c * weight, opts);
    })?;
    Ok(out)
}

/// `Ḡ_τ(x, θ, V)` by enumeration.
pub fn expected_g(
    problem: &BilevelProblem,
    x: &DVector<f64>,
    theta: &Logits,
    v_hat: &DVector<f64>,
    tau: f64,
) -> Result<DVector<f64>> {
    let pi = softmax(theta)?;
    let mut out = DVector::zeros(problem.mdp.num_states());
    enumerate(&problem.mdp, &pi, |weight, t| {
        out[t.s] += weight * td_error(problem, x, &pi, v_hat, t, tau);
    })?;
    Ok(out)
}

/// Bounds on operator samples for a given problem, valid for any
/// `τ ≤ tau_max` and any critic inside `[0, B_V]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OperatorBounds {
    /// `r_max - r_min`.
    pub reward_span: f64,
    pub value_box: f64,
    pub log_actions: f64,
    pub horizon: f64,
    pub gamma: f64,
    /// `L_r`.
    pub reward_lipschitz: f64,
    /// Bound on `‖∇̃_x f‖`.
    pub upper_grad_x: f64,
    /// Bound on `‖∇̃_π f‖`, which also bounds `‖∇̃_θ f‖`.
    pub upper_grad_pi: f64,
}

impl OperatorBounds {
    pub fn new(problem: &BilevelProblem, tau_max: f64) -> Self {
        let (lo, hi) = problem.reward.reward_range();
        Self {
            reward_span: hi - lo,
            value_box: problem.value_box(tau_max),
            log_actions: (problem.mdp.num_actions() as f64).ln(),
            horizon: horizon(&problem.mdp),
            gamma: problem.mdp.gamma(),
            reward_lipschitz: problem.reward.grad_bound(),
            upper_grad_x: problem.upper.grad_x_bound(),
            upper_grad_pi: problem.upper.grad_pi_bound(),
        }
    }

    /// `‖D‖ ≤ L_fx + 2 L_r / ((1-γ) w)`.
    pub fn d(&self, w: f64) -> f64 {
        self.upper_grad_x + 2.0 * self.horizon * self.reward_lipschitz / w
    }

    /// `‖F‖ ≤ (2(R + (1+γ)B_V) + 2τ log|A|)/(1-γ) + w L_fπ`.
    pub fn f(&self, w: f64, tau: f64) -> f64 {
        self.horizon * (2.0 * (self.reward_span + (1.0 + self.gamma) * self.value_box) + 2.0 * tau * self.log_actions)
            + w * self.upper_grad_pi
    }

    /// `‖G‖ ≤ R + τ log|A| + (1+γ)B_V`.
    pub fn g(&self, tau: f64) -> f64 {
        self.reward_span + tau * self.log_actions + (1.0 + self.gamma) * self.value_box
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::instances;
    use crate::mdp::{exact_value, grad_theta_return};
    use crate::oracles::{penalty_hypergrad, OracleConfig};
    use crate::policy::log_policy_grad;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn setup(seed: u64) -> (BilevelProblem, DVector<f64>, Logits, ChaCha8Rng) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let problem = instances::random_bilevel(&mut rng, 4, 3, 2, 0.9, true);
        let x = DVector::from_fn(2, |_, _| rng.gen_range(-1.0..1.0));
        let theta = instances::random_logits(&mut rng, 4, 3);
        (problem, x, theta, rng)
    }

    #[test]
    fn d_cancels_on_matching_pairs() {
        let (problem, x, _, _) = setup(1);
        let t = Transition { s: 1, a: 2, next: 0 };
        let d = sample_d(&problem, &x, t, t, &DVector::zeros(2), 0.3).unwrap();
        assert_eq!(d, DVector::zeros(2));
        assert!(sample_d(&problem, &x, t, t, &DVector::zeros(2), 0.0).is_err());
    }

    #[test]
    fn f_single_term_form() {
        let (problem, x, theta, _) = setup(2);
        let t = Transition { s: 0, a: 1, next: 3 };
        let pi = softmax(&theta).unwrap();
        let zeros = DVector::zeros(4);
        let f = sample_f(&problem, &x, &theta, &zeros, t, &DMatrix::zeros(4, 3), 0.0, 0.0, OperatorOptions::default())
            .unwrap();
        let r = problem.shifted_reward(&x, 0, 1);
        let expected = log_policy_grad(&pi, 0, 1).unwrap() * (r / (1.0 - 0.9));
        assert!((f - expected).amax() < 1e-12);
    }

    #[test]
    fn g_is_one_hot() {
        let (problem, x, theta, _) = setup(3);
        let v = DVector::from_element(4, 2.0);
        let t = Transition { s: 2, a: 0, next: 1 };
        let g = sample_g(&problem, &x, &theta, &v, t, 0.0).unwrap();
        let r = problem.shifted_reward(&x, 2, 0);
        assert!((g[2] - (r + 0.9 * 2.0 - 2.0)).abs() < 1e-12);
        assert_eq!(g.iter().filter(|v| **v != 0.0).count(), 1);
    }

    #[test]
    fn expected_f_is_policy_gradient() {
        for seed in 0..5 {
            let (problem, x, theta, _) = setup(10 + seed);
            let tau = 0.3;
            let pi = softmax(&theta).unwrap();
            let v = exact_value(&problem.mdp, problem.reward.as_ref(), &x, &pi, tau).unwrap();
            let v = problem.to_critic_frame(&v);
            let truth = grad_theta_return(&problem.mdp, problem.reward.as_ref(), &x, &theta, tau).unwrap();
            for td_baseline in [true, false] {
                let opts = OperatorOptions { td_baseline, literal_entropy_bonus: false };
                let f = expected_f(&problem, &x, &theta, &v, 0.0, tau, opts).unwrap();
                assert!((f - &truth).amax() < 1e-10);
            }
        }
    }

    #[test]
    fn expected_f_with_penalty_is_negative_lagrangian_gradient() {
        let (problem, x, theta, _) = setup(4);
        let (w, tau) = (0.4, 0.2);
        let pi = softmax(&theta).unwrap();
        let v = problem.to_critic_frame(&exact_value(&problem.mdp, problem.reward.as_ref(), &x, &pi, tau).unwrap());
        let f = expected_f(&problem, &x, &theta, &v, w, tau, OperatorOptions::default()).unwrap();
        let rewards = crate::mdp::reward_table(&problem.mdp, problem.reward.as_ref(), &x);
        let (_, grad, _) = crate::oracles::scaled_lagrangian(&problem, &x, &rewards, &theta, w, tau).unwrap();
        assert!((f + grad).amax() < 1e-10);
    }

    #[test]
    fn literal_entropy_bonus_is_biased() {
        let (problem, x, theta, _) = setup(5);
        let tau = 0.5;
        let pi = softmax(&theta).unwrap();
        let v = problem.to_critic_frame(&exact_value(&problem.mdp, problem.reward.as_ref(), &x, &pi, tau).unwrap());
        let opts = OperatorOptions { td_baseline: true, literal_entropy_bonus: true };
        let f = expected_f(&problem, &x, &theta, &v, 0.0, tau, opts).unwrap();
        let truth = grad_theta_return(&problem.mdp, problem.reward.as_ref(), &x, &theta, tau).unwrap();
        assert!((f - truth).amax() > 1e-6);
    }

    #[test]
    fn expected_g_vanishes_at_exact_value() {
        let (problem, x, theta, _) = setup(6);
        let tau = 0.7;
        let pi = softmax(&theta).unwrap();
        let v = problem.to_critic_frame(&exact_value(&problem.mdp, problem.reward.as_ref(), &x, &pi, tau).unwrap());
        let g = expected_g(&problem, &x, &theta, &v, tau).unwrap();
        assert!(g.amax() < 1e-10);
    }

    #[test]
    fn expected_d_matches_penalty_hypergrad() {
        let (problem, x, _, _) = setup(7);
        let (w, tau) = (0.3, 0.4);
        let hg = penalty_hypergrad(&problem, &x, w, tau, &OracleConfig::default()).unwrap();
        let d = expected_d(&problem, &x, &hg.lower.soft.pi, &hg.lagrangian.eval.pi, w).unwrap();
        assert!((d - hg.grad).amax() < 1e-10);
    }

    #[test]
    fn samples_respect_bounds() {
        let (problem, x, _, mut rng) = setup(8);
        let tau_max = 1.0;
        let bounds = OperatorBounds::new(&problem, tau_max);
        let n = problem.mdp.num_states();
        for _ in 0..10_000 {
            let theta = instances::random_logits(&mut rng, n, 3) * 3.0;
            let v = DVector::from_fn(n, |_, _| rng.gen_range(0.0..=bounds.value_box));
            let pi = softmax(&theta).unwrap();
            let t = Transition { s: rng.gen_range(0..n), a: rng.gen_range(0..3), next: rng.gen_range(0..n) };
            let t_l = Transition { s: rng.gen_range(0..n), a: rng.gen_range(0..3), next: rng.gen_range(0..n) };
            let (w, tau) = (rng.gen_range(0.01..1.0), rng.gen_range(0.0..=tau_max));
            let opts = OperatorOptions { td_baseline: rng.gen(), literal_entropy_bonus: rng.gen() };
            let gpi = problem.upper.grad_pi(&x, &pi);
            let f = sample_f(&problem, &x, &theta, &v, t, &gpi, w, tau, opts).unwrap();
            assert!(f.norm() <= bounds.f(w, tau));
            let g = sample_g(&problem, &x, &theta, &v, t, tau).unwrap();
            assert!(g.norm() <= bounds.g(tau));
            let d = sample_d(&problem, &x, t, t_l, &problem.upper.grad_x(&x, &pi), w).unwrap();
            assert!(d.norm() <= bounds.d(w));
        }
    }

    #[test]
    fn enumeration_guard() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mdp = instances::random_deterministic_mdp(&mut rng, 2100, 1, 0.9);
        let pi = DMatrix::from_element(2100, 1, 1.0);
        let err = enumerate(&mdp, &pi, |_, _| {}).unwrap_err();
        assert!(matches!(err, Error::EnumerationTooLarge { .. }));
    }
}
