//! Exact tabular MDP quantities: policy transition matrices, discounted
//! visitation, entropy-regularized values and returns, Q/advantage tables and
//! closed-form gradients of the regularized return.
//!
//! Every gradient here is the true derivative of [`exact_return`], so
//! `∇_x J = E_{d,π}[∇_x r] / (1 - γ)` and `∂J/∂θ(s,a) = d(s) π(a|s) A(s,a) / (1 - γ)`.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::policy::{entropies, softmax, Logits, PolicyTable};

/// Default floor on the initial distribution.
pub const DEFAULT_RHO_MIN: f64 = 1e-6;

const STOCHASTIC_TOL: f64 = 1e-12;

/// Finite discounted MDP with a fixed transition kernel.
#[derive(Debug, Clone)]
pub struct TabularMdp {
    num_states: usize,
    num_actions: usize,
    /// Dense `P(s'|s,a)` at index `(s * |A| + a) * |S| + s'`.
    transition: Vec<f64>,
    /// Nonzero successors of every `(s, a)`, used for sampling.
    successors: Vec<Vec<(usize, f64)>>,
    gamma: f64,
    rho: DVector<f64>,
}

impl TabularMdp {
    /// Builds an MDP from a dense `|S|·|A|·|S|` transition tensor.
    pub fn new(
        num_states: usize,
        num_actions: usize,
        transition: Vec<f64>,
        gamma: f64,
        rho: Vec<f64>,
    ) -> Result<Self> {
        Self::with_rho_min(num_states, num_actions, transition, gamma, rho, DEFAULT_RHO_MIN)
    }

    pub fn with_rho_min(
        num_states: usize,
        num_actions: usize,
        transition: Vec<f64>,
        gamma: f64,
        rho: Vec<f64>,
        rho_min: f64,
    ) -> Result<Self> {
        if num_states == 0 || num_actions == 0 {
            return Err(Error::InvalidMdp("state and action spaces must be nonempty".into()));
        }
        if transition.len() != num_states * num_actions * num_states {
            return Err(Error::Dimension(format!(
                "transition tensor has {} entries, expected {}",
                transition.len(),
                num_states * num_actions * num_states
            )));
        }
        if !(gamma > 0.0 && gamma < 1.0) {
            return Err(Error::InvalidMdp(format!("discount {gamma} outside (0, 1)")));
        }
        if rho.len() != num_states {
            return Err(Error::Dimension(format!(
                "initial distribution has {} entries, expected {num_states}",
                rho.len()
            )));
        }
        if (rho.iter().sum::<f64>() - 1.0).abs() > STOCHASTIC_TOL {
            return Err(Error::InvalidMdp("initial distribution does not sum to 1".into()));
        }
        if let Some(bad) = rho.iter().position(|&p| !(p >= rho_min)) {
            return Err(Error::InvalidMdp(format!(
                "rho[{bad}] = {} is below the floor {rho_min}",
                rho[bad]
            )));
        }
        let mut successors = Vec::with_capacity(num_states * num_actions);
        for sa in 0..num_states * num_actions {
            let row = &transition[sa * num_states..(sa + 1) * num_states];
            if row.iter().any(|&p| !(p >= 0.0) || !p.is_finite()) {
                return Err(Error::InvalidMdp(format!("negative or non-finite probability in row {sa}")));
            }
            if (row.iter().sum::<f64>() - 1.0).abs() > STOCHASTIC_TOL {
                return Err(Error::InvalidMdp(format!(
                    "transition row (s={}, a={}) does not sum to 1",
                    sa / num_actions,
                    sa % num_actions
                )));
            }
            successors.push(
                row.iter()
                    .enumerate()
                    .filter(|(_, &p)| p > 0.0)
                    .map(|(s, &p)| (s, p))
                    .collect(),
            );
        }
        Ok(Self {
            num_states,
            num_actions,
            transition,
            successors,
            gamma,
            rho: DVector::from_vec(rho),
        })
    }

    pub fn num_states(&self) -> usize {
        self.num_states
    }

    pub fn num_actions(&self) -> usize {
        self.num_actions
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn rho(&self) -> &DVector<f64> {
        &self.rho
    }

    /// `P(s'|s,a)`.
    #[inline]
    pub fn prob(&self, s: usize, a: usize, next: usize) -> f64 {
        self.transition[(s * self.num_actions + a) * self.num_states + next]
    }

    /// Dense row `P(·|s,a)`.
    pub fn transition_row(&self, s: usize, a: usize) -> &[f64] {
        let start = (s * self.num_actions + a) * self.num_states;
        &self.transition[start..start + self.num_states]
    }

    /// Nonzero entries of `P(·|s,a)`.
    pub fn successors(&self, s: usize, a: usize) -> &[(usize, f64)] {
        &self.successors[s * self.num_actions + a]
    }

    /// `Σ_{s'} P(s'|s,a) v(s')`.
    pub fn expected_next(&self, s: usize, a: usize, v: &DVector<f64>) -> f64 {
        self.successors(s, a).iter().map(|&(n, p)| p * v[n]).sum()
    }

    /// Same MDP with a different initial distribution.
    pub fn with_rho(&self, rho: Vec<f64>) -> Result<Self> {
        Self::new(self.num_states, self.num_actions, self.transition.clone(), self.gamma, rho)
    }

    pub(crate) fn check_policy(&self, pi: &PolicyTable) -> Result<()> {
        if pi.nrows() != self.num_states || pi.ncols() != self.num_actions {
            return Err(Error::Dimension(format!(
                "policy is {}x{}, MDP is {}x{}",
                pi.nrows(),
                pi.ncols(),
                self.num_states,
                self.num_actions
            )));
        }
        Ok(())
    }
}

/// Reward `r_x(s, a)` parameterized by the upper-level variable.
pub trait RewardModel: Send + Sync {
    fn dim_x(&self) -> usize;

    fn evaluate(&self, x: &DVector<f64>, s: usize, a: usize) -> f64;

    fn grad_x(&self, x: &DVector<f64>, s: usize, a: usize) -> DVector<f64>;

    /// Lower and upper bounds of the reward over every admissible `x`.
    fn reward_range(&self) -> (f64, f64);

    /// Bound on `‖∇_x r_x(s,a)‖` over admissible `x` (the constant `L_r`).
    fn grad_bound(&self) -> f64;
}

/// Reward table at a fixed `x`.
pub fn reward_table(mdp: &TabularMdp, reward: &dyn RewardModel, x: &DVector<f64>) -> DMatrix<f64> {
    DMatrix::from_fn(mdp.num_states(), mdp.num_actions(), |s, a| reward.evaluate(x, s, a))
}

/// Critic estimate confined to the box `[0, bound]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ValueVector {
    pub values: DVector<f64>,
    pub box_bound: f64,
}

impl ValueVector {
    pub fn zeros(n: usize, box_bound: f64) -> Self {
        Self { values: DVector::zeros(n), box_bound }
    }

    /// Entry-wise projection onto `[0, box_bound]`.
    pub fn project(&mut self) {
        let b = self.box_bound;
        self.values.iter_mut().for_each(|v| *v = v.clamp(0.0, b));
    }

    pub fn in_box(&self) -> bool {
        self.values.iter().all(|&v| (0.0..=self.box_bound).contains(&v))
    }
}

/// Box bound for critic estimates of shifted rewards `r - r_min`:
/// `(r_max - r_min + τ_max log|A|) / (1 - γ)`.
pub fn value_box_bound(reward_range: (f64, f64), num_actions: usize, tau_max: f64, gamma: f64) -> f64 {
    let (lo, hi) = reward_range;
    (hi - lo + tau_max * (num_actions as f64).ln()) / (1.0 - gamma)
}

/// `P^π(s'|s) = Σ_a π(a|s) P(s'|s,a)`.
pub fn policy_transition(mdp: &TabularMdp, pi: &PolicyTable) -> Result<DMatrix<f64>> {
    mdp.check_policy(pi)?;
    let n = mdp.num_states();
    let mut p = DMatrix::zeros(n, n);
    for s in 0..n {
        for a in 0..mdp.num_actions() {
            let w = pi[(s, a)];
            if w == 0.0 {
                continue;
            }
            for &(next, prob) in mdp.successors(s, a) {
                p[(s, next)] += w * prob;
            }
        }
    }
    Ok(p)
}

fn solve(mut system: DMatrix<f64>, rhs: DVector<f64>, what: &str) -> Result<DVector<f64>> {
    // `system` is (I - γ M) for a stochastic M, hence nonsingular for γ < 1.
    let lu = std::mem::replace(&mut system, DMatrix::zeros(0, 0)).lu();
    lu.solve(&rhs)
        .ok_or_else(|| Error::LinearSolve(format!("singular system for {what}")))
}

/// Discounted state visitation `d_ρ^π`, the solution of `d = (1-γ)ρ + γ (P^π)ᵀ d`.
pub fn discounted_visitation(mdp: &TabularMdp, pi: &PolicyTable) -> Result<DVector<f64>> {
    let p = policy_transition(mdp, pi)?;
    let n = mdp.num_states();
    let system = DMatrix::identity(n, n) - p.transpose() * mdp.gamma();
    let mut d = solve(system, mdp.rho() * (1.0 - mdp.gamma()), "discounted visitation")?;
    // Clean roundoff so downstream samplers see a distribution.
    d.iter_mut().for_each(|v| *v = v.max(0.0));
    let total = d.sum();
    d /= total;
    Ok(d)
}

/// Regularized value `V_τ^{x,π}` solving `(I - γP^π) V = r̄_π + τ Ē_π`.
pub fn exact_value(
    mdp: &TabularMdp,
    reward: &dyn RewardModel,
    x: &DVector<f64>,
    pi: &PolicyTable,
    tau: f64,
) -> Result<DVector<f64>> {
    let r = reward_table(mdp, reward, x);
    exact_value_from_table(mdp, &r, pi, tau)
}

/// [`exact_value`] for a precomputed reward table.
pub fn exact_value_from_table(
    mdp: &TabularMdp,
    rewards: &DMatrix<f64>,
    pi: &PolicyTable,
    tau: f64,
) -> Result<DVector<f64>> {
    if tau < 0.0 {
        return Err(Error::InvalidArgument(format!("negative regularization weight {tau}")));
    }
    let p = policy_transition(mdp, pi)?;
    let n = mdp.num_states();
    let mut rhs = DVector::from_fn(n, |s, _| {
        (0..mdp.num_actions()).map(|a| pi[(s, a)] * rewards[(s, a)]).sum::<f64>()
    });
    if tau > 0.0 {
        rhs += entropies(pi) * tau;
    }
    let system = DMatrix::identity(n, n) - p * mdp.gamma();
    solve(system, rhs, "policy evaluation")
}

/// `J_τ = ρᵀ V`.
pub fn exact_return(mdp: &TabularMdp, v: &DVector<f64>) -> f64 {
    mdp.rho().dot(v)
}

/// Sup-norm Bellman residual `‖V - (r̄_π + τĒ_π + γ P^π V)‖_∞`.
pub fn bellman_residual(
    mdp: &TabularMdp,
    rewards: &DMatrix<f64>,
    pi: &PolicyTable,
    tau: f64,
    v: &DVector<f64>,
) -> f64 {
    let ent = entropies(pi);
    (0..mdp.num_states())
        .map(|s| {
            let backup: f64 = (0..mdp.num_actions())
                .map(|a| pi[(s, a)] * (rewards[(s, a)] + mdp.gamma() * mdp.expected_next(s, a, v)))
                .sum::<f64>()
                + tau * ent[s];
            (v[s] - backup).abs()
        })
        .fold(0.0, f64::max)
}

/// Regularized `Q(s,a) = r + γ Σ P(s'|s,a) V(s')` and
/// `A(s,a) = Q(s,a) - τ log π(a|s) - V(s)`.
pub fn q_and_advantage(
    mdp: &TabularMdp,
    rewards: &DMatrix<f64>,
    pi: &PolicyTable,
    tau: f64,
    v: &DVector<f64>,
) -> (DMatrix<f64>, DMatrix<f64>) {
    let (n, m) = (mdp.num_states(), mdp.num_actions());
    let q = DMatrix::from_fn(n, m, |s, a| rewards[(s, a)] + mdp.gamma() * mdp.expected_next(s, a, v));
    let adv = DMatrix::from_fn(n, m, |s, a| {
        let ent_term = if tau > 0.0 { tau * pi[(s, a)].ln() } else { 0.0 };
        q[(s, a)] - ent_term - v[s]
    });
    (q, adv)
}

/// `∇_x J_τ(x, π) = E_{s~d_ρ^π, a~π}[∇_x r_x(s,a)] / (1 - γ)`; independent of τ.
pub fn grad_x_return(
    mdp: &TabularMdp,
    reward: &dyn RewardModel,
    x: &DVector<f64>,
    pi: &PolicyTable,
) -> Result<DVector<f64>> {
    let d = discounted_visitation(mdp, pi)?;
    Ok(grad_x_return_with_visitation(mdp, reward, x, pi, &d))
}

pub(crate) fn grad_x_return_with_visitation(
    mdp: &TabularMdp,
    reward: &dyn RewardModel,
    x: &DVector<f64>,
    pi: &PolicyTable,
    d: &DVector<f64>,
) -> DVector<f64> {
    let mut g = DVector::zeros(reward.dim_x());
    for s in 0..mdp.num_states() {
        for a in 0..mdp.num_actions() {
            let w = d[s] * pi[(s, a)];
            if w != 0.0 {
                g.axpy(w, &reward.grad_x(x, s, a), 1.0);
            }
        }
    }
    g / (1.0 - mdp.gamma())
}

/// Exact quantities of one policy at one `(x, τ)`, computed once and shared.
#[derive(Debug, Clone)]
pub struct PolicyEvaluation {
    pub pi: PolicyTable,
    pub rewards: DMatrix<f64>,
    pub value: DVector<f64>,
    pub visitation: DVector<f64>,
    pub advantage: DMatrix<f64>,
    pub ret: f64,
}

impl PolicyEvaluation {
    pub fn new(mdp: &TabularMdp, rewards: DMatrix<f64>, pi: PolicyTable, tau: f64) -> Result<Self> {
        let value = exact_value_from_table(mdp, &rewards, &pi, tau)?;
        let visitation = discounted_visitation(mdp, &pi)?;
        let (_, advantage) = q_and_advantage(mdp, &rewards, &pi, tau, &value);
        let ret = exact_return(mdp, &value);
        Ok(Self { pi, rewards, value, visitation, advantage, ret })
    }

    /// `∂J_τ/∂θ(s,a) = d(s) π(a|s) A(s,a) / (1 - γ)`. An action whose
    /// probability underflows to zero contributes zero, the limit of `π log π`.
    pub fn grad_theta(&self, gamma: f64) -> DMatrix<f64> {
        let c = 1.0 / (1.0 - gamma);
        DMatrix::from_fn(self.pi.nrows(), self.pi.ncols(), |s, a| {
            let p = self.pi[(s, a)];
            if p > 0.0 { c * self.visitation[s] * p * self.advantage[(s, a)] } else { 0.0 }
        })
    }
}

/// `∇_θ J_τ(x, π_θ)` for softmax logits.
pub fn grad_theta_return(
    mdp: &TabularMdp,
    reward: &dyn RewardModel,
    x: &DVector<f64>,
    theta: &Logits,
    tau: f64,
) -> Result<DMatrix<f64>> {
    let pi = softmax(theta)?;
    let eval = PolicyEvaluation::new(mdp, reward_table(mdp, reward, x), pi, tau)?;
    Ok(eval.grad_theta(mdp.gamma()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::instances::{self, LinearReward, TableReward};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn single_state(gamma: f64) -> TabularMdp {
        TabularMdp::new(1, 2, vec![1.0, 1.0], gamma, vec![1.0]).unwrap()
    }

    /// s0 -> s1 -> s1 under action 0; action 1 stays put.
    fn chain() -> TabularMdp {
        let t = vec![
            0.0, 1.0, // s0, a0
            1.0, 0.0, // s0, a1
            0.0, 1.0, // s1, a0
            0.0, 1.0, // s1, a1
        ];
        TabularMdp::new(2, 2, t, 0.9, vec![0.5, 0.5]).unwrap()
    }

    #[test]
    fn rejects_malformed_inputs() {
        assert!(TabularMdp::new(1, 2, vec![1.0, 0.9], 0.9, vec![1.0]).is_err());
        assert!(TabularMdp::new(1, 2, vec![1.0, 1.0], 1.0, vec![1.0]).is_err());
        assert!(TabularMdp::new(2, 1, vec![1.0, 0.0, 0.0, 1.0], 0.5, vec![1.0, 0.0]).is_err());
        assert!(TabularMdp::new(2, 1, vec![1.0, 0.0], 0.5, vec![0.5, 0.5]).is_err());
        assert!(TabularMdp::new(1, 1, vec![-0.5], 0.5, vec![1.0]).is_err());
    }

    #[test]
    fn policy_transition_single_state() {
        let mdp = single_state(0.5);
        let p = policy_transition(&mdp, &PolicyTable::from_element(1, 2, 0.5)).unwrap();
        assert_eq!(p, DMatrix::from_element(1, 1, 1.0));
    }

    #[test]
    fn policy_transition_deterministic_chain() {
        let pi = PolicyTable::from_row_slice(2, 2, &[1.0, 0.0, 1.0, 0.0]);
        let p = policy_transition(&chain(), &pi).unwrap();
        assert_eq!(p, DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 0.0, 1.0]));
    }

    #[test]
    fn policy_transition_uniform_averages_action_rows() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mdp = instances::random_mdp(&mut rng, 3, 2, 0.9);
        let pi = PolicyTable::from_element(3, 2, 0.5);
        let p = policy_transition(&mdp, &pi).unwrap();
        for s in 0..3 {
            assert!((p.row(s).sum() - 1.0).abs() < 1e-12);
            for n in 0..3 {
                let want = 0.5 * (mdp.prob(s, 0, n) + mdp.prob(s, 1, n));
                assert!((p[(s, n)] - want).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn policy_dimension_mismatch() {
        let pi = PolicyTable::from_element(3, 2, 0.5);
        assert!(matches!(policy_transition(&chain(), &pi), Err(Error::Dimension(_))));
    }

    #[test]
    fn visitation_degenerate_cases() {
        let d = discounted_visitation(&single_state(0.7), &PolicyTable::from_element(1, 2, 0.5)).unwrap();
        assert!((d[0] - 1.0).abs() < 1e-15);

        // start in s0 and stay there forever under action 1; rho must clear the floor.
        let mdp = TabularMdp::with_rho_min(2, 2, chain().transition.clone(), 0.9, vec![1.0, 0.0], 0.0).unwrap();
        let stay = PolicyTable::from_row_slice(2, 2, &[0.0, 1.0, 0.0, 1.0]);
        let d = discounted_visitation(&mdp, &stay).unwrap();
        assert!((d[0] - 1.0).abs() < 1e-14 && d[1].abs() < 1e-14);
    }

    #[test]
    fn visitation_matches_truncated_series() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mdp = instances::random_mdp(&mut rng, 4, 3, 0.8);
        let pi = instances::random_policy(&mut rng, 4, 3);
        let d = discounted_visitation(&mdp, &pi).unwrap();
        let pt = policy_transition(&mdp, &pi).unwrap().transpose();
        let mut term = mdp.rho().clone();
        let mut series = DVector::zeros(4);
        let mut weight = 1.0 - mdp.gamma();
        for _ in 0..=200 {
            series += &term * weight;
            term = &pt * term;
            weight *= mdp.gamma();
        }
        assert!((d - series).amax() < 1e-8);
    }

    #[test]
    fn visitation_dominates_restart_mass() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mdp = instances::random_mdp(&mut rng, 5, 2, 0.95);
        let pi = instances::random_policy(&mut rng, 5, 2);
        let d = discounted_visitation(&mdp, &pi).unwrap();
        assert!((d.sum() - 1.0).abs() < 1e-10);
        for s in 0..5 {
            assert!(d[s] >= (1.0 - mdp.gamma()) * mdp.rho()[s] - 1e-15);
        }
    }

    #[test]
    fn zero_reward_has_zero_value() {
        let mdp = chain();
        let reward = TableReward::new(DMatrix::zeros(2, 2));
        let pi = PolicyTable::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 1.0]);
        let v = exact_value(&mdp, &reward, &DVector::zeros(0), &pi, 0.0).unwrap();
        assert_eq!(v, DVector::zeros(2));
    }

    #[test]
    fn single_state_values() {
        let mdp = single_state(0.5);
        let reward = TableReward::new(DMatrix::from_row_slice(1, 2, &[1.0, 0.0]));
        let pi = PolicyTable::from_element(1, 2, 0.5);
        let x = DVector::zeros(0);
        let v = exact_value(&mdp, &reward, &x, &pi, 0.0).unwrap();
        assert!((v[0] - 1.0).abs() < 1e-15);
        let v = exact_value(&mdp, &reward, &x, &pi, 0.5).unwrap();
        assert!((v[0] - (0.5 + 0.5 * 2f64.ln()) / 0.5).abs() < 1e-14);
        assert!(exact_value(&mdp, &reward, &x, &pi, -1.0).is_err());
    }

    #[test]
    fn exact_value_has_tiny_bellman_residual() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mdp = instances::random_mdp(&mut rng, 6, 3, 0.9);
        let r = instances::random_rewards(&mut rng, 6, 3);
        let pi = instances::random_policy(&mut rng, 6, 3);
        let v = exact_value_from_table(&mdp, &r, &pi, 0.3).unwrap();
        assert!(bellman_residual(&mdp, &r, &pi, 0.3, &v) <= 1e-10);
    }

    #[test]
    fn returns() {
        let mdp = TabularMdp::new(4, 1, DMatrix::<f64>::identity(4, 4).as_slice().to_vec(), 0.5, vec![0.25; 4]).unwrap();
        assert_eq!(exact_return(&mdp, &DVector::zeros(4)), 0.0);
        let v = DVector::from_vec(vec![1.0, 2.0, 3.0, 4.0]);
        assert!((exact_return(&mdp, &v) - 2.5).abs() < 1e-15);
        let point = TabularMdp::with_rho_min(4, 1, DMatrix::<f64>::identity(4, 4).as_slice().to_vec(), 0.5, vec![0.0, 0.0, 1.0, 0.0], 0.0).unwrap();
        assert_eq!(exact_return(&point, &v), 3.0);
    }

    #[test]
    fn advantage_single_state_arithmetic() {
        // γ must be positive, so fold a tiny γ into the check: with uniform π the
        // weighted advantage is zero and the entries are ±(r1 - r0)/2.
        let mdp = single_state(1e-9);
        let r = DMatrix::from_row_slice(1, 2, &[1.0, 0.0]);
        let pi = PolicyTable::from_element(1, 2, 0.5);
        let v = exact_value_from_table(&mdp, &r, &pi, 0.0).unwrap();
        assert!((v[0] - 0.5).abs() < 1e-8);
        let (_, adv) = q_and_advantage(&mdp, &r, &pi, 0.0, &v);
        assert!((adv[(0, 0)] - 0.5).abs() < 1e-8);
        assert!((adv[(0, 1)] + 0.5).abs() < 1e-8);
    }

    #[test]
    fn optimal_action_has_zero_advantage() {
        let mdp = chain();
        let r = DMatrix::from_row_slice(2, 2, &[0.0, 0.0, 1.0, 0.5]);
        let greedy = PolicyTable::from_row_slice(2, 2, &[1.0, 0.0, 1.0, 0.0]);
        let v = exact_value_from_table(&mdp, &r, &greedy, 0.0).unwrap();
        let (_, adv) = q_and_advantage(&mdp, &r, &greedy, 0.0, &v);
        assert!(adv[(0, 0)].abs() < 1e-12 && adv[(1, 0)].abs() < 1e-12);
        assert!(adv[(0, 1)] < 0.0 && adv[(1, 1)] < 0.0);
    }

    #[test]
    fn weighted_advantage_vanishes() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..5 {
            let mdp = instances::random_mdp(&mut rng, 5, 3, 0.9);
            let r = instances::random_rewards(&mut rng, 5, 3);
            let pi = instances::random_policy(&mut rng, 5, 3);
            let v = exact_value_from_table(&mdp, &r, &pi, 0.7).unwrap();
            let (_, adv) = q_and_advantage(&mdp, &r, &pi, 0.7, &v);
            for s in 0..5 {
                let w: f64 = (0..3).map(|a| pi[(s, a)] * adv[(s, a)]).sum();
                assert!(w.abs() < 1e-9);
            }
        }
    }

    #[test]
    fn x_independent_reward_has_zero_x_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mdp = instances::random_mdp(&mut rng, 3, 2, 0.9);
        let reward = TableReward::new(instances::random_rewards(&mut rng, 3, 2));
        let g = grad_x_return(&mdp, &reward, &DVector::zeros(0), &PolicyTable::from_element(3, 2, 0.5)).unwrap();
        assert_eq!(g.len(), 0);
        let lin = LinearReward::new(DMatrix::zeros(3, 2), vec![DVector::zeros(2); 6]);
        let g = grad_x_return(&mdp, &lin, &DVector::from_vec(vec![0.3, -0.2]), &PolicyTable::from_element(3, 2, 0.5)).unwrap();
        assert_eq!(g, DVector::zeros(2));
    }

    #[test]
    fn linear_reward_gradient_is_feature_expectation() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let mdp = instances::random_mdp(&mut rng, 4, 2, 0.9);
        let reward = instances::random_linear_reward(&mut rng, 4, 2, 3);
        let pi = instances::random_policy(&mut rng, 4, 2);
        let x = DVector::from_vec(vec![0.1, -0.4, 0.25]);
        let d = discounted_visitation(&mdp, &pi).unwrap();
        let mut want = DVector::zeros(3);
        for s in 0..4 {
            for a in 0..2 {
                want += reward.feature(s, a) * (d[s] * pi[(s, a)] / (1.0 - mdp.gamma()));
            }
        }
        let g = grad_x_return(&mdp, &reward, &x, &pi).unwrap();
        assert!((g - want).amax() < 1e-12);
    }

    #[test]
    fn symmetric_rewards_give_zero_policy_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mdp = instances::random_mdp(&mut rng, 3, 2, 0.9);
        let reward = TableReward::new(DMatrix::from_element(3, 2, 0.6));
        let g = grad_theta_return(&mdp, &reward, &DVector::zeros(0), &Logits::zeros(3, 2), 0.0).unwrap();
        assert!(g.amax() < 1e-12);
    }
}
