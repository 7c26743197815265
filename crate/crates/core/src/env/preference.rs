//! Tabular Bradley-Terry preference problem: `x` parameterizes a reward table,
//! the lower level is the entropy-regularized MDP on that reward, and the upper
//! level fits `x` to pairwise comparisons of trajectories drawn from the
//! lower-level policy and labelled by a hidden scorer.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use crate::actor_critic::sample_index;
use crate::error::{Error, Result};
use crate::mdp::{RewardModel, TabularMdp};
use crate::objective::{BilevelProblem, UpperGrad, UpperObjective};
use crate::operators::ENUMERATION_LIMIT;
use crate::policy::PolicyTable;
use crate::SimRng;

/// `P(p0 > p1) = exp(r0) / (exp(r0) + exp(r1))`, evaluated stably.
pub fn bradley_terry_prob(score0: f64, score1: f64) -> f64 {
    sigmoid(score0 - score1)
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^z)`.
fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

/// Negative log-likelihood of label `y` under `P = σ(z)`.
fn nll(z: f64, y: bool) -> f64 {
    if y {
        softplus(-z)
    } else {
        softplus(z)
    }
}

/// `r_x(s, a) = x[s·|A| + a]` on the box `[-bound, bound]^{|S||A|}`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TableParamReward {
    pub num_states: usize,
    pub num_actions: usize,
    pub bound: f64,
}

impl RewardModel for TableParamReward {
    fn dim_x(&self) -> usize {
        self.num_states * self.num_actions
    }

    fn evaluate(&self, x: &DVector<f64>, s: usize, a: usize) -> f64 {
        x[s * self.num_actions + a]
    }

    fn grad_x(&self, _x: &DVector<f64>, s: usize, a: usize) -> DVector<f64> {
        let mut g = DVector::zeros(self.dim_x());
        g[s * self.num_actions + a] = 1.0;
        g
    }

    fn reward_range(&self) -> (f64, f64) {
        (-self.bound, self.bound)
    }

    fn grad_bound(&self) -> f64 {
        1.0
    }
}

/// Base chain, hidden scorer and comparison protocol.
#[derive(Debug, Clone)]
pub struct PreferenceProblemSpec {
    pub base_mdp: TabularMdp,
    /// Hidden `|S|×|A|` scorer that labels comparisons.
    pub true_reward: DMatrix<f64>,
    /// Comparisons averaged in one stochastic gradient.
    pub pairs_per_eval: usize,
    /// State-action pairs per response.
    pub trajectory_len: usize,
    /// Half-width of the box for `x`.
    pub reward_bound: f64,
}

impl PreferenceProblemSpec {
    /// Chain of `num_states` states where action `a` moves by a fixed offset
    /// (clamped at the ends) with probability `1 - slip` and stays otherwise.
    /// Offsets are `-1, +1` for two actions and `-1, 0, +1` for three.
    pub fn chain(
        num_states: usize,
        num_actions: usize,
        gamma: f64,
        slip: f64,
        trajectory_len: usize,
        rng: &mut SimRng,
    ) -> Result<Self> {
        if num_states == 0 || num_actions == 0 {
            return Err(Error::InvalidArgument("chain needs states and actions".into()));
        }
        if !(0.0..=1.0).contains(&slip) {
            return Err(Error::InvalidArgument(format!("slip = {slip} must lie in [0, 1]")));
        }
        let offsets = chain_offsets(num_actions);
        let n = num_states;
        let mut t = vec![0.0; n * num_actions * n];
        for s in 0..n {
            for (a, off) in offsets.iter().enumerate() {
                let target = (s as i64 + off).clamp(0, n as i64 - 1) as usize;
                let row = (s * num_actions + a) * n;
                t[row + target] += 1.0 - slip;
                t[row + s] += slip;
            }
        }
        let mdp = TabularMdp::new(n, num_actions, t, gamma, vec![1.0 / n as f64; n])?;
        let true_reward = DMatrix::from_fn(n, num_actions, |_, _| rng.gen::<f64>());
        Ok(Self { base_mdp: mdp, true_reward, pairs_per_eval: 8, trajectory_len, reward_bound: 2.0 })
    }

    pub fn validate(&self) -> Result<()> {
        let (n, m) = (self.base_mdp.num_states(), self.base_mdp.num_actions());
        if self.true_reward.shape() != (n, m) {
            return Err(Error::Dimension(format!(
                "true reward is {:?}, MDP is {n}x{m}",
                self.true_reward.shape()
            )));
        }
        if self.trajectory_len == 0 {
            return Err(Error::InvalidArgument("trajectory_len must be positive".into()));
        }
        if self.pairs_per_eval == 0 {
            return Err(Error::InvalidArgument("pairs_per_eval must be positive".into()));
        }
        if !(self.reward_bound > 0.0 && self.reward_bound.is_finite()) {
            return Err(Error::InvalidArgument("reward_bound must be positive".into()));
        }
        if self.true_reward.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("true reward".into()));
        }
        let trajectories = u32::try_from(self.trajectory_len - 1)
            .ok()
            .and_then(|e| (n * m).checked_pow(e))
            .and_then(|c| c.checked_mul(n))
            .unwrap_or(usize::MAX);
        let pairs = trajectories.saturating_mul(trajectories);
        if pairs > ENUMERATION_LIMIT {
            return Err(Error::EnumerationTooLarge { size: pairs, limit: ENUMERATION_LIMIT });
        }
        Ok(())
    }

    pub fn reward(&self) -> TableParamReward {
        TableParamReward {
            num_states: self.base_mdp.num_states(),
            num_actions: self.base_mdp.num_actions(),
            bound: self.reward_bound,
        }
    }

    pub fn upper(&self) -> Result<PreferenceUpper> {
        self.validate()?;
        Ok(PreferenceUpper {
            mdp: self.base_mdp.clone(),
            true_reward: self.true_reward.clone(),
            pairs_per_eval: self.pairs_per_eval,
            trajectory_len: self.trajectory_len,
            reward_bound: self.reward_bound,
        })
    }

    pub fn build(&self) -> Result<BilevelProblem> {
        let upper = self.upper()?;
        let reward = self.reward();
        let d = reward.dim_x();
        BilevelProblem::new(
            self.base_mdp.clone(),
            Arc::new(reward),
            Arc::new(upper),
            Some(vec![(-self.reward_bound, self.reward_bound); d]),
        )
    }

    /// Uninformative initial reward `x = 0`.
    pub fn default_x0(&self) -> DVector<f64> {
        DVector::zeros(self.base_mdp.num_states() * self.base_mdp.num_actions())
    }
}

fn chain_offsets(num_actions: usize) -> Vec<i64> {
    let half = (num_actions / 2) as i64;
    if num_actions % 2 == 1 {
        (-half..=half).collect()
    } else {
        (-half..0).chain(1..=half).collect()
    }
}

/// One response: the visited state-action pairs.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub steps: Vec<(usize, usize)>,
}

impl Trajectory {
    pub fn score(&self, table: impl Fn(usize, usize) -> f64) -> f64 {
        self.steps.iter().map(|&(s, a)| table(s, a)).sum()
    }
}

/// Sampled comparison `ξ = (p0, p1, y)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Comparison {
    pub p0: Trajectory,
    pub p1: Trajectory,
    /// `true` when the hidden scorer ranks `p0` strictly above `p1`.
    pub y: bool,
}

/// Expected Bradley-Terry negative log-likelihood over comparisons of
/// independent responses drawn from `π` (started from `ρ`, `trajectory_len`
/// steps).
#[derive(Debug, Clone)]
pub struct PreferenceUpper {
    pub mdp: TabularMdp,
    pub true_reward: DMatrix<f64>,
    pub pairs_per_eval: usize,
    pub trajectory_len: usize,
    pub reward_bound: f64,
}

impl PreferenceUpper {
    fn x_score(&self, x: &DVector<f64>, p: &Trajectory) -> f64 {
        let m = self.mdp.num_actions();
        p.score(|s, a| x[s * m + a])
    }

    fn label(&self, p0: &Trajectory, p1: &Trajectory) -> bool {
        p0.score(|s, a| self.true_reward[(s, a)]) > p1.score(|s, a| self.true_reward[(s, a)])
    }

    /// Loss of one labelled comparison.
    pub fn loss(&self, x: &DVector<f64>, c: &Comparison) -> f64 {
        nll(self.x_score(x, &c.p0) - self.x_score(x, &c.p1), c.y)
    }

    pub fn rollout(&self, pi: &PolicyTable, rng: &mut SimRng) -> Trajectory {
        let mut s = sample_index(self.mdp.rho().iter().copied(), rng);
        let mut steps = Vec::with_capacity(self.trajectory_len);
        for t in 0..self.trajectory_len {
            let a = sample_index(pi.row(s).iter().copied(), rng);
            steps.push((s, a));
            if t + 1 < self.trajectory_len {
                let succ = self.mdp.successors(s, a);
                s = succ[sample_index(succ.iter().map(|&(_, p)| p), rng)].0;
            }
        }
        Trajectory { steps }
    }

    pub fn sample_comparison(&self, pi: &PolicyTable, rng: &mut SimRng) -> Comparison {
        let p0 = self.rollout(pi, rng);
        let p1 = self.rollout(pi, rng);
        let y = self.label(&p0, &p1);
        Comparison { p0, p1, y }
    }

    /// Every response with positive probability under `π`, with that probability.
    /// Probabilities are products of the entries of `π`, so the result is a
    /// polynomial in the table even off the simplex.
    pub fn enumerate(&self, pi: &PolicyTable) -> Vec<(f64, Trajectory)> {
        let mut frontier: Vec<(f64, Vec<(usize, usize)>, usize)> = self
            .mdp
            .rho()
            .iter()
            .enumerate()
            .filter(|(_, &p)| p > 0.0)
            .map(|(s, &p)| (p, Vec::new(), s))
            .collect();
        for t in 0..self.trajectory_len {
            let mut next = Vec::new();
            for (p, steps, s) in frontier {
                for a in 0..self.mdp.num_actions() {
                    let pa = p * pi[(s, a)];
                    if pa == 0.0 {
                        continue;
                    }
                    let mut st = steps.clone();
                    st.push((s, a));
                    if t + 1 < self.trajectory_len {
                        for &(s2, q) in self.mdp.successors(s, a) {
                            next.push((pa * q, st.clone(), s2));
                        }
                    } else {
                        next.push((pa, st, s));
                    }
                }
            }
            frontier = next;
        }
        frontier.into_iter().map(|(p, steps, _)| (p, Trajectory { steps })).collect()
    }

    /// Gradients of one comparison's loss: `∇_x` and the score-function
    /// `∇_π` term `ℓ · (N_0 + N_1) / π`.
    fn comparison_grad(&self, x: &DVector<f64>, pi: &PolicyTable, c: &Comparison, gx: &mut DVector<f64>, gpi: &mut DMatrix<f64>, weight: f64) {
        let m = self.mdp.num_actions();
        let z = self.x_score(x, &c.p0) - self.x_score(x, &c.p1);
        let dz = sigmoid(z) - if c.y { 1.0 } else { 0.0 };
        let loss = nll(z, c.y);
        for (p, sign) in [(&c.p0, 1.0), (&c.p1, -1.0)] {
            for &(s, a) in &p.steps {
                gx[s * m + a] += weight * sign * dz;
                gpi[(s, a)] += weight * loss / pi[(s, a)];
            }
        }
    }

    /// Expected loss over `pairs` i.i.d. comparisons drawn with `rng`.
    pub fn monte_carlo_loss(&self, x: &DVector<f64>, pi: &PolicyTable, pairs: usize, rng: &mut SimRng) -> f64 {
        (0..pairs).map(|_| self.loss(x, &self.sample_comparison(pi, rng))).sum::<f64>() / pairs as f64
    }
}

impl UpperObjective for PreferenceUpper {
    fn value(&self, x: &DVector<f64>, pi: &PolicyTable) -> f64 {
        let traj = self.enumerate(pi);
        let mut total = 0.0;
        for (q0, p0) in &traj {
            for (q1, p1) in &traj {
                let z = self.x_score(x, p0) - self.x_score(x, p1);
                total += q0 * q1 * nll(z, self.label(p0, p1));
            }
        }
        total
    }

    fn grad_x(&self, x: &DVector<f64>, pi: &PolicyTable) -> DVector<f64> {
        self.exact_grads(x, pi).0
    }

    fn grad_pi(&self, x: &DVector<f64>, pi: &PolicyTable) -> DMatrix<f64> {
        self.exact_grads(x, pi).1
    }

    fn sample_grad(&self, x: &DVector<f64>, pi: &PolicyTable, rng: &mut SimRng) -> UpperGrad {
        let mut gx = DVector::zeros(x.len());
        let mut gpi = DMatrix::zeros(pi.nrows(), pi.ncols());
        let weight = 1.0 / self.pairs_per_eval as f64;
        for _ in 0..self.pairs_per_eval {
            let c = self.sample_comparison(pi, rng);
            self.comparison_grad(x, pi, &c, &mut gx, &mut gpi, weight);
        }
        UpperGrad { x: gx, pi: gpi }
    }

    fn grad_x_bound(&self) -> f64 {
        std::f64::consts::SQRT_2 * self.trajectory_len as f64
    }

    fn grad_pi_bound(&self) -> f64 {
        let max_loss = softplus(2.0 * self.trajectory_len as f64 * self.reward_bound);
        max_loss * 2.0 * std::f64::consts::SQRT_2 * self.trajectory_len as f64
    }
}

impl PreferenceUpper {
    /// Enumerated `(∇_x f, ∇_π f)`.
    pub fn exact_grads(&self, x: &DVector<f64>, pi: &PolicyTable) -> (DVector<f64>, DMatrix<f64>) {
        let traj = self.enumerate(pi);
        let mut gx = DVector::zeros(x.len());
        let mut gpi = DMatrix::zeros(pi.nrows(), pi.ncols());
        for (q0, p0) in &traj {
            for (q1, p1) in &traj {
                let c = Comparison { p0: p0.clone(), p1: p1.clone(), y: self.label(p0, p1) };
                self.comparison_grad(x, pi, &c, &mut gx, &mut gpi, q0 * q1);
            }
        }
        (gx, gpi)
    }
}
