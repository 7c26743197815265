//! Random tabular instances for property checks and the verify suite.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use crate::mdp::{RewardModel, TabularMdp};
use crate::objective::{BilevelProblem, UpperObjective};
use crate::policy::{softmax, Logits, PolicyTable};
use crate::SimRng;

/// Random MDP with dense transition rows and a strictly positive `ρ`.
pub fn random_mdp(rng: &mut SimRng, num_states: usize, num_actions: usize, gamma: f64) -> TabularMdp {
    let mut t = Vec::with_capacity(num_states * num_actions * num_states);
    for _ in 0..num_states * num_actions {
        let row: Vec<f64> = (0..num_states).map(|_| rng.gen::<f64>() + 0.05).collect();
        let total: f64 = row.iter().sum();
        t.extend(row.iter().map(|p| p / total));
    }
    let rho: Vec<f64> = (0..num_states).map(|_| rng.gen::<f64>() + 0.1).collect();
    let total: f64 = rho.iter().sum();
    let rho = rho.iter().map(|p| p / total).collect();
    renormalized(num_states, num_actions, t, gamma, rho)
}

/// Random MDP whose every transition is deterministic.
pub fn random_deterministic_mdp(rng: &mut SimRng, num_states: usize, num_actions: usize, gamma: f64) -> TabularMdp {
    let mut t = vec![0.0; num_states * num_actions * num_states];
    for sa in 0..num_states * num_actions {
        t[sa * num_states + rng.gen_range(0..num_states)] = 1.0;
    }
    let rho = vec![1.0 / num_states as f64; num_states];
    TabularMdp::new(num_states, num_actions, t, gamma, rho).expect("valid deterministic MDP")
}

fn renormalized(num_states: usize, num_actions: usize, mut t: Vec<f64>, gamma: f64, mut rho: Vec<f64>) -> TabularMdp {
    // Exact-sum fixups so the 1e-12 stochasticity check never trips on roundoff.
    for row in t.chunks_mut(num_states) {
        let total: f64 = row.iter().sum();
        row[0] += 1.0 - total;
    }
    let total: f64 = rho.iter().sum();
    rho[0] += 1.0 - total;
    TabularMdp::new(num_states, num_actions, t, gamma, rho).expect("valid random MDP")
}

pub fn random_rewards(rng: &mut SimRng, num_states: usize, num_actions: usize) -> DMatrix<f64> {
    DMatrix::from_fn(num_states, num_actions, |_, _| rng.gen::<f64>())
}

pub fn random_logits(rng: &mut SimRng, num_states: usize, num_actions: usize) -> Logits {
    DMatrix::from_fn(num_states, num_actions, |_, _| rng.gen_range(-2.0..2.0))
}

pub fn random_policy(rng: &mut SimRng, num_states: usize, num_actions: usize) -> PolicyTable {
    softmax(&random_logits(rng, num_states, num_actions)).expect("finite logits")
}

/// Reward that ignores `x` (zero-dimensional upper variable).
#[derive(Debug, Clone)]
pub struct TableReward {
    table: DMatrix<f64>,
}

impl TableReward {
    pub fn new(table: DMatrix<f64>) -> Self {
        Self { table }
    }
}

impl RewardModel for TableReward {
    fn dim_x(&self) -> usize {
        0
    }

    fn evaluate(&self, _x: &DVector<f64>, s: usize, a: usize) -> f64 {
        self.table[(s, a)]
    }

    fn grad_x(&self, _x: &DVector<f64>, _s: usize, _a: usize) -> DVector<f64> {
        DVector::zeros(0)
    }

    fn reward_range(&self) -> (f64, f64) {
        (self.table.min(), self.table.max())
    }

    fn grad_bound(&self) -> f64 {
        0.0
    }
}

/// `r_x(s,a) = base(s,a) + g(xᵀφ(s,a))` with `g` the identity or `tanh`.
/// Admissible `x` lie in the box `[-radius, radius]^d`.
#[derive(Debug, Clone)]
pub struct LinearReward {
    base: DMatrix<f64>,
    features: Vec<DVector<f64>>,
    squash: bool,
    radius: f64,
}

impl LinearReward {
    pub fn new(base: DMatrix<f64>, features: Vec<DVector<f64>>) -> Self {
        assert_eq!(features.len(), base.nrows() * base.ncols());
        Self { base, features, squash: false, radius: 1.0 }
    }

    pub fn squashed(mut self) -> Self {
        self.squash = true;
        self
    }

    pub fn with_radius(mut self, radius: f64) -> Self {
        self.radius = radius;
        self
    }

    pub fn feature(&self, s: usize, a: usize) -> &DVector<f64> {
        &self.features[s * self.base.ncols() + a]
    }
}

impl RewardModel for LinearReward {
    fn dim_x(&self) -> usize {
        self.features.first().map_or(0, |f| f.len())
    }

    fn evaluate(&self, x: &DVector<f64>, s: usize, a: usize) -> f64 {
        let z = self.feature(s, a).dot(x);
        self.base[(s, a)] + if self.squash { z.tanh() } else { z }
    }

    fn grad_x(&self, x: &DVector<f64>, s: usize, a: usize) -> DVector<f64> {
        let phi = self.feature(s, a);
        if self.squash {
            let t = phi.dot(x).tanh();
            phi * (1.0 - t * t)
        } else {
            phi.clone()
        }
    }

    fn reward_range(&self) -> (f64, f64) {
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for s in 0..self.base.nrows() {
            for a in 0..self.base.ncols() {
                let reach = self.radius * self.feature(s, a).lp_norm(1);
                let reach = if self.squash { reach.tanh() } else { reach };
                lo = lo.min(self.base[(s, a)] - reach);
                hi = hi.max(self.base[(s, a)] + reach);
            }
        }
        (lo, hi)
    }

    fn grad_bound(&self) -> f64 {
        self.features.iter().map(|f| f.norm()).fold(0.0, f64::max)
    }
}

pub fn random_linear_reward(rng: &mut SimRng, num_states: usize, num_actions: usize, dim: usize) -> LinearReward {
    let base = random_rewards(rng, num_states, num_actions);
    let features = (0..num_states * num_actions)
        .map(|_| DVector::from_fn(dim, |_, _| rng.gen_range(-1.0..1.0)))
        .collect();
    LinearReward::new(base, features)
}

/// `f(x, π) = ½‖x - anchor‖² + Σ c(s,a) π(a|s) + ½κ Σ (π(a|s) - m(s,a))²`.
#[derive(Debug, Clone)]
pub struct QuadraticUpper {
    pub anchor: DVector<f64>,
    pub linear: DMatrix<f64>,
    pub curvature: f64,
    pub target: DMatrix<f64>,
    /// Radius of the admissible x box, used only for the gradient bounds.
    pub radius: f64,
}

impl UpperObjective for QuadraticUpper {
    fn value(&self, x: &DVector<f64>, pi: &PolicyTable) -> f64 {
        0.5 * (x - &self.anchor).norm_squared()
            + self.linear.component_mul(pi).sum()
            + 0.5 * self.curvature * (pi - &self.target).norm_squared()
    }

    fn grad_x(&self, x: &DVector<f64>, _pi: &PolicyTable) -> DVector<f64> {
        x - &self.anchor
    }

    fn grad_pi(&self, _x: &DVector<f64>, pi: &PolicyTable) -> DMatrix<f64> {
        &self.linear + (pi - &self.target) * self.curvature
    }

    fn grad_x_bound(&self) -> f64 {
        let d = self.anchor.len() as f64;
        (self.radius * d.sqrt()) + self.anchor.norm()
    }

    fn grad_pi_bound(&self) -> f64 {
        self.linear.norm() + self.curvature * (self.target.norm() + (self.linear.nrows() as f64).sqrt())
    }
}

/// Small random bi-level problem: linear (optionally `tanh`-squashed) reward
/// in `x` and a quadratic upper objective.
pub fn random_bilevel(
    rng: &mut SimRng,
    num_states: usize,
    num_actions: usize,
    dim_x: usize,
    gamma: f64,
    squash: bool,
) -> BilevelProblem {
    let mdp = random_mdp(rng, num_states, num_actions, gamma);
    let mut reward = random_linear_reward(rng, num_states, num_actions, dim_x).with_radius(2.0);
    if squash {
        reward = reward.squashed();
    }
    let upper = QuadraticUpper {
        anchor: DVector::from_fn(dim_x, |_, _| rng.gen_range(-0.5..0.5)),
        linear: DMatrix::from_fn(num_states, num_actions, |_, _| rng.gen_range(-1.0..1.0)),
        curvature: rng.gen_range(0.0..0.5),
        target: random_policy(rng, num_states, num_actions),
        radius: 2.0,
    };
    BilevelProblem::new(mdp, Arc::new(reward), Arc::new(upper), Some(vec![(-2.0, 2.0); dim_x]))
        .expect("consistent random problem")
}

/// Random MDP with exact ties among the unregularized optimal actions. State
/// `s` ties its top `1 + s mod |A|` actions while the remaining actions trail
/// by at least one unit. Ties are created by shifting rewards up to the best
/// `Q*`, which leaves `V*` untouched. Because the number of tied actions varies
/// across states, so does the entropy bonus, and the entropy-maximizing
/// selection among tied actions is not uniform.
pub fn tied_instance(rng: &mut SimRng, num_states: usize, num_actions: usize, gamma: f64) -> (TabularMdp, DMatrix<f64>) {
    assert!(num_actions >= 2);
    let mdp = random_mdp(rng, num_states, num_actions, gamma);
    let mut r = random_rewards(rng, num_states, num_actions);
    let v = hard_value_iteration(&mdp, &r, 1e-13);
    for s in 0..num_states {
        let mut q: Vec<(f64, usize)> = (0..num_actions)
            .map(|a| (r[(s, a)] + gamma * mdp.expected_next(s, a, &v), a))
            .collect();
        q.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap());
        let best = q[0].0;
        let tied = 1 + s % num_actions;
        for (i, &(val, a)) in q.iter().enumerate() {
            if i < tied {
                r[(s, a)] += best - val;
            } else if best - val < 1.0 {
                r[(s, a)] -= 1.0 - (best - val);
            }
        }
    }
    (mdp, r)
}

/// Unregularized value iteration, run to a sup-norm tolerance.
pub fn hard_value_iteration(mdp: &TabularMdp, r: &DMatrix<f64>, tol: f64) -> DVector<f64> {
    let mut v = DVector::zeros(mdp.num_states());
    for _ in 0..100_000 {
        let next = DVector::from_fn(mdp.num_states(), |s, _| {
            (0..mdp.num_actions())
                .map(|a| r[(s, a)] + mdp.gamma() * mdp.expected_next(s, a, &v))
                .fold(f64::NEG_INFINITY, f64::max)
        });
        let delta = (&next - &v).amax();
        v = next;
        if delta <= tol {
            break;
        }
    }
    v
}
