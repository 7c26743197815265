//! Upper-level objectives and the bi-level problem bundle.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::mdp::{value_box_bound, RewardModel, TabularMdp};
use crate::policy::PolicyTable;
use crate::SimRng;

/// Stochastic (or exact) gradients of `f` at `(x, π)`.
#[derive(Debug, Clone, PartialEq)]
pub struct UpperGrad {
    pub x: DVector<f64>,
    pub pi: DMatrix<f64>,
}

/// Upper-level objective `f(x, π)`.
///
/// `grad_x`/`grad_pi` are the exact-gradient hooks used by oracles and
/// enumerated expectations; `sample_grad` draws `ξ` and returns the unbiased
/// stochastic gradients used inside the algorithms. Deterministic objectives
/// keep the default, which returns the exact gradients without touching `rng`.
pub trait UpperObjective: Send + Sync {
    fn value(&self, x: &DVector<f64>, pi: &PolicyTable) -> f64;

    fn grad_x(&self, x: &DVector<f64>, pi: &PolicyTable) -> DVector<f64>;

    fn grad_pi(&self, x: &DVector<f64>, pi: &PolicyTable) -> DMatrix<f64>;

    fn sample_grad(&self, x: &DVector<f64>, pi: &PolicyTable, _rng: &mut SimRng) -> UpperGrad {
        UpperGrad { x: self.grad_x(x, pi), pi: self.grad_pi(x, pi) }
    }

    /// Bound on `‖∇̃_x f‖` over admissible inputs.
    fn grad_x_bound(&self) -> f64;

    /// Bound on the logit-space gradient `‖pullback(∇̃_π f)‖`. Any bound on
    /// `‖∇̃_π f‖` qualifies, since the softmax pullback is a contraction.
    fn grad_pi_bound(&self) -> f64;
}

/// An MDP whose reward is shaped by `x`, plus the upper objective evaluated at
/// the induced policy.
#[derive(Clone)]
pub struct BilevelProblem {
    pub mdp: TabularMdp,
    pub reward: Arc<dyn RewardModel>,
    pub upper: Arc<dyn UpperObjective>,
    /// Per-coordinate box for `x`; iterates are clamped into it after each update.
    pub x_bounds: Option<Vec<(f64, f64)>>,
}

impl std::fmt::Debug for BilevelProblem {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("BilevelProblem")
            .field("num_states", &self.mdp.num_states())
            .field("num_actions", &self.mdp.num_actions())
            .field("dim_x", &self.reward.dim_x())
            .field("x_bounds", &self.x_bounds)
            .finish()
    }
}

impl BilevelProblem {
    pub fn new(
        mdp: TabularMdp,
        reward: Arc<dyn RewardModel>,
        upper: Arc<dyn UpperObjective>,
        x_bounds: Option<Vec<(f64, f64)>>,
    ) -> Result<Self> {
        if let Some(b) = &x_bounds {
            if b.len() != reward.dim_x() {
                return Err(Error::Dimension(format!(
                    "{} bounds for a {}-dimensional x",
                    b.len(),
                    reward.dim_x()
                )));
            }
            if b.iter().any(|(lo, hi)| !(lo <= hi)) {
                return Err(Error::InvalidArgument("empty x bound interval".into()));
            }
        }
        Ok(Self { mdp, reward, upper, x_bounds })
    }

    pub fn dim_x(&self) -> usize {
        self.reward.dim_x()
    }

    pub fn project_x(&self, x: &mut DVector<f64>) {
        if let Some(bounds) = &self.x_bounds {
            for (v, (lo, hi)) in x.iter_mut().zip(bounds) {
                *v = v.clamp(*lo, *hi);
            }
        }
    }

    /// Constant subtracted from rewards inside the critic so value estimates
    /// live in `[0, B_V]`.
    pub fn reward_shift(&self) -> f64 {
        self.reward.reward_range().0
    }

    /// Reward as seen by the critic, `r_x(s,a) - r_min`.
    pub fn shifted_reward(&self, x: &DVector<f64>, s: usize, a: usize) -> f64 {
        self.reward.evaluate(x, s, a) - self.reward_shift()
    }

    /// `B_V` for regularization weights up to `tau_max`.
    pub fn value_box(&self, tau_max: f64) -> f64 {
        value_box_bound(self.reward.reward_range(), self.mdp.num_actions(), tau_max, self.mdp.gamma())
    }

    /// Maps an exact value of the original reward into the critic's shifted frame.
    pub fn to_critic_frame(&self, v: &DVector<f64>) -> DVector<f64> {
        v.add_scalar(-self.reward_shift() / (1.0 - self.mdp.gamma()))
    }
}
