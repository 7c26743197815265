//! Concrete bi-level problems.

pub mod gridworld;
pub mod preference;

use nalgebra::DVector;

use crate::mdp::RewardModel;

pub use gridworld::{GoalReward, GridUpper, GridWorldSpec};
pub use preference::{bradley_terry_prob, PreferenceProblemSpec, PreferenceUpper, TableParamReward};

/// Affine rescaling of a reward model onto `[0, 1]` using its declared range.
#[derive(Debug, Clone)]
pub struct NormalizedReward<R> {
    inner: R,
    lo: f64,
    span: f64,
}

impl<R: RewardModel> NormalizedReward<R> {
    pub fn new(inner: R) -> Self {
        let (lo, hi) = inner.reward_range();
        let span = if hi > lo { hi - lo } else { 1.0 };
        Self { inner, lo, span }
    }
}

impl<R: RewardModel> RewardModel for NormalizedReward<R> {
    fn dim_x(&self) -> usize {
        self.inner.dim_x()
    }

    fn evaluate(&self, x: &DVector<f64>, s: usize, a: usize) -> f64 {
        ((self.inner.evaluate(x, s, a) - self.lo) / self.span).clamp(0.0, 1.0)
    }

    fn grad_x(&self, x: &DVector<f64>, s: usize, a: usize) -> DVector<f64> {
        self.inner.grad_x(x, s, a) / self.span
    }

    fn reward_range(&self) -> (f64, f64) {
        (0.0, 1.0)
    }

    fn grad_bound(&self) -> f64 {
        self.inner.grad_bound() / self.span
    }
}
