//! GridWorld goal placement: `x` places a goal on a grid, the reward is the
//! negated squared distance to it, and the upper objective trades a centered
//! goal against a policy that prefers DOWN and RIGHT.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::mdp::{RewardModel, TabularMdp};
use crate::objective::{BilevelProblem, UpperObjective};
use crate::policy::PolicyTable;

pub const UP: usize = 0;
pub const DOWN: usize = 1;
pub const LEFT: usize = 2;
pub const RIGHT: usize = 3;
pub const NUM_ACTIONS: usize = 4;

/// Grid layout and objective weights. States are numbered `row * width + col`
/// and have coordinates `(col, row)`; DOWN increases the row.
#[derive(Debug, Clone, PartialEq)]
pub struct GridWorldSpec {
    pub width: usize,
    pub height: usize,
    pub gamma: f64,
    /// Weight on the DOWN/RIGHT bias term of the upper objective.
    pub lambda: f64,
    /// Initial distribution; `None` is uniform.
    pub rho: Option<Vec<f64>>,
    /// Center coordinate; `None` is `((width-1)/2, (height-1)/2)`.
    pub center: Option<(f64, f64)>,
    /// Rescale rewards affinely onto `[0, 1]`.
    pub normalize_reward: bool,
}

impl Default for GridWorldSpec {
    fn default() -> Self {
        Self {
            width: 10,
            height: 10,
            gamma: 0.95,
            lambda: DEFAULT_LAMBDA,
            rho: None,
            center: None,
            normalize_reward: false,
        }
    }
}

/// Bias weight under which the bottom-right corner is the lattice optimum of
/// `Φ` on the default 10×10 grid.
pub const DEFAULT_LAMBDA: f64 = 8.0;

impl GridWorldSpec {
    pub fn num_states(&self) -> usize {
        self.width * self.height
    }

    pub fn center(&self) -> (f64, f64) {
        self.center
            .unwrap_or(((self.width as f64 - 1.0) / 2.0, (self.height as f64 - 1.0) / 2.0))
    }

    pub fn coor(&self, s: usize) -> (f64, f64) {
        ((s % self.width) as f64, (s / self.width) as f64)
    }

    pub fn state(&self, col: usize, row: usize) -> usize {
        row * self.width + col
    }

    /// Successor of `s` under `a`; moves off the grid leave the state unchanged.
    pub fn next_state(&self, s: usize, a: usize) -> usize {
        let (col, row) = (s % self.width, s / self.width);
        match a {
            UP => self.state(col, row.saturating_sub(1)),
            DOWN => self.state(col, (row + 1).min(self.height - 1)),
            LEFT => self.state(col.saturating_sub(1), row),
            RIGHT => self.state((col + 1).min(self.width - 1), row),
            _ => panic!("action {a} out of range"),
        }
    }

    pub fn x_bounds(&self) -> Vec<(f64, f64)> {
        vec![(0.0, self.width as f64 - 1.0), (0.0, self.height as f64 - 1.0)]
    }

    /// Initial goal: the grid center.
    pub fn default_x0(&self) -> DVector<f64> {
        let (cx, cy) = self.center();
        DVector::from_vec(vec![cx, cy])
    }

    /// The bottom-right corner `(width-1, height-1)`.
    pub fn corner(&self) -> DVector<f64> {
        DVector::from_vec(vec![self.width as f64 - 1.0, self.height as f64 - 1.0])
    }

    /// Every integer goal position, column-major in `x_0`.
    pub fn lattice(&self) -> Vec<DVector<f64>> {
        let mut out = Vec::with_capacity(self.num_states());
        for c in 0..self.width {
            for r in 0..self.height {
                out.push(DVector::from_vec(vec![c as f64, r as f64]));
            }
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 {
            return Err(Error::InvalidArgument("grid dimensions must be positive".into()));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::InvalidArgument(format!("lambda = {} must be finite and nonnegative", self.lambda)));
        }
        if let Some((cx, cy)) = self.center {
            if !(cx.is_finite() && cy.is_finite()) {
                return Err(Error::InvalidArgument("center must be finite".into()));
            }
        }
        Ok(())
    }

    pub fn mdp(&self) -> Result<TabularMdp> {
        self.validate()?;
        let n = self.num_states();
        let mut t = vec![0.0; n * NUM_ACTIONS * n];
        for s in 0..n {
            for a in 0..NUM_ACTIONS {
                t[(s * NUM_ACTIONS + a) * n + self.next_state(s, a)] = 1.0;
            }
        }
        let rho = self.rho.clone().unwrap_or_else(|| vec![1.0 / n as f64; n]);
        TabularMdp::new(n, NUM_ACTIONS, t, self.gamma, rho)
    }

    pub fn reward(&self) -> GoalReward {
        GoalReward { width: self.width, height: self.height }
    }

    pub fn upper(&self) -> GridUpper {
        let (cx, cy) = self.center();
        GridUpper { width: self.width, height: self.height, center: (cx, cy), lambda: self.lambda }
    }

    pub fn build(&self) -> Result<BilevelProblem> {
        let mdp = self.mdp()?;
        let reward: Arc<dyn RewardModel> = if self.normalize_reward {
            Arc::new(super::NormalizedReward::new(self.reward()))
        } else {
            Arc::new(self.reward())
        };
        BilevelProblem::new(mdp, reward, Arc::new(self.upper()), Some(self.x_bounds()))
    }
}

/// `r_x(s) = -‖coor(s) - x‖²`, independent of the action.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GoalReward {
    pub width: usize,
    pub height: usize,
}

impl GoalReward {
    fn coor(&self, s: usize) -> (f64, f64) {
        ((s % self.width) as f64, (s / self.width) as f64)
    }

    fn diameter_squared(&self) -> f64 {
        let (w, h) = (self.width as f64 - 1.0, self.height as f64 - 1.0);
        w * w + h * h
    }
}

/// Goal reward `-‖s - x‖²` for a single state.
pub fn gridworld_reward(x: &DVector<f64>, coor: (f64, f64)) -> f64 {
    let (dx, dy) = (coor.0 - x[0], coor.1 - x[1]);
    -(dx * dx + dy * dy)
}

impl RewardModel for GoalReward {
    fn dim_x(&self) -> usize {
        2
    }

    fn evaluate(&self, x: &DVector<f64>, s: usize, _a: usize) -> f64 {
        gridworld_reward(x, self.coor(s))
    }

    fn grad_x(&self, x: &DVector<f64>, s: usize, _a: usize) -> DVector<f64> {
        let (c, r) = self.coor(s);
        DVector::from_vec(vec![2.0 * (c - x[0]), 2.0 * (r - x[1])])
    }

    fn reward_range(&self) -> (f64, f64) {
        (-self.diameter_squared(), 0.0)
    }

    fn grad_bound(&self) -> f64 {
        2.0 * self.diameter_squared().sqrt()
    }
}

/// `f(x, π) = ‖x - center‖² - λ Σ_s (π(DOWN|s) + π(RIGHT|s))`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridUpper {
    pub width: usize,
    pub height: usize,
    pub center: (f64, f64),
    pub lambda: f64,
}

impl UpperObjective for GridUpper {
    fn value(&self, x: &DVector<f64>, pi: &PolicyTable) -> f64 {
        let (dx, dy) = (x[0] - self.center.0, x[1] - self.center.1);
        let bias: f64 = (0..pi.nrows()).map(|s| pi[(s, DOWN)] + pi[(s, RIGHT)]).sum();
        dx * dx + dy * dy - self.lambda * bias
    }

    fn grad_x(&self, x: &DVector<f64>, _pi: &PolicyTable) -> DVector<f64> {
        DVector::from_vec(vec![2.0 * (x[0] - self.center.0), 2.0 * (x[1] - self.center.1)])
    }

    fn grad_pi(&self, _x: &DVector<f64>, pi: &PolicyTable) -> DMatrix<f64> {
        DMatrix::from_fn(pi.nrows(), pi.ncols(), |_, a| if a == DOWN || a == RIGHT { -self.lambda } else { 0.0 })
    }

    fn grad_x_bound(&self) -> f64 {
        let far = |c: f64, n: usize| c.abs().max((n as f64 - 1.0 - c).abs());
        2.0 * far(self.center.0, self.width).hypot(far(self.center.1, self.height))
    }

    fn grad_pi_bound(&self) -> f64 {
        self.lambda * ((2 * self.width * self.height) as f64).sqrt()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fd::{central_gradient, relative_error};
    use crate::mdp::discounted_visitation;
    use crate::oracles::{fd_hypergrad_phi_tau, phi_exact, OracleConfig};

    fn uniform(n: usize) -> PolicyTable {
        DMatrix::from_element(n, NUM_ACTIONS, 0.25)
    }

    #[test]
    fn reward_examples() {
        let x = DVector::from_vec(vec![5.0, 5.0]);
        assert_eq!(gridworld_reward(&x, (5.0, 5.0)), 0.0);
        assert_eq!(gridworld_reward(&x, (2.0, 1.0)), -25.0);
        let r = GoalReward { width: 10, height: 10 };
        let s = 10 + 2;
        assert_eq!(r.evaluate(&x, s, UP), -25.0);
        assert_eq!(r.grad_x(&x, s, RIGHT), DVector::from_vec(vec![-6.0, -8.0]));
        let fd = central_gradient(|y| Ok(r.evaluate(y, s, 0)), &x, 1e-6).unwrap();
        assert!((fd - DVector::from_vec(vec![-6.0, -8.0])).norm() < 1e-6);
    }

    #[test]
    fn reward_gradient_matches_finite_differences_off_lattice() {
        let r = GoalReward { width: 10, height: 10 };
        let x = DVector::from_vec(vec![3.3, 7.9]);
        for s in [0, 17, 55, 99] {
            let fd = central_gradient(|y| Ok(r.evaluate(y, s, 0)), &x, 1e-6).unwrap();
            assert!(relative_error(r.grad_x(&x, s, 0).as_slice(), fd.as_slice(), 1e-8) < 1e-5);
        }
    }

    #[test]
    fn reward_range_covers_the_box() {
        let spec = GridWorldSpec::default();
        let r = spec.reward();
        let (lo, hi) = r.reward_range();
        assert_eq!((lo, hi), (-162.0, 0.0));
        for x in spec.lattice() {
            for s in 0..spec.num_states() {
                let v = r.evaluate(&x, s, 0);
                assert!(v >= lo && v <= hi);
                assert!(r.grad_x(&x, s, 0).norm() <= r.grad_bound() + 1e-12);
            }
        }
    }

    #[test]
    fn upper_examples() {
        let spec = GridWorldSpec { lambda: 1.5, ..Default::default() };
        let u = spec.upper();
        let x = spec.default_x0();
        let mut down = DMatrix::zeros(100, NUM_ACTIONS);
        down.column_mut(DOWN).fill(1.0);
        assert!((u.value(&x, &down) + 100.0 * 1.5).abs() < 1e-12);
        assert!((u.value(&x, &uniform(100)) + 50.0 * 1.5).abs() < 1e-12);
        let g = u.grad_pi(&x, &uniform(100));
        assert!(g.row(7).iter().eq([0.0, -1.5, 0.0, -1.5].iter()));
        let x2 = DVector::from_vec(vec![9.0, 0.0]);
        assert_eq!(u.grad_x(&x2, &down), DVector::from_vec(vec![9.0, -9.0]));
        assert!(u.grad_x(&x2, &down).norm() <= u.grad_x_bound() + 1e-12);
    }

    #[test]
    fn zero_lambda_ignores_policy() {
        let u = GridWorldSpec { lambda: 0.0, ..Default::default() }.upper();
        let x = DVector::from_vec(vec![1.0, 2.0]);
        let mut down = DMatrix::zeros(100, NUM_ACTIONS);
        down.column_mut(DOWN).fill(1.0);
        assert_eq!(u.value(&x, &down), u.value(&x, &uniform(100)));
        assert_eq!(u.grad_pi(&x, &down).norm(), 0.0);
    }

    #[test]
    fn transitions_are_deterministic_with_clamping() {
        let spec = GridWorldSpec::default();
        let mdp = spec.mdp().unwrap();
        for s in 0..spec.num_states() {
            for a in 0..NUM_ACTIONS {
                let succ = mdp.successors(s, a);
                assert_eq!(succ.len(), 1);
                assert_eq!(succ[0].1, 1.0);
            }
        }
        assert_eq!(spec.next_state(0, UP), 0);
        assert_eq!(spec.next_state(0, LEFT), 0);
        assert_eq!(spec.next_state(0, DOWN), 10);
        assert_eq!(spec.next_state(0, RIGHT), 1);
        assert_eq!(spec.next_state(99, DOWN), 99);
        assert_eq!(spec.next_state(99, RIGHT), 99);
        assert_eq!(spec.next_state(9, RIGHT), 9);
    }

    #[test]
    fn rejects_bad_specs() {
        assert!(GridWorldSpec { lambda: -1.0, ..Default::default() }.build().is_err());
        assert!(GridWorldSpec { width: 0, ..Default::default() }.build().is_err());
        assert!(GridWorldSpec { gamma: 1.0, ..Default::default() }.build().is_err());
    }

    #[test]
    fn symmetric_instance_has_zero_hypergradient() {
        let spec = GridWorldSpec { width: 5, height: 5, lambda: 0.0, ..Default::default() };
        let problem = spec.build().unwrap();
        let g = fd_hypergrad_phi_tau(&problem, &spec.default_x0(), 0.5, &OracleConfig::default()).unwrap();
        assert!(g.norm() < 1e-6, "{g}");
    }

    #[test]
    fn uniform_policy_visitation_is_symmetric() {
        let spec = GridWorldSpec { width: 4, height: 4, ..Default::default() };
        let mdp = spec.mdp().unwrap();
        let d = discounted_visitation(&mdp, &uniform(16)).unwrap();
        for s in 0..16 {
            let (c, r) = (s % 4, s / 4);
            assert!((d[s] - d[spec.state(3 - c, 3 - r)]).abs() < 1e-12);
            assert!((d[s] - d[spec.state(r, c)]).abs() < 1e-12);
        }
    }

    #[test]
    fn normalized_reward_lies_in_unit_interval() {
        let spec = GridWorldSpec { width: 4, height: 3, normalize_reward: true, ..Default::default() };
        let problem = spec.build().unwrap();
        assert_eq!(problem.reward.reward_range(), (0.0, 1.0));
        let x = DVector::from_vec(vec![0.0, 2.0]);
        assert_eq!(problem.reward.evaluate(&x, spec.state(0, 2), 0), 1.0);
        assert_eq!(problem.reward.evaluate(&x, spec.state(3, 0), 0), 0.0);
    }

    #[test]
    fn corner_beats_center_at_default_lambda() {
        let spec = GridWorldSpec::default();
        let problem = spec.build().unwrap();
        let cfg = OracleConfig::default();
        let corner = phi_exact(&problem, &spec.corner(), &cfg).unwrap();
        let center = phi_exact(&problem, &spec.default_x0(), &cfg).unwrap();
        assert!(corner < center, "corner {corner} center {center}");
    }
}
