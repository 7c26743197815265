//! Ground-truth solvers: the soft optimum `π_τ*(x)`, the Lagrangian minimizer
//! `π_{w,τ}*(x)`, the penalty hypergradient, a finite-difference hypergradient
//! of `Φ_τ`, the bi-level objective `Φ(x)` and the Lyapunov residuals.
//!
//! `Φ(x)` is evaluated through the soft optimum at a tiny regularization weight,
//! never through the entropy-maximizing selection directly.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::fd::central_gradient;
use crate::mdp::{exact_value_from_table, reward_table, PolicyEvaluation, RewardModel, TabularMdp};
use crate::objective::BilevelProblem;
use crate::policy::{recenter, softmax, softmax_pullback, Logits, PolicyTable};

/// Tolerances and limits shared by every oracle.
#[derive(Debug, Clone, PartialEq)]
pub struct OracleConfig {
    /// Sup-norm Bellman residual at which soft value iteration stops.
    pub svi_tol: f64,
    pub svi_max_iter: usize,
    /// Gradient-norm threshold for the Lagrangian minimizer, relative to
    /// `1 + |L|` at the iterate.
    pub gd_tol: f64,
    pub gd_max_iter: usize,
    /// Base finite-difference step, scaled per coordinate by `max(1, |x_i|)`.
    pub fd_step: f64,
    /// Regularization weight standing in for `τ → 0` when evaluating `Φ`.
    pub phi_eval_tau: f64,
    /// Allowed change of `Φ` when `phi_eval_tau` is divided by ten.
    pub phi_refine_tol: f64,
}

impl Default for OracleConfig {
    fn default() -> Self {
        Self {
            svi_tol: 1e-12,
            svi_max_iter: 100_000,
            gd_tol: 1e-9,
            gd_max_iter: 20_000,
            fd_step: 1e-5,
            phi_eval_tau: 1e-6,
            phi_refine_tol: 1e-4,
        }
    }
}

impl OracleConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("svi_tol", self.svi_tol),
            ("gd_tol", self.gd_tol),
            ("fd_step", self.fd_step),
            ("phi_eval_tau", self.phi_eval_tau),
            ("phi_refine_tol", self.phi_refine_tol),
        ];
        for (name, v) in positive {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::InvalidArgument(format!("oracle {name} must be positive, got {v}")));
            }
        }
        if self.svi_max_iter == 0 || self.gd_max_iter == 0 {
            return Err(Error::InvalidArgument("oracle iteration limits must be positive".into()));
        }
        Ok(())
    }
}

/// Output of [`soft_value_iteration`].
#[derive(Debug, Clone)]
pub struct SoftOptimum {
    pub value: DVector<f64>,
    pub pi: PolicyTable,
    /// Logits `Q/τ` that encode `pi`, re-centered per state.
    pub logits: Logits,
    pub residual: f64,
    pub iterations: usize,
}

fn soft_backup(mdp: &TabularMdp, r: &DMatrix<f64>, v: &DVector<f64>, tau: f64) -> (DVector<f64>, DMatrix<f64>) {
    let (n, m) = (mdp.num_states(), mdp.num_actions());
    let q = DMatrix::from_fn(n, m, |s, a| r[(s, a)] + mdp.gamma() * mdp.expected_next(s, a, v));
    let backed = DVector::from_fn(n, |s, _| {
        let max = q.row(s).max();
        max + tau * q.row(s).iter().map(|&qa| ((qa - max) / tau).exp()).sum::<f64>().ln()
    });
    (backed, q)
}

/// Entropy-regularized optimum `π_τ*(x) = argmax_π J_τ(x, π)`.
///
/// Runs the soft Bellman iteration `V ← τ log Σ_a exp((r + γPV)/τ)` until the
/// residual is small relative to the value scale, then finishes with
/// policy-evaluation (Newton) steps until the sup-norm residual is at most
/// `svi_tol`, or at the roundoff floor of the value scale if that is larger.
pub fn soft_value_iteration(
    mdp: &TabularMdp,
    reward: &dyn RewardModel,
    x: &DVector<f64>,
    tau: f64,
    cfg: &OracleConfig,
) -> Result<SoftOptimum> {
    soft_value_iteration_table(mdp, &reward_table(mdp, reward, x), tau, cfg)
}

pub fn soft_value_iteration_table(
    mdp: &TabularMdp,
    r: &DMatrix<f64>,
    tau: f64,
    cfg: &OracleConfig,
) -> Result<SoftOptimum> {
    if !(tau > 0.0) {
        return Err(Error::InvalidArgument(format!("soft value iteration needs τ > 0, got {tau}")));
    }
    let mut v = DVector::zeros(mdp.num_states());
    let mut iterations = 0;
    let mut best = f64::INFINITY;
    let mut stalled = 0;
    loop {
        let (backed, q) = soft_backup(mdp, r, &v, tau);
        let residual = (&backed - &v).amax();
        iterations += 1;
        // Below a few ulps of the value scale the residual is pure roundoff.
        let floor = 16.0 * f64::EPSILON * (1.0 + v.amax());
        if residual <= cfg.svi_tol.max(floor) {
            let mut logits = q / tau;
            recenter(&mut logits);
            let pi = softmax(&logits)?;
            return Ok(SoftOptimum { value: v, pi, logits, residual, iterations });
        }
        if iterations >= cfg.svi_max_iter {
            return Err(Error::Convergence { solver: "soft value iteration", iterations, residual });
        }
        let scale = 1.0 + v.amax();
        if residual > 1e-6 * scale {
            v = backed;
            continue;
        }
        // Newton refinement: evaluate the greedy soft policy exactly.
        if residual < best {
            best = residual;
            stalled = 0;
        } else {
            stalled += 1;
            if stalled >= 5 {
                return Err(Error::Convergence { solver: "soft value iteration", iterations, residual });
            }
        }
        let pi = softmax(&(q / tau))?;
        v = exact_value_from_table(mdp, r, &pi, tau)?;
    }
}

/// Everything about one `(x, τ)` lower-level landscape that the hypergradient
/// oracles reuse.
#[derive(Debug, Clone)]
pub struct LowerLevel {
    pub rewards: DMatrix<f64>,
    pub soft: SoftOptimum,
    pub soft_eval: PolicyEvaluation,
}

impl LowerLevel {
    pub fn solve(problem: &BilevelProblem, x: &DVector<f64>, tau: f64, cfg: &OracleConfig) -> Result<Self> {
        let rewards = reward_table(&problem.mdp, problem.reward.as_ref(), x);
        let soft = soft_value_iteration_table(&problem.mdp, &rewards, tau, cfg)?;
        let soft_eval = PolicyEvaluation::new(&problem.mdp, rewards.clone(), soft.pi.clone(), tau)?;
        Ok(Self { rewards, soft, soft_eval })
    }
}

/// `w·L_{w,τ}(x, π_θ)` up to the constant `J_τ(x, π_τ*)`, i.e. `w f - J_τ`, and its
/// gradient in the logits, `w ∇_θ f - ∇_θ J_τ`.
pub fn scaled_lagrangian(
    problem: &BilevelProblem,
    x: &DVector<f64>,
    rewards: &DMatrix<f64>,
    theta: &Logits,
    w: f64,
    tau: f64,
) -> Result<(f64, DMatrix<f64>, PolicyEvaluation)> {
    let pi = softmax(theta)?;
    let eval = PolicyEvaluation::new(&problem.mdp, rewards.clone(), pi, tau)?;
    let mut grad = -eval.grad_theta(problem.mdp.gamma());
    let mut value = -eval.ret;
    if w != 0.0 {
        value += w * problem.upper.value(x, &eval.pi);
        grad += softmax_pullback(&eval.pi, &problem.upper.grad_pi(x, &eval.pi)) * w;
    }
    Ok((value, grad, eval))
}

/// Output of [`lagrangian_minimizer`].
#[derive(Debug, Clone)]
pub struct LagrangianOptimum {
    pub theta: Logits,
    pub eval: PolicyEvaluation,
    /// `w f - J_τ` at the optimum.
    pub scaled_value: f64,
    pub grad_norm: f64,
    pub iterations: usize,
}

/// `π_{w,τ}*(x) = argmin_π L_{w,τ}(x, π)`, found by minimizing `w·L_{w,τ}` over
/// the logits with limited-memory quasi-Newton directions and a backtracking
/// line search. Starts from `warm_start` or from the logits of `π_τ*(x)`.
pub fn lagrangian_minimizer(
    problem: &BilevelProblem,
    x: &DVector<f64>,
    w: f64,
    tau: f64,
    lower: &LowerLevel,
    warm_start: Option<&Logits>,
    cfg: &OracleConfig,
) -> Result<LagrangianOptimum> {
    if !(w > 0.0) || !(tau > 0.0) {
        return Err(Error::InvalidArgument(format!("Lagrangian minimizer needs w > 0 and τ > 0 (w={w}, τ={tau})")));
    }
    let theta0 = warm_start.cloned().unwrap_or_else(|| lower.soft.logits.clone());
    let objective = |theta: &Logits| scaled_lagrangian(problem, x, &lower.rewards, theta, w, tau);
    let out = lbfgs_minimize(theta0, objective, cfg.gd_tol, cfg.gd_max_iter)?;
    Ok(LagrangianOptimum {
        theta: out.theta,
        eval: out.eval,
        scaled_value: out.value,
        grad_norm: out.grad_norm,
        iterations: out.iterations,
    })
}

struct Minimum {
    theta: Logits,
    value: f64,
    eval: PolicyEvaluation,
    grad_norm: f64,
    iterations: usize,
}

fn dot(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    a.dot(b)
}

/// L-BFGS with a backtracking line search. Accepts a step on the Armijo
/// condition, or on the approximate Wolfe condition once function values stop
/// resolving differences at machine precision.
fn lbfgs_minimize<F>(mut theta: Logits, mut f: F, tol: f64, max_iter: usize) -> Result<Minimum>
where
    F: FnMut(&Logits) -> Result<(f64, DMatrix<f64>, PolicyEvaluation)>,
{
    const MEMORY: usize = 12;
    const C1: f64 = 1e-4;
    let (mut value, mut grad, mut eval) = f(&theta)?;
    let mut history: std::collections::VecDeque<(DMatrix<f64>, DMatrix<f64>, f64)> = Default::default();
    let mut iterations = 0;
    let mut failures = 0;
    loop {
        let grad_norm = grad.norm();
        if grad_norm <= tol * (1.0 + value.abs()) {
            recenter(&mut theta);
            return Ok(Minimum { theta, value, eval, grad_norm, iterations });
        }
        if iterations >= max_iter {
            return Err(Error::Convergence { solver: "Lagrangian minimizer", iterations, residual: grad_norm });
        }
        iterations += 1;

        // Two-loop recursion.
        let mut q = grad.clone();
        let mut alphas = Vec::with_capacity(history.len());
        for (s, y, rho) in history.iter().rev() {
            let a = rho * dot(s, &q);
            q -= y * a;
            alphas.push(a);
        }
        let gamma = history.back().map_or(1.0 / grad_norm.max(1.0), |(s, y, _)| dot(s, y) / dot(y, y));
        let mut dir = q * gamma;
        for ((s, y, rho), a) in history.iter().zip(alphas.iter().rev()) {
            let b = rho * dot(y, &dir);
            dir += s * (a - b);
        }
        dir = -dir;
        let mut slope = dot(&grad, &dir);
        if !(slope < 0.0) {
            history.clear();
            dir = -&grad / grad_norm.max(1.0);
            slope = dot(&grad, &dir);
        }

        let mut step = 1.0;
        let mut accepted = None;
        for _ in 0..60 {
            let trial = &theta + &dir * step;
            if !trial.iter().all(|v| v.is_finite()) {
                step *= 0.5;
                continue;
            }
            let (tv, tg, te) = f(&trial)?;
            let armijo = tv <= value + C1 * step * slope;
            let flat = tv <= value + 1e-12 * (1.0 + value.abs());
            let tslope = dot(&tg, &dir);
            let approx_wolfe = flat && tslope >= 0.9 * slope && tslope <= -0.8 * slope;
            if tv.is_finite() && (armijo || approx_wolfe) {
                accepted = Some((trial, tv, tg, te));
                break;
            }
            step *= 0.5;
        }
        match accepted {
            Some((trial, tv, tg, te)) => {
                failures = 0;
                let s = &trial - &theta;
                let y = &tg - &grad;
                let sy = dot(&s, &y);
                if sy > 1e-14 * s.norm() * y.norm() {
                    if history.len() == MEMORY {
                        history.pop_front();
                    }
                    history.push_back((s, y, 1.0 / sy));
                }
                theta = trial;
                value = tv;
                grad = tg;
                eval = te;
            }
            None => {
                failures += 1;
                history.clear();
                if failures >= 3 {
                    return Err(Error::Convergence {
                        solver: "Lagrangian minimizer (line search)",
                        iterations,
                        residual: grad_norm,
                    });
                }
            }
        }
    }
}

/// Penalty hypergradient together with the policies it was assembled from.
#[derive(Debug, Clone)]
pub struct PenaltyHypergrad {
    pub grad: DVector<f64>,
    /// `Φ_{w,τ}(x) = min_π L_{w,τ}(x, π)`.
    pub phi_w: f64,
    pub lagrangian: LagrangianOptimum,
    pub lower: LowerLevel,
}

/// `∇Φ_{w,τ}(x) = ∇_x f(x, π_{w,τ}*) + (∇_x J_τ(x, π_τ*) - ∇_x J_τ(x, π_{w,τ}*)) / w`.
pub fn penalty_hypergrad(
    problem: &BilevelProblem,
    x: &DVector<f64>,
    w: f64,
    tau: f64,
    cfg: &OracleConfig,
) -> Result<PenaltyHypergrad> {
    let lower = LowerLevel::solve(problem, x, tau, cfg)?;
    let lagrangian = lagrangian_minimizer(problem, x, w, tau, &lower, None, cfg)?;
    let mdp = &problem.mdp;
    let reward = problem.reward.as_ref();
    let gj_star = crate::mdp::grad_x_return_with_visitation(mdp, reward, x, &lower.soft_eval.pi, &lower.soft_eval.visitation);
    let gj_w = crate::mdp::grad_x_return_with_visitation(mdp, reward, x, &lagrangian.eval.pi, &lagrangian.eval.visitation);
    let grad = problem.upper.grad_x(x, &lagrangian.eval.pi) + (gj_star - gj_w) / w;
    let phi_w = problem.upper.value(x, &lagrangian.eval.pi) + (lower.soft_eval.ret - lagrangian.eval.ret) / w;
    Ok(PenaltyHypergrad { grad, phi_w, lagrangian, lower })
}

/// `Φ_{w,τ}(x)` alone.
pub fn phi_w_tau(problem: &BilevelProblem, x: &DVector<f64>, w: f64, tau: f64, cfg: &OracleConfig) -> Result<f64> {
    let lower = LowerLevel::solve(problem, x, tau, cfg)?;
    let lag = lagrangian_minimizer(problem, x, w, tau, &lower, None, cfg)?;
    Ok(problem.upper.value(x, &lag.eval.pi) + (lower.soft_eval.ret - lag.eval.ret) / w)
}

/// `Φ_τ(x) = f(x, π_τ*(x))`.
pub fn phi_tau(problem: &BilevelProblem, x: &DVector<f64>, tau: f64, cfg: &OracleConfig) -> Result<f64> {
    let soft = soft_value_iteration(&problem.mdp, problem.reward.as_ref(), x, tau, cfg)?;
    Ok(problem.upper.value(x, &soft.pi))
}

/// Central-difference gradient of `Φ_τ`.
pub fn fd_hypergrad_phi_tau(problem: &BilevelProblem, x: &DVector<f64>, tau: f64, cfg: &OracleConfig) -> Result<DVector<f64>> {
    fd_hypergrad_phi_tau_with_step(problem, x, tau, cfg, cfg.fd_step)
}

pub fn fd_hypergrad_phi_tau_with_step(
    problem: &BilevelProblem,
    x: &DVector<f64>,
    tau: f64,
    cfg: &OracleConfig,
    step: f64,
) -> Result<DVector<f64>> {
    if !(tau > 0.0) {
        return Err(Error::InvalidArgument(format!("Φ_τ needs τ > 0, got {tau}")));
    }
    central_gradient(|probe| phi_tau(problem, probe, tau, cfg), x, step)
}

/// `Φ(x) = f(x, π*(x))` with `π*(x)` taken as `π_τ*(x)` at `τ = phi_eval_tau`.
pub fn phi_exact(problem: &BilevelProblem, x: &DVector<f64>, cfg: &OracleConfig) -> Result<f64> {
    phi_tau(problem, x, cfg.phi_eval_tau, cfg)
}

/// `|Φ at phi_eval_tau - Φ at phi_eval_tau/10|`, the refinement check on [`phi_exact`].
pub fn phi_refinement_gap(problem: &BilevelProblem, x: &DVector<f64>, cfg: &OracleConfig) -> Result<f64> {
    let coarse = phi_tau(problem, x, cfg.phi_eval_tau, cfg)?;
    let fine = phi_tau(problem, x, cfg.phi_eval_tau / 10.0, cfg)?;
    Ok((coarse - fine).abs())
}

/// The four lower-level residuals of the coupled Lyapunov function.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Residuals {
    /// `J_τ(x, π_τ*) - J_τ(x, π_θ)`.
    pub eps_theta: f64,
    /// `w (L_{w,τ}(x, π_{θ^L}) - L_{w,τ}(x, π_{w,τ}*))`.
    pub eps_theta_l: f64,
    /// `‖V̂ - V_τ^{x,π_θ}‖²` in the critic frame.
    pub eps_v: f64,
    /// `‖V̂^L - V_τ^{x,π_{θ^L}}‖²` in the critic frame.
    pub eps_v_l: f64,
}

/// Snapshot of the fast iterates needed for [`lyapunov_residuals`].
#[derive(Debug, Clone, Copy)]
pub struct FastIterates<'a> {
    pub theta: &'a Logits,
    pub theta_l: &'a Logits,
    pub v_hat: &'a DVector<f64>,
    pub v_hat_l: &'a DVector<f64>,
}

pub fn lyapunov_residuals(
    problem: &BilevelProblem,
    iterates: FastIterates<'_>,
    x: &DVector<f64>,
    w: f64,
    tau: f64,
    cfg: &OracleConfig,
) -> Result<Residuals> {
    let lower = LowerLevel::solve(problem, x, tau, cfg)?;
    let mdp = &problem.mdp;
    let eval = PolicyEvaluation::new(mdp, lower.rewards.clone(), softmax(iterates.theta)?, tau)?;
    let (scaled_l, _, eval_l) = scaled_lagrangian(problem, x, &lower.rewards, iterates.theta_l, w, tau)?;
    let lag = lagrangian_minimizer(problem, x, w, tau, &lower, Some(iterates.theta_l), cfg)?;
    let eps_v = (iterates.v_hat - problem.to_critic_frame(&eval.value)).norm_squared();
    let eps_v_l = (iterates.v_hat_l - problem.to_critic_frame(&eval_l.value)).norm_squared();
    Ok(Residuals {
        eps_theta: lower.soft_eval.ret - eval.ret,
        eps_theta_l: scaled_l - lag.scaled_value,
        eps_v,
        eps_v_l,
    })
}
