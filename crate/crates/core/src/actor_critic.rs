//! Single-loop penalty-based actor-critic.
//!
//! Each iteration draws one transition under `π_θ` and one under `π_{θ^L}`
//! (γ-restart trajectories, or exact draws from `d_ρ^π` in i.i.d. mode), one
//! upper-level noise sample `ξ`, and then updates all five iterates
//! synchronously from their iteration-`k` values:
//!
//! ```text
//! x   ← Proj_X(x - ζ_k D)
//! θ   ← θ   + α_k F_{0,τ_k}
//! θ^L ← θ^L + α_k F_{w_k,τ_k}
//! V̂   ← Proj_[0,B_V](V̂   + β_k G(θ))
//! V̂^L ← Proj_[0,B_V](V̂^L + β_k G(θ^L))
//! ```

use nalgebra::DVector;
use rand::{Rng, SeedableRng};

use crate::baselines;
use crate::error::{Error, Result};
use crate::mdp::{discounted_visitation, TabularMdp, ValueVector};
use crate::objective::BilevelProblem;
use crate::operators::{sample_d, sample_f_with_policy, td_error, OperatorBounds, OperatorOptions, Transition};
use crate::oracles::{fd_hypergrad_phi_tau, lyapunov_residuals, phi_exact, FastIterates, OracleConfig, Residuals};
use crate::policy::{recenter, softmax, Logits, PolicyTable};
use crate::schedule::{ScheduleSet, StepSizes};
use crate::SimRng;

/// How transitions are drawn.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SamplingMode {
    /// γ-restart trajectories.
    Markovian,
    /// `s ~ d_ρ^π` drawn exactly at every iteration.
    Iid,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepOptions {
    pub mode: SamplingMode,
    pub operators: OperatorOptions,
    /// Feed the (possibly restarted) next cursor to the TD target instead of
    /// the environment's next state.
    pub td_target_uses_restart: bool,
    /// Re-center logits every this many iterations; 0 disables.
    pub recenter_every: u64,
}

impl Default for StepOptions {
    fn default() -> Self {
        Self {
            mode: SamplingMode::Markovian,
            operators: OperatorOptions::default(),
            td_target_uses_restart: false,
            recenter_every: 10_000,
        }
    }
}

/// Counts of operator samples that exceeded their bounds.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct BoundStats {
    pub draws: u64,
    pub d_violations: u64,
    pub f_violations: u64,
    pub g_violations: u64,
    /// Largest observed `‖sample‖ / bound` for each operator.
    pub d_max_ratio: f64,
    pub f_max_ratio: f64,
    pub g_max_ratio: f64,
}

impl BoundStats {
    pub fn violations(&self) -> u64 {
        self.d_violations + self.f_violations + self.g_violations
    }

    pub(crate) fn record_fast(&mut self, f: f64, f_bound: f64, g: f64, g_bound: f64) {
        self.record(None, &[(f, f_bound)], &[(g, g_bound)]);
    }

    fn record(&mut self, d: Option<(f64, f64)>, f: &[(f64, f64)], g: &[(f64, f64)]) {
        self.draws += 1;
        if let Some((n, b)) = d {
            self.d_max_ratio = self.d_max_ratio.max(n / b);
            self.d_violations += u64::from(n > b);
        }
        for &(n, b) in f {
            self.f_max_ratio = self.f_max_ratio.max(n / b);
            self.f_violations += u64::from(n > b);
        }
        for &(n, b) in g {
            self.g_max_ratio = self.g_max_ratio.max(n / b);
            self.g_violations += u64::from(n > b);
        }
    }
}

/// All coupled iterates of one run.
#[derive(Debug, Clone)]
pub struct RunState {
    pub k: u64,
    pub x: DVector<f64>,
    pub theta: Logits,
    pub theta_l: Logits,
    pub v_hat: ValueVector,
    pub v_hat_l: ValueVector,
    pub cursor: usize,
    pub cursor_l: usize,
    pub rng: SimRng,
    /// Environment samples consumed so far.
    pub samples: u64,
    pub bounds: OperatorBounds,
    pub bound_stats: BoundStats,
}

impl RunState {
    /// Uniform policies, zero critics, cursors drawn from `ρ`. `tau_max` sizes
    /// the critic box.
    pub fn new(problem: &BilevelProblem, x0: DVector<f64>, tau_max: f64, seed: u64) -> Result<Self> {
        if x0.len() != problem.dim_x() {
            return Err(Error::Dimension(format!("x0 has {} entries, expected {}", x0.len(), problem.dim_x())));
        }
        let mut x = x0;
        problem.project_x(&mut x);
        let (n, m) = (problem.mdp.num_states(), problem.mdp.num_actions());
        let box_bound = problem.value_box(tau_max);
        let mut rng = SimRng::seed_from_u64(seed);
        let cursor = sample_index(problem.mdp.rho().iter().copied(), &mut rng);
        let cursor_l = sample_index(problem.mdp.rho().iter().copied(), &mut rng);
        Ok(Self {
            k: 0,
            x,
            theta: Logits::zeros(n, m),
            theta_l: Logits::zeros(n, m),
            v_hat: ValueVector::zeros(n, box_bound),
            v_hat_l: ValueVector::zeros(n, box_bound),
            cursor,
            cursor_l,
            rng,
            samples: 0,
            bounds: OperatorBounds::new(problem, tau_max),
            bound_stats: BoundStats::default(),
        })
    }

    pub fn check_finite(&self) -> Result<()> {
        let bad = |name: &str| Err(Error::Divergence { k: self.k, detail: format!("non-finite {name}") });
        if self.x.iter().any(|v| !v.is_finite()) {
            return bad("x");
        }
        if self.theta.iter().any(|v| !v.is_finite()) {
            return bad("theta");
        }
        if self.theta_l.iter().any(|v| !v.is_finite()) {
            return bad("theta_L");
        }
        if self.v_hat.values.iter().chain(self.v_hat_l.values.iter()).any(|v| !v.is_finite()) {
            return bad("value estimate");
        }
        Ok(())
    }
}

/// Index drawn from unnormalized-safe probability weights summing to one.
pub(crate) fn sample_index(weights: impl Iterator<Item = f64>, rng: &mut SimRng) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    let mut last = 0;
    for (i, p) in weights.enumerate() {
        if p <= 0.0 {
            continue;
        }
        acc += p;
        last = i;
        if u < acc {
            return i;
        }
    }
    // Roundoff left `u` above the cumulative sum.
    last
}

/// One step of a γ-restart trajectory: `a ~ π(·|s)`, `s' ~ P(·|s,a)`, then the
/// cursor restarts from `ρ` with probability `1-γ` or moves to `s'`.
/// Returns the transition and the new cursor.
pub fn advance_trajectory(mdp: &TabularMdp, pi: &PolicyTable, cursor: usize, rng: &mut SimRng) -> (Transition, usize) {
    let s = cursor;
    let a = sample_index(pi.row(s).iter().copied(), rng);
    let next = draw_next(mdp, s, a, rng);
    let restart = rng.gen::<f64>() < 1.0 - mdp.gamma();
    let new_cursor = if restart { sample_index(mdp.rho().iter().copied(), rng) } else { next };
    (Transition { s, a, next }, new_cursor)
}

fn draw_next(mdp: &TabularMdp, s: usize, a: usize, rng: &mut SimRng) -> usize {
    let succ = mdp.successors(s, a);
    if succ.len() == 1 {
        return succ[0].0;
    }
    succ[sample_index(succ.iter().map(|&(_, p)| p), rng)].0
}

/// `s ~ d_ρ^π`, `a ~ π(·|s)`, `s' ~ P(·|s,a)`.
pub fn iid_sample(mdp: &TabularMdp, pi: &PolicyTable, rng: &mut SimRng) -> Result<Transition> {
    let d = discounted_visitation(mdp, pi)?;
    let s = sample_index(d.iter().copied(), rng);
    let a = sample_index(pi.row(s).iter().copied(), rng);
    let next = draw_next(mdp, s, a, rng);
    Ok(Transition { s, a, next })
}

/// Draws one transition for a trajectory and advances its cursor.
pub(crate) fn draw_transition(
    mdp: &TabularMdp,
    pi: &PolicyTable,
    cursor: &mut usize,
    rng: &mut SimRng,
    opts: &StepOptions,
) -> Result<Transition> {
    match opts.mode {
        SamplingMode::Markovian => {
            let (mut t, new_cursor) = advance_trajectory(mdp, pi, *cursor, rng);
            if opts.td_target_uses_restart {
                t.next = new_cursor;
            }
            *cursor = new_cursor;
            Ok(t)
        }
        SamplingMode::Iid => iid_sample(mdp, pi, rng),
    }
}

/// Actor and critic updates for one policy at frozen `x`. Returns the sampled
/// `F` norm and `G` value so callers can check bounds.
#[allow(clippy::too_many_arguments)]
pub(crate) fn actor_critic_update(
    problem: &BilevelProblem,
    x: &DVector<f64>,
    theta: &mut Logits,
    v_hat: &mut ValueVector,
    pi: &PolicyTable,
    t: Transition,
    upper_grad_pi: &nalgebra::DMatrix<f64>,
    w: f64,
    sizes: &StepSizes,
    opts: &StepOptions,
) -> (f64, f64) {
    let f = sample_f_with_policy(problem, x, pi, &v_hat.values, t, upper_grad_pi, w, sizes.tau, opts.operators);
    let g = td_error(problem, x, pi, &v_hat.values, t, sizes.tau);
    *theta += &f * sizes.alpha;
    v_hat.values[t.s] += sizes.beta * g;
    v_hat.project();
    (f.norm(), g.abs())
}

/// Fast-iterate part of one iteration: draws both transitions and `ξ`, updates
/// `θ, θ^L, V̂, V̂^L` and returns the `D` sample built from iteration-`k`
/// values. Leaves `x` and `k` untouched.
pub fn fast_step(
    state: &mut RunState,
    problem: &BilevelProblem,
    sizes: &StepSizes,
    opts: &StepOptions,
) -> Result<DVector<f64>> {
    let mdp = &problem.mdp;
    let pi = softmax(&state.theta)?;
    let pi_l = softmax(&state.theta_l)?;
    let t = draw_transition(mdp, &pi, &mut state.cursor, &mut state.rng, opts)?;
    let t_l = draw_transition(mdp, &pi_l, &mut state.cursor_l, &mut state.rng, opts)?;
    let xi = problem.upper.sample_grad(&state.x, &pi_l, &mut state.rng);
    state.samples += 2;

    let d = sample_d(problem, &state.x, t, t_l, &xi.x, sizes.w)?;
    let zero = nalgebra::DMatrix::zeros(0, 0);
    let (f0, g0) =
        actor_critic_update(problem, &state.x, &mut state.theta, &mut state.v_hat, &pi, t, &zero, 0.0, sizes, opts);
    let (fl, gl) = actor_critic_update(
        problem,
        &state.x,
        &mut state.theta_l,
        &mut state.v_hat_l,
        &pi_l,
        t_l,
        &xi.pi,
        sizes.w,
        sizes,
        opts,
    );
    let b = &state.bounds;
    state.bound_stats.record(
        Some((d.norm(), b.d(sizes.w))),
        &[(f0, b.f(0.0, sizes.tau)), (fl, b.f(sizes.w, sizes.tau))],
        &[(g0, b.g(sizes.tau)), (gl, b.g(sizes.tau))],
    );
    Ok(d)
}

/// One full iteration of the proposed algorithm.
pub fn step(state: &mut RunState, problem: &BilevelProblem, schedules: &ScheduleSet, opts: &StepOptions) -> Result<()> {
    let sizes = schedules.at(state.k);
    let d = fast_step(state, problem, &sizes, opts)?;
    state.x.axpy(-sizes.zeta, &d, 1.0);
    problem.project_x(&mut state.x);
    finish_iteration(state, opts)
}

pub(crate) fn finish_iteration(state: &mut RunState, opts: &StepOptions) -> Result<()> {
    state.k += 1;
    state.check_finite()?;
    if opts.recenter_every > 0 && state.k % opts.recenter_every == 0 {
        recenter(&mut state.theta);
        recenter(&mut state.theta_l);
    }
    Ok(())
}

/// Which algorithm drives the outer loop.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Algorithm {
    Proposed,
    PartialSgd,
    /// Simultaneous-perturbation finite differences around inner actor-critic solves.
    FiniteDifference { inner_iters: u64, fd_epsilon: f64 },
    /// `inner_iters` fast iterations at frozen `x` per upper-level step.
    NestedLoop { inner_iters: u64 },
}

impl Algorithm {
    pub fn validate(&self) -> Result<()> {
        match *self {
            Algorithm::FiniteDifference { inner_iters, fd_epsilon } => {
                if inner_iters == 0 || !(fd_epsilon > 0.0) {
                    return Err(Error::InvalidArgument("finite difference needs inner_iters >= 1 and fd_epsilon > 0".into()));
                }
            }
            Algorithm::NestedLoop { inner_iters } if inner_iters == 0 => {
                return Err(Error::InvalidArgument("nested loop needs inner_iters >= 1".into()));
            }
            _ => {}
        }
        Ok(())
    }
}

/// Which iterations get a trace record.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Cadence {
    /// `k = 0` and every `k = ⌈ratio^m⌉`.
    Geometric { ratio: f64 },
    /// Every `n`-th iteration.
    Every(u64),
}

impl Default for Cadence {
    fn default() -> Self {
        Cadence::Geometric { ratio: 1.2 }
    }
}

impl Cadence {
    /// Smallest checkpoint strictly after `k`.
    pub fn next_after(&self, k: u64) -> u64 {
        match *self {
            Cadence::Every(n) => (k / n.max(1) + 1) * n.max(1),
            Cadence::Geometric { ratio } => {
                let mut p = 1.0f64;
                loop {
                    let c = p.ceil() as u64;
                    if c > k {
                        return c;
                    }
                    p *= ratio;
                }
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            Cadence::Geometric { ratio } if !(ratio > 1.0) => {
                Err(Error::InvalidArgument(format!("geometric cadence ratio {ratio} must exceed 1")))
            }
            Cadence::Every(0) => Err(Error::InvalidArgument("checkpoint interval must be positive".into())),
            _ => Ok(()),
        }
    }
}

/// Which oracle metrics to compute at checkpoints.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MetricOptions {
    pub phi: bool,
    /// `‖∇Φ_{τ_k}(x_k)‖` by finite differences at the current `τ_k`.
    pub grad_norm: bool,
    pub residuals: bool,
}

impl Default for MetricOptions {
    fn default() -> Self {
        Self { phi: true, grad_norm: false, residuals: false }
    }
}

/// Everything one run needs besides the problem.
#[derive(Debug, Clone)]
pub struct RunSpec {
    pub algorithm: Algorithm,
    pub schedules: ScheduleSet,
    pub strict: bool,
    pub step: StepOptions,
    /// Upper-level iterations.
    pub iterations: u64,
    /// Stop early once this many environment samples are consumed.
    pub sample_budget: Option<u64>,
    pub cadence: Cadence,
    pub metrics: MetricOptions,
    pub oracle: OracleConfig,
    pub seed: u64,
    pub x0: DVector<f64>,
}

impl RunSpec {
    pub fn validate(&self) -> Result<()> {
        self.schedules.validate(self.strict)?;
        self.algorithm.validate()?;
        self.cadence.validate()?;
        self.oracle.validate()
    }

    /// Critic box size: covers every `τ_k` and never drops below `τ = 1`.
    pub fn tau_max(&self) -> f64 {
        self.schedules.tau_max().max(1.0)
    }
}

/// One checkpoint of a run. Metrics that were not requested are NaN.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceRecord {
    pub k: u64,
    pub samples: u64,
    pub phi: f64,
    pub grad_norm: f64,
    pub residuals: Residuals,
    pub x: DVector<f64>,
    pub sizes: StepSizes,
}

/// Records of a run, plus the error that stopped it early, if any.
#[derive(Debug)]
pub struct RunOutput {
    pub records: Vec<TraceRecord>,
    pub failure: Option<Error>,
    pub state: RunState,
}

fn nan_residuals() -> Residuals {
    Residuals { eps_theta: f64::NAN, eps_theta_l: f64::NAN, eps_v: f64::NAN, eps_v_l: f64::NAN }
}

/// Oracle metrics at the current state.
pub fn checkpoint(problem: &BilevelProblem, state: &RunState, spec: &RunSpec) -> Result<TraceRecord> {
    let sizes = spec.schedules.at(state.k);
    let phi = if spec.metrics.phi { phi_exact(problem, &state.x, &spec.oracle)? } else { f64::NAN };
    let grad_norm = if spec.metrics.grad_norm {
        fd_hypergrad_phi_tau(problem, &state.x, sizes.tau, &spec.oracle)?.norm()
    } else {
        f64::NAN
    };
    let residuals = if spec.metrics.residuals {
        lyapunov_residuals(
            problem,
            FastIterates {
                theta: &state.theta,
                theta_l: &state.theta_l,
                v_hat: &state.v_hat.values,
                v_hat_l: &state.v_hat_l.values,
            },
            &state.x,
            sizes.w,
            sizes.tau,
            &spec.oracle,
        )?
    } else {
        nan_residuals()
    };
    Ok(TraceRecord { k: state.k, samples: state.samples, phi, grad_norm, residuals, x: state.x.clone(), sizes })
}

/// Runs `spec.algorithm` from a fresh state.
pub fn run(problem: &BilevelProblem, spec: &RunSpec) -> Result<RunOutput> {
    run_with_observer(problem, spec, |_| {})
}

/// [`run`], calling `observe` after every upper-level iteration.
pub fn run_with_observer(
    problem: &BilevelProblem,
    spec: &RunSpec,
    mut observe: impl FnMut(&RunState),
) -> Result<RunOutput> {
    spec.validate()?;
    let mut state = RunState::new(problem, spec.x0.clone(), spec.tau_max(), spec.seed)?;
    let mut records = vec![checkpoint(problem, &state, spec)?];
    let mut next = spec.cadence.next_after(0);
    let mut failure = None;
    while state.k < spec.iterations && spec.sample_budget.map_or(true, |b| state.samples < b) {
        let outcome = match spec.algorithm {
            Algorithm::Proposed => step(&mut state, problem, &spec.schedules, &spec.step),
            Algorithm::PartialSgd => baselines::partial_sgd_step(&mut state, problem, &spec.schedules, &spec.step),
            Algorithm::FiniteDifference { inner_iters, fd_epsilon } => {
                let cfg = baselines::FiniteDifferenceConfig { inner_iters, fd_epsilon };
                baselines::finite_difference_bilevel_step(&mut state, problem, &spec.schedules, &spec.step, &cfg)
            }
            Algorithm::NestedLoop { inner_iters } => {
                baselines::nested_loop_step(&mut state, problem, &spec.schedules, &spec.step, inner_iters)
            }
        };
        if let Err(e) = outcome {
            failure = Some(e);
            break;
        }
        observe(&state);
        let done = state.k >= spec.iterations || spec.sample_budget.is_some_and(|b| state.samples >= b);
        if state.k >= next || done {
            match checkpoint(problem, &state, spec) {
                Ok(r) => records.push(r),
                Err(e) => {
                    failure = Some(e);
                    break;
                }
            }
            next = spec.cadence.next_after(state.k);
        }
    }
    Ok(RunOutput { records, failure, state })
}
