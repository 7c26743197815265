//! Run configuration: flat `key = value` lines grouped by `[section]`.
//!
//! Keys before the first section header belong to `[run]`. `#` starts a
//! comment. Overrides and sweep axes name keys as `section.key`. Every key is
//! checked against the known set; unknown keys and malformed values are
//! errors carrying the line number (line 0 marks command-line overrides).

use std::path::Path;

use nalgebra::DVector;
use rand::SeedableRng;

use crate::actor_critic::{Algorithm, Cadence, MetricOptions, RunSpec, SamplingMode, StepOptions};
use crate::env::{GridWorldSpec, PreferenceProblemSpec};
use crate::error::{Error, Result};
use crate::objective::BilevelProblem;
use crate::operators::OperatorOptions;
use crate::oracles::OracleConfig;
use crate::schedule::ScheduleSet;
use crate::SimRng;

pub const SECTIONS: [&str; 7] = ["run", "schedule", "oracle", "gridworld", "preference", "sweep", "sweep_phi"];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EnvironmentKind {
    GridWorld,
    Preference,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AlgorithmKind {
    Proposed,
    ProposedFixedTau,
    PartialSgd,
    FiniteDifference,
    NestedLoop,
}

impl AlgorithmKind {
    pub fn name(&self) -> &'static str {
        match self {
            AlgorithmKind::Proposed => "proposed",
            AlgorithmKind::ProposedFixedTau => "proposed_fixed_tau",
            AlgorithmKind::PartialSgd => "partial_sgd",
            AlgorithmKind::FiniteDifference => "finite_difference",
            AlgorithmKind::NestedLoop => "nested_loop",
        }
    }
}

/// Preference instance generated by [`PreferenceProblemSpec::chain`].
#[derive(Debug, Clone, PartialEq)]
pub struct PreferenceConfig {
    pub num_states: usize,
    pub num_actions: usize,
    pub gamma: f64,
    pub slip: f64,
    pub trajectory_len: usize,
    pub pairs_per_eval: usize,
    pub reward_bound: f64,
    /// Seed for the hidden scorer, separate from the run seed.
    pub instance_seed: u64,
}

impl Default for PreferenceConfig {
    fn default() -> Self {
        Self {
            num_states: 4,
            num_actions: 2,
            gamma: 0.9,
            slip: 0.1,
            trajectory_len: 3,
            pairs_per_eval: 8,
            reward_bound: 2.0,
            instance_seed: 0,
        }
    }
}

impl PreferenceConfig {
    pub fn spec(&self) -> Result<PreferenceProblemSpec> {
        let mut rng = SimRng::seed_from_u64(self.instance_seed);
        let mut spec = PreferenceProblemSpec::chain(
            self.num_states,
            self.num_actions,
            self.gamma,
            self.slip,
            self.trajectory_len,
            &mut rng,
        )?;
        spec.pairs_per_eval = self.pairs_per_eval;
        spec.reward_bound = self.reward_bound;
        Ok(spec)
    }
}

/// Schedule keys as written; exponents left unset take the preset's value.
#[derive(Debug, Clone, PartialEq)]
pub struct ScheduleConfig {
    pub zeta0: f64,
    pub alpha0: f64,
    pub beta0: f64,
    pub w0: f64,
    pub tau0: f64,
    /// `τ` used by `proposed_fixed_tau`; defaults to `tau0`.
    pub fixed_tau: Option<f64>,
    pub c_zeta: Option<f64>,
    pub c_alpha: Option<f64>,
    pub c_beta: Option<f64>,
    pub c_w: Option<f64>,
    pub c_tau: Option<f64>,
    pub strict: bool,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            zeta0: 0.03,
            alpha0: 0.01,
            beta0: 0.1,
            w0: 4.0,
            tau0: 1.0,
            fixed_tau: None,
            c_zeta: None,
            c_alpha: None,
            c_beta: None,
            c_w: None,
            c_tau: None,
            strict: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub environment: EnvironmentKind,
    pub algorithm: AlgorithmKind,
    pub iterations: u64,
    pub sample_budget: Option<u64>,
    pub seed: u64,
    pub cadence: Cadence,
    pub mode: SamplingMode,
    pub metrics: MetricOptions,
    pub td_target_uses_restart: bool,
    pub td_baseline: bool,
    pub literal_entropy_bonus: bool,
    pub recenter_every: u64,
    pub inner_iters: u64,
    /// Perturbation size relative to the widest `x` box side (1 if unbounded).
    pub fd_epsilon: f64,
    pub x0: Option<Vec<f64>>,
    pub schedule: ScheduleConfig,
    pub oracle: OracleConfig,
    pub gridworld: GridWorldSpec,
    pub preference: PreferenceConfig,
    /// Sweep axes `(section.key, values)` in file order.
    pub sweep_axes: Vec<(String, Vec<String>)>,
    pub sweep_seeds: Vec<u64>,
    /// Lattice spacing for `sweep-phi`.
    pub sweep_phi_step: f64,
    /// Regularization weight for `sweep-phi`; defaults to `oracle.phi_eval_tau`.
    pub sweep_phi_tau: Option<f64>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            environment: EnvironmentKind::GridWorld,
            algorithm: AlgorithmKind::Proposed,
            iterations: 100_000,
            sample_budget: None,
            seed: 0,
            cadence: Cadence::default(),
            mode: SamplingMode::Markovian,
            metrics: MetricOptions::default(),
            td_target_uses_restart: false,
            td_baseline: true,
            literal_entropy_bonus: false,
            recenter_every: 10_000,
            inner_iters: 2000,
            fd_epsilon: 0.05,
            x0: None,
            schedule: ScheduleConfig::default(),
            oracle: OracleConfig::default(),
            gridworld: GridWorldSpec::default(),
            preference: PreferenceConfig::default(),
            sweep_axes: Vec::new(),
            sweep_seeds: Vec::new(),
            sweep_phi_step: 1.0,
            sweep_phi_tau: None,
        }
    }
}

fn err(line: usize, key: &str, msg: impl Into<String>) -> Error {
    Error::Config { line, key: key.to_string(), msg: msg.into() }
}

fn parse_num<T: std::str::FromStr>(v: &str) -> std::result::Result<T, String> {
    v.parse::<T>().map_err(|_| format!("cannot parse `{v}`"))
}

fn parse_bool(v: &str) -> std::result::Result<bool, String> {
    match v {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(format!("expected true or false, got `{v}`")),
    }
}

fn parse_list(v: &str) -> Vec<String> {
    v.split(',').map(|s| s.trim().to_string()).filter(|s| !s.is_empty()).collect()
}

/// Seeds as a comma list, or a half-open range `a..b`.
pub fn parse_seeds(v: &str) -> std::result::Result<Vec<u64>, String> {
    if let Some((a, b)) = v.split_once("..") {
        let (a, b): (u64, u64) = (parse_num(a.trim())?, parse_num(b.trim())?);
        if a >= b {
            return Err(format!("empty seed range `{v}`"));
        }
        return Ok((a..b).collect());
    }
    parse_list(v).iter().map(|s| parse_num(s)).collect()
}

fn parse_cadence(v: &str) -> std::result::Result<Cadence, String> {
    let (kind, arg) = v.split_once(':').ok_or_else(|| format!("expected geometric:<ratio> or every:<n>, got `{v}`"))?;
    let c = match kind.trim() {
        "geometric" => Cadence::Geometric { ratio: parse_num(arg.trim())? },
        "every" => Cadence::Every(parse_num(arg.trim())?),
        other => return Err(format!("unknown cadence `{other}`")),
    };
    c.validate().map_err(|e| e.to_string())?;
    Ok(c)
}

fn parse_metrics(v: &str) -> std::result::Result<MetricOptions, String> {
    let mut m = MetricOptions { phi: false, grad_norm: false, residuals: false };
    for item in parse_list(v) {
        match item.as_str() {
            "phi" => m.phi = true,
            "grad_norm" => m.grad_norm = true,
            "residuals" => m.residuals = true,
            "none" => {}
            other => return Err(format!("unknown metric `{other}`")),
        }
    }
    Ok(m)
}

impl RunConfig {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let mut section = "run".to_string();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            if let Some(rest) = content.strip_prefix('[') {
                let name = rest
                    .strip_suffix(']')
                    .ok_or_else(|| err(line, content, "unterminated section header"))?
                    .trim();
                if !SECTIONS.contains(&name) {
                    return Err(err(line, name, format!("unknown section; expected one of {SECTIONS:?}")));
                }
                section = name.to_string();
                continue;
            }
            let (key, value) = content
                .split_once('=')
                .ok_or_else(|| err(line, content, "expected `key = value`"))?;
            cfg.set(&section, key.trim(), value.trim(), line)?;
        }
        cfg.check_sweep_axes()?;
        Ok(cfg)
    }

    /// Applies `section.key=value` (bare keys go to `[run]`).
    pub fn apply_override(&mut self, assignment: &str) -> Result<()> {
        let (key, value) = assignment
            .split_once('=')
            .ok_or_else(|| err(0, assignment, "override must be `key=value`"))?;
        let (section, key) = split_key(key.trim());
        self.set(section, key, value.trim(), 0)
    }

    fn check_sweep_axes(&self) -> Result<()> {
        for (key, values) in &self.sweep_axes {
            for v in values {
                let mut probe = self.clone();
                let (section, k) = split_key(key);
                if section == "sweep" {
                    return Err(err(0, key, "sweep axes cannot name sweep keys"));
                }
                probe.set(section, k, v, 0)?;
            }
        }
        Ok(())
    }

    /// Sets one key; `line` is used only for diagnostics.
    pub fn set(&mut self, section: &str, key: &str, value: &str, line: usize) -> Result<()> {
        let full = format!("{section}.{key}");
        let wrap = |r: std::result::Result<(), String>| r.map_err(|m| err(line, &full, m));
        match section {
            "run" => wrap(self.set_run(key, value)),
            "schedule" => wrap(self.set_schedule(key, value)),
            "oracle" => wrap(self.set_oracle(key, value)),
            "gridworld" => wrap(self.set_gridworld(key, value)),
            "preference" => wrap(self.set_preference(key, value)),
            "sweep_phi" => wrap(match key {
                "step" => parse_num(value).map(|v| self.sweep_phi_step = v),
                "tau" => parse_num(value).map(|v| self.sweep_phi_tau = Some(v)),
                _ => Err("unknown key".into()),
            }),
            "sweep" => {
                if key == "seeds" {
                    return wrap(parse_seeds(value).map(|s| self.sweep_seeds = s));
                }
                let (s, _) = split_key(key);
                if !key.contains('.') || !SECTIONS.contains(&s) {
                    return Err(err(line, &full, "sweep axes are written `section.key = v1, v2, ...`"));
                }
                let values = parse_list(value);
                if values.is_empty() {
                    return Err(err(line, &full, "sweep axis has no values"));
                }
                self.sweep_axes.retain(|(k, _)| k != key);
                self.sweep_axes.push((key.to_string(), values));
                Ok(())
            }
            _ => Err(err(line, &full, format!("unknown section; expected one of {SECTIONS:?}"))),
        }
    }

    fn set_run(&mut self, key: &str, v: &str) -> std::result::Result<(), String> {
        match key {
            "environment" => {
                self.environment = match v {
                    "gridworld" => EnvironmentKind::GridWorld,
                    "preference" => EnvironmentKind::Preference,
                    _ => return Err(format!("unknown environment `{v}`")),
                }
            }
            "algorithm" => {
                self.algorithm = match v {
                    "proposed" => AlgorithmKind::Proposed,
                    "proposed_fixed_tau" => AlgorithmKind::ProposedFixedTau,
                    "partial_sgd" => AlgorithmKind::PartialSgd,
                    "finite_difference" => AlgorithmKind::FiniteDifference,
                    "nested_loop" => AlgorithmKind::NestedLoop,
                    _ => return Err(format!("unknown algorithm `{v}`")),
                }
            }
            "iterations" => self.iterations = parse_num(v)?,
            "sample_budget" => {
                self.sample_budget = if v == "none" { None } else { Some(parse_num(v)?) };
            }
            "seed" => self.seed = parse_num(v)?,
            "cadence" => self.cadence = parse_cadence(v)?,
            "mode" => {
                self.mode = match v {
                    "markovian" => SamplingMode::Markovian,
                    "iid" => SamplingMode::Iid,
                    _ => return Err(format!("unknown mode `{v}`")),
                }
            }
            "metrics" => self.metrics = parse_metrics(v)?,
            "td_target_uses_restart" => self.td_target_uses_restart = parse_bool(v)?,
            "td_baseline" => self.td_baseline = parse_bool(v)?,
            "literal_entropy_bonus" => self.literal_entropy_bonus = parse_bool(v)?,
            "recenter_every" => self.recenter_every = parse_num(v)?,
            "inner_iters" => self.inner_iters = parse_num(v)?,
            "fd_epsilon" => self.fd_epsilon = parse_num(v)?,
            "x0" => self.x0 = Some(parse_list(v).iter().map(|s| parse_num(s)).collect::<std::result::Result<_, _>>()?),
            _ => return Err("unknown key".into()),
        }
        Ok(())
    }

    fn set_schedule(&mut self, key: &str, v: &str) -> std::result::Result<(), String> {
        let s = &mut self.schedule;
        match key {
            "zeta0" => s.zeta0 = parse_num(v)?,
            "alpha0" => s.alpha0 = parse_num(v)?,
            "beta0" => s.beta0 = parse_num(v)?,
            "w0" => s.w0 = parse_num(v)?,
            "tau0" => s.tau0 = parse_num(v)?,
            "fixed_tau" => s.fixed_tau = Some(parse_num(v)?),
            "c_zeta" => s.c_zeta = Some(parse_num(v)?),
            "c_alpha" => s.c_alpha = Some(parse_num(v)?),
            "c_beta" => s.c_beta = Some(parse_num(v)?),
            "c_w" => s.c_w = Some(parse_num(v)?),
            "c_tau" => s.c_tau = Some(parse_num(v)?),
            "strict" => s.strict = parse_bool(v)?,
            _ => return Err("unknown key".into()),
        }
        Ok(())
    }

    fn set_oracle(&mut self, key: &str, v: &str) -> std::result::Result<(), String> {
        let o = &mut self.oracle;
        match key {
            "svi_tol" => o.svi_tol = parse_num(v)?,
            "svi_max_iter" => o.svi_max_iter = parse_num(v)?,
            "gd_tol" => o.gd_tol = parse_num(v)?,
            "gd_max_iter" => o.gd_max_iter = parse_num(v)?,
            "fd_step" => o.fd_step = parse_num(v)?,
            "phi_eval_tau" => o.phi_eval_tau = parse_num(v)?,
            "phi_refine_tol" => o.phi_refine_tol = parse_num(v)?,
            _ => return Err("unknown key".into()),
        }
        Ok(())
    }

    fn set_gridworld(&mut self, key: &str, v: &str) -> std::result::Result<(), String> {
        let g = &mut self.gridworld;
        match key {
            "width" => g.width = parse_num(v)?,
            "height" => g.height = parse_num(v)?,
            "gamma" => g.gamma = parse_num(v)?,
            "lambda" => g.lambda = parse_num(v)?,
            "normalize_reward" => g.normalize_reward = parse_bool(v)?,
            "center" => {
                let c: Vec<f64> = parse_list(v).iter().map(|s| parse_num(s)).collect::<std::result::Result<_, _>>()?;
                if c.len() != 2 {
                    return Err("center takes two coordinates".into());
                }
                g.center = Some((c[0], c[1]));
            }
            _ => return Err("unknown key".into()),
        }
        Ok(())
    }

    fn set_preference(&mut self, key: &str, v: &str) -> std::result::Result<(), String> {
        let p = &mut self.preference;
        match key {
            "num_states" => p.num_states = parse_num(v)?,
            "num_actions" => p.num_actions = parse_num(v)?,
            "gamma" => p.gamma = parse_num(v)?,
            "slip" => p.slip = parse_num(v)?,
            "trajectory_len" => p.trajectory_len = parse_num(v)?,
            "pairs_per_eval" => p.pairs_per_eval = parse_num(v)?,
            "reward_bound" => p.reward_bound = parse_num(v)?,
            "instance_seed" => p.instance_seed = parse_num(v)?,
            _ => return Err("unknown key".into()),
        }
        Ok(())
    }

    pub fn schedules(&self) -> ScheduleSet {
        let s = &self.schedule;
        let fixed = self.algorithm == AlgorithmKind::ProposedFixedTau;
        let tau0 = if fixed { s.fixed_tau.unwrap_or(s.tau0) } else { s.tau0 };
        let mut set = ScheduleSet::decaying(s.zeta0, s.alpha0, s.beta0, s.w0, tau0);
        let apply = |dst: &mut f64, src: Option<f64>| {
            if let Some(v) = src {
                *dst = v;
            }
        };
        apply(&mut set.c_zeta, s.c_zeta);
        apply(&mut set.c_alpha, s.c_alpha);
        apply(&mut set.c_beta, s.c_beta);
        apply(&mut set.c_w, s.c_w);
        if fixed {
            set.c_tau = 0.0;
        } else {
            apply(&mut set.c_tau, s.c_tau);
        }
        set
    }

    pub fn build_problem(&self) -> Result<BilevelProblem> {
        match self.environment {
            EnvironmentKind::GridWorld => self.gridworld.build(),
            EnvironmentKind::Preference => self.preference.spec()?.build(),
        }
    }

    fn default_x0(&self) -> Result<DVector<f64>> {
        Ok(match self.environment {
            EnvironmentKind::GridWorld => self.gridworld.default_x0(),
            EnvironmentKind::Preference => self.preference.spec()?.default_x0(),
        })
    }

    pub fn algorithm(&self, problem: &BilevelProblem) -> Algorithm {
        match self.algorithm {
            AlgorithmKind::Proposed | AlgorithmKind::ProposedFixedTau => Algorithm::Proposed,
            AlgorithmKind::PartialSgd => Algorithm::PartialSgd,
            AlgorithmKind::FiniteDifference => {
                let scale = problem
                    .x_bounds
                    .as_ref()
                    .map(|b| b.iter().map(|(lo, hi)| hi - lo).fold(0.0, f64::max))
                    .filter(|s| *s > 0.0)
                    .unwrap_or(1.0);
                Algorithm::FiniteDifference { inner_iters: self.inner_iters, fd_epsilon: self.fd_epsilon * scale }
            }
            AlgorithmKind::NestedLoop => Algorithm::NestedLoop { inner_iters: self.inner_iters },
        }
    }

    /// Builds the problem and run specification, validating every key.
    pub fn resolve(&self) -> Result<(BilevelProblem, RunSpec)> {
        let problem = self.build_problem()?;
        let x0 = match &self.x0 {
            Some(v) => {
                if v.len() != problem.dim_x() {
                    return Err(err(0, "run.x0", format!("expected {} coordinates, got {}", problem.dim_x(), v.len())));
                }
                DVector::from_vec(v.clone())
            }
            None => self.default_x0()?,
        };
        let spec = RunSpec {
            algorithm: self.algorithm(&problem),
            schedules: self.schedules(),
            strict: self.schedule.strict,
            step: StepOptions {
                mode: self.mode,
                operators: OperatorOptions {
                    td_baseline: self.td_baseline,
                    literal_entropy_bonus: self.literal_entropy_bonus,
                },
                td_target_uses_restart: self.td_target_uses_restart,
                recenter_every: self.recenter_every,
            },
            iterations: self.iterations,
            sample_budget: self.sample_budget,
            cadence: self.cadence,
            metrics: self.metrics,
            oracle: self.oracle.clone(),
            seed: self.seed,
            x0,
        };
        spec.validate()?;
        Ok((problem, spec))
    }
}

/// `section.key` → `(section, key)`; bare keys belong to `run`.
pub fn split_key(key: &str) -> (&str, &str) {
    match key.split_once('.') {
        Some((s, k)) => (s, k),
        None => ("run", key),
    }
}
