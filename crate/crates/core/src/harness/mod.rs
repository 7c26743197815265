//! Experiment harness: configuration, single runs, sweeps, `Φ` lattice sweeps
//! and the verification suite.

pub mod config;
pub mod sweep;
pub mod trace;
pub mod verify;

use std::fs;
use std::path::Path;

use nalgebra::DVector;
use rayon::prelude::*;

use crate::actor_critic::{run, TraceRecord};
use crate::error::{Error, Result};
use crate::objective::BilevelProblem;
use crate::oracles::{phi_tau, OracleConfig};

pub use config::RunConfig;

/// Records of one run plus the error that stopped it early, if any.
#[derive(Debug)]
pub struct RunResult {
    pub dim_x: usize,
    pub records: Vec<TraceRecord>,
    pub failure: Option<Error>,
}

pub fn execute(cfg: &RunConfig) -> Result<RunResult> {
    let (problem, spec) = cfg.resolve()?;
    let out = run(&problem, &spec)?;
    Ok(RunResult { dim_x: problem.dim_x(), records: out.records, failure: out.failure })
}

/// Writes `text` to `path` through a temporary sibling, so readers never see
/// a partial file.
pub fn write_atomic(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, text)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

/// Runs `cfg` and writes its trace to `path`. The trace is written even when
/// the run stops early; the failure is returned alongside it.
pub fn run_to_file(cfg: &RunConfig, path: &Path) -> Result<RunResult> {
    let result = execute(cfg)?;
    write_atomic(path, &trace::trace_to_string(result.dim_x, &result.records)?)?;
    Ok(result)
}

/// `Φ` evaluated on a lattice of goals.
#[derive(Debug, Clone)]
pub struct PhiSweep {
    pub points: Vec<(DVector<f64>, f64)>,
}

impl PhiSweep {
    /// First lattice point attaining the minimum.
    pub fn argmin(&self) -> Option<&(DVector<f64>, f64)> {
        self.points.iter().fold(None, |best: Option<&(DVector<f64>, f64)>, p| match best {
            Some(b) if b.1 <= p.1 => Some(b),
            _ => Some(p),
        })
    }

    pub fn to_csv(&self) -> String {
        let d = self.points.first().map_or(0, |p| p.0.len());
        let mut out: Vec<String> = (0..d).map(|i| format!("x_{i}")).collect();
        out.push("phi".into());
        let mut text = out.join(",") + "\n";
        for (x, v) in &self.points {
            let mut row: Vec<String> = x.iter().map(|&c| trace::format_real(c)).collect();
            row.push(trace::format_real(*v));
            text += &(row.join(",") + "\n");
        }
        text
    }
}

pub const PHI_SWEEP_LIMIT: usize = 1_000_000;

/// Every point of the `x` box on a lattice of spacing `step`, ordered with the
/// last coordinate fastest.
pub fn lattice_points(problem: &BilevelProblem, step: f64) -> Result<Vec<DVector<f64>>> {
    let bounds = problem
        .x_bounds
        .as_ref()
        .ok_or_else(|| Error::InvalidArgument("a lattice sweep needs a bounded x".into()))?;
    if !(step > 0.0 && step.is_finite()) {
        return Err(Error::InvalidArgument(format!("lattice step {step} must be positive")));
    }
    let axes: Vec<Vec<f64>> = bounds
        .iter()
        .map(|&(lo, hi)| {
            let n = ((hi - lo) / step + 1e-9).floor() as usize;
            (0..=n).map(|i| lo + i as f64 * step).collect()
        })
        .collect();
    let total = axes.iter().try_fold(1usize, |acc, a| acc.checked_mul(a.len())).unwrap_or(usize::MAX);
    if total > PHI_SWEEP_LIMIT {
        return Err(Error::EnumerationTooLarge { size: total, limit: PHI_SWEEP_LIMIT });
    }
    let mut points = vec![Vec::new()];
    for axis in &axes {
        points = points
            .into_iter()
            .flat_map(|p| axis.iter().map(move |&v| [p.clone(), vec![v]].concat()))
            .collect();
    }
    Ok(points.into_iter().map(DVector::from_vec).collect())
}

/// `Φ_τ` on the lattice, evaluated in parallel; order follows [`lattice_points`].
pub fn sweep_phi(problem: &BilevelProblem, step: f64, tau: f64, oracle: &OracleConfig) -> Result<PhiSweep> {
    let points = lattice_points(problem, step)?;
    let values = points
        .par_iter()
        .map(|x| phi_tau(problem, x, tau, oracle))
        .collect::<Result<Vec<f64>>>()?;
    Ok(PhiSweep { points: points.into_iter().zip(values).collect() })
}

/// [`sweep_phi`] with the keys of `cfg`.
pub fn sweep_phi_from_config(cfg: &RunConfig) -> Result<PhiSweep> {
    let problem = cfg.build_problem()?;
    cfg.oracle.validate()?;
    let tau = cfg.sweep_phi_tau.unwrap_or(cfg.oracle.phi_eval_tau);
    sweep_phi(&problem, cfg.sweep_phi_step, tau, &cfg.oracle)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::GridWorldSpec;

    #[test]
    fn lattice_covers_the_box() {
        let p = GridWorldSpec { width: 3, height: 2, ..Default::default() }.build().unwrap();
        let pts = lattice_points(&p, 1.0).unwrap();
        assert_eq!(pts.len(), 6);
        assert_eq!(pts[1].as_slice(), &[0.0, 1.0]);
        assert_eq!(lattice_points(&p, 0.5).unwrap().len(), 15);
        assert!(lattice_points(&p, 0.0).is_err());
        assert!(matches!(lattice_points(&p, 1e-4), Err(Error::EnumerationTooLarge { .. })));
    }

    #[test]
    fn argmin_prefers_the_first_minimum() {
        let s = PhiSweep {
            points: vec![
                (DVector::from_vec(vec![0.0]), 2.0),
                (DVector::from_vec(vec![1.0]), -1.0),
                (DVector::from_vec(vec![2.0]), -1.0),
            ],
        };
        assert_eq!(s.argmin().unwrap().0[0], 1.0);
        assert_eq!(s.to_csv().lines().next(), Some("x_0,phi"));
        assert!(PhiSweep { points: vec![] }.argmin().is_none());
    }

    #[test]
    fn run_to_file_writes_header_and_rows() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = RunConfig::default();
        cfg.iterations = 0;
        let path = dir.path().join("t.csv");
        let r = run_to_file(&cfg, &path).unwrap();
        assert!(r.failure.is_none());
        let text = fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().count(), 2);
        assert!(!dir.path().join("t.tmp").exists());
    }
}
