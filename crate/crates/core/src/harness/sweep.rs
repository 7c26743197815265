//! Cartesian sweeps over config keys and seeds.
//!
//! Each cell owns its config, RNG and output file; cells run in parallel on a
//! pool of `jobs` threads. A cell's CSV is moved into place only once it is
//! complete, so an interrupted sweep leaves every finished cell intact. The
//! coordinator writes `index.csv` after all cells return.

use std::path::{Path, PathBuf};

use rayon::prelude::*;

use super::config::{split_key, RunConfig};
use super::{run_to_file, write_atomic};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct SweepCell {
    pub index: usize,
    pub seed: u64,
    /// `(section.key, value)` for every axis.
    pub assignments: Vec<(String, String)>,
    pub file: String,
}

#[derive(Debug, Clone, PartialEq)]
pub enum CellStatus {
    Ok,
    /// The run stopped early; the trace holds the records before the failure.
    Stopped(String),
    Failed(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct CellOutcome {
    pub cell: SweepCell,
    pub status: CellStatus,
    pub final_phi: f64,
}

/// Cells in row-major order over the axes (file order), seeds innermost.
pub fn plan(cfg: &RunConfig) -> Result<Vec<(SweepCell, RunConfig)>> {
    let seeds = if cfg.sweep_seeds.is_empty() { vec![cfg.seed] } else { cfg.sweep_seeds.clone() };
    let mut combos: Vec<Vec<(String, String)>> = vec![Vec::new()];
    for (key, values) in &cfg.sweep_axes {
        combos = combos
            .into_iter()
            .flat_map(|c| values.iter().map(move |v| [c.clone(), vec![(key.clone(), v.clone())]].concat()))
            .collect();
    }
    let mut cells = Vec::new();
    for assignments in combos {
        for &seed in &seeds {
            let mut c = cfg.clone();
            c.sweep_axes.clear();
            c.sweep_seeds.clear();
            for (key, value) in &assignments {
                let (section, k) = split_key(key);
                c.set(section, k, value, 0)?;
            }
            c.seed = seed;
            c.resolve()?;
            let index = cells.len();
            let cell = SweepCell { index, seed, assignments: assignments.clone(), file: format!("cell_{index:04}.csv") };
            cells.push((cell, c));
        }
    }
    Ok(cells)
}

fn run_cell(cell: &SweepCell, cfg: &RunConfig, dir: &Path) -> CellOutcome {
    let (status, final_phi) = match run_to_file(cfg, &dir.join(&cell.file)) {
        Ok(r) => {
            let phi = r.records.last().map_or(f64::NAN, |rec| rec.phi);
            match r.failure {
                None => (CellStatus::Ok, phi),
                Some(e) => (CellStatus::Stopped(e.to_string()), phi),
            }
        }
        Err(e) => (CellStatus::Failed(e.to_string()), f64::NAN),
    };
    CellOutcome { cell: cell.clone(), status, final_phi }
}

fn index_csv(cfg: &RunConfig, outcomes: &[CellOutcome]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut head = vec!["cell".to_string(), "seed".to_string()];
    head.extend(cfg.sweep_axes.iter().map(|(k, _)| k.clone()));
    head.extend(["file", "status", "final_phi"].map(String::from));
    w.write_record(&head).expect("in-memory write");
    for o in outcomes {
        let mut row = vec![o.cell.index.to_string(), o.cell.seed.to_string()];
        row.extend(o.cell.assignments.iter().map(|(_, v)| v.clone()));
        let status = match &o.status {
            CellStatus::Ok => "ok".to_string(),
            CellStatus::Stopped(m) => format!("stopped: {m}"),
            CellStatus::Failed(m) => format!("failed: {m}"),
        };
        row.extend([o.cell.file.clone(), status, super::trace::format_real(o.final_phi)]);
        w.write_record(&row).expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("ASCII index")
}

/// Runs every cell with at most `jobs` in flight and writes `index.csv`.
pub fn run_sweep(cfg: &RunConfig, out_dir: &Path, jobs: usize) -> Result<(PathBuf, Vec<CellOutcome>)> {
    let cells = plan(cfg)?;
    std::fs::create_dir_all(out_dir)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| Error::InvalidArgument(format!("thread pool: {e}")))?;
    let outcomes: Vec<CellOutcome> = pool.install(|| cells.par_iter().map(|(cell, c)| run_cell(cell, c, out_dir)).collect());
    let index = out_dir.join("index.csv");
    write_atomic(&index, &index_csv(cfg, &outcomes))?;
    Ok((index, outcomes))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> RunConfig {
        RunConfig::parse(
            "iterations = 20\ncadence = every:10\n[gridworld]\nwidth = 3\nheight = 3\n[sweep]\nseeds = 1, 2\nschedule.tau0 = 0.5, 1\n",
        )
        .unwrap()
    }

    #[test]
    fn plan_is_the_cartesian_product() {
        let cells = plan(&small()).unwrap();
        assert_eq!(cells.len(), 4);
        assert_eq!(cells[1].0.seed, 2);
        assert_eq!(cells[2].0.assignments, vec![("schedule.tau0".to_string(), "1".to_string())]);
        assert_eq!(cells[2].1.schedule.tau0, 1.0);
        assert_eq!(cells[3].0.file, "cell_0003.csv");
        assert!(cells.iter().all(|(_, c)| c.sweep_axes.is_empty()));
    }

    #[test]
    fn sweep_writes_cells_and_index_independent_of_jobs() {
        let cfg = small();
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let (index, outcomes) = run_sweep(&cfg, a.path(), 1).unwrap();
        run_sweep(&cfg, b.path(), 3).unwrap();
        assert!(outcomes.iter().all(|o| o.status == CellStatus::Ok));
        let text = std::fs::read_to_string(&index).unwrap();
        assert_eq!(text.lines().count(), 5);
        assert!(text.starts_with("cell,seed,schedule.tau0,file,status,final_phi"));
        for o in &outcomes {
            let x = std::fs::read(a.path().join(&o.cell.file)).unwrap();
            let y = std::fs::read(b.path().join(&o.cell.file)).unwrap();
            assert_eq!(x, y);
        }
    }

    #[test]
    fn no_axes_runs_one_cell() {
        let cfg = RunConfig::parse("iterations = 3\nseed = 9\n[gridworld]\nwidth = 2\nheight = 2\n").unwrap();
        let cells = plan(&cfg).unwrap();
        assert_eq!(cells.len(), 1);
        assert_eq!(cells[0].0.seed, 9);
    }
}
