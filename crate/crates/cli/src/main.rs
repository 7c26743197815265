use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use bilevel_rl::harness::sweep::{run_sweep, CellStatus};
use bilevel_rl::harness::{run_to_file, sweep_phi_from_config, verify, write_atomic, RunConfig};
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "bilevel-rl", version, about = "Bi-level actor-critic experiments on tabular MDPs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one configuration and write its trace CSV.
    Run(Common),
    /// Run every cell of the config's [sweep] section.
    Sweep(Common),
    /// Run the invariant suite; exits nonzero if any check fails.
    Verify {
        /// Only run checks whose id contains this string.
        filter: Option<String>,
    },
    /// Evaluate Φ on a lattice of goals and report the argmin.
    SweepPhi(Common),
}

#[derive(Args)]
struct Common {
    /// Config file (`key = value` lines with `[section]`s).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the config's seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads; defaults to the available parallelism.
    #[arg(long)]
    jobs: Option<usize>,
    /// Output directory.
    #[arg(long, env = "BILEVEL_RL_OUT", default_value = "out")]
    out: PathBuf,
    /// `section.key=value`; repeatable, applied after the file.
    #[arg(long = "override", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl Common {
    fn config(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::from_file(path).with_context(|| format!("loading {}", path.display()))?,
            None => RunConfig::default(),
        };
        for o in &self.overrides {
            cfg.apply_override(o).with_context(|| format!("override `{o}`"))?;
        }
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        cfg.resolve()?;
        Ok(cfg)
    }

    fn jobs(&self) -> usize {
        self.jobs.unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get())).max(1)
    }
}

fn run(c: &Common) -> Result<ExitCode> {
    let cfg = c.config()?;
    let path = c.out.join("trace.csv");
    let r = run_to_file(&cfg, &path)?;
    println!("wrote {} ({} records)", path.display(), r.records.len());
    if let Some(last) = r.records.last() {
        println!("final k {} phi {}", last.k, last.phi);
    }
    Ok(match r.failure {
        None => ExitCode::SUCCESS,
        Some(e) => {
            eprintln!("run stopped early: {e}");
            ExitCode::FAILURE
        }
    })
}

fn sweep(c: &Common) -> Result<ExitCode> {
    let cfg = c.config()?;
    let (index, outcomes) = run_sweep(&cfg, &c.out, c.jobs())?;
    let bad = outcomes.iter().filter(|o| o.status != CellStatus::Ok).count();
    println!("wrote {} ({} cells, {bad} not ok)", index.display(), outcomes.len());
    Ok(if bad == 0 { ExitCode::SUCCESS } else { ExitCode::FAILURE })
}

fn verify_all(filter: Option<&str>) -> ExitCode {
    let reports = verify::run_checks(filter);
    for r in &reports {
        println!("{r}");
    }
    let failed = reports.iter().filter(|r| !r.passed).count();
    println!("{} checks, {failed} failed", reports.len());
    if reports.is_empty() || failed > 0 { ExitCode::FAILURE } else { ExitCode::SUCCESS }
}

fn sweep_phi(c: &Common) -> Result<ExitCode> {
    let cfg = c.config()?;
    let pool = rayon_pool(c.jobs())?;
    let sweep = pool.install(|| sweep_phi_from_config(&cfg))?;
    let path = c.out.join("phi_sweep.csv");
    write_atomic(&path, &sweep.to_csv())?;
    println!("wrote {} ({} points)", path.display(), sweep.points.len());
    if let Some((x, phi)) = sweep.argmin() {
        println!("argmin x = {:?}, phi = {phi}", x.as_slice());
    }
    Ok(ExitCode::SUCCESS)
}

fn rayon_pool(jobs: usize) -> Result<rayon::ThreadPool> {
    Ok(rayon::ThreadPoolBuilder::new().num_threads(jobs).build()?)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Run(c) => run(c),
        Command::Sweep(c) => sweep(c),
        Command::Verify { filter } => Ok(verify_all(filter.as_deref())),
        Command::SweepPhi(c) => sweep_phi(c),
    };
    result.unwrap_or_else(|e| {
        eprintln!("error: {e:#}");
        ExitCode::from(2)
    })
}
