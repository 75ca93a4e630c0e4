use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use stochfsi_core::diagnostics::{verify_fluid_budget, verify_structure_identity};
use stochfsi_core::io::{
    boundedness_csv, config_hash, format_checks, ledger_csv, penalty_csv, run_ensemble, snapshot_name, verify_snapshot,
    write_atomic, PathSummary, RunConfig, RunSummary, SnapshotFile, SweepPoint, SUMMARY_VERSION,
};
use stochfsi_core::{ensemble_stats, penalty_scaling_report, Error, Scheme, TrajectoryRecord};

const EXIT_FAILURE: u8 = 1;
const EXIT_CONFIG: u8 = 2;
const EXIT_SNAPSHOT: u8 = 3;

/// Stochastic fluid-structure splitting solver.
#[derive(Parser, Debug)]
#[command(name = "stochfsi", version, about)]
struct Cli {
    /// Worker threads for ensemble runs (0 = rayon default).
    #[arg(long, global = true, env = "STOCHFSI_THREADS")]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run an ensemble and write one snapshot per path plus summary.json.
    Run(RunArgs),
    /// Replay the diagnostics on a stored snapshot.
    Verify {
        /// Snapshot file.
        snapshot: PathBuf,
    },
    /// Run the (steps, eps) refinement grid and write boundedness.csv and penalty.csv.
    Sweep(RunArgs),
}

#[derive(Args, Debug)]
struct RunArgs {
    /// TOML configuration file.
    #[arg(long, short)]
    config: PathBuf,
    /// Output directory (overrides run.out).
    #[arg(long, short)]
    out: Option<PathBuf>,
    /// Ensemble size (overrides run.paths).
    #[arg(long)]
    paths: Option<usize>,
    /// Seed of the first path (overrides run.seed).
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug)]
struct Failure {
    code: u8,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Config(_) => EXIT_CONFIG,
            Error::Snapshot(_) => EXIT_SNAPSHOT,
            _ => EXIT_FAILURE,
        };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

fn fail(message: impl Into<String>) -> Failure {
    Failure {
        code: EXIT_FAILURE,
        message: message.into(),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let pool = match rayon::ThreadPoolBuilder::new().num_threads(cli.threads.unwrap_or(0)).build() {
        Ok(p) => p,
        Err(e) => {
            eprintln!("error: thread pool: {e}");
            return ExitCode::from(EXIT_FAILURE);
        }
    };
    let result = pool.install(|| match &cli.command {
        Command::Run(a) => cmd_run(a),
        Command::Verify { snapshot } => cmd_verify(snapshot),
        Command::Sweep(a) => cmd_sweep(a),
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

fn load(args: &RunArgs) -> Result<RunConfig, Failure> {
    let mut cfg = RunConfig::load(&args.config)?;
    if let Some(out) = &args.out {
        cfg.run.out = out.clone();
    }
    if let Some(p) = args.paths {
        cfg.run.paths = p;
    }
    if let Some(s) = args.seed {
        cfg.run.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn write(path: &Path, bytes: &[u8]) -> Result<(), Failure> {
    write_atomic(path, bytes).map_err(|e| fail(format!("{}: {e}", path.display())))
}

fn path_summary(rec: &TrajectoryRecord, file: String) -> PathSummary {
    PathSummary {
        seed: rec.seed,
        file,
        completed_steps: rec.ledger.len(),
        stopping_step: rec.stopping_step,
        failure: rec.failure.clone(),
        max_energy: rec.ledger.iter().map(|r| r.energy.max(r.energy_next)).fold(0.0, f64::max),
        max_structure_residual: rec.ledger.iter().map(verify_structure_identity).fold(0.0, f64::max),
        max_fluid_residual: rec.ledger.iter().map(verify_fluid_budget).fold(0.0, f64::max),
    }
}

fn cmd_run(args: &RunArgs) -> Result<(), Failure> {
    let cfg = load(args)?;
    let scheme = Scheme::new(cfg.scheme.clone())?;
    let records = run_ensemble(&scheme, &cfg.seeds()).into_iter().collect::<Result<Vec<_>, _>>()?;
    let out = &cfg.run.out;
    let mut paths = Vec::with_capacity(records.len());
    for rec in &records {
        let name = snapshot_name(rec.seed);
        let snap = SnapshotFile::new(&cfg.scheme, rec.clone());
        write(&out.join(&name), &snap.to_bytes())?;
        write(&out.join(name.replace(".snp", ".csv")), ledger_csv(&rec.ledger).as_bytes())?;
        paths.push(path_summary(rec, name));
    }
    let stats = ensemble_stats(&records).ok();
    let summary = RunSummary {
        schema_version: SUMMARY_VERSION,
        config_hash: config_hash(&cfg.scheme),
        dt: cfg.scheme.dt(),
        steps: cfg.scheme.steps,
        eps: cfg.scheme.eps,
        paths,
        stats,
    };
    write(&out.join("summary.json"), summary.to_json().as_bytes())?;
    let failed: Vec<&PathSummary> = summary.paths.iter().filter(|p| p.failure.is_some()).collect();
    println!("wrote {} snapshot(s) to {}", summary.paths.len(), out.display());
    if let Some(s) = &summary.stats {
        println!(
            "E[max energy] = {:.6e} ± {:.2e}, E[dissipation] = {:.6e} ± {:.2e}",
            s.max_energy.mean, s.max_energy.half_width, s.dissipation.mean, s.dissipation.half_width
        );
        if let Some(w) = &s.warning {
            println!("warning: {w}");
        }
    }
    if failed.is_empty() {
        Ok(())
    } else {
        for p in &failed {
            eprintln!("path {}: {}", p.seed, p.failure.as_deref().unwrap_or_default());
        }
        Err(fail(format!("{} of {} paths failed", failed.len(), summary.paths.len())))
    }
}

fn cmd_verify(path: &Path) -> Result<(), Failure> {
    let snap = SnapshotFile::read(path)?;
    let checks = verify_snapshot(&snap).map_err(|e| match e {
        Error::Config(m) | Error::MeshMismatch(m) => Failure {
            code: EXIT_SNAPSHOT,
            message: m,
        },
        other => other.into(),
    })?;
    print!("{}", format_checks(&checks));
    let bad = checks.iter().filter(|c| !c.passed).count();
    if bad == 0 {
        Ok(())
    } else {
        Err(fail(format!("{bad} check(s) failed")))
    }
}

fn cmd_sweep(args: &RunArgs) -> Result<(), Failure> {
    let cfg = load(args)?;
    let grid = cfg
        .sweep
        .as_ref()
        .ok_or_else(|| Failure::from(Error::Config("missing [sweep] section".into())))?;
    let seeds = cfg.seeds();
    let mut points = Vec::new();
    let mut groups = Vec::new();
    for (steps, eps) in grid.points() {
        let mut sc = cfg.scheme.clone();
        sc.steps = steps;
        sc.eps = eps;
        let scheme = Scheme::new(sc)?;
        let records = run_ensemble(&scheme, &seeds).into_iter().collect::<Result<Vec<_>, _>>()?;
        let failed_paths = records.iter().filter(|r| r.failure.is_some()).count();
        let stats = ensemble_stats(&records).ok();
        if let Some(s) = &stats {
            groups.push((eps, steps, s.clone()));
        }
        println!("steps {steps} eps {eps:e}: {} paths, {failed_paths} failed", records.len());
        points.push(SweepPoint {
            steps,
            eps,
            failed_paths,
            stats,
        });
    }
    let table = penalty_scaling_report(&groups);
    let out = &cfg.run.out;
    write(&out.join("boundedness.csv"), boundedness_csv(&points).as_bytes())?;
    write(&out.join("penalty.csv"), penalty_csv(&table).as_bytes())?;
    println!("penalty scaling within bound: {}", table.pass);
    let failed: usize = points.iter().map(|p| p.failed_paths).sum();
    if failed == 0 {
        Ok(())
    } else {
        Err(fail(format!("{failed} path(s) failed across the sweep")))
    }
}
