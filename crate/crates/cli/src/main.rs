//! `rem-forge`: generate ground truth, plan measurements, recover maps and
//! run sweeps from an experiment config.
//!
//! Exit codes: 0 on success, 1 on validation errors (bad arguments, bad
//! config, unreadable or inconsistent inputs), 2 on runtime errors.

mod artifacts;

use std::fs;
use std::num::NonZeroUsize;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand};
use serde_json::{json, Map, Value};

use rem_forge::pipeline::{self, Prepared};
use rem_forge::sampling;
use rem_forge::{Execution, ExperimentConfig, MeasurementPlan, RemError, SweepVariable, VERSION};

use artifacts::Manifest;

#[derive(Debug, Parser)]
#[command(name = "rem-forge", version = VERSION, about = "3D radio environment maps from sparse samples")]
struct Cli {
    /// Worker thread cap.
    #[arg(long, global = true, env = "REM_FORGE_THREADS")]
    threads: Option<NonZeroUsize>,

    /// Run every kernel on the calling thread.
    #[arg(long, global = true)]
    sequential: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Synthesize a ground-truth RSS field and write it as truth.csv.
    Generate {
        #[command(flatten)]
        config: ConfigArgs,
        /// Scenario seed; defaults to `seed` from the config.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Choose measurement voxels and write plan.json.
    Plan {
        #[command(flatten)]
        config: ConfigArgs,
        /// Seed for the random planner; defaults to `seed` from the config.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Measure a truth file, recover the map and score it.
    Recover {
        #[command(flatten)]
        config: ConfigArgs,
        /// Ground truth in grid CSV format.
        #[arg(long)]
        truth: PathBuf,
        /// Measurement plan; planned from the config when omitted.
        #[arg(long)]
        plan: Option<PathBuf>,
        /// Measurement noise and planner seed; defaults to `seed` from the config.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Full factorial sweep over one variable and a set of seeds.
    Sweep {
        #[command(flatten)]
        config: ConfigArgs,
        /// One of r, snr_db, per_thr.
        #[arg(long)]
        variable: String,
        /// Comma-separated values.
        #[arg(long, value_delimiter = ',', required = true, allow_negative_numbers = true)]
        values: Vec<f64>,
        /// `a..b`, `a..=b` or a comma-separated list; defaults to `seed` from the config.
        #[arg(long, value_parser = parse_seeds)]
        seeds: Option<Seeds>,
    },
    /// Print the library version.
    Version,
}

#[derive(Debug, Args)]
struct ConfigArgs {
    /// Experiment config (TOML). Built-in defaults apply when omitted.
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Override a config key, e.g. `--set grid.dims=[8,8,2]`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Output directory; defaults to `output.dir` from the config.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Clone)]
struct Seeds(Vec<u64>);

fn parse_seeds(s: &str) -> Result<Seeds, String> {
    let num = |t: &str| t.trim().parse::<u64>().map_err(|e| format!("{t:?}: {e}"));
    let seeds = if let Some((a, b)) = s.split_once("..=") {
        (num(a)?..=num(b)?).collect()
    } else if let Some((a, b)) = s.split_once("..") {
        (num(a)?..num(b)?).collect()
    } else {
        s.split(',').map(num).collect::<Result<Vec<_>, _>>()?
    };
    if seeds.is_empty() {
        return Err(format!("{s:?} names no seeds"));
    }
    Ok(Seeds(seeds))
}

enum Failure {
    Validation(anyhow::Error),
    Runtime(anyhow::Error),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Validation(_) => 1,
            Failure::Runtime(_) => 2,
        }
    }

    fn error(&self) -> &anyhow::Error {
        match self {
            Failure::Validation(e) | Failure::Runtime(e) => e,
        }
    }
}

/// Library errors carry their own class: anything raised inside a pipeline
/// stage is a runtime failure, the rest rejects the inputs.
impl From<RemError> for Failure {
    fn from(e: RemError) -> Self {
        let input = e.stage().is_none()
            && matches!(
                e,
                RemError::InvalidParameter(_)
                    | RemError::IndexOutOfGrid { .. }
                    | RemError::DimensionMismatch { .. }
                    | RemError::MemoryBudget { .. }
            );
        if input {
            Failure::Validation(e.into())
        } else {
            Failure::Runtime(e.into())
        }
    }
}

type Outcome<T> = Result<T, Failure>;

trait Classify<T> {
    fn invalid(self) -> Outcome<T>;
    fn runtime(self) -> Outcome<T>;
}

impl<T> Classify<T> for anyhow::Result<T> {
    fn invalid(self) -> Outcome<T> {
        self.map_err(Failure::Validation)
    }
    fn runtime(self) -> Outcome<T> {
        self.map_err(Failure::Runtime)
    }
}

struct Ctx {
    exec: Execution,
    threads: Option<usize>,
    start: Instant,
}

impl Ctx {
    fn execution_name(&self) -> &'static str {
        match self.exec {
            Execution::Sequential => "sequential",
            Execution::Parallel => "parallel",
        }
    }

    fn manifest(
        &self,
        command: &'static str,
        config: &ExperimentConfig,
        seeds: Vec<u64>,
        files: &[&str],
        details: Value,
    ) -> Manifest {
        let dims = config.grid.dims;
        let details = match details {
            Value::Object(m) => m,
            _ => Map::new(),
        };
        Manifest {
            tool: "rem-forge",
            version: VERSION,
            command,
            config_hash: config.hash_hex(),
            seeds,
            dims,
            n_voxels: dims.iter().product(),
            execution: self.execution_name(),
            threads: self.threads,
            wall_ms: self.start.elapsed().as_secs_f64() * 1e3,
            files: files.iter().map(|f| f.to_string()).collect(),
            details,
        }
    }
}

fn load(args: &ConfigArgs) -> Outcome<(ExperimentConfig, PathBuf)> {
    let text = match &args.config {
        Some(p) => fs::read_to_string(p).with_context(|| format!("read config {}", p.display())).invalid()?,
        None => String::new(),
    };
    let config = ExperimentConfig::from_toml_str(&text, &args.set)?;
    let dir = args.out.clone().unwrap_or_else(|| PathBuf::from(&config.output.dir));
    let dir = artifacts::prepare_dir(&dir).runtime()?;
    Ok((config, dir))
}

fn write_common(dir: &Path, config: &ExperimentConfig) -> Outcome<()> {
    artifacts::write_text(&dir.join("config.toml"), &config.to_toml_string()).runtime()
}

fn finish(dir: &Path, manifest: &Manifest) -> Outcome<()> {
    let path = dir.join(format!("{}.manifest.json", manifest.command));
    artifacts::write_json(&path, manifest).runtime()?;
    println!("manifest={}", path.display());
    Ok(())
}

fn generate(ctx: &Ctx, args: &ConfigArgs, seed: Option<u64>) -> Outcome<()> {
    let (config, dir) = load(args)?;
    let seed = seed.unwrap_or(config.seed);
    let prep = Prepared::new(&config, &[], ctx.exec)?;
    let (sources, shadow_db, truth) = pipeline::synthesize(&prep, &config, seed)?;

    artifacts::write_grid_csv(&dir.join("truth.csv"), &truth).runtime()?;
    let scenario = json!({ "sources": sources, "shadow_db": shadow_db });
    artifacts::write_json(&dir.join("sources.json"), &scenario).runtime()?;
    write_common(&dir, &config)?;

    let details = json!({ "n_sources": sources.support.len() });
    let m = ctx.manifest("generate", &config, vec![seed], &["truth.csv", "sources.json", "config.toml"], details);
    println!("truth_csv={}", dir.join("truth.csv").display());
    finish(&dir, &m)
}

fn plan(ctx: &Ctx, args: &ConfigArgs, seed: Option<u64>) -> Outcome<()> {
    let (config, dir) = load(args)?;
    let seed = seed.unwrap_or(config.seed);
    let prep = Prepared::new(&config, &[], ctx.exec)?;
    let plan = pipeline::make_plan(&prep, &config, seed, ctx.exec)?;
    let wc = sampling::wc_sbl_v(&plan.select_rows(&prep.phi));

    artifacts::write_json(&dir.join("plan.json"), &plan).runtime()?;
    write_common(&dir, &config)?;

    let details = json!({
        "m": plan.m,
        "rate": plan.rate(),
        "satisfied": plan.satisfied,
        "n_components": plan.n_components,
        "lambda_min": plan.lambda_min_history.last(),
        "wc_sbl_v": wc,
    });
    let m = ctx.manifest("plan", &config, vec![seed], &["plan.json", "config.toml"], details);
    println!("plan_json={} m={} satisfied={}", dir.join("plan.json").display(), plan.m, plan.satisfied);
    finish(&dir, &m)
}

fn read_plan(path: &Path, n_voxels: usize) -> anyhow::Result<MeasurementPlan> {
    let text = fs::read_to_string(path).with_context(|| format!("read plan {}", path.display()))?;
    let plan: MeasurementPlan = serde_json::from_str(&text).with_context(|| format!("parse plan {}", path.display()))?;
    if plan.n_voxels != n_voxels {
        return Err(anyhow!("plan covers {} voxels, the grid has {n_voxels}", plan.n_voxels));
    }
    if plan.selected.len() != plan.m {
        return Err(anyhow!("plan lists {} voxels but m = {}", plan.selected.len(), plan.m));
    }
    let mut seen = vec![false; n_voxels];
    for &i in &plan.selected {
        if i >= n_voxels || std::mem::replace(&mut seen[i], true) {
            return Err(anyhow!("plan voxel {i} is out of range or repeated"));
        }
    }
    Ok(plan)
}

fn recover(ctx: &Ctx, args: &ConfigArgs, truth: &Path, plan: Option<&Path>, seed: Option<u64>) -> Outcome<()> {
    let (config, dir) = load(args)?;
    let seed = seed.unwrap_or(config.seed);
    let grid = config.grid.to_spec()?;
    let truth = artifacts::read_grid_csv(truth, &grid).invalid()?;
    let given = plan.map(|p| read_plan(p, grid.len())).transpose().invalid()?;

    let prep = Prepared::new(&config, &[], ctx.exec)?;
    let plan = match given {
        Some(p) => p,
        None => pipeline::make_plan(&prep, &config, seed, ctx.exec)?,
    };
    let (est, (sbl_ms, gpr_ms)) = pipeline::estimate_from_truth(&prep, &config, &truth, &plan, seed, ctx.exec)?;

    artifacts::write_grid_csv(&dir.join("estimate.csv"), &est.estimate).runtime()?;
    artifacts::write_json(&dir.join("plan.json"), &plan).runtime()?;
    let recovery = json!({
        "omega_hat": est.omega_hat,
        "shadow_est_db": est.shadow_est_db,
        "sbl": est.sbl,
        "gp": est.gp,
        "shadow_excluded": est.shadow_excluded,
    });
    artifacts::write_json(&dir.join("recovery.json"), &recovery).runtime()?;
    write_common(&dir, &config)?;

    let details = json!({
        "mae_db": est.mae_db,
        "mae_no_gpr_db": est.mae_no_gpr_db,
        "wc_sbl_v": est.wc_sbl_v,
        "sigma0_2": est.sigma0_2,
        "m": plan.m,
        "sbl_iterations": est.sbl.iterations,
        "sbl_converged": est.sbl.converged,
        "n_active": est.sbl.active.len(),
        "gp": est.gp,
        "shadow_excluded": est.shadow_excluded,
        "sbl_ms": sbl_ms,
        "gpr_ms": gpr_ms,
    });
    let files = ["estimate.csv", "plan.json", "recovery.json", "config.toml"];
    let m = ctx.manifest("recover", &config, vec![seed], &files, details);
    println!("estimate_csv={} mae_db={:.6}", dir.join("estimate.csv").display(), est.mae_db);
    finish(&dir, &m)
}

fn sweep(ctx: &Ctx, args: &ConfigArgs, variable: &str, values: &[f64], seeds: Option<&Seeds>) -> Outcome<()> {
    let (config, dir) = load(args)?;
    let variable = SweepVariable::parse(variable)?;
    for &v in values {
        variable
            .apply(&config, v)
            .validate()
            .map_err(|e| Failure::Validation(anyhow!("{}={v}: {e}", variable.name())))?;
    }
    let seeds = seeds.map(|s| s.0.clone()).unwrap_or_else(|| vec![config.seed]);
    let rows = pipeline::sweep(&config, variable, values, &seeds, ctx.exec)?;

    artifacts::write_sweep_csv(&dir.join("sweep.csv"), &rows).runtime()?;
    artifacts::write_json(&dir.join("sweep.json"), &rows).runtime()?;
    write_common(&dir, &config)?;

    let failed: Vec<&_> = rows.iter().filter(|r| r.error.is_some()).collect();
    for r in &failed {
        eprintln!("warning: cell {}={} seed {} failed: {}", r.variable, r.value, r.seed, r.error.as_deref().unwrap_or(""));
    }
    let mut medians = Map::new();
    for &v in values {
        let cell: Vec<f64> = rows.iter().filter(|r| r.value == v && r.error.is_none()).map(|r| r.mae_db).collect();
        if !cell.is_empty() {
            medians.insert(v.to_string(), json!(pipeline::median(&cell)));
        }
    }
    let details = json!({
        "variable": variable.name(),
        "values": values,
        "n_rows": rows.len(),
        "n_failed": failed.len(),
        "median_mae_db": medians,
    });
    let m = ctx.manifest("sweep", &config, seeds, &["sweep.csv", "sweep.json", "config.toml"], details);
    println!("sweep_csv={} rows={} failed={}", dir.join("sweep.csv").display(), rows.len(), failed.len());
    finish(&dir, &m)?;
    if !rows.is_empty() && failed.len() == rows.len() {
        return Err(Failure::Runtime(anyhow!("every sweep cell failed")));
    }
    Ok(())
}

fn configure_threads(threads: Option<usize>) -> Outcome<()> {
    #[cfg(feature = "parallel")]
    if let Some(n) = threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("start worker pool")
            .runtime()?;
    }
    #[cfg(not(feature = "parallel"))]
    let _ = threads;
    Ok(())
}

fn run(cli: Cli) -> Outcome<()> {
    let threads = cli.threads.map(NonZeroUsize::get);
    configure_threads(threads)?;
    let exec = if cli.sequential || !cfg!(feature = "parallel") {
        Execution::Sequential
    } else {
        Execution::Parallel
    };
    let ctx = Ctx { exec, threads, start: Instant::now() };
    match &cli.command {
        Command::Generate { config, seed } => generate(&ctx, config, *seed),
        Command::Plan { config, seed } => plan(&ctx, config, *seed),
        Command::Recover { config, truth, plan, seed } => recover(&ctx, config, truth, plan.as_deref(), *seed),
        Command::Sweep { config, variable, values, seeds } => sweep(&ctx, config, variable, values, seeds.as_ref()),
        Command::Version => {
            let mode = if cfg!(feature = "parallel") { "parallel" } else { "sequential" };
            println!("rem-forge {VERSION} ({mode})");
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.error());
            ExitCode::from(f.code())
        }
    }
}
