use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use kmifqe::dataset::{generate_dataset, Dataset};
use kmifqe::harness::{
    aggregate_table, cached_truth, experiment_jobs, ground_truth, parse_grid, report_dir, run_dir,
    run_jobs, strict_from_env, sweep_csv, sweep_jobs, sweep_points, workers_from_env, write_run, ExperimentConfig,
};
use kmifqe::learner::{train, Algo, RunReport};

/// Off-policy evaluation experiments.
///
/// OPE_WORKERS sets the number of parallel seed workers; OPE_STRICT=1
/// rebuilds the importance-ratio table at every step.
#[derive(Parser)]
#[command(name = "ope", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a dataset with the behavior policy.
    GenData {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Experiment seed; the data seed adds the config's offset.
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Print the target policy's true normalised value.
    Truth {
        #[arg(long)]
        config: PathBuf,
    },
    /// Train one estimator on a dataset.
    Train {
        #[arg(long)]
        algo: Algo,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: u64,
        /// Run directory; defaults to runs/<name>/<algo>/<seed>.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Fixed-bandwidth sweep for the kernel estimators plus learned-bandwidth runs.
    SweepH {
        /// lo:hi:N(log|lin), e.g. 1e-2:1e1:20log; defaults to the config's sweep_grid.
        #[arg(long)]
        grid: Option<String>,
        #[arg(long)]
        config: PathBuf,
        /// Defaults to runs/<name>-sweep.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Every algorithm and seed of an experiment, followed by aggregation.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Defaults to runs/<name>.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Aggregate the reports below a run directory into aggregate.csv.
    Report {
        #[arg(long)]
        dir: PathBuf,
    },
}

fn load_experiment(path: &Path) -> Result<ExperimentConfig> {
    Ok(ExperimentConfig::load(path)?)
}

fn default_root(exp: &ExperimentConfig, suffix: &str) -> PathBuf {
    match &exp.out_dir {
        Some(dir) if suffix.is_empty() => dir.clone(),
        Some(dir) => dir.with_file_name(format!("{}{suffix}", dir.file_name().map_or_else(|| exp.name.clone(), |f| f.to_string_lossy().into_owned()))),
        None => Path::new("runs").join(format!("{}{suffix}", exp.name)),
    }
}

/// Refuses to overwrite a run produced by a different training config.
fn check_resume(dir: &Path, config_hash: &str) -> Result<()> {
    let path = dir.join("report.json");
    let Ok(text) = fs::read_to_string(&path) else { return Ok(()) };
    let previous = RunReport::from_json(&text).with_context(|| format!("reading {}", path.display()))?;
    if previous.config_hash != config_hash {
        bail!(
            "{} holds a run with config hash {}, not {config_hash}; use a fresh --out directory",
            dir.display(),
            previous.config_hash
        );
    }
    Ok(())
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    match cli.command {
        Command::GenData { config, out, seed } => {
            let exp = load_experiment(&config)?;
            let data = generate_dataset(&exp.env, exp.n, exp.data_seed(seed))?;
            if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
                fs::create_dir_all(parent)?;
            }
            data.save(&out)?;
            println!("{} transitions, {} episodes, sha256 {}", data.len(), data.manifest.episodes, data.manifest.data_hash);
        }
        Command::Truth { config } => {
            let exp = load_experiment(&config)?;
            let t = ground_truth(&exp.env, exp.truth_episodes, exp.truth_seed)?;
            println!("{}", t.to_json());
        }
        Command::Train { algo, data, config, seed, out } => {
            let exp = load_experiment(&config)?;
            let dataset = Dataset::load(&data)?;
            dataset.check_env(&exp.env)?;
            let root = default_root(&exp, "");
            let truth = cached_truth(&root, &exp)?;
            let mut cfg = exp.train_config(algo, seed)?;
            cfg.strict |= strict_from_env();
            let dir = out.unwrap_or_else(|| run_dir(&root, "", algo, seed));
            check_resume(&dir, &cfg.hash())?;
            let problem = exp.env.build()?;
            let output = train(&problem, &dataset, &cfg, Some(truth.value))?;
            write_run(&dir, &output)?;
            let r = &output.report;
            println!("{algo} seed {seed}: V̂ = {:.6}, V = {:.6}, error = {:.6}", r.v_hat, truth.value, r.v_hat - truth.value);
        }
        Command::SweepH { grid, config, out } => {
            let exp = load_experiment(&config)?;
            let Some(grid) = grid.or_else(|| exp.sweep_grid.clone()) else {
                bail!("no --grid given and the config has no sweep_grid");
            };
            let grid = parse_grid(&grid)?;
            let root = out.unwrap_or_else(|| default_root(&exp, "-sweep"));
            let truth = cached_truth(&root, &exp)?;
            let jobs = sweep_jobs(&exp, &grid, strict_from_env())?;
            if jobs.is_empty() {
                bail!("no kernel algorithm configured for the sweep");
            }
            run_jobs(&exp, &jobs, &truth, Some(&root), workers_from_env())?;
            let rows = report_dir(&root)?;
            let learned: Vec<_> = rows.iter().filter(|a| a.group == "learned").cloned().collect();
            let points = sweep_points(&rows, &grid);
            let path = root.join("sweep.csv");
            fs::write(&path, sweep_csv(&points, &learned)).with_context(|| format!("writing {}", path.display()))?;
            print!("{}", aggregate_table(&rows));
        }
        Command::Run { config, out } => {
            let exp = load_experiment(&config)?;
            let root = out.unwrap_or_else(|| default_root(&exp, ""));
            let truth = cached_truth(&root, &exp)?;
            let jobs = experiment_jobs(&exp, strict_from_env())?;
            run_jobs(&exp, &jobs, &truth, Some(&root), workers_from_env())?;
            print!("{}", aggregate_table(&report_dir(&root)?));
        }
        Command::Report { dir } => {
            let rows = report_dir(&dir)?;
            print!("{}", aggregate_table(&rows));
        }
    }
    Ok(())
}
