//! Experiment configs, seed sweeps, ground truth and aggregation of run reports.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::dataset::{generate_dataset, Dataset, DatasetError};
use crate::envs::{EnvConfig, EnvError, McEstimate};
use crate::learner::{train, Algo, BandwidthMode, RunReport, TrainConfig, TrainError, TrainOutput};

#[derive(Debug, thiserror::Error)]
pub enum HarnessError {
    #[error("invalid experiment config: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {message}")]
    Parse { path: PathBuf, message: String },
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error("{algo} seed {seed}: {source}")]
    Train { algo: Algo, seed: u64, source: TrainError },
    #[error("no reports found under {0}")]
    NoReports(PathBuf),
    #[error("invalid grid `{0}`: expected lo:hi:N(log|lin)")]
    Grid(String),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> HarnessError + '_ {
    move |source| HarnessError::Io { path: path.to_path_buf(), source }
}

fn d_truth_episodes() -> usize {
    1500
}
fn d_truth_seed() -> u64 {
    0x7275_7468
}
fn d_algos() -> Vec<AlgoSpec> {
    Algo::ALL.into_iter().map(AlgoSpec::Plain).collect()
}

/// An algorithm, optionally with training-config fields that override the
/// experiment's `train` section (nested objects merge key by key).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum AlgoSpec {
    Plain(Algo),
    WithOverrides {
        algo: Algo,
        #[serde(default)]
        overrides: serde_json::Map<String, serde_json::Value>,
    },
}

impl AlgoSpec {
    pub fn algo(&self) -> Algo {
        match self {
            AlgoSpec::Plain(a) | AlgoSpec::WithOverrides { algo: a, .. } => *a,
        }
    }
}

fn merge(base: &mut serde_json::Value, patch: &serde_json::Value) {
    match (base, patch) {
        (serde_json::Value::Object(b), serde_json::Value::Object(p)) => {
            for (k, v) in p {
                merge(b.entry(k.clone()).or_insert(serde_json::Value::Null), v);
            }
        }
        (b, p) => *b = p.clone(),
    }
}
fn d_seeds() -> Vec<u64> {
    (0..10).collect()
}

/// One experiment: environment, dataset size, training settings, algorithms and seeds.
///
/// Seed `s` generates its own dataset from data seed `data_seed_offset + s`
/// and initialises training from seed `s`; every algorithm sees the same data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    pub env: EnvConfig,
    pub n: usize,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default = "d_algos")]
    pub algos: Vec<AlgoSpec>,
    #[serde(default = "d_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub data_seed_offset: u64,
    /// Monte Carlo episodes when no closed form exists.
    #[serde(default = "d_truth_episodes")]
    pub truth_episodes: usize,
    #[serde(default = "d_truth_seed")]
    pub truth_seed: u64,
    /// Run directory; the CLI defaults to `runs/<name>`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out_dir: Option<PathBuf>,
    /// Default grid for bandwidth sweeps, e.g. `1e-2:1e1:10log`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sweep_grid: Option<String>,
}

impl ExperimentConfig {
    pub fn from_json(s: &str) -> Result<Self, HarnessError> {
        let exp: Self = serde_json::from_str(s).map_err(|e| HarnessError::Config(e.to_string()))?;
        exp.validate()?;
        Ok(exp)
    }

    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        let exp: Self = serde_json::from_str(&text)
            .map_err(|e| HarnessError::Parse { path: path.to_path_buf(), message: e.to_string() })?;
        exp.validate()?;
        Ok(exp)
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let mut seeds = self.seeds.clone();
        seeds.sort_unstable();
        seeds.dedup();
        if seeds.len() != self.seeds.len() {
            return Err(HarnessError::Config("seeds must be distinct".into()));
        }
        if self.n == 0 {
            return Err(HarnessError::Config("n must be positive".into()));
        }
        for spec in &self.algos {
            self.train_config(spec.algo(), 0)?;
        }
        self.env.build()?;
        Ok(())
    }

    pub fn algos(&self) -> Vec<Algo> {
        self.algos.iter().map(AlgoSpec::algo).collect()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn data_seed(&self, seed: u64) -> u64 {
        self.data_seed_offset.wrapping_add(seed)
    }

    /// Training config for `algo`: the `train` section with the algorithm's
    /// overrides applied (the first matching entry of `algos`).
    pub fn train_config(&self, algo: Algo, seed: u64) -> Result<TrainConfig, HarnessError> {
        let overrides = self.algos.iter().find_map(|s| match s {
            AlgoSpec::WithOverrides { algo: a, overrides } if *a == algo => Some(overrides),
            _ => None,
        });
        let mut cfg = match overrides {
            Some(o) => {
                let mut v = serde_json::to_value(&self.train).expect("config serializes");
                merge(&mut v, &serde_json::Value::Object(o.clone()));
                serde_json::from_value(v).map_err(|e| HarnessError::Config(format!("{algo} overrides: {e}")))?
            }
            None => self.train.clone(),
        };
        cfg.algo = Some(algo);
        cfg.seed = seed;
        Ok(cfg)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TruthMethod {
    ClosedForm,
    MonteCarlo,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Truth {
    /// Closed form when available, the Monte Carlo mean otherwise.
    pub value: f64,
    pub method: TruthMethod,
    pub closed_form: Option<f64>,
    pub monte_carlo: McEstimate,
    pub env_config_hash: String,
}

/// Normalised target value from `episodes` rollouts, plus the closed form for the LQG.
pub fn ground_truth(env: &EnvConfig, episodes: usize, seed: u64) -> Result<Truth, HarnessError> {
    let problem = env.build()?;
    let closed_form = problem.target_value_exact()?;
    let monte_carlo = problem.target_value_mc(episodes, seed)?;
    let (value, method) = match closed_form {
        Some(v) => (v, TruthMethod::ClosedForm),
        None => (monte_carlo.value, TruthMethod::MonteCarlo),
    };
    Ok(Truth { value, method, closed_form, monte_carlo, env_config_hash: env.hash() })
}

impl Truth {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("truth serializes")
    }
}

/// Truth for the experiment, cached in `<root>/truth.json` and recomputed
/// when the cached environment hash differs.
pub fn cached_truth(root: &Path, exp: &ExperimentConfig) -> Result<Truth, HarnessError> {
    let path = root.join("truth.json");
    if let Ok(text) = fs::read_to_string(&path) {
        if let Ok(t) = serde_json::from_str::<Truth>(&text) {
            if t.env_config_hash == exp.env.hash() {
                return Ok(t);
            }
        }
    }
    let t = ground_truth(&exp.env, exp.truth_episodes, exp.truth_seed)?;
    fs::create_dir_all(root).map_err(io_err(root))?;
    fs::write(&path, t.to_json() + "\n").map_err(io_err(&path))?;
    Ok(t)
}

/// Number of parallel workers from `OPE_WORKERS`, defaulting to the available cores.
pub fn workers_from_env() -> usize {
    std::env::var("OPE_WORKERS")
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&w| w > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

/// `OPE_STRICT` set to anything but `0`/`false`/empty.
pub fn strict_from_env() -> bool {
    std::env::var("OPE_STRICT").is_ok_and(|v| !matches!(v.trim(), "" | "0" | "false"))
}

/// Applies `f` to every job on up to `workers` threads. Results keep the job order.
pub fn run_parallel<J: Sync, R: Send>(jobs: &[J], workers: usize, f: impl Fn(&J) -> R + Sync) -> Vec<R> {
    let workers = workers.clamp(1, jobs.len().max(1));
    if workers == 1 {
        return jobs.iter().map(&f).collect();
    }
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<R>>> = Mutex::new((0..jobs.len()).map(|_| None).collect());
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= jobs.len() {
                    break;
                }
                let r = f(&jobs[i]);
                slots.lock().expect("result lock")[i] = Some(r);
            });
        }
    });
    slots.into_inner().expect("result lock").into_iter().map(|r| r.expect("every job ran")).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct Job {
    /// Subdirectory between the experiment root and the algorithm, e.g. `h=0.1`.
    pub group: String,
    pub algo: Algo,
    pub seed: u64,
    pub train: TrainConfig,
}

#[derive(Clone, Debug)]
pub struct JobResult {
    pub job: Job,
    pub report: RunReport,
}

/// `runs/<exp>/[<group>/]<algo>/<seed>`
pub fn run_dir(root: &Path, group: &str, algo: Algo, seed: u64) -> PathBuf {
    let mut p = root.to_path_buf();
    if !group.is_empty() {
        p.push(group);
    }
    p.push(algo.name());
    p.push(seed.to_string());
    p
}

/// Writes `report.json` plus bandwidth and metric CSVs into `dir`.
pub fn write_run(dir: &Path, out: &TrainOutput) -> Result<(), HarnessError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let write = |name: &str, body: String| {
        let path = dir.join(name);
        fs::write(&path, body).map_err(io_err(&path))
    };
    write("report.json", out.report.to_json() + "\n")?;
    if !out.diagnostics.bandwidth.is_empty() {
        write("bandwidth.csv", out.diagnostics.bandwidth_csv())?;
    }
    if !out.diagnostics.metrics.is_empty() {
        write("metrics.csv", out.diagnostics.metric_csv())?;
    }
    Ok(())
}

/// Dataset for one seed of an experiment, generated in memory.
pub fn seed_dataset(exp: &ExperimentConfig, seed: u64) -> Result<Dataset, HarnessError> {
    Ok(generate_dataset(&exp.env, exp.n, exp.data_seed(seed))?)
}

/// Runs every job, grouping by seed so each dataset is generated once.
/// Reports are written under `out` when given.
pub fn run_jobs(
    exp: &ExperimentConfig,
    jobs: &[Job],
    truth: &Truth,
    out: Option<&Path>,
    workers: usize,
) -> Result<Vec<JobResult>, HarnessError> {
    let problem = exp.env.build()?;
    let mut seeds: Vec<u64> = jobs.iter().map(|j| j.seed).collect();
    seeds.sort_unstable();
    seeds.dedup();
    let per_seed = run_parallel(&seeds, workers, |&seed| -> Result<Vec<JobResult>, HarnessError> {
        let data = seed_dataset(exp, seed)?;
        let mut results = Vec::new();
        for job in jobs.iter().filter(|j| j.seed == seed) {
            let output = train(&problem, &data, &job.train, Some(truth.value))
                .map_err(|source| HarnessError::Train { algo: job.algo, seed, source })?;
            if let Some(root) = out {
                write_run(&run_dir(root, &job.group, job.algo, seed), &output)?;
            }
            results.push(JobResult { job: job.clone(), report: output.report });
        }
        Ok(results)
    });
    let mut all = Vec::with_capacity(jobs.len());
    for r in per_seed {
        all.extend(r?);
    }
    // restore job order
    all.sort_by_key(|r| jobs.iter().position(|j| j == &r.job).unwrap_or(usize::MAX));
    Ok(all)
}

/// Jobs for every configured algorithm and seed.
pub fn experiment_jobs(exp: &ExperimentConfig, strict: bool) -> Result<Vec<Job>, HarnessError> {
    let mut jobs = Vec::new();
    for algo in exp.algos() {
        for &seed in &exp.seeds {
            let mut train = exp.train_config(algo, seed)?;
            train.strict |= strict;
            jobs.push(Job { group: String::new(), algo, seed, train });
        }
    }
    Ok(jobs)
}

/// Grid label used for sweep subdirectories.
pub fn bandwidth_group(h: f64) -> String {
    format!("h={h:.3e}")
}

/// Fixed-bandwidth jobs for every grid point, for the kernel algorithms only,
/// plus learned-bandwidth jobs in group `learned`.
pub fn sweep_jobs(exp: &ExperimentConfig, grid: &[f64], strict: bool) -> Result<Vec<Job>, HarnessError> {
    let mut jobs = Vec::new();
    let algos: Vec<Algo> = exp.algos().into_iter().filter(|a| *a != Algo::Fqe).collect();
    for &h in grid {
        for &algo in &algos {
            for &seed in &exp.seeds {
                let mut train = exp.train_config(algo, seed)?;
                train.bandwidth_mode = BandwidthMode::Fixed;
                train.kernel.bandwidth = h;
                train.strict |= strict;
                jobs.push(Job { group: bandwidth_group(h), algo, seed, train });
            }
        }
    }
    for &algo in &algos {
        for &seed in &exp.seeds {
            let mut train = exp.train_config(algo, seed)?;
            train.bandwidth_mode = BandwidthMode::Learned;
            train.strict |= strict;
            jobs.push(Job { group: "learned".into(), algo, seed, train });
        }
    }
    Ok(jobs)
}

/// Parses `lo:hi:N(log|lin)`, for example `1e-2:1e1:20log`. Both ends are included.
pub fn parse_grid(spec: &str) -> Result<Vec<f64>, HarnessError> {
    let err = || HarnessError::Grid(spec.to_string());
    let parts: Vec<&str> = spec.trim().split(':').collect();
    let [lo, hi, count] = parts.as_slice() else { return Err(err()) };
    let lo: f64 = lo.parse().map_err(|_| err())?;
    let hi: f64 = hi.parse().map_err(|_| err())?;
    let (num, log) = if let Some(c) = count.strip_suffix("log") {
        (c, true)
    } else if let Some(c) = count.strip_suffix("lin") {
        (c, false)
    } else {
        (*count, true)
    };
    let k: usize = num.parse().map_err(|_| err())?;
    if k == 0 || !(lo > 0.0 && hi >= lo) || !hi.is_finite() {
        return Err(err());
    }
    if k == 1 {
        return Ok(vec![lo]);
    }
    Ok((0..k)
        .map(|i| {
            let t = i as f64 / (k - 1) as f64;
            if log {
                (lo.ln() + t * (hi.ln() - lo.ln())).exp()
            } else {
                lo + t * (hi - lo)
            }
        })
        .collect())
}

/// Per-seed estimates aggregated against the truth.
///
/// Population convention throughout: `bias = mean(V̂) − V` (signed),
/// `variance = mean((V̂ − mean V̂)²)`, `rmse² = mean((V̂ − V)²)`, so that
/// `rmse² = bias² + variance`.
/// The standard error of the RMSE is the delta-method transform of the
/// standard error of the mean squared error: `se(mse) / (2 rmse)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub group: String,
    pub algo: Algo,
    pub seeds: usize,
    pub v_true: f64,
    pub mean: f64,
    pub bias: f64,
    pub variance: f64,
    pub std: f64,
    pub rmse: f64,
    pub rmse_se: f64,
    pub estimates: Vec<f64>,
    /// Mean final bandwidth over seeds for kernel algorithms.
    pub mean_bandwidth: Option<f64>,
}

impl Aggregate {
    pub fn mse(&self) -> f64 {
        self.rmse * self.rmse
    }

    pub fn abs_bias(&self) -> f64 {
        self.bias.abs()
    }

    pub fn bias_variance_ratio(&self) -> f64 {
        self.bias * self.bias / self.variance
    }
}

pub fn aggregate(group: &str, algo: Algo, estimates: &[f64], v_true: f64, bandwidths: &[f64]) -> Aggregate {
    let k = estimates.len();
    let kf = k as f64;
    let mean = estimates.iter().sum::<f64>() / kf;
    let bias = mean - v_true;
    let variance = estimates.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / kf;
    let sq: Vec<f64> = estimates.iter().map(|v| (v - v_true).powi(2)).collect();
    let mse = sq.iter().sum::<f64>() / kf;
    let rmse = mse.sqrt();
    let rmse_se = if k > 1 && rmse > 0.0 {
        let sd = (sq.iter().map(|s| (s - mse).powi(2)).sum::<f64>() / (kf - 1.0)).sqrt();
        sd / kf.sqrt() / (2.0 * rmse)
    } else {
        0.0
    };
    let mean_bandwidth = (!bandwidths.is_empty()).then(|| bandwidths.iter().sum::<f64>() / bandwidths.len() as f64);
    Aggregate {
        group: group.to_string(),
        algo,
        seeds: k,
        v_true,
        mean,
        bias,
        variance,
        std: variance.sqrt(),
        rmse,
        rmse_se,
        estimates: estimates.to_vec(),
        mean_bandwidth,
    }
}

/// Groups reports by `(group, algo)` in first-seen order and aggregates each.
pub fn aggregate_reports(reports: &[(String, RunReport)]) -> Result<Vec<Aggregate>, HarnessError> {
    let mut keys: Vec<(String, Algo)> = Vec::new();
    for (g, r) in reports {
        if !keys.iter().any(|(kg, ka)| kg == g && *ka == r.algo) {
            keys.push((g.clone(), r.algo));
        }
    }
    keys.into_iter()
        .map(|(g, algo)| {
            let members: Vec<&RunReport> = reports.iter().filter(|(rg, r)| *rg == g && r.algo == algo).map(|(_, r)| r).collect();
            let v_true = members[0]
                .v_true
                .ok_or_else(|| HarnessError::Config(format!("report for {algo} in `{g}` lacks a true value")))?;
            let est: Vec<f64> = members.iter().map(|r| r.v_hat).collect();
            let hs: Vec<f64> = members.iter().filter_map(|r| r.final_bandwidth).collect();
            Ok(aggregate(&g, algo, &est, v_true, &hs))
        })
        .collect()
}

pub fn aggregate_csv(rows: &[Aggregate]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["group", "algo", "seeds", "v_true", "mean", "bias", "variance", "std", "bias_sq", "mse", "rmse", "rmse_se", "mean_bandwidth"])
        .expect("in-memory csv");
    for a in rows {
        w.write_record([
            a.group.clone(),
            a.algo.to_string(),
            a.seeds.to_string(),
            a.v_true.to_string(),
            a.mean.to_string(),
            a.bias.to_string(),
            a.variance.to_string(),
            a.std.to_string(),
            (a.bias * a.bias).to_string(),
            a.mse().to_string(),
            a.rmse.to_string(),
            a.rmse_se.to_string(),
            a.mean_bandwidth.map_or(String::new(), |h| h.to_string()),
        ])
        .expect("in-memory csv");
    }
    String::from_utf8(w.into_inner().expect("flush")).expect("utf8 csv")
}

pub fn aggregate_table(rows: &[Aggregate]) -> String {
    let mut out = format!("{:<16} {:<16} {:>5} {:>10} {:>10} {:>10} {:>18}\n", "group", "algo", "seeds", "mean", "bias", "variance", "rmse ± se");
    for a in rows {
        out.push_str(&format!(
            "{:<16} {:<16} {:>5} {:>10.4} {:>10.4} {:>10.3e} {:>9.4} ± {:<7.4}\n",
            if a.group.is_empty() { "-" } else { &a.group },
            a.algo.name(),
            a.seeds,
            a.mean,
            a.bias,
            a.variance,
            a.rmse,
            a.rmse_se
        ));
    }
    out.push_str("\nper-seed estimates\n");
    for a in rows {
        let vals: Vec<String> = a.estimates.iter().map(|v| format!("{v:.4}")).collect();
        out.push_str(&format!("{:<16} {:<16} {}\n", if a.group.is_empty() { "-" } else { &a.group }, a.algo.name(), vals.join(" ")));
    }
    out
}

/// Loads every `report.json` below `root`, tagged with its group (the path
/// between `root` and the `<algo>/<seed>` directories). Sorted by path.
pub fn load_reports(root: &Path) -> Result<Vec<(String, RunReport)>, HarnessError> {
    let mut paths: Vec<PathBuf> = walkdir::WalkDir::new(root)
        .sort_by_file_name()
        .into_iter()
        .filter_map(Result::ok)
        .filter(|e| e.file_type().is_file() && e.file_name() == "report.json")
        .map(|e| e.into_path())
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(HarnessError::NoReports(root.to_path_buf()));
    }
    paths
        .into_iter()
        .map(|p| {
            let text = fs::read_to_string(&p).map_err(io_err(&p))?;
            let report: RunReport = serde_json::from_str(&text)
                .map_err(|e| HarnessError::Parse { path: p.clone(), message: e.to_string() })?;
            let rel = p.strip_prefix(root).unwrap_or(&p);
            let comps: Vec<String> = rel.components().map(|c| c.as_os_str().to_string_lossy().into_owned()).collect();
            // <group...>/<algo>/<seed>/report.json
            let group = comps[..comps.len().saturating_sub(3)].join("/");
            Ok((group, report))
        })
        .collect()
}

/// Aggregates a run directory and writes `aggregate.csv` at its top level.
pub fn report_dir(root: &Path) -> Result<Vec<Aggregate>, HarnessError> {
    let reports = load_reports(root)?;
    let rows = aggregate_reports(&reports)?;
    let path = root.join("aggregate.csv");
    fs::write(&path, aggregate_csv(&rows)).map_err(io_err(&path))?;
    Ok(rows)
}

/// Row of a bandwidth sweep: fixed-`h` MSE per arm plus the learned `h`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub h: f64,
    pub algo: Algo,
    pub mse: f64,
    pub bias_sq: f64,
    pub variance: f64,
    pub rmse_se: f64,
}

pub fn sweep_points(rows: &[Aggregate], grid: &[f64]) -> Vec<SweepPoint> {
    let mut pts = Vec::new();
    for &h in grid {
        let g = bandwidth_group(h);
        for a in rows.iter().filter(|a| a.group == g) {
            pts.push(SweepPoint { h, algo: a.algo, mse: a.mse(), bias_sq: a.bias * a.bias, variance: a.variance, rmse_se: a.rmse_se });
        }
    }
    pts
}

/// `h,algo,mse,bias_sq,variance,rmse_se,learned_h,learned_mse`; the learned
/// columns repeat the learned-bandwidth marker for each arm.
pub fn sweep_csv(points: &[SweepPoint], learned: &[Aggregate]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["h", "algo", "mse", "bias_sq", "variance", "rmse_se", "learned_h", "learned_mse"]).expect("in-memory csv");
    for p in points {
        let marker = learned.iter().find(|a| a.algo == p.algo);
        w.write_record([
            p.h.to_string(),
            p.algo.to_string(),
            p.mse.to_string(),
            p.bias_sq.to_string(),
            p.variance.to_string(),
            p.rmse_se.to_string(),
            marker.and_then(|a| a.mean_bandwidth).map_or(String::new(), |h| h.to_string()),
            marker.map_or(String::new(), |a| a.mse().to_string()),
        ])
        .expect("in-memory csv");
    }
    String::from_utf8(w.into_inner().expect("flush")).expect("utf8 csv")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn report(algo: Algo, v_hat: f64, v_true: f64) -> RunReport {
        RunReport {
            algo,
            seed: 0,
            config_hash: String::new(),
            env_config_hash: String::new(),
            data_hash: String::new(),
            n: 1,
            steps: 1,
            gamma: 0.9,
            v_hat,
            v_true: Some(v_true),
            curve: vec![],
            h_curve: vec![],
            b_norm_sq_curve: vec![],
            v_curve: vec![],
            final_bandwidth: None,
            identity_metric: true,
            metric_diag_mean: None,
            degenerate_metrics: None,
            error_bound: None,
            mean_weight: None,
            effective_sample_size: None,
            wall_time_secs: 0.0,
        }
    }

    #[test]
    fn single_seed_aggregate() {
        let a = aggregate("", Algo::Fqe, &[-1.3], -1.0, &[]);
        assert!((a.rmse - 0.3).abs() < 1e-12);
        assert!((a.bias.abs() - a.rmse).abs() < 1e-12);
        assert_eq!(a.variance, 0.0);
        assert_eq!(a.rmse_se, 0.0);
    }

    #[test]
    fn hand_computed_aggregate() {
        // errors 1, 3 -> bias 2, variance 1, mse 5
        let a = aggregate("", Algo::Kmifqe, &[1.0, 3.0], 0.0, &[0.5, 1.5]);
        assert_eq!((a.bias, a.variance), (2.0, 1.0));
        assert!((a.rmse - 5f64.sqrt()).abs() < 1e-15);
        // squared errors 1, 9: sd 4√2, se 4, delta method 4 / (2√5)
        assert!((a.rmse_se - 4.0 / (2.0 * 5f64.sqrt())).abs() < 1e-12);
        assert_eq!(a.mean_bandwidth, Some(1.0));
    }

    #[test]
    fn decomposition_identity() {
        let est = [-1.3, -0.2, 0.7, 2.9, -4.4, 0.05];
        let a = aggregate("", Algo::Kmifqe, &est, 0.3, &[]);
        assert!((a.rmse * a.rmse - (a.bias * a.bias + a.variance)).abs() < 1e-10);
    }

    #[test]
    fn overrides_merge_into_train_config() {
        let exp = ExperimentConfig::from_json(
            r#"{"name": "x", "env": {"env": "lqg"}, "n": 100, "train": {"steps": 7, "kernel": {"bandwidth": 0.5, "clip_min": 0.001, "clip_max": 2.0, "density_floor": 1e-5}},
                "algos": ["kmifqe", {"algo": "fqe", "overrides": {"steps": 9, "kernel": {"clip_max": 5.0}}}]}"#,
        )
        .unwrap();
        let k = exp.train_config(Algo::Kmifqe, 3).unwrap();
        assert_eq!((k.steps, k.seed, k.algo), (7, 3, Some(Algo::Kmifqe)));
        let f = exp.train_config(Algo::Fqe, 1).unwrap();
        assert_eq!((f.steps, f.kernel.clip_max, f.kernel.bandwidth), (9, 5.0, 0.5));
        assert!(ExperimentConfig::from_json(r#"{"name": "x", "env": {"env": "lqg"}, "n": 10, "seeds": [1, 1]}"#).is_err());
    }

    #[test]
    fn groups_by_algo_and_group() {
        let reports = vec![
            ("".to_string(), report(Algo::Fqe, 1.0, 0.0)),
            ("".to_string(), report(Algo::Kmifqe, 2.0, 0.0)),
            ("".to_string(), report(Algo::Fqe, 3.0, 0.0)),
            ("h=1e0".to_string(), report(Algo::Fqe, 5.0, 0.0)),
        ];
        let rows = aggregate_reports(&reports).unwrap();
        assert_eq!(rows.len(), 3);
        assert_eq!((rows[0].algo, rows[0].seeds, rows[0].mean), (Algo::Fqe, 2, 2.0));
        assert_eq!(rows[2].group, "h=1e0");
        let csv = aggregate_csv(&rows);
        assert!(csv.starts_with("group,algo,seeds"));
        assert_eq!(csv.lines().count(), 4);
    }

    #[test]
    fn grid_parsing() {
        let g = parse_grid("1e-2:1e1:20log").unwrap();
        assert_eq!(g.len(), 20);
        assert!((g[0] - 1e-2).abs() < 1e-15 && (g[19] - 10.0).abs() < 1e-12);
        assert!((g[1] / g[0] - g[19] / g[18]).abs() < 1e-9);
        assert_eq!(parse_grid("1:3:3lin").unwrap(), vec![1.0, 2.0, 3.0]);
        for bad in ["1:2", "0:1:3log", "2:1:3log", "a:1:2log", "1:2:0log"] {
            assert!(parse_grid(bad).is_err(), "{bad}");
        }
    }

    #[test]
    fn parallel_preserves_order() {
        let jobs: Vec<u64> = (0..23).collect();
        let out = run_parallel(&jobs, 4, |j| j * j);
        assert_eq!(out, jobs.iter().map(|j| j * j).collect::<Vec<_>>());
    }

    #[test]
    fn reports_round_trip_through_directories() {
        let dir = tempfile::tempdir().unwrap();
        for (g, algo, seed, v) in [("", Algo::Fqe, 0, 1.0), ("", Algo::Fqe, 1, 2.0), ("h=1e-1", Algo::Kmifqe, 0, 4.0)] {
            let d = run_dir(dir.path(), g, algo, seed);
            fs::create_dir_all(&d).unwrap();
            fs::write(d.join("report.json"), report(algo, v, 0.0).to_json()).unwrap();
        }
        let rows = report_dir(dir.path()).unwrap();
        assert_eq!(rows.len(), 2);
        let fqe = rows.iter().find(|r| r.algo == Algo::Fqe).unwrap();
        assert_eq!((fqe.group.as_str(), fqe.mean), ("", 1.5));
        assert!(rows.iter().any(|r| r.group == "h=1e-1"));
        assert!(dir.path().join("aggregate.csv").exists());
    }
}
