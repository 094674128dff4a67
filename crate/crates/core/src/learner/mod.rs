//! Kernel-relaxed importance-resampling fitted Q evaluation, the FQE
//! baseline, and the relaxation error-bound diagnostic.

pub mod resampling;

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::bandwidth::{optimal_bandwidth, BandwidthEstimate, BandwidthSmoother};
use crate::dataset::{fit_behavior_gaussian, BehaviorFitConfig, Dataset, DatasetError, Transition};
use crate::envs::{BehaviorModel, EnvError, Problem};
use crate::kernel::{relaxed_ratio, relaxed_ratio_per_dim, KernelConfig, KernelError, DENSITY_FLOOR_FITTED};
use crate::metric::{optimal_metric, trace_term, write_metric_csv, MetricError, StateMetric};
use crate::numerics::{Matrix, SymMatrix};
use crate::qfunc::{Activation, QError, QNetwork, QScratch, TargetSnapshot, Tape};
use crate::scalar::{axpy, norm_sq, Real};
pub use resampling::{AliasTable, ResamplingError, ResamplingTable};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Algo {
    Kmifqe,
    KmifqeNometric,
    Fqe,
}

impl Algo {
    pub const ALL: [Algo; 3] = [Algo::Kmifqe, Algo::KmifqeNometric, Algo::Fqe];

    pub fn name(self) -> &'static str {
        match self {
            Algo::Kmifqe => "kmifqe",
            Algo::KmifqeNometric => "kmifqe-nometric",
            Algo::Fqe => "fqe",
        }
    }

    pub fn uses_metric(self) -> bool {
        self == Algo::Kmifqe
    }
}

impl fmt::Display for Algo {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Algo {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Algo::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| format!("unknown algorithm `{s}` (expected kmifqe, kmifqe-nometric or fqe)"))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BandwidthMode {
    /// Closed-form `h*` from mini-batch estimates of `b` and `v`.
    Learned,
    /// `kernel.bandwidth` held fixed.
    Fixed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BehaviorSource {
    /// Densities from the data-generating policy.
    Known,
    /// Densities from a Gaussian fitted to the dataset by maximum likelihood.
    Fitted(BehaviorFitConfig),
}

macro_rules! defaults {
    ($($name:ident: $ty:ty = $value:expr;)*) => {
        $(fn $name() -> $ty { $value })*
    };
}

defaults! {
    d_steps: usize = 20_000;
    d_batch: usize = 1024;
    d_interval: usize = 1000;
    d_one: usize = 1;
    d_metric_eps: f64 = crate::metric::DEGENERACY_EPS;
    d_hidden: Vec<usize> = vec![64, 64];
    d_lr: f64 = 3e-4;
    d_fqe_batch: usize = 256;
    d_tau: f64 = 0.005;
    d_bound: f64 = 1e6;
    d_xi_samples: usize = 1000;
    d_dump: usize = 16;
    d_behavior: BehaviorSource = BehaviorSource::Known;
    d_mode: BandwidthMode = BandwidthMode::Learned;
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default)]
    pub algo: Option<Algo>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "d_steps")]
    pub steps: usize,
    /// Resampled mini-batch size `k`.
    #[serde(default = "d_batch")]
    pub batch_size: usize,
    /// Hard target update interval `N`.
    #[serde(default = "d_interval")]
    pub target_update_interval: usize,
    /// Steps between metric refreshes; refreshes use the current target network.
    #[serde(default = "d_interval")]
    pub metric_refresh_interval: usize,
    /// Overrides the environment discount.
    #[serde(default)]
    pub gamma: Option<f64>,
    #[serde(default)]
    pub kernel: KernelConfig,
    #[serde(default = "d_mode")]
    pub bandwidth_mode: BandwidthMode,
    /// Steps between bandwidth re-estimates.
    #[serde(default = "d_one")]
    pub bandwidth_interval: usize,
    /// Uniform data mini-batch size for `b` and `v`; defaults to `batch_size`.
    #[serde(default)]
    pub bandwidth_batch: Option<usize>,
    /// Exponential smoothing of `h` (for example 0.99); off when absent.
    #[serde(default)]
    pub bandwidth_ema: Option<f64>,
    /// Estimate `‖b‖²` by the inner product of independent half-batch estimates.
    #[serde(default)]
    pub half_batch_bias: bool,
    #[serde(default = "d_metric_eps")]
    pub metric_eps: f64,
    /// Refresh metrics on this fraction of next states and copy each to its
    /// nearest neighbour among the rest.
    #[serde(default)]
    pub metric_subsample: Option<f64>,
    #[serde(default = "d_hidden")]
    pub hidden: Vec<usize>,
    #[serde(default)]
    pub activation: Activation,
    #[serde(default = "d_lr")]
    pub learning_rate: f64,
    #[serde(default = "d_fqe_batch")]
    pub fqe_batch_size: usize,
    /// Polyak rate of the FQE target network.
    #[serde(default = "d_tau")]
    pub fqe_tau: f64,
    /// Training aborts when `|V̂|` exceeds this.
    #[serde(default = "d_bound")]
    pub divergence_bound: f64,
    /// Steps between `V̂` readouts on the learning curve.
    #[serde(default = "d_interval")]
    pub eval_interval: usize,
    /// Rebuild the ratio table every step instead of on bandwidth change.
    #[serde(default)]
    pub strict: bool,
    #[serde(default = "d_behavior")]
    pub behavior: BehaviorSource,
    /// Next states sampled for the error-bound diagnostic.
    #[serde(default = "d_xi_samples")]
    pub error_bound_samples: usize,
    /// Leading transitions whose metrics are kept at every refresh.
    #[serde(default = "d_dump")]
    pub metric_dump_states: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("defaults deserialize")
    }
}

impl TrainConfig {
    pub fn from_json(s: &str) -> Result<Self, TrainError> {
        serde_json::from_str(s).map_err(|e| TrainError::Config(e.to_string()))
    }

    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(serde_json::to_string(self).expect("config serializes").as_bytes()))
    }

    pub fn algo(&self) -> Algo {
        self.algo.unwrap_or(Algo::Kmifqe)
    }

    pub fn validate(&self, n: usize) -> Result<(), TrainError> {
        let positive = [
            ("batch_size", self.batch_size),
            ("target_update_interval", self.target_update_interval),
            ("metric_refresh_interval", self.metric_refresh_interval),
            ("bandwidth_interval", self.bandwidth_interval),
            ("fqe_batch_size", self.fqe_batch_size),
            ("eval_interval", self.eval_interval),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(TrainError::Config(format!("{name} must be positive")));
        }
        if self.algo() != Algo::Fqe && self.batch_size > n {
            return Err(TrainError::Config(format!("batch size {} exceeds dataset size {n}", self.batch_size)));
        }
        if let Some(g) = self.gamma {
            if !(0.0..1.0).contains(&g) {
                return Err(TrainError::Config(format!("gamma {g} outside [0, 1)")));
            }
        }
        if let Some(f) = self.metric_subsample {
            if !(f > 0.0 && f <= 1.0) {
                return Err(TrainError::Config("metric_subsample must lie in (0, 1]".into()));
            }
        }
        if let Some(e) = self.bandwidth_ema {
            if !(0.0..1.0).contains(&e) {
                return Err(TrainError::Config("bandwidth_ema must lie in [0, 1)".into()));
            }
        }
        self.kernel.validate()?;
        Ok(())
    }
}

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Kernel(#[from] KernelError),
    #[error(transparent)]
    Network(#[from] QError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error(transparent)]
    Resampling(#[from] ResamplingError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error("non-finite semi-gradient at step {step}, transition {index}")]
    NonFiniteSemiGradient { step: usize, index: usize },
    #[error("diverged at step {step}: V estimate {v_hat} exceeds bound {bound}")]
    Diverged { step: usize, v_hat: f64, bound: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub step: usize,
    pub value: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ErrorBound {
    /// `max_i (h²/2)|tr(A_i⁻¹ H_i)|` over the sampled next states.
    pub xi: f64,
    /// `γ ξ / (1 − γ)`.
    pub bound: f64,
    pub samples: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub algo: Algo,
    pub seed: u64,
    pub config_hash: String,
    pub env_config_hash: String,
    pub data_hash: String,
    pub n: usize,
    pub steps: usize,
    pub gamma: f64,
    pub v_hat: f64,
    pub v_true: Option<f64>,
    pub curve: Vec<CurvePoint>,
    pub h_curve: Vec<CurvePoint>,
    pub b_norm_sq_curve: Vec<CurvePoint>,
    pub v_curve: Vec<CurvePoint>,
    pub final_bandwidth: Option<f64>,
    /// The kernel metric stayed the identity throughout.
    pub identity_metric: bool,
    /// Mean diagonal of the metrics from the last refresh.
    pub metric_diag_mean: Option<Vec<f64>>,
    pub degenerate_metrics: Option<usize>,
    pub error_bound: Option<ErrorBound>,
    pub mean_weight: Option<f64>,
    pub effective_sample_size: Option<f64>,
    pub wall_time_secs: f64,
}

impl RunReport {
    pub fn from_json(s: &str) -> Result<Self, TrainError> {
        serde_json::from_str(s).map_err(|e| TrainError::Config(e.to_string()))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// JSON with the wall-clock field zeroed, for byte comparisons across runs.
    pub fn to_json_without_timing(&self) -> String {
        Self { wall_time_secs: 0.0, ..self.clone() }.to_json()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BandwidthRow {
    pub step: usize,
    pub h_star: f64,
    pub h_used: f64,
    pub b_norm_sq: f64,
    pub v: f64,
    pub lomse_bias: f64,
    pub lomse_variance: f64,
    pub fallback: bool,
    pub clamped: bool,
}

#[derive(Clone, Debug, Default)]
pub struct Diagnostics {
    pub bandwidth: Vec<BandwidthRow>,
    /// `(refresh step, transition index, metric)` for the first few transitions.
    pub metrics: Vec<(u64, usize, StateMetric<f64>)>,
}

impl Diagnostics {
    pub fn bandwidth_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        for r in &self.bandwidth {
            w.serialize(r).expect("in-memory csv");
        }
        String::from_utf8(w.into_inner().expect("flush")).expect("utf8 csv")
    }

    pub fn metric_csv(&self) -> String {
        let mut buf = Vec::new();
        let _ = write_metric_csv::<f64, _>(&mut buf, 0, &[], true);
        for (step, idx, m) in &self.metrics {
            write_metric_csv(&mut buf, *step, &[(*idx, m)], false).expect("in-memory write");
        }
        String::from_utf8(buf).expect("utf8 csv")
    }
}

pub struct TrainOutput {
    pub net: QNetwork<f64>,
    pub report: RunReport,
    pub diagnostics: Diagnostics,
}

/// Quantities that depend only on the data and the two policies.
struct Prepared {
    /// `π̃(s′_i)`
    target_next: Vec<Vec<f64>>,
    /// `μ(a′_i | s′_i)`, or its per-coordinate factors in per-dimension mode.
    density_next: Vec<f64>,
    density_dims_next: Vec<Vec<f64>>,
    /// `μ(π̃(s′_i) | s′_i)`
    density_at_target: Vec<f64>,
    initial: Vec<(Vec<f64>, Vec<f64>)>,
    density_floor: f64,
}

fn prepare(problem: &Problem, data: &Dataset, cfg: &TrainConfig) -> Result<Prepared, TrainError> {
    let fitted;
    let (behavior, density_floor): (&dyn BehaviorModel, f64) = match &cfg.behavior {
        BehaviorSource::Known => (&problem.behavior, cfg.kernel.density_floor),
        BehaviorSource::Fitted(fc) => {
            fitted = fit_behavior_gaussian(data, fc, cfg.seed)?.policy;
            (&fitted, cfg.kernel.density_floor.max(DENSITY_FLOOR_FITTED))
        }
    };
    let n = data.len();
    let mut target_next = Vec::with_capacity(n);
    let mut density_next = Vec::with_capacity(n);
    let mut density_dims_next = Vec::new();
    let mut density_at_target = Vec::with_capacity(n);
    for t in &data.transitions {
        let ta = problem.target.action(&t.s_next);
        if cfg.kernel.per_dim_clip {
            let dims = behavior.log_density_dims(&t.s_next, &t.a_next)?;
            density_next.push(dims.iter().sum::<f64>().exp());
            density_dims_next.push(dims.iter().map(|x| x.exp()).collect());
        } else {
            density_next.push(behavior.density(&t.s_next, &t.a_next)?);
        }
        density_at_target.push(behavior.density(&t.s_next, &ta)?);
        target_next.push(ta);
    }
    let initial = data
        .initial_states()
        .into_iter()
        .map(|s| {
            let a = problem.target.action(&s);
            (s, a)
        })
        .collect();
    Ok(Prepared { target_next, density_next, density_dims_next, density_at_target, initial, density_floor })
}

/// Ratios `w^K_i` for every transition under bandwidth `h` and per-state
/// factors `L_i` (identity when `factors` is `None`).
pub fn compute_ratios(
    transitions: &[Transition],
    target_next: &[Vec<f64>],
    density_next: &[f64],
    density_dims_next: Option<&[Vec<f64>]>,
    kernel: &KernelConfig,
    h: f64,
    factors: Option<&[Matrix<f64>]>,
) -> Result<Vec<f64>, TrainError> {
    let cfg = KernelConfig { bandwidth: h, ..kernel.clone() };
    let identity = Matrix::identity(transitions.first().map_or(0, |t| t.a_next.len()));
    transitions
        .iter()
        .enumerate()
        .map(|(i, t)| {
            let l = factors.map_or(&identity, |f| &f[i]);
            let w = match density_dims_next {
                Some(dims) => relaxed_ratio_per_dim(&cfg, l, &target_next[i], &t.a_next, &dims[i])?,
                None => relaxed_ratio(&cfg, l, &target_next[i], &t.a_next, density_next[i])?,
            };
            Ok(w)
        })
        .collect()
}

/// Resampling table over all transitions.
pub fn build_resampling_table(
    transitions: &[Transition],
    target_next: &[Vec<f64>],
    density_next: &[f64],
    density_dims_next: Option<&[Vec<f64>]>,
    kernel: &KernelConfig,
    h: f64,
    factors: Option<&[Matrix<f64>]>,
) -> Result<ResamplingTable, TrainError> {
    let w = compute_ratios(transitions, target_next, density_next, density_dims_next, kernel, h, factors)?;
    Ok(ResamplingTable::from_weights(w, h)?)
}

/// Reusable buffers for semi-gradient accumulation.
#[derive(Default)]
pub struct UpdateScratch {
    tape: Tape<f64>,
    input: Vec<f64>,
}

fn concat(buf: &mut Vec<f64>, s: &[f64], a: &[f64]) {
    buf.clear();
    buf.extend_from_slice(s);
    buf.extend_from_slice(a);
}

/// Adds `scale · δ · ∇_θQ_θ(s, a)` into `acc` with `δ = r + γQ_θ̄(s′, a_boot) − Q_θ(s, a)`
/// (no bootstrap term for terminal transitions) and returns `δ`.
pub fn accumulate_semi_gradient(
    t: &Transition,
    a_boot: &[f64],
    net: &QNetwork<f64>,
    target: &QNetwork<f64>,
    gamma: f64,
    scale: f64,
    acc: &mut [f64],
    scratch: &mut UpdateScratch,
) -> f64 {
    let boot = if t.terminal {
        0.0
    } else {
        concat(&mut scratch.input, &t.s_next, a_boot);
        gamma * target.mlp().forward(&scratch.input)[0]
    };
    concat(&mut scratch.input, &t.s, &t.a);
    net.mlp().forward_tape(&scratch.input, &mut scratch.tape);
    let delta = t.r + boot - scratch.tape.output()[0];
    if delta.is_finite() && delta != 0.0 {
        net.mlp().backward(&scratch.tape, &[1.0], scale * delta, acc, None);
    }
    delta
}

/// `Δ̂ = (w̄/k) Σ_j (r_j + γQ_θ̄(s′_j, a′_j) − Q_θ(s_j, a_j)) ∇_θQ_θ(s_j, a_j)`
/// over the resampled indices. Errors with the offending transition index
/// if a TD error is non-finite.
pub fn ir_update_vector(
    transitions: &[Transition],
    indices: &[usize],
    mean_weight: f64,
    net: &QNetwork<f64>,
    target: &QNetwork<f64>,
    gamma: f64,
    scratch: &mut UpdateScratch,
) -> Result<Vec<f64>, usize> {
    let mut acc = vec![0.0; net.num_params()];
    let scale = mean_weight / indices.len() as f64;
    for &i in indices {
        let t = &transitions[i];
        let delta = accumulate_semi_gradient(t, &t.a_next, net, target, gamma, scale, &mut acc, scratch);
        if !delta.is_finite() {
            return Err(i);
        }
    }
    Ok(acc)
}

/// `(1 − γ)·mean_j Q_θ(s₀_j, π̃(s₀_j))`.
pub fn policy_value_readout(net: &QNetwork<f64>, initial: &[(Vec<f64>, Vec<f64>)], gamma: f64) -> f64 {
    if initial.is_empty() {
        return f64::NAN;
    }
    let mut buf = Vec::new();
    let qs: Vec<f64> = initial
        .iter()
        .map(|(s, a)| {
            concat(&mut buf, s, a);
            net.mlp().forward(&buf)[0]
        })
        .collect();
    (1.0 - gamma) * crate::scalar::pairwise_sum(&qs) / qs.len() as f64
}

/// `ξ̂ = max_i (h²/2)|tr(A_i⁻¹ ∇²_a Q(s′_i, π̃(s′_i)))|` and the bound `γξ̂/(1 − γ)`.
pub fn error_bound_xi<T: Real>(
    next_states: &[Vec<f64>],
    target_actions: &[Vec<f64>],
    net: &QNetwork<T>,
    metrics: &[SymMatrix<T>],
    h: T,
    gamma: T,
) -> Result<ErrorBound, TrainError> {
    if metrics.len() != next_states.len() || target_actions.len() != next_states.len() {
        return Err(TrainError::Config("error bound inputs are misaligned".into()));
    }
    let mut xi = T::zero();
    for ((s, a), m) in next_states.iter().zip(target_actions).zip(metrics) {
        let hess = net.hess_action(&crate::scalar::cast(s), &crate::scalar::cast(a))?;
        let tr = trace_term(m, &hess)?;
        xi = xi.max(h * h * T::of(0.5) * tr.abs());
    }
    let xi = xi.as_f64();
    let g = gamma.as_f64();
    Ok(ErrorBound { xi, bound: g * xi / (1.0 - g), samples: next_states.len() })
}

struct MetricState {
    factors: Vec<Matrix<f64>>,
    diag_mean: Vec<f64>,
    degenerate: usize,
}

fn nearest(points: &[&[f64]], x: &[f64]) -> usize {
    let mut best = (f64::INFINITY, 0);
    for (j, p) in points.iter().enumerate() {
        let d: f64 = p.iter().zip(x).map(|(a, b)| (a - b) * (a - b)).sum();
        if d < best.0 {
            best = (d, j);
        }
    }
    best.1
}

fn refresh_metrics(
    data: &Dataset,
    prep: &Prepared,
    target: &QNetwork<f64>,
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
    step: u64,
    diagnostics: &mut Diagnostics,
) -> Result<MetricState, TrainError> {
    let n = data.len();
    let d = data.action_dim();
    let chosen: Vec<usize> = match cfg.metric_subsample {
        Some(f) if f < 1.0 => {
            let m = ((n as f64 * f).ceil() as usize).clamp(1, n);
            rand::seq::index::sample(rng, n, m).into_vec()
        }
        _ => (0..n).collect(),
    };
    let mut computed = Vec::with_capacity(chosen.len());
    for &i in &chosen {
        let t = &data.transitions[i];
        let m = if t.terminal {
            StateMetric::identity(d)
        } else {
            let (_, h) = target.value_and_hess_action_unchecked(&t.s_next, &prep.target_next[i]);
            optimal_metric(&h, cfg.metric_eps)
        };
        computed.push(m);
    }
    let mut diag_sum = vec![0.0; d];
    let mut degenerate = 0;
    for m in &computed {
        axpy(1.0, &m.diag(), &mut diag_sum);
        degenerate += usize::from(m.degenerate);
    }
    let diag_mean = diag_sum.iter().map(|x| x / computed.len() as f64).collect();
    let mut factors = vec![Matrix::identity(d); n];
    let mut is_chosen = vec![None; n];
    for (j, &i) in chosen.iter().enumerate() {
        is_chosen[i] = Some(j);
        factors[i] = computed[j].l.clone();
    }
    if chosen.len() < n {
        let points: Vec<&[f64]> = chosen.iter().map(|&i| data.transitions[i].s_next.as_slice()).collect();
        for i in 0..n {
            if is_chosen[i].is_none() {
                factors[i] = computed[nearest(&points, &data.transitions[i].s_next)].l.clone();
            }
        }
    }
    for i in 0..cfg.metric_dump_states.min(n) {
        let m = match is_chosen[i] {
            Some(j) => computed[j].clone(),
            None => {
                let t = &data.transitions[i];
                let (_, h) = target.value_and_hess_action_unchecked(&t.s_next, &prep.target_next[i]);
                optimal_metric(&h, cfg.metric_eps)
            }
        };
        diagnostics.metrics.push((step, i, m));
    }
    Ok(MetricState { factors, diag_mean, degenerate })
}

struct BandwidthStats {
    b_norm_sq: f64,
    v: f64,
}

/// Streaming estimates of `‖b‖²` and `v` on a uniform data mini-batch.
fn bandwidth_statistics(
    data: &Dataset,
    prep: &Prepared,
    net: &QNetwork<f64>,
    target: &QNetwork<f64>,
    gamma: f64,
    batch: usize,
    half_batch: bool,
    rng: &mut ChaCha8Rng,
) -> BandwidthStats {
    let n = data.len();
    let p = net.num_params();
    let d = data.action_dim();
    let mut b_halves = [vec![0.0; p], vec![0.0; p]];
    let mut grad = vec![0.0; p];
    let mut v_sum = 0.0;
    let mut scratch = QScratch::default();
    for j in 0..batch {
        let i = rng.random_range(0..n);
        let t = &data.transitions[i];
        grad.iter_mut().for_each(|g| *g = 0.0);
        let q = net.value_and_accumulate_grad(&t.s, &t.a, 1.0, &mut grad, &mut scratch);
        let (boot, lap) = if t.terminal {
            (0.0, 0.0)
        } else {
            target.value_and_laplacian_unchecked(&t.s_next, &prep.target_next[i])
        };
        let delta = t.r + gamma * boot - q;
        axpy(lap, &grad, &mut b_halves[if half_batch { j % 2 } else { 0 }]);
        v_sum += delta * delta * norm_sq(&grad) / prep.density_at_target[i].max(prep.density_floor);
    }
    let v = crate::kernel::kernel_constant::<f64>(d) * v_sum / batch as f64;
    let b_norm_sq = if half_batch {
        let half = (batch / 2).max(1) as f64;
        let c = gamma / 2.0 / half;
        let c2 = gamma / 2.0 / (batch - batch / 2).max(1) as f64;
        crate::scalar::dot(&b_halves[0], &b_halves[1]) * c * c2
    } else {
        let c = gamma / 2.0 / batch as f64;
        norm_sq(&b_halves[0]) * c * c
    };
    BandwidthStats { b_norm_sq, v }
}

fn check_divergence(v_hat: f64, step: usize, bound: f64) -> Result<(), TrainError> {
    if !v_hat.is_finite() || v_hat.abs() > bound {
        return Err(TrainError::Diverged { step, v_hat, bound });
    }
    Ok(())
}

fn base_report(problem: &Problem, data: &Dataset, cfg: &TrainConfig, algo: Algo, gamma: f64, v_true: Option<f64>) -> RunReport {
    let _ = problem;
    RunReport {
        algo,
        seed: cfg.seed,
        config_hash: TrainConfig { algo: Some(algo), ..cfg.clone() }.hash(),
        env_config_hash: data.manifest.env_config_hash.clone(),
        data_hash: data.manifest.data_hash.clone(),
        n: data.len(),
        steps: cfg.steps,
        gamma,
        v_hat: f64::NAN,
        v_true,
        curve: Vec::new(),
        h_curve: Vec::new(),
        b_norm_sq_curve: Vec::new(),
        v_curve: Vec::new(),
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

fn check_data(problem: &Problem, data: &Dataset) -> Result<(), TrainError> {
    if data.is_empty() {
        return Err(TrainError::Config("dataset is empty".into()));
    }
    if data.state_dim() != problem.env.obs_dim() || data.action_dim() != problem.env.action_dim() {
        return Err(TrainError::Config(format!(
            "dataset dims ({}, {}) do not match environment ({}, {})",
            data.state_dim(),
            data.action_dim(),
            problem.env.obs_dim(),
            problem.env.action_dim()
        )));
    }
    Ok(())
}

/// Evenly strided indices of non-terminal transitions used by the error-bound diagnostic.
fn error_bound_indices(data: &Dataset, count: usize) -> Vec<usize> {
    let candidates: Vec<usize> = (0..data.len()).filter(|&i| !data.transitions[i].terminal).collect();
    if candidates.is_empty() || count == 0 {
        return Vec::new();
    }
    let m = count.min(candidates.len());
    (0..m).map(|j| candidates[j * candidates.len() / m]).collect()
}

/// Trains with the configured algorithm.
pub fn train(problem: &Problem, data: &Dataset, cfg: &TrainConfig, v_true: Option<f64>) -> Result<TrainOutput, TrainError> {
    match cfg.algo() {
        Algo::Fqe => fqe_train(problem, data, cfg, v_true),
        Algo::Kmifqe | Algo::KmifqeNometric => kmifqe_train(problem, data, cfg, v_true),
    }
}

/// Kernel-relaxed importance-resampling FQE.
///
/// Every `target_update_interval` steps the target network is hard-updated;
/// every `metric_refresh_interval` steps (metric arm only) the per-state
/// metrics are recomputed from the target network's action Hessians at
/// `π̃(s′)`. The bandwidth is re-estimated every `bandwidth_interval` steps.
/// The ratio table is rebuilt when the bandwidth moves by more than 1% or
/// the metrics change (every step in strict mode).
pub fn kmifqe_train(problem: &Problem, data: &Dataset, cfg: &TrainConfig, v_true: Option<f64>) -> Result<TrainOutput, TrainError> {
    let start = Instant::now();
    let algo = cfg.algo();
    if algo == Algo::Fqe {
        return Err(TrainError::Config("kmifqe_train called with the fqe algorithm".into()));
    }
    check_data(problem, data)?;
    cfg.validate(data.len())?;
    let gamma = cfg.gamma.unwrap_or(problem.env.gamma());
    let prep = prepare(problem, data, cfg)?;
    let n = data.len();
    let d = data.action_dim();

    let mut net = QNetwork::<f64>::new(data.state_dim(), d, &cfg.hidden, cfg.activation, cfg.seed)?;
    let mut target = TargetSnapshot::new(&net, 0);
    let mut rng_resample = crate::envs::episode_rng(cfg.seed, 1);
    let mut rng_bandwidth = crate::envs::episode_rng(cfg.seed, 2);
    let mut rng_metric = crate::envs::episode_rng(cfg.seed, 3);

    let mut report = base_report(problem, data, cfg, algo, gamma, v_true);
    let mut diagnostics = Diagnostics::default();
    let mut metric_state: Option<MetricState> = None;
    let mut h = cfg.kernel.bandwidth;
    let mut smoother = cfg.bandwidth_ema.map(BandwidthSmoother::new);
    let mut last_estimate: Option<BandwidthEstimate> = None;
    let dims = cfg.kernel.per_dim_clip.then_some(prep.density_dims_next.as_slice());
    let rebuild = |h: f64, ms: &Option<MetricState>| {
        build_resampling_table(
            &data.transitions,
            &prep.target_next,
            &prep.density_next,
            dims,
            &cfg.kernel,
            h,
            ms.as_ref().map(|m| m.factors.as_slice()),
        )
    };
    let mut table: Option<ResamplingTable> = None;
    let mut scratch = UpdateScratch::default();
    let bw_batch = cfg.bandwidth_batch.unwrap_or(cfg.batch_size).max(2);

    for step in 0..cfg.steps {
        let mut metrics_changed = false;
        if step > 0 && step % cfg.target_update_interval == 0 {
            target = target.hard_update(&net, step as u64);
        }
        if algo.uses_metric() && step > 0 && step % cfg.metric_refresh_interval == 0 {
            metric_state =
                Some(refresh_metrics(data, &prep, target.net(), cfg, &mut rng_metric, step as u64, &mut diagnostics)?);
            metrics_changed = true;
        }
        if cfg.bandwidth_mode == BandwidthMode::Learned && step % cfg.bandwidth_interval == 0 {
            let stats = bandwidth_statistics(
                data,
                &prep,
                &net,
                target.net(),
                gamma,
                bw_batch,
                cfg.half_batch_bias,
                &mut rng_bandwidth,
            );
            let est = optimal_bandwidth(stats.b_norm_sq.max(0.0), stats.v, n, d, h);
            let h_new = match smoother.as_mut() {
                Some(s) if !est.fallback => s.update(est.h_star),
                _ => est.h_star,
            };
            h = h_new;
            diagnostics.bandwidth.push(BandwidthRow {
                step,
                h_star: est.h_star,
                h_used: h,
                b_norm_sq: est.b_norm_sq,
                v: est.v,
                lomse_bias: h.powi(4) * est.b_norm_sq,
                lomse_variance: est.v / (n as f64 * h.powi(d as i32)),
                fallback: est.fallback,
                clamped: est.clamped,
            });
            last_estimate = Some(est);
        }
        let stale = match &table {
            None => true,
            Some(t) => cfg.strict || metrics_changed || (h - t.bandwidth).abs() > 0.01 * t.bandwidth,
        };
        if stale {
            table = Some(rebuild(h, &metric_state)?);
        }
        let tbl = table.as_ref().expect("table built");
        let indices = tbl.resample(cfg.batch_size, &mut rng_resample);
        let update = ir_update_vector(&data.transitions, &indices, tbl.mean_weight, &net, target.net(), gamma, &mut scratch)
            .map_err(|index| TrainError::NonFiniteSemiGradient { step, index })?;
        net.adam_step(&update, cfg.learning_rate)?;

        if (step + 1) % cfg.eval_interval == 0 || step + 1 == cfg.steps {
            let v_hat = policy_value_readout(&net, &prep.initial, gamma);
            check_divergence(v_hat, step + 1, cfg.divergence_bound)?;
            report.curve.push(CurvePoint { step: step + 1, value: v_hat });
            report.h_curve.push(CurvePoint { step: step + 1, value: tbl.bandwidth });
            if let Some(e) = &last_estimate {
                report.b_norm_sq_curve.push(CurvePoint { step: step + 1, value: e.b_norm_sq });
                report.v_curve.push(CurvePoint { step: step + 1, value: e.v });
            }
        }
    }

    report.v_hat = policy_value_readout(&net, &prep.initial, gamma);
    check_divergence(report.v_hat, cfg.steps, cfg.divergence_bound)?;
    report.final_bandwidth = table.as_ref().map(|t| t.bandwidth).or(Some(h));
    report.mean_weight = table.as_ref().map(|t| t.mean_weight);
    report.effective_sample_size = table.as_ref().map(ResamplingTable::effective_sample_size);
    report.identity_metric = metric_state.is_none();
    if let Some(ms) = &metric_state {
        report.metric_diag_mean = Some(ms.diag_mean.clone());
        report.degenerate_metrics = Some(ms.degenerate);
    }
    let idx = error_bound_indices(data, cfg.error_bound_samples);
    let states: Vec<Vec<f64>> = idx.iter().map(|&i| data.transitions[i].s_next.clone()).collect();
    let actions: Vec<Vec<f64>> = idx.iter().map(|&i| prep.target_next[i].clone()).collect();
    let metrics: Vec<SymMatrix<f64>> = idx
        .iter()
        .map(|&i| match &metric_state {
            Some(ms) => SymMatrix::symmetrize(&ms.factors[i].matmul(&ms.factors[i].transpose())).expect("finite metric"),
            None => SymMatrix::identity(d),
        })
        .collect();
    if !states.is_empty() {
        report.error_bound = Some(error_bound_xi(&states, &actions, &net, &metrics, h, gamma)?);
    }
    report.wall_time_secs = start.elapsed().as_secs_f64();
    Ok(TrainOutput { net, report, diagnostics })
}

/// Fitted Q evaluation: uniform mini-batches, TD targets at `π̃(s′)`, Polyak target updates.
pub fn fqe_train(problem: &Problem, data: &Dataset, cfg: &TrainConfig, v_true: Option<f64>) -> Result<TrainOutput, TrainError> {
    let start = Instant::now();
    check_data(problem, data)?;
    cfg.validate(data.len())?;
    let gamma = cfg.gamma.unwrap_or(problem.env.gamma());
    let n = data.len();
    let target_next: Vec<Vec<f64>> = data.transitions.iter().map(|t| problem.target.action(&t.s_next)).collect();
    let initial: Vec<(Vec<f64>, Vec<f64>)> = data
        .initial_states()
        .into_iter()
        .map(|s| {
            let a = problem.target.action(&s);
            (s, a)
        })
        .collect();
    let mut net = QNetwork::<f64>::new(data.state_dim(), data.action_dim(), &cfg.hidden, cfg.activation, cfg.seed)?;
    let mut target = TargetSnapshot::new(&net, 0);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);
    let mut report = base_report(problem, data, cfg, Algo::Fqe, gamma, v_true);
    let mut scratch = UpdateScratch::default();
    let k = cfg.fqe_batch_size;
    let mut acc = vec![0.0; net.num_params()];
    for step in 0..cfg.steps {
        acc.iter_mut().for_each(|g| *g = 0.0);
        for _ in 0..k {
            let i = rng.random_range(0..n);
            let delta = accumulate_semi_gradient(
                &data.transitions[i],
                &target_next[i],
                &net,
                target.net(),
                gamma,
                1.0 / k as f64,
                &mut acc,
                &mut scratch,
            );
            if !delta.is_finite() {
                return Err(TrainError::NonFiniteSemiGradient { step, index: i });
            }
        }
        net.adam_step(&acc, cfg.learning_rate)?;
        target.soft_update(&net, cfg.fqe_tau, step as u64 + 1);
        if (step + 1) % cfg.eval_interval == 0 || step + 1 == cfg.steps {
            let v_hat = policy_value_readout(&net, &initial, gamma);
            check_divergence(v_hat, step + 1, cfg.divergence_bound)?;
            report.curve.push(CurvePoint { step: step + 1, value: v_hat });
        }
    }
    report.v_hat = policy_value_readout(&net, &initial, gamma);
    check_divergence(report.v_hat, cfg.steps, cfg.divergence_bound)?;
    report.wall_time_secs = start.elapsed().as_secs_f64();
    Ok(TrainOutput { net, report, diagnostics: Diagnostics::default() })
}
