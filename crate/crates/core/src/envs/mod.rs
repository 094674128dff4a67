//! Benchmark MDPs, target/behavior policies and Monte Carlo ground truth.

pub mod lqg;
pub mod pendulum;
pub mod policy;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::numerics::{Matrix, SymMatrix};
pub use lqg::LqgSpec;
pub use pendulum::PendulumSpec;
pub use policy::{BehaviorModel, BehaviorPolicy, Controller, SwingUpGains, TargetPolicy};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum EnvError {
    #[error("invalid environment config: {0}")]
    Config(String),
    #[error("action coordinate {dim} = {value} outside the behavior support")]
    OutsideSupport { dim: usize, value: f64 },
    #[error("dimension mismatch: expected {expected}, found {found}")]
    Dimension { expected: usize, found: usize },
    #[error("non-finite state after step")]
    NonFiniteState,
    #[error("policy is not discounted-stable: sqrt(gamma) * spectral radius = {discounted_spectral_radius}")]
    Unstable { discounted_spectral_radius: f64 },
}

/// Simulator for either benchmark. Internal states differ from observations
/// only for the pendulum (`(θ, θ̇)` versus `(cos θ, sin θ, θ̇)`).
#[derive(Clone, Debug, PartialEq)]
pub enum Env {
    Lqg(LqgSpec),
    Pendulum(PendulumSpec),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Step {
    pub state: Vec<f64>,
    pub reward: f64,
    pub terminal: bool,
}

impl Env {
    pub fn gamma(&self) -> f64 {
        match self {
            Env::Lqg(s) => s.gamma,
            Env::Pendulum(s) => s.gamma,
        }
    }

    pub fn horizon(&self) -> usize {
        match self {
            Env::Lqg(s) => s.horizon,
            Env::Pendulum(s) => s.horizon,
        }
    }

    pub fn obs_dim(&self) -> usize {
        match self {
            Env::Lqg(s) => s.state_dim(),
            Env::Pendulum(_) => 3,
        }
    }

    pub fn action_dim(&self) -> usize {
        match self {
            Env::Lqg(s) => s.action_dim(),
            Env::Pendulum(s) => s.action_dim(),
        }
    }

    pub fn reset(&self, rng: &mut impl Rng) -> Vec<f64> {
        match self {
            Env::Lqg(s) => s.initial_state(rng),
            Env::Pendulum(s) => s.initial_state(rng),
        }
    }

    pub fn observe(&self, state: &[f64]) -> Vec<f64> {
        match self {
            Env::Lqg(_) => state.to_vec(),
            Env::Pendulum(s) => s.observe(state),
        }
    }

    /// Advances one step. Neither benchmark terminates; episodes end by truncation.
    pub fn step(&self, state: &[f64], action: &[f64], rng: &mut impl Rng) -> Result<Step, EnvError> {
        if action.len() != self.action_dim() {
            return Err(EnvError::Dimension { expected: self.action_dim(), found: action.len() });
        }
        let (next, reward) = match self {
            Env::Lqg(s) => s.step(state, action, rng),
            Env::Pendulum(s) => s.step(state, action),
        };
        if !next.iter().all(|x| x.is_finite()) || !reward.is_finite() {
            return Err(EnvError::NonFiniteState);
        }
        Ok(Step { state: next, reward, terminal: false })
    }
}

fn default_lqg_gamma() -> f64 {
    0.9
}
fn default_dummy_cost() -> f64 {
    1e-3
}
fn default_noise_std() -> f64 {
    0.2
}
fn default_one() -> f64 {
    1.0
}
fn default_lqg_horizon() -> usize {
    100
}
fn default_behavior_std() -> f64 {
    0.5
}

/// Optional replacement for the reference LQG system matrices.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LqgSystem {
    pub f: Vec<Vec<f64>>,
    pub g: Vec<Vec<f64>>,
    pub q_cost: Vec<Vec<f64>>,
    pub r_cost: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LqgConfig {
    #[serde(default = "default_lqg_gamma")]
    pub gamma: f64,
    #[serde(default)]
    pub dummy_dims: usize,
    /// Action cost on each dummy coordinate.
    #[serde(default = "default_dummy_cost")]
    pub dummy_cost: f64,
    /// Isotropic transition noise standard deviation.
    #[serde(default = "default_noise_std")]
    pub noise_std: f64,
    #[serde(default = "default_one")]
    pub init_std: f64,
    #[serde(default = "default_lqg_horizon")]
    pub horizon: usize,
    /// Gaussian exploration std on the real action coordinates.
    #[serde(default = "default_behavior_std")]
    pub behavior_std: f64,
    /// Dummy actions are uniform on `[-dummy_range, dummy_range]`.
    #[serde(default = "default_one")]
    pub dummy_range: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub system: Option<LqgSystem>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target_gain: Option<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub behavior_gain: Option<Vec<Vec<f64>>>,
}

impl Default for LqgConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("defaults deserialize")
    }
}

fn default_pendulum_gamma() -> f64 {
    0.95
}
fn default_pendulum_horizon() -> usize {
    200
}
fn default_a_max() -> f64 {
    2.0
}
fn default_uniform_weight() -> f64 {
    0.2
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PendulumConfig {
    #[serde(default = "default_pendulum_gamma")]
    pub gamma: f64,
    #[serde(default)]
    pub dummy_dims: usize,
    #[serde(default = "default_pendulum_horizon")]
    pub horizon: usize,
    #[serde(default = "default_a_max")]
    pub a_max: f64,
    /// Gaussian component std as a fraction of `a_max`.
    #[serde(default = "default_behavior_std")]
    pub behavior_std_frac: f64,
    #[serde(default = "default_uniform_weight")]
    pub uniform_weight: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target_gains: Option<SwingUpGains>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub behavior_gains: Option<SwingUpGains>,
}

impl Default for PendulumConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("defaults deserialize")
    }
}

/// Environment config file: `{"env": "lqg" | "pendulum", ...}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "env", rename_all = "snake_case")]
pub enum EnvConfig {
    Lqg(LqgConfig),
    Pendulum(PendulumConfig),
}

/// An environment together with the policy to evaluate and the data-collecting policy.
#[derive(Clone, Debug, PartialEq)]
pub struct Problem {
    pub env: Env,
    pub target: TargetPolicy,
    pub behavior: BehaviorPolicy,
}

fn matrix_checked(rows: &[Vec<f64>], r: usize, c: usize, what: &str) -> Result<Matrix<f64>, EnvError> {
    if rows.len() != r || rows.iter().any(|row| row.len() != c) {
        return Err(EnvError::Config(format!("{what} must be {r}x{c}")));
    }
    Ok(Matrix::from_rows(rows))
}

impl EnvConfig {
    pub fn from_json(s: &str) -> Result<Self, EnvError> {
        serde_json::from_str(s).map_err(|e| EnvError::Config(e.to_string()))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// SHA-256 of the canonical compact JSON encoding.
    pub fn hash(&self) -> String {
        let canonical = serde_json::to_string(self).expect("config serializes");
        hex::encode(Sha256::digest(canonical.as_bytes()))
    }

    pub fn gamma(&self) -> f64 {
        match self {
            EnvConfig::Lqg(c) => c.gamma,
            EnvConfig::Pendulum(c) => c.gamma,
        }
    }

    pub fn build(&self) -> Result<Problem, EnvError> {
        match self {
            EnvConfig::Lqg(c) => build_lqg(c),
            EnvConfig::Pendulum(c) => build_pendulum(c),
        }
    }

    /// Base LQG spec including dummy coordinates, if this is an LQG config.
    pub fn lqg_spec(&self) -> Result<Option<LqgSpec>, EnvError> {
        match self.build()?.env {
            Env::Lqg(s) => Ok(Some(s)),
            Env::Pendulum(_) => Ok(None),
        }
    }
}

fn build_lqg(c: &LqgConfig) -> Result<Problem, EnvError> {
    let mut base = LqgSpec::reference(c.gamma);
    if let Some(sys) = &c.system {
        let q = sys.f.len();
        let d = sys.r_cost.len();
        base.f = matrix_checked(&sys.f, q, q, "f")?;
        base.g = matrix_checked(&sys.g, q, d, "g")?;
        base.q_cost = SymMatrix::from_rows(&sys.q_cost).map_err(|e| EnvError::Config(format!("q_cost: {e}")))?;
        base.r_cost = sys.r_cost.clone();
        base.k_policy = Matrix::zeros(d, q);
        if c.target_gain.is_none() || c.behavior_gain.is_none() {
            return Err(EnvError::Config("a custom system needs target_gain and behavior_gain".into()));
        }
    }
    let (q, d) = (base.state_dim(), base.action_dim());
    if let Some(k) = &c.target_gain {
        base.k_policy = matrix_checked(k, d, q, "target_gain")?;
    }
    let behavior_gain = match &c.behavior_gain {
        Some(k) => matrix_checked(k, d, q, "behavior_gain")?,
        None => LqgSpec::reference_behavior_gain(),
    };
    base.noise_cov = SymMatrix::identity(q).scale(c.noise_std * c.noise_std);
    base.init_std = c.init_std;
    base.horizon = c.horizon;
    let spec = base.with_dummy_dims(c.dummy_dims, c.dummy_cost);
    spec.validate()?;
    let target = TargetPolicy { controller: Controller::Linear { gain: base.k_policy.to_rows() }, dummy_dims: c.dummy_dims };
    let behavior = BehaviorPolicy {
        base: Controller::Linear { gain: behavior_gain.to_rows() },
        std: vec![c.behavior_std; d],
        uniform_weight: 0.0,
        a_max: None,
        dummy_dims: c.dummy_dims,
        dummy_range: c.dummy_range,
    };
    behavior.validate()?;
    Ok(Problem { env: Env::Lqg(spec), target, behavior })
}

fn build_pendulum(c: &PendulumConfig) -> Result<Problem, EnvError> {
    let spec = PendulumSpec { gamma: c.gamma, dummy_dims: c.dummy_dims, horizon: c.horizon, a_max: c.a_max, ..PendulumSpec::default() };
    if !(0.0..1.0).contains(&spec.gamma) || spec.horizon == 0 || !(spec.a_max > 0.0) {
        return Err(EnvError::Config("pendulum needs gamma in [0, 1), positive horizon and a_max".into()));
    }
    let target_gains = c.target_gains.clone().unwrap_or_else(|| SwingUpGains::expert(c.a_max));
    let behavior_gains = c.behavior_gains.clone().unwrap_or_else(|| SwingUpGains::medium(c.a_max));
    let target = TargetPolicy { controller: Controller::SwingUp(target_gains), dummy_dims: c.dummy_dims };
    let behavior = BehaviorPolicy {
        base: Controller::SwingUp(behavior_gains),
        std: vec![c.behavior_std_frac * c.a_max],
        uniform_weight: c.uniform_weight,
        a_max: Some(c.a_max),
        dummy_dims: c.dummy_dims,
        dummy_range: c.a_max,
    };
    behavior.validate()?;
    Ok(Problem { env: Env::Pendulum(spec), target, behavior })
}

/// Monte Carlo estimate of a normalised policy value with its standard error.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct McEstimate {
    pub value: f64,
    pub stderr: f64,
    pub episodes: usize,
}

/// Deterministic per-episode random stream, independent of evaluation order.
pub fn episode_rng(seed: u64, episode: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(episode);
    rng
}

/// `(1 − γ) Σ_t γ^t r_t` for one full-horizon episode.
pub fn rollout_return(
    env: &Env,
    policy: &impl Fn(&[f64], &mut ChaCha8Rng) -> Vec<f64>,
    rng: &mut ChaCha8Rng,
) -> Result<f64, EnvError> {
    let gamma = env.gamma();
    let mut state = env.reset(rng);
    let (mut total, mut discount) = (0.0, 1.0);
    for _ in 0..env.horizon() {
        let obs = env.observe(&state);
        let action = policy(&obs, rng);
        let step = env.step(&state, &action, rng)?;
        total += discount * step.reward;
        discount *= gamma;
        state = step.state;
        if step.terminal {
            break;
        }
    }
    Ok((1.0 - gamma) * total)
}

/// Normalised value `(1 − γ)·E[Σ_t γ^t r_t]` averaged over `episodes` rollouts.
pub fn mc_policy_value(
    env: &Env,
    policy: impl Fn(&[f64], &mut ChaCha8Rng) -> Vec<f64>,
    episodes: usize,
    seed: u64,
) -> Result<McEstimate, EnvError> {
    let returns = (0..episodes)
        .map(|e| rollout_return(env, &policy, &mut episode_rng(seed, e as u64)))
        .collect::<Result<Vec<_>, _>>()?;
    let n = returns.len() as f64;
    let mean = crate::scalar::pairwise_sum(&returns) / n.max(1.0);
    let var = if returns.len() > 1 {
        returns.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    Ok(McEstimate { value: mean, stderr: (var / n.max(1.0)).sqrt(), episodes })
}

impl Problem {
    pub fn target_value_mc(&self, episodes: usize, seed: u64) -> Result<McEstimate, EnvError> {
        mc_policy_value(&self.env, |obs, _| self.target.action(obs), episodes, seed)
    }

    pub fn behavior_value_mc(&self, episodes: usize, seed: u64) -> Result<McEstimate, EnvError> {
        mc_policy_value(&self.env, |obs, rng| self.behavior.sample(obs, rng), episodes, seed)
    }

    /// Closed-form normalised target value when available (LQG only).
    pub fn target_value_exact(&self) -> Result<Option<f64>, EnvError> {
        match &self.env {
            Env::Lqg(spec) => spec.normalized_policy_value().map(Some),
            Env::Pendulum(_) => Ok(None),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_reward_env_has_zero_value() {
        let mut spec = LqgSpec::reference(0.9);
        spec.q_cost = SymMatrix::zeros(4);
        spec.r_cost = vec![0.0, 0.0];
        let env = Env::Lqg(spec);
        let est = mc_policy_value(&env, |_, _| vec![0.0, 0.0], 20, 1).unwrap();
        assert_eq!(est.value, 0.0);
        assert_eq!(est.stderr, 0.0);
    }

    #[test]
    fn constant_reward_normalises_to_itself() {
        // pendulum held at the bottom by a zero-torque rest state: reward -π²
        let spec = PendulumSpec { horizon: 400, ..PendulumSpec::default() };
        let env = Env::Pendulum(spec.clone());
        let mut rng = episode_rng(0, 0);
        let _ = env.reset(&mut rng);
        let state = vec![std::f64::consts::PI, 0.0];
        let mut total = 0.0;
        let mut discount = 1.0;
        let mut s = state;
        for _ in 0..spec.horizon {
            let step = env.step(&s, &[0.0], &mut rng).unwrap();
            total += discount * step.reward;
            discount *= spec.gamma;
            s = step.state;
        }
        let value = (1.0 - spec.gamma) * total;
        let rbar = -std::f64::consts::PI.powi(2);
        assert!((value - rbar).abs() <= spec.gamma.powi(400) * rbar.abs() + 1e-9);
    }

    #[test]
    fn config_defaults_and_hash_are_stable() {
        let c = EnvConfig::from_json(r#"{"env": "lqg", "dummy_dims": 2}"#).unwrap();
        let again = EnvConfig::from_json(&c.to_json()).unwrap();
        assert_eq!(c, again);
        assert_eq!(c.hash(), again.hash());
        let other = EnvConfig::from_json(r#"{"env": "lqg", "dummy_dims": 3}"#).unwrap();
        assert_ne!(c.hash(), other.hash());
        assert!(EnvConfig::from_json(r#"{"env": "lqg", "bogus": 1}"#).is_err());
        let p = c.build().unwrap();
        assert_eq!(p.env.action_dim(), 4);
        assert_eq!(p.target.action_dim(), 4);
        assert_eq!(p.behavior.action_dim(), 4);
    }

    #[test]
    fn lqg_monte_carlo_matches_closed_form() {
        let p = EnvConfig::Lqg(LqgConfig::default()).build().unwrap();
        let exact = p.target_value_exact().unwrap().unwrap();
        let mc = p.target_value_mc(4000, 11).unwrap();
        assert!((mc.value - exact).abs() < 3.0 * mc.stderr, "mc {mc:?} exact {exact}");
    }

    #[test]
    fn pendulum_target_outperforms_behavior() {
        let p = EnvConfig::Pendulum(PendulumConfig::default()).build().unwrap();
        let t = p.target_value_mc(200, 3).unwrap();
        let b = p.behavior_value_mc(200, 3).unwrap();
        assert!(t.value < 0.0);
        assert!(t.value > b.value, "target {t:?} behavior {b:?}");
    }
}
