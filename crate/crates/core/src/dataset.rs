//! Offline transition data: generation, JSON Lines storage, initial states,
//! and a maximum-likelihood Gaussian behavior model for the unknown-behavior mode.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::envs::{episode_rng, BehaviorModel, EnvConfig, EnvError, Problem};
use crate::qfunc::{adam_ascent, Activation, AdamState, Checkpoint, Mlp, QError, Tape};

#[derive(Debug, thiserror::Error)]
pub enum DatasetError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("data hash {found} does not match manifest hash {expected}")]
    HashMismatch { expected: String, found: String },
    #[error("manifest declares {expected} transitions, file holds {found}")]
    Count { expected: usize, found: usize },
    #[error("dataset was generated from env config {found}, expected {expected}")]
    EnvMismatch { expected: String, found: String },
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Network(#[from] QError),
    #[error("behavior fit diverged at epoch {epoch}: non-finite log-likelihood")]
    NonFiniteLoss { epoch: usize },
    #[error("{0}")]
    Invalid(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub s: Vec<f64>,
    pub a: Vec<f64>,
    pub r: f64,
    pub s_next: Vec<f64>,
    pub a_next: Vec<f64>,
    pub terminal: bool,
    pub is_initial: bool,
}

impl Transition {
    pub fn is_finite(&self) -> bool {
        let all = |v: &[f64]| v.iter().all(|x| x.is_finite());
        all(&self.s) && all(&self.a) && self.r.is_finite() && all(&self.s_next) && all(&self.a_next)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub env_config_hash: String,
    pub env_config: EnvConfig,
    pub n: usize,
    pub seed: u64,
    pub gamma: f64,
    pub episodes: usize,
    pub generator: String,
    /// SHA-256 over the transition lines, each terminated by `\n`.
    pub data_hash: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub transitions: Vec<Transition>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    manifest: DatasetManifest,
}

fn transition_line(t: &Transition) -> String {
    serde_json::to_string(t).expect("transition serializes")
}

fn hash_lines<'a>(lines: impl Iterator<Item = &'a str>) -> String {
    let mut h = Sha256::new();
    for l in lines {
        h.update(l.as_bytes());
        h.update(b"\n");
    }
    hex::encode(h.finalize())
}

/// Rolls out the behavior policy until `n` transitions are collected.
/// Episodes run to the horizon (or the `n` cut); `a′` is the action the
/// behavior policy takes at `s′`, freshly drawn at the final step.
pub fn generate_dataset(config: &EnvConfig, n: usize, seed: u64) -> Result<Dataset, DatasetError> {
    let problem = config.build()?;
    let transitions = generate_transitions(&problem, n, seed)?;
    let episodes = transitions.iter().filter(|t| t.is_initial).count();
    let data_hash = hash_lines(transitions.iter().map(transition_line).collect::<Vec<_>>().iter().map(String::as_str));
    let manifest = DatasetManifest {
        env_config_hash: config.hash(),
        env_config: config.clone(),
        n,
        seed,
        gamma: problem.env.gamma(),
        episodes,
        generator: format!("kmifqe {}", env!("CARGO_PKG_VERSION")),
        data_hash,
    };
    Ok(Dataset { manifest, transitions })
}

pub fn generate_transitions(problem: &Problem, n: usize, seed: u64) -> Result<Vec<Transition>, DatasetError> {
    let env = &problem.env;
    let mut out = Vec::with_capacity(n);
    let mut episode = 0u64;
    while out.len() < n {
        let mut rng = episode_rng(seed, episode);
        episode += 1;
        let mut state = env.reset(&mut rng);
        let mut obs = env.observe(&state);
        let mut action = problem.behavior.sample(&obs, &mut rng);
        for t in 0..env.horizon() {
            if out.len() == n {
                break;
            }
            let step = env.step(&state, &action, &mut rng)?;
            let obs_next = env.observe(&step.state);
            let a_next = problem.behavior.sample(&obs_next, &mut rng);
            out.push(Transition {
                s: obs,
                a: action,
                r: step.reward,
                s_next: obs_next.clone(),
                a_next: a_next.clone(),
                terminal: step.terminal,
                is_initial: t == 0,
            });
            if step.terminal {
                break;
            }
            state = step.state;
            obs = obs_next;
            action = a_next;
        }
    }
    Ok(out)
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.transitions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.transitions.is_empty()
    }

    pub fn state_dim(&self) -> usize {
        self.transitions.first().map_or(0, |t| t.s.len())
    }

    pub fn action_dim(&self) -> usize {
        self.transitions.first().map_or(0, |t| t.a.len())
    }

    /// Initial states in dataset order.
    pub fn initial_states(&self) -> Vec<Vec<f64>> {
        self.transitions.iter().filter(|t| t.is_initial).map(|t| t.s.clone()).collect()
    }

    pub fn check_env(&self, config: &EnvConfig) -> Result<(), DatasetError> {
        let expected = config.hash();
        if self.manifest.env_config_hash != expected {
            return Err(DatasetError::EnvMismatch { expected, found: self.manifest.env_config_hash.clone() });
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<(), DatasetError> {
        let mut w = BufWriter::new(File::create(path)?);
        let header = serde_json::to_string(&Header { manifest: self.manifest.clone() }).expect("manifest serializes");
        writeln!(w, "{header}")?;
        for t in &self.transitions {
            writeln!(w, "{}", transition_line(t))?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, DatasetError> {
        let reader = BufReader::new(File::open(path)?);
        let mut lines = reader.lines();
        let header_line = lines.next().ok_or(DatasetError::Parse { line: 1, message: "empty file".into() })??;
        let header: Header =
            serde_json::from_str(&header_line).map_err(|e| DatasetError::Parse { line: 1, message: e.to_string() })?;
        let mut hasher = Sha256::new();
        let mut transitions = Vec::with_capacity(header.manifest.n);
        for (i, line) in lines.enumerate() {
            let line = line?;
            let t: Transition =
                serde_json::from_str(&line).map_err(|e| DatasetError::Parse { line: i + 2, message: e.to_string() })?;
            hasher.update(line.as_bytes());
            hasher.update(b"\n");
            transitions.push(t);
        }
        let found = hex::encode(hasher.finalize());
        if found != header.manifest.data_hash {
            return Err(DatasetError::HashMismatch { expected: header.manifest.data_hash, found });
        }
        if transitions.len() != header.manifest.n {
            return Err(DatasetError::Count { expected: header.manifest.n, found: transitions.len() });
        }
        Ok(Self { manifest: header.manifest, transitions })
    }
}

pub const LOG_STD_MIN: f64 = -5.0;
pub const LOG_STD_MAX: f64 = 2.0;
const LN_SQRT_2PI: f64 = 0.918_938_533_204_672_8;

/// State-conditional diagonal Gaussian `N(mean(s), diag(exp(log_std(s))²))`.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianPolicy {
    mlp: Mlp<f64>,
    action_dim: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BehaviorFitConfig {
    pub hidden: Vec<usize>,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub validation_fraction: f64,
}

impl Default for BehaviorFitConfig {
    fn default() -> Self {
        Self { hidden: vec![64, 64], epochs: 20, batch_size: 256, learning_rate: 1e-3, validation_fraction: 0.1 }
    }
}

#[derive(Clone, Debug)]
pub struct BehaviorFit {
    pub policy: GaussianPolicy,
    /// Mean validation log-likelihood after each epoch.
    pub validation_ll: Vec<f64>,
}

impl GaussianPolicy {
    pub fn new(state_dim: usize, action_dim: usize, hidden: &[usize], seed: u64) -> Result<Self, QError> {
        let mut sizes = vec![state_dim];
        sizes.extend_from_slice(hidden);
        sizes.push(2 * action_dim);
        Ok(Self { mlp: Mlp::new(&sizes, Activation::Tanh, seed)?, action_dim })
    }

    /// `(mean, log_std)` with the log-std clamped to `[LOG_STD_MIN, LOG_STD_MAX]`.
    pub fn head(&self, obs: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let out = self.mlp.forward(obs);
        let (m, l) = out.split_at(self.action_dim);
        (m.to_vec(), l.iter().map(|x| x.clamp(LOG_STD_MIN, LOG_STD_MAX)).collect())
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint::from_parts(&self.mlp, self.action_dim, None, Some("gaussian"))
    }

    pub fn from_checkpoint(c: &Checkpoint) -> Result<Self, QError> {
        if c.policy_head.as_deref() != Some("gaussian") {
            return Err(QError::Checkpoint("checkpoint is not a gaussian policy head".into()));
        }
        let mlp = Mlp::from_params(&c.layer_sizes, c.activation, c.params.clone())?;
        if mlp.output_dim() != 2 * c.action_dim {
            return Err(QError::Checkpoint("policy head width does not match action_dim".into()));
        }
        Ok(Self { mlp, action_dim: c.action_dim })
    }

    /// Log-likelihood and its gradient with respect to the raw network outputs.
    fn log_prob_and_output_grad(&self, tape: &mut Tape<f64>, obs: &[f64], action: &[f64], grad: &mut [f64]) -> f64 {
        self.mlp.forward_tape(obs, tape);
        let out = tape.output();
        let d = self.action_dim;
        let mut lp = 0.0;
        for i in 0..d {
            let raw = out[d + i];
            let ls = raw.clamp(LOG_STD_MIN, LOG_STD_MAX);
            let sd = ls.exp();
            let z = (action[i] - out[i]) / sd;
            lp += -0.5 * z * z - ls - LN_SQRT_2PI;
            grad[i] = z / sd;
            grad[d + i] = if raw == ls { z * z - 1.0 } else { 0.0 };
        }
        lp
    }
}

impl BehaviorModel for GaussianPolicy {
    fn action_dim(&self) -> usize {
        self.action_dim
    }

    fn log_density_dims(&self, obs: &[f64], action: &[f64]) -> Result<Vec<f64>, EnvError> {
        if action.len() != self.action_dim {
            return Err(EnvError::Dimension { expected: self.action_dim, found: action.len() });
        }
        let (m, ls) = self.head(obs);
        Ok((0..self.action_dim)
            .map(|i| {
                let z = (action[i] - m[i]) / ls[i].exp();
                -0.5 * z * z - ls[i] - LN_SQRT_2PI
            })
            .collect())
    }
}

/// Maximum-likelihood fit of a [`GaussianPolicy`] to the `(s, a)` pairs,
/// using Adam on shuffled mini-batches and a held-out validation split.
pub fn fit_behavior_gaussian(data: &Dataset, cfg: &BehaviorFitConfig, seed: u64) -> Result<BehaviorFit, DatasetError> {
    if data.len() < 2 {
        return Err(DatasetError::Invalid("behavior fit needs at least two transitions".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.shuffle(&mut rng);
    let n_val = ((data.len() as f64 * cfg.validation_fraction).round() as usize).clamp(1, data.len() - 1);
    let (val, train) = order.split_at(n_val);
    let mut train = train.to_vec();

    let mut policy = GaussianPolicy::new(data.state_dim(), data.action_dim(), &cfg.hidden, seed)?;
    let n_params = policy.mlp.params().len();
    let mut adam = AdamState::new(n_params);
    let mut tape = Tape::default();
    let mut out_grad = vec![0.0; 2 * policy.action_dim];
    let mut grad = vec![0.0; n_params];
    let mut validation_ll = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        train.shuffle(&mut rng);
        for batch in train.chunks(cfg.batch_size.max(1)) {
            grad.iter_mut().for_each(|g| *g = 0.0);
            let scale = 1.0 / batch.len() as f64;
            for &i in batch {
                let t = &data.transitions[i];
                policy.log_prob_and_output_grad(&mut tape, &t.s, &t.a, &mut out_grad);
                policy.mlp.backward(&tape, &out_grad, scale, &mut grad, None);
            }
            adam_ascent(policy.mlp.params_mut(), &mut adam, &grad, cfg.learning_rate)
                .map_err(|_| DatasetError::NonFiniteLoss { epoch })?;
        }
        let ll: f64 = val
            .iter()
            .map(|&i| {
                let t = &data.transitions[i];
                policy.log_density(&t.s, &t.a)
            })
            .collect::<Result<Vec<_>, _>>()?
            .iter()
            .sum::<f64>()
            / val.len() as f64;
        if !ll.is_finite() {
            return Err(DatasetError::NonFiniteLoss { epoch });
        }
        validation_ll.push(ll);
    }
    Ok(BehaviorFit { policy, validation_ll })
}
