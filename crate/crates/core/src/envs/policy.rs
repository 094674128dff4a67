//! Deterministic controllers, target policies and stochastic behavior policies.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::EnvError;
use crate::numerics::Matrix;

const LN_SQRT_2PI: f64 = 0.918_938_533_204_672_8;

/// Deterministic state-feedback law producing the real (non-dummy) action coordinates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Controller {
    /// `a = K s`, `gain` given as rows of `K`.
    Linear { gain: Vec<Vec<f64>> },
    /// Energy-pumping swing-up with a PD balance law near the upright
    /// position, for observations `(cos θ, sin θ, θ̇)`.
    SwingUp(SwingUpGains),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SwingUpGains {
    pub energy_gain: f64,
    pub kp: f64,
    pub kd: f64,
    /// Balance law is used when `cos θ` exceeds this value.
    pub switch_cos: f64,
    /// Gravity coefficient of the angular dynamics, `3g / (2l)`.
    pub omega_sq: f64,
    pub a_max: f64,
}

impl SwingUpGains {
    pub fn expert(a_max: f64) -> Self {
        Self { energy_gain: 0.2, kp: 12.0, kd: 2.5, switch_cos: 0.85, omega_sq: 15.0, a_max }
    }

    /// Detuned variant: weaker pumping and a sluggish, narrow balance law.
    pub fn medium(a_max: f64) -> Self {
        Self { energy_gain: 0.05, kp: 7.0, kd: 0.8, switch_cos: 0.95, omega_sq: 15.0, a_max }
    }
}

impl Controller {
    pub fn output_dim(&self) -> usize {
        match self {
            Controller::Linear { gain } => gain.len(),
            Controller::SwingUp(_) => 1,
        }
    }

    pub fn act(&self, obs: &[f64]) -> Vec<f64> {
        match self {
            Controller::Linear { gain } => gain.iter().map(|row| crate::scalar::dot(row, obs)).collect(),
            Controller::SwingUp(g) => {
                let (c, s, w) = (obs[0], obs[1], obs[2]);
                let theta = s.atan2(c);
                let u = if c > g.switch_cos {
                    -g.kp * theta - g.kd * w
                } else {
                    // E = ½θ̇² + ω²(cos θ − 1) is zero at the upright rest point
                    let energy = 0.5 * w * w + g.omega_sq * (c - 1.0);
                    let u = -g.energy_gain * energy * w;
                    // kick the pendulum out of the bottom rest point
                    if w.abs() < 1e-3 && c < -0.99 {
                        g.a_max
                    } else {
                        u
                    }
                };
                vec![u.clamp(-g.a_max, g.a_max)]
            }
        }
    }

    pub fn linear_gain(&self) -> Option<Matrix<f64>> {
        match self {
            Controller::Linear { gain } => Some(Matrix::from_rows(gain)),
            Controller::SwingUp(_) => None,
        }
    }
}

/// Deterministic target policy: controller output on the real coordinates, zeros on dummies.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TargetPolicy {
    pub controller: Controller,
    pub dummy_dims: usize,
}

impl TargetPolicy {
    pub fn action_dim(&self) -> usize {
        self.controller.output_dim() + self.dummy_dims
    }

    pub fn action(&self, obs: &[f64]) -> Vec<f64> {
        let mut a = self.controller.act(obs);
        a.resize(a.len() + self.dummy_dims, 0.0);
        a
    }
}

/// Conditional action density `μ(a | s)`.
pub trait BehaviorModel {
    fn action_dim(&self) -> usize;

    /// Per-coordinate log-density factors; the joint log-density is their sum
    /// when the model factorises.
    fn log_density_dims(&self, obs: &[f64], action: &[f64]) -> Result<Vec<f64>, EnvError>;

    fn log_density(&self, obs: &[f64], action: &[f64]) -> Result<f64, EnvError> {
        Ok(self.log_density_dims(obs, action)?.iter().sum())
    }

    fn density(&self, obs: &[f64], action: &[f64]) -> Result<f64, EnvError> {
        Ok(self.log_density(obs, action)?.exp())
    }

    /// Whether `log_density_dims` are true per-coordinate marginals.
    fn factorizes(&self) -> bool {
        true
    }
}

/// Stochastic behavior policy built around a deterministic controller.
///
/// Real coordinates draw from `(1 − w)·N(μ̃(s), σ²)` mixed with weight `w`
/// uniform on `[-a_max, a_max]`. With a box the Gaussian component is
/// truncated to it and renormalised; without one (`a_max = None`) the real
/// coordinates are plain Gaussians and `w` must be zero. Dummy coordinates
/// are uniform on `[-dummy_range, dummy_range]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BehaviorPolicy {
    pub base: Controller,
    pub std: Vec<f64>,
    pub uniform_weight: f64,
    pub a_max: Option<f64>,
    pub dummy_dims: usize,
    pub dummy_range: f64,
}

fn std_normal_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x / std::f64::consts::SQRT_2)
}

impl BehaviorPolicy {
    pub fn validate(&self) -> Result<(), EnvError> {
        let real = self.base.output_dim();
        if self.std.len() != real {
            return Err(EnvError::Config(format!("behavior std has {} entries, controller outputs {real}", self.std.len())));
        }
        if self.std.iter().any(|&s| !(s >= 0.0 && s.is_finite())) {
            return Err(EnvError::Config("behavior std must be finite and non-negative".into()));
        }
        if !(0.0..=1.0).contains(&self.uniform_weight) {
            return Err(EnvError::Config("uniform weight must lie in [0, 1]".into()));
        }
        if self.a_max.is_none() && self.uniform_weight > 0.0 {
            return Err(EnvError::Config("uniform mixture needs an action box".into()));
        }
        if self.dummy_dims > 0 && !(self.dummy_range > 0.0) {
            return Err(EnvError::Config("dummy range must be positive".into()));
        }
        Ok(())
    }

    pub fn real_dims(&self) -> usize {
        self.base.output_dim()
    }

    pub fn mean_action(&self, obs: &[f64]) -> Vec<f64> {
        let mut m = self.base.act(obs);
        if let Some(b) = self.a_max {
            for x in &mut m {
                *x = x.clamp(-b, b);
            }
        }
        m
    }

    pub fn sample(&self, obs: &[f64], rng: &mut impl Rng) -> Vec<f64> {
        let mean = self.mean_action(obs);
        let mut a = Vec::with_capacity(mean.len() + self.dummy_dims);
        for (i, &m) in mean.iter().enumerate() {
            let sd = self.std[i];
            let x = match self.a_max {
                Some(b) => {
                    if self.uniform_weight > 0.0 && rng.random::<f64>() < self.uniform_weight {
                        rng.random_range(-b..=b)
                    } else if sd == 0.0 {
                        m
                    } else {
                        loop {
                            let z: f64 = StandardNormal.sample(rng);
                            let x = m + sd * z;
                            if x.abs() <= b {
                                break x;
                            }
                        }
                    }
                }
                None => {
                    let z: f64 = StandardNormal.sample(rng);
                    m + sd * z
                }
            };
            a.push(x);
        }
        for _ in 0..self.dummy_dims {
            a.push(rng.random_range(-self.dummy_range..=self.dummy_range));
        }
        a
    }
}

impl BehaviorModel for BehaviorPolicy {
    fn action_dim(&self) -> usize {
        self.real_dims() + self.dummy_dims
    }

    fn log_density_dims(&self, obs: &[f64], action: &[f64]) -> Result<Vec<f64>, EnvError> {
        if action.len() != self.action_dim() {
            return Err(EnvError::Dimension { expected: self.action_dim(), found: action.len() });
        }
        let mean = self.mean_action(obs);
        let real = mean.len();
        let mut out = Vec::with_capacity(action.len());
        for i in 0..real {
            let (x, m, sd) = (action[i], mean[i], self.std[i]);
            if sd == 0.0 && self.uniform_weight == 0.0 {
                return Err(EnvError::Config("degenerate behavior density (zero std, no uniform mixture)".into()));
            }
            let lp = match self.a_max {
                Some(b) => {
                    if x.abs() > b {
                        return Err(EnvError::OutsideSupport { dim: i, value: x });
                    }
                    let gauss = if sd > 0.0 {
                        let z = (x - m) / sd;
                        let mass = std_normal_cdf((b - m) / sd) - std_normal_cdf((-b - m) / sd);
                        (-0.5 * z * z - LN_SQRT_2PI).exp() / (sd * mass)
                    } else {
                        0.0
                    };
                    ((1.0 - self.uniform_weight) * gauss + self.uniform_weight / (2.0 * b)).ln()
                }
                None => {
                    let z = (x - m) / sd;
                    -0.5 * z * z - LN_SQRT_2PI - sd.ln()
                }
            };
            out.push(lp);
        }
        for j in 0..self.dummy_dims {
            let x = action[real + j];
            if x.abs() > self.dummy_range {
                return Err(EnvError::OutsideSupport { dim: real + j, value: x });
            }
            out.push(-(2.0 * self.dummy_range).ln());
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn gaussian_1d(std: f64) -> BehaviorPolicy {
        BehaviorPolicy {
            base: Controller::Linear { gain: vec![vec![0.0]] },
            std: vec![std],
            uniform_weight: 0.0,
            a_max: None,
            dummy_dims: 0,
            dummy_range: 1.0,
        }
    }

    fn boxed(std: f64, w: f64, dummy: usize) -> BehaviorPolicy {
        BehaviorPolicy {
            base: Controller::Linear { gain: vec![vec![0.5]] },
            std: vec![std],
            uniform_weight: w,
            a_max: Some(2.0),
            dummy_dims: dummy,
            dummy_range: 2.0,
        }
    }

    #[test]
    fn unit_gaussian_log_density_at_mean() {
        let lp = gaussian_1d(1.0).log_density(&[3.0], &[0.0]).unwrap();
        assert!((lp - (-0.918_938_533_204_672_7)).abs() < 1e-15);
    }

    #[test]
    fn pure_uniform_box_density_is_inverse_volume() {
        let p = boxed(1.0, 1.0, 2);
        for a in [[0.0, 0.0, 0.0], [1.9, -1.2, 0.3], [-2.0, 2.0, -2.0]] {
            let lp = p.log_density(&[0.4], &a).unwrap();
            assert!((lp + (64.0f64).ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn outside_box_is_rejected() {
        let p = boxed(1.0, 0.2, 1);
        assert!(matches!(p.log_density(&[0.0], &[2.5, 0.0]), Err(EnvError::OutsideSupport { dim: 0, .. })));
        assert!(matches!(p.log_density(&[0.0], &[0.0, -2.1]), Err(EnvError::OutsideSupport { dim: 1, .. })));
    }

    #[test]
    fn zero_noise_returns_controller_mean() {
        let p = boxed(0.0, 0.0, 0);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..10 {
            assert_eq!(p.sample(&[1.2], &mut rng), vec![0.6]);
        }
    }

    #[test]
    fn truncated_mixture_integrates_to_one() {
        // midpoint rule on [-2, 2]
        for (std, w, mean_obs) in [(1.0, 0.2, 0.0), (0.3, 0.2, 3.0), (0.5, 0.0, -1.0)] {
            let p = boxed(std, w, 0);
            let n = 200_000;
            let dx = 4.0 / n as f64;
            let total: f64 = (0..n)
                .map(|i| p.density(&[mean_obs], &[-2.0 + (i as f64 + 0.5) * dx]).unwrap() * dx)
                .sum();
            assert!((total - 1.0).abs() < 1e-4, "total {total}");
        }
    }

    #[test]
    fn density_positive_on_the_whole_box() {
        let p = boxed(0.05, 0.2, 1);
        for i in 0..=100 {
            let x = -2.0 + 4.0 * i as f64 / 100.0;
            assert!(p.density(&[1.0], &[x, -x]).unwrap() > 0.0);
        }
    }

    #[test]
    fn swing_up_balances_near_upright() {
        let c = Controller::SwingUp(SwingUpGains::expert(2.0));
        let u = c.act(&[0.1f64.cos(), 0.1f64.sin(), 0.0]);
        assert!(u[0] < 0.0);
        let u = c.act(&[1.0, 0.0, 0.0]);
        assert_eq!(u[0], 0.0);
    }

    #[test]
    fn target_policy_pads_dummy_zeros() {
        let t = TargetPolicy { controller: Controller::Linear { gain: vec![vec![1.0, 2.0]] }, dummy_dims: 3 };
        assert_eq!(t.action(&[1.0, 1.0]), vec![3.0, 0.0, 0.0, 0.0]);
        assert_eq!(t.action_dim(), 4);
    }
}
