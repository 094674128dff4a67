//! Torque-limited pendulum swing-up with optional dummy action coordinates.
//!
//! State is `(θ, θ̇)` with `θ = 0` upright; observations are
//! `(cos θ, sin θ, θ̇)`. Only the first action coordinate is applied as
//! torque; the remaining coordinates are ignored by dynamics and reward.

use std::f64::consts::PI;

use rand::Rng;
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PendulumSpec {
    pub gravity: f64,
    pub mass: f64,
    pub length: f64,
    pub dt: f64,
    pub max_speed: f64,
    pub a_max: f64,
    pub horizon: usize,
    pub gamma: f64,
    pub dummy_dims: usize,
}

impl Default for PendulumSpec {
    fn default() -> Self {
        Self {
            gravity: 10.0,
            mass: 1.0,
            length: 1.0,
            dt: 0.05,
            max_speed: 8.0,
            a_max: 2.0,
            horizon: 200,
            gamma: 0.95,
            dummy_dims: 0,
        }
    }
}

/// Wraps an angle into `[-π, π)`.
pub fn angle_normalize(x: f64) -> f64 {
    (x + PI).rem_euclid(2.0 * PI) - PI
}

impl PendulumSpec {
    pub fn action_dim(&self) -> usize {
        1 + self.dummy_dims
    }

    /// `3g / (2l)`, the coefficient of `sin θ` in the angular acceleration.
    pub fn omega_sq(&self) -> f64 {
        3.0 * self.gravity / (2.0 * self.length)
    }

    pub fn angular_acceleration(&self, theta: f64, torque: f64) -> f64 {
        self.omega_sq() * theta.sin() + 3.0 * torque / (self.mass * self.length * self.length)
    }

    pub fn reward(&self, state: &[f64], action: &[f64]) -> f64 {
        let u = action[0].clamp(-self.a_max, self.a_max);
        let th = angle_normalize(state[0]);
        -(th * th + 0.1 * state[1] * state[1] + 0.001 * u * u)
    }

    /// Semi-implicit Euler step; the angular velocity is clipped to `±max_speed`.
    pub fn step(&self, state: &[f64], action: &[f64]) -> (Vec<f64>, f64) {
        let u = action[0].clamp(-self.a_max, self.a_max);
        let reward = self.reward(state, action);
        let (th, w) = (state[0], state[1]);
        let w_next = w + self.angular_acceleration(th, u) * self.dt;
        let th_next = th + w_next * self.dt;
        (vec![th_next, w_next.clamp(-self.max_speed, self.max_speed)], reward)
    }

    pub fn observe(&self, state: &[f64]) -> Vec<f64> {
        vec![state[0].cos(), state[0].sin(), state[1]]
    }

    pub fn initial_state(&self, rng: &mut impl Rng) -> Vec<f64> {
        vec![rng.random_range(-PI..PI), rng.random_range(-1.0..1.0)]
    }
}
