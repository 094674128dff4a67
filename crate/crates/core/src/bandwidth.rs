//! Leading-order MSE of the relaxed update estimate and its minimising bandwidth.
//!
//! `LOMSE(h) = h⁴‖b‖² + v / (n h^d)` is minimised at
//! `h* = (v d / (4 n ‖b‖²))^{1/(d+4)}`.

use serde::{Deserialize, Serialize};

use crate::dataset::Transition;
use crate::kernel::kernel_constant;
use crate::metric::{weighted_gradient_mean, CurvatureSample};
use crate::qfunc::QNetwork;
use crate::scalar::{cast, norm_sq, Real};

pub const H_MIN: f64 = 1e-3;
pub const H_MAX: f64 = 1e2;
pub const DEFAULT_BANDWIDTH: f64 = 1.0;

pub fn lomse<T: Real>(h: T, n: usize, d: usize, b_norm_sq: T, v: T) -> T {
    h.powi(4) * b_norm_sq + v / (T::of(n as f64) * h.powi(d as i32))
}

/// `∂LOMSE/∂h = 4h³‖b‖² − v d / (n h^{d+1})`.
pub fn lomse_derivative<T: Real>(h: T, n: usize, d: usize, b_norm_sq: T, v: T) -> T {
    T::of(4.0) * h.powi(3) * b_norm_sq - v * T::of(d as f64) / (T::of(n as f64) * h.powi(d as i32 + 1))
}

/// Unclamped closed-form minimiser; `None` unless `‖b‖² > 0`, `v > 0` and the result is finite.
pub fn closed_form_bandwidth<T: Real>(b_norm_sq: T, v: T, n: usize, d: usize) -> Option<T> {
    if !(b_norm_sq > T::zero() && v > T::zero()) || n == 0 || d == 0 {
        return None;
    }
    let base = v * T::of(d as f64) / (T::of(4.0 * n as f64) * b_norm_sq);
    let h = base.powf(T::one() / T::of(d as f64 + 4.0));
    (h.is_finite() && h > T::zero()).then_some(h)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BandwidthEstimate {
    pub b_norm_sq: f64,
    pub v: f64,
    pub d: usize,
    pub n: usize,
    pub h_star: f64,
    pub lomse_at_h_star: f64,
    /// `b` or `v` vanished and the fallback bandwidth was used.
    pub fallback: bool,
    /// The closed-form value fell outside `[H_MIN, H_MAX]`.
    pub clamped: bool,
}

/// Optimal bandwidth clamped to `[H_MIN, H_MAX]`, or `fallback` (flagged)
/// when the closed form is undefined.
pub fn optimal_bandwidth<T: Real>(b_norm_sq: T, v: T, n: usize, d: usize, fallback: T) -> BandwidthEstimate {
    let (h, used_fallback, clamped) = match closed_form_bandwidth(b_norm_sq, v, n, d) {
        Some(h) => {
            let c = h.max(T::of(H_MIN)).min(T::of(H_MAX));
            (c, false, c != h)
        }
        None => (fallback, true, false),
    };
    BandwidthEstimate {
        b_norm_sq: b_norm_sq.as_f64(),
        v: v.as_f64(),
        d,
        n,
        h_star: h.as_f64(),
        lomse_at_h_star: lomse(h, n.max(1), d, b_norm_sq, v).as_f64(),
        fallback: used_fallback,
        clamped,
    }
}

/// Bias constant `b = (γ/2)·mean_i ∇²_{a′}Q_θ̄(s′_i, π̃(s′_i)) ∇_θQ_θ(s_i, a_i)`.
pub fn bias_constant<T: Real>(samples: &[CurvatureSample<T>], gamma: T) -> Vec<T> {
    let laplacians: Vec<T> = samples.iter().map(|s| s.hessian.trace()).collect();
    weighted_gradient_mean(samples.iter().map(|s| s.grad.as_slice()), &laplacians, gamma)
}

/// [`bias_constant`] from precomputed gradients and Laplacians.
pub fn bias_constant_parts<T: Real>(grads: &[Vec<T>], laplacians: &[T], gamma: T) -> Vec<T> {
    weighted_gradient_mean(grads.iter().map(Vec::as_slice), laplacians, gamma)
}

/// Inner product of the bias constants of the two batch halves, an unbiased
/// estimate of `‖b‖²` free of the squared single-sample terms.
pub fn half_batch_bias_norm<T: Real>(grads: &[Vec<T>], laplacians: &[T], gamma: T) -> T {
    let mid = grads.len() / 2;
    if mid == 0 {
        return T::zero();
    }
    let b1 = bias_constant_parts(&grads[..mid], &laplacians[..mid], gamma);
    let b2 = bias_constant_parts(&grads[mid..2 * mid], &laplacians[mid..2 * mid], gamma);
    crate::scalar::dot(&b1, &b2)
}

/// TD errors `r + γ Q_θ̄(s′, π̃(s′)) − Q_θ(s, a)` evaluated at the target action.
pub fn td_errors_at_target<T: Real>(
    batch: &[&Transition],
    target_actions: &[Vec<f64>],
    net: &QNetwork<T>,
    target: &QNetwork<T>,
    gamma: T,
) -> Result<Vec<T>, crate::qfunc::QError> {
    batch
        .iter()
        .zip(target_actions)
        .map(|(t, ta)| {
            let q = net.q_forward(&cast(&t.s), &cast(&t.a))?;
            let boot = if t.terminal { T::zero() } else { gamma * target.q_forward(&cast(&t.s_next), &cast(ta))? };
            Ok(T::of(t.r) + boot - q)
        })
        .collect()
}

/// Variance constant `v = C(K)·mean_i δ_i² ‖∇_θQ_θ(s_i, a_i)‖² / max(μ(π̃(s′_i)|s′_i), floor)`.
pub fn variance_constant<T: Real>(
    grads: &[Vec<T>],
    td: &[T],
    density_at_target: &[T],
    density_floor: T,
    action_dim: usize,
) -> T {
    if grads.is_empty() {
        return T::zero();
    }
    let total = grads.iter().zip(td).zip(density_at_target).fold(T::zero(), |acc, ((g, &delta), &mu)| {
        acc + delta * delta * norm_sq(g) / mu.max(density_floor)
    });
    kernel_constant::<T>(action_dim) * total / T::of(grads.len() as f64)
}

/// Exponential moving average of `h`, disabled by default.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BandwidthSmoother {
    pub decay: f64,
    pub value: Option<f64>,
}

impl BandwidthSmoother {
    pub fn new(decay: f64) -> Self {
        Self { decay, value: None }
    }

    pub fn update(&mut self, h: f64) -> f64 {
        let next = match self.value {
            Some(prev) => self.decay * prev + (1.0 - self.decay) * h,
            None => h,
        };
        self.value = Some(next);
        next
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn closed_form_examples() {
        assert!((closed_form_bandwidth(1.0f64, 4.0, 1, 1).unwrap() - 1.0).abs() < 1e-15);
        let h = closed_form_bandwidth(1.0f64, 1.0, 100, 4).unwrap();
        assert!((h - 0.562_341_325_190_349).abs() < 1e-12);
        let h4 = closed_form_bandwidth(1.0f64, 1.0, 400, 4).unwrap();
        assert!((h / h4 - 4f64.powf(1.0 / 8.0)).abs() < 1e-12);
    }

    #[test]
    fn lomse_at_unit_bandwidth() {
        assert_eq!(lomse(1.0f64, 10, 3, 2.0, 5.0), 2.5);
    }

    #[test]
    fn derivative_vanishes_at_optimum() {
        let (b, v, n, d) = (0.3f64, 2.0, 1000, 3);
        let h = closed_form_bandwidth(b, v, n, d).unwrap();
        assert!(lomse_derivative(h, n, d, b, v).abs() < 1e-12);
        // bias-to-variance ratio at the optimum is d/4
        let ratio = h.powi(4) * b / (v / (n as f64 * h.powi(d as i32)));
        assert!((ratio - d as f64 / 4.0).abs() < 1e-12);
    }

    #[test]
    fn fallback_and_clamping() {
        let e = optimal_bandwidth(0.0f64, 1.0, 10, 2, 0.7);
        assert!(e.fallback);
        assert_eq!(e.h_star, 0.7);
        let e = optimal_bandwidth(1e-30f64, 1e30, 1, 1, 1.0);
        assert!(e.clamped);
        assert_eq!(e.h_star, H_MAX);
        let e = optimal_bandwidth(1.0f64, 4.0, 1, 1, 0.5);
        assert!(!e.fallback && !e.clamped);
        assert!((e.h_star - 1.0).abs() < 1e-15);
    }

    #[test]
    fn smoother() {
        let mut s = BandwidthSmoother::new(0.99);
        assert_eq!(s.update(2.0), 2.0);
        assert!((s.update(1.0) - 1.99).abs() < 1e-15);
    }
}
