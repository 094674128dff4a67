//! Gaussian kernel with a Mahalanobis metric and the relaxed importance ratio
//! `w^K = K(Lᵀ(a′ − π̃(s′)) / h) / (h^d μ(a′|s′))`.

use serde::{Deserialize, Serialize};

use crate::numerics::Matrix;
use crate::scalar::Real;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum KernelError {
    #[error("invalid kernel config: {0}")]
    Config(String),
    #[error("non-finite kernel input")]
    NonFinite,
    #[error("dimension mismatch: expected {expected}, found {found}")]
    Dimension { expected: usize, found: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KernelConfig {
    pub bandwidth: f64,
    pub clip_min: f64,
    pub clip_max: f64,
    /// Lower bound applied to behavior densities before division.
    pub density_floor: f64,
    /// Clip each per-coordinate factor `φ(z_i) / (h μ_i(a_i))` instead of the
    /// joint ratio. Exact only when the behavior density factorises and `L`
    /// is diagonal; coordinates are paired by index otherwise.
    #[serde(default)]
    pub per_dim_clip: bool,
}

pub const DENSITY_FLOOR: f64 = 1e-5;
/// Density floor used with a maximum-likelihood behavior model.
pub const DENSITY_FLOOR_FITTED: f64 = 1e-3;

impl Default for KernelConfig {
    fn default() -> Self {
        Self { bandwidth: 1.0, clip_min: 1e-3, clip_max: 2.0, density_floor: DENSITY_FLOOR, per_dim_clip: false }
    }
}

impl KernelConfig {
    pub fn validate(&self) -> Result<(), KernelError> {
        if !(self.bandwidth > 0.0 && self.bandwidth.is_finite()) {
            return Err(KernelError::Config(format!("bandwidth {} must be positive", self.bandwidth)));
        }
        if !(self.clip_min > 0.0 && self.clip_min < self.clip_max) {
            return Err(KernelError::Config(format!("clip range [{}, {}] must satisfy 0 < min < max", self.clip_min, self.clip_max)));
        }
        if !(self.density_floor > 0.0) {
            return Err(KernelError::Config("density floor must be positive".into()));
        }
        Ok(())
    }
}

fn half_ln_2pi<T: Real>() -> T {
    T::of(0.918_938_533_204_672_8)
}

/// `ln K(z) = −(d/2) ln 2π − ‖z‖²/2`.
pub fn log_gaussian_kernel<T: Real>(z: &[T]) -> T {
    let d = T::of(z.len() as f64);
    -d * half_ln_2pi::<T>() - T::of(0.5) * crate::scalar::norm_sq(z)
}

/// Unit Gaussian kernel `K(z) = (2π)^{−d/2} exp(−‖z‖²/2)`.
pub fn gaussian_kernel<T: Real>(z: &[T]) -> T {
    log_gaussian_kernel(z).exp()
}

/// `C(K) = ∫ K(z)² dz = (4π)^{−d/2}`.
pub fn kernel_constant<T: Real>(d: usize) -> T {
    T::of((4.0 * std::f64::consts::PI).powf(-(d as f64) / 2.0))
}

/// Scaled kernel argument `z = Lᵀ(a − π̃) / h`.
pub fn kernel_argument<T: Real>(l: &Matrix<T>, target: &[T], action: &[T], h: T) -> Vec<T> {
    let diff: Vec<T> = action.iter().zip(target).map(|(&a, &t)| (a - t) / h).collect();
    l.tr_matvec(&diff)
}

fn check<T: Real>(l: &Matrix<T>, target: &[T], action: &[T]) -> Result<(), KernelError> {
    let d = action.len();
    if target.len() != d || l.rows() != d || l.cols() != d {
        return Err(KernelError::Dimension { expected: d, found: target.len().max(l.rows()) });
    }
    if !crate::scalar::all_finite(target) || !crate::scalar::all_finite(action) || !l.is_finite() {
        return Err(KernelError::NonFinite);
    }
    Ok(())
}

/// Unclipped log-ratio `ln K(z) − d ln h − ln max(μ, floor)`.
pub fn log_relaxed_ratio<T: Real>(
    cfg: &KernelConfig,
    l: &Matrix<T>,
    target: &[T],
    action: &[T],
    density: T,
) -> Result<T, KernelError> {
    check(l, target, action)?;
    if !density.is_finite() {
        return Err(KernelError::NonFinite);
    }
    let h = T::of(cfg.bandwidth);
    let z = kernel_argument(l, target, action, h);
    let mu = density.max(T::of(cfg.density_floor));
    Ok(log_gaussian_kernel(&z) - T::of(action.len() as f64) * h.ln() - mu.ln())
}

/// Relaxed importance ratio clipped to `[clip_min, clip_max]`.
pub fn relaxed_ratio<T: Real>(
    cfg: &KernelConfig,
    l: &Matrix<T>,
    target: &[T],
    action: &[T],
    density: T,
) -> Result<T, KernelError> {
    let lw = log_relaxed_ratio(cfg, l, target, action, density)?;
    Ok(lw.exp().max(T::of(cfg.clip_min)).min(T::of(cfg.clip_max)))
}

/// Product of per-coordinate factors `φ(z_i) / (h max(μ_i, floor))`, each
/// clipped to `[clip_min, clip_max]`; the product therefore lies in
/// `[clip_min^d, clip_max^d]`.
pub fn relaxed_ratio_per_dim<T: Real>(
    cfg: &KernelConfig,
    l: &Matrix<T>,
    target: &[T],
    action: &[T],
    density_dims: &[T],
) -> Result<T, KernelError> {
    check(l, target, action)?;
    if density_dims.len() != action.len() {
        return Err(KernelError::Dimension { expected: action.len(), found: density_dims.len() });
    }
    let h = T::of(cfg.bandwidth);
    let z = kernel_argument(l, target, action, h);
    let (lo, hi, floor) = (T::of(cfg.clip_min), T::of(cfg.clip_max), T::of(cfg.density_floor));
    let mut w = T::one();
    for (&zi, &mu) in z.iter().zip(density_dims) {
        if !mu.is_finite() {
            return Err(KernelError::NonFinite);
        }
        let f = (log_gaussian_kernel(&[zi]) - h.ln() - mu.max(floor).ln()).exp();
        w *= f.max(lo).min(hi);
    }
    Ok(w)
}
