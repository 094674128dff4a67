//! Off-policy evaluation of deterministic continuous-action policies by
//! kernel-relaxed importance resampling with learned Mahalanobis metrics.
pub mod bandwidth;
pub mod dataset;
pub mod envs;
pub mod harness;
pub mod kernel;
pub mod learner;
pub mod metric;
pub mod numerics;
pub mod qfunc;
pub mod scalar;
pub use scalar::Real;

pub type Matrix = numerics::Matrix<f64>;
pub type SymMatrix = numerics::SymMatrix<f64>;
pub type QNetwork = qfunc::QNetwork<f64>;
pub type QNetwork32 = qfunc::QNetwork<f32>;
pub type StateMetric = metric::StateMetric<f64>;
pub type StateMetric32 = metric::StateMetric<f32>;
