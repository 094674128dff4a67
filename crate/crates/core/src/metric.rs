//! Closed-form per-state Mahalanobis metric from the action Hessian of the
//! target network, and the metric-aware bias diagnostics.
//!
//! For `H = U Λ Uᵀ` the metric minimising `tr(A⁻¹H)²` subject to `|A| = 1`
//! is `A* = α U M Uᵀ` with `M = blockdiag(d₊Λ₊, −d₋Λ₋)` and
//! `α = |M|^{−1/d}`. With mixed signs the trace vanishes.

use std::io::Write;

use crate::dataset::Transition;
use crate::numerics::{eigh_symmetric, solve_spd, Matrix, NumericsError, SymMatrix};
use crate::qfunc::{QError, QNetwork, QScratch};
use crate::scalar::{cast, Real};

/// Relative eigenvalue threshold below which a Hessian direction counts as flat.
pub const DEGENERACY_EPS: f64 = 1e-6;
/// Absolute scale below which the whole Hessian counts as zero.
pub const DEGENERACY_ABS: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum MetricError {
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Network(#[from] QError),
    #[error("batch has {batch} samples but {found} {what}")]
    Alignment { batch: usize, found: usize, what: &'static str },
    #[error("non-finite Hessian at batch sample {index}")]
    NonFiniteHessian { index: usize },
}

/// Per-state metric `A = L Lᵀ` with unit determinant.
#[derive(Clone, Debug, PartialEq)]
pub struct StateMetric<T: Real> {
    pub a: SymMatrix<T>,
    pub l: Matrix<T>,
    pub alpha: T,
    /// Shared eigenvectors of `H` and `A` (columns).
    pub eigenvectors: Matrix<T>,
    pub hessian_eigenvalues: Vec<T>,
    pub metric_eigenvalues: Vec<T>,
    pub d_plus: usize,
    pub d_minus: usize,
    /// No usable curvature: identity metric returned.
    pub degenerate: bool,
}

impl<T: Real> StateMetric<T> {
    pub fn identity(d: usize) -> Self {
        Self {
            a: SymMatrix::identity(d),
            l: Matrix::identity(d),
            alpha: T::one(),
            eigenvectors: Matrix::identity(d),
            hessian_eigenvalues: vec![T::zero(); d],
            metric_eigenvalues: vec![T::one(); d],
            d_plus: 0,
            d_minus: 0,
            degenerate: true,
        }
    }

    pub fn dim(&self) -> usize {
        self.a.dim()
    }

    /// `tr(A⁻¹H)` through the stored eigenbasis of `A`.
    pub fn trace_with(&self, h: &SymMatrix<T>) -> T {
        let u = &self.eigenvectors;
        let hm = h.matrix();
        let d = self.dim();
        let mut total = T::zero();
        for k in 0..d {
            let mut quad = T::zero();
            for i in 0..d {
                let mut row = T::zero();
                for j in 0..d {
                    row += hm[(i, j)] * u[(j, k)];
                }
                quad += u[(i, k)] * row;
            }
            total += quad / self.metric_eigenvalues[k];
        }
        total
    }

    pub fn diag(&self) -> Vec<T> {
        self.a.matrix().diag()
    }
}

/// Optimal unit-determinant metric for the Hessian `h`.
///
/// Directions with `|λ| < eps · max|λ|` are excluded from `Λ₊`/`Λ₋` and get
/// the geometric mean of the retained `|λ|` before renormalisation. If every
/// direction is flat the identity is returned with `degenerate` set.
pub fn optimal_metric<T: Real>(h: &SymMatrix<T>, eps: T) -> StateMetric<T> {
    let d = h.dim();
    let dec = eigh_symmetric(h);
    let max_abs = dec.eigenvalues.iter().fold(T::zero(), |m, &l| m.max(l.abs()));
    if !(max_abs >= T::of(DEGENERACY_ABS)) {
        let mut id = StateMetric::identity(d);
        id.hessian_eigenvalues = dec.eigenvalues;
        return id;
    }
    let threshold = eps * max_abs;
    let retained: Vec<bool> = dec.eigenvalues.iter().map(|l| l.abs() >= threshold).collect();
    let d_plus = dec.eigenvalues.iter().zip(&retained).filter(|(l, &r)| r && **l > T::zero()).count();
    let d_minus = dec.eigenvalues.iter().zip(&retained).filter(|(l, &r)| r && **l < T::zero()).count();
    let n_kept = T::of((d_plus + d_minus) as f64);
    let log_gm = dec
        .eigenvalues
        .iter()
        .zip(&retained)
        .filter(|(_, &r)| r)
        .fold(T::zero(), |acc, (l, _)| acc + l.abs().ln())
        / n_kept;
    let m: Vec<T> = dec
        .eigenvalues
        .iter()
        .zip(&retained)
        .map(|(&l, &r)| match (r, l > T::zero()) {
            (true, true) => T::of(d_plus as f64) * l,
            (true, false) => -T::of(d_minus as f64) * l,
            (false, _) => log_gm.exp(),
        })
        .collect();
    // α = |M|^{-1/d}, computed in log space
    let log_alpha = -m.iter().fold(T::zero(), |acc, x| acc + x.ln()) / T::of(d as f64);
    let alpha = log_alpha.exp();
    let metric_eigenvalues: Vec<T> = m.iter().map(|&x| (log_alpha + x.ln()).exp()).collect();
    let u = &dec.eigenvectors;
    let compose = |vals: &[T]| {
        Matrix::from_fn(d, d, |i, j| (0..d).fold(T::zero(), |acc, k| acc + u[(i, k)] * vals[k] * u[(j, k)]))
    };
    let a = SymMatrix::symmetrize(&compose(&metric_eigenvalues)).expect("finite metric");
    let roots: Vec<T> = metric_eigenvalues.iter().map(|x| x.sqrt()).collect();
    let l = compose(&roots);
    StateMetric {
        a,
        l,
        alpha,
        eigenvectors: dec.eigenvectors,
        hessian_eigenvalues: dec.eigenvalues,
        metric_eigenvalues,
        d_plus,
        d_minus,
        degenerate: false,
    }
}

/// `tr(A⁻¹H)` by a Cholesky solve, without forming `A⁻¹`.
pub fn trace_term<T: Real>(a: &SymMatrix<T>, h: &SymMatrix<T>) -> Result<T, MetricError> {
    Ok(solve_spd(a, h.matrix())?.trace())
}

/// Per-sample quantities shared by the metric and bandwidth diagnostics.
#[derive(Clone, Debug)]
pub struct CurvatureSample<T: Real> {
    /// `∇_θ Q_θ(s, a)` under the current network.
    pub grad: Vec<T>,
    /// Action Hessian of the target network at `(s′, π̃(s′))`; zero for terminal transitions.
    pub hessian: SymMatrix<T>,
}

/// Evaluates gradients and target Hessians for a batch; `target_actions[i]` is `π̃(s′_i)`.
pub fn curvature_samples<T: Real>(
    batch: &[&Transition],
    target_actions: &[Vec<f64>],
    net: &QNetwork<T>,
    target: &QNetwork<T>,
) -> Result<Vec<CurvatureSample<T>>, MetricError> {
    if target_actions.len() != batch.len() {
        return Err(MetricError::Alignment { batch: batch.len(), found: target_actions.len(), what: "target actions" });
    }
    let d = net.action_dim();
    let mut scratch = QScratch::default();
    batch
        .iter()
        .zip(target_actions)
        .enumerate()
        .map(|(index, (t, ta))| {
            let mut grad = vec![T::zero(); net.num_params()];
            net.value_and_accumulate_grad(&cast(&t.s), &cast(&t.a), T::one(), &mut grad, &mut scratch);
            let hessian = if t.terminal {
                SymMatrix::zeros(d)
            } else {
                target.hess_action(&cast(&t.s_next), &cast(ta))?
            };
            if !hessian.matrix().is_finite() {
                return Err(MetricError::NonFiniteHessian { index });
            }
            Ok(CurvatureSample { grad, hessian })
        })
        .collect()
}

/// `(γ/2)·mean_i c_i g_i` for per-sample gradients `g_i` and coefficients `c_i`.
pub fn weighted_gradient_mean<'a, T: Real>(
    grads: impl ExactSizeIterator<Item = &'a [T]>,
    coeffs: &[T],
    gamma: T,
) -> Vec<T> {
    let n = grads.len();
    let mut out: Vec<T> = Vec::new();
    if n == 0 {
        return out;
    }
    let scale = gamma * T::of(0.5) / T::of(n as f64);
    for (g, &c) in grads.zip(coeffs) {
        if out.is_empty() {
            out = vec![T::zero(); g.len()];
        }
        crate::scalar::axpy(scale * c, g, &mut out);
    }
    out
}

fn check_metrics<T: Real>(samples: &[CurvatureSample<T>], metrics: &[StateMetric<T>]) -> Result<(), MetricError> {
    if metrics.len() != samples.len() {
        return Err(MetricError::Alignment { batch: samples.len(), found: metrics.len(), what: "metrics" });
    }
    Ok(())
}

/// `‖(γ/2)·mean_i tr(A_i⁻¹H_i) ∇_θQ_θ(s_i, a_i)‖²`.
pub fn bias_norm_with_metric<T: Real>(
    samples: &[CurvatureSample<T>],
    metrics: &[StateMetric<T>],
    gamma: T,
) -> Result<T, MetricError> {
    check_metrics(samples, metrics)?;
    let traces: Vec<T> = samples.iter().zip(metrics).map(|(s, m)| m.trace_with(&s.hessian)).collect();
    let b = weighted_gradient_mean(samples.iter().map(|s| s.grad.as_slice()), &traces, gamma);
    Ok(crate::scalar::norm_sq(&b))
}

/// `U(A) = (γ²/4)·mean_i tr(A_i⁻¹H_i)² ‖∇_θQ_θ(s_i, a_i)‖²`.
pub fn upper_bound_u<T: Real>(samples: &[CurvatureSample<T>], metrics: &[StateMetric<T>], gamma: T) -> Result<T, MetricError> {
    check_metrics(samples, metrics)?;
    if samples.is_empty() {
        return Ok(T::zero());
    }
    let total = samples.iter().zip(metrics).fold(T::zero(), |acc, (s, m)| {
        let tr = m.trace_with(&s.hessian);
        acc + tr * tr * crate::scalar::norm_sq(&s.grad)
    });
    Ok(gamma * gamma / T::of(4.0) * total / T::of(samples.len() as f64))
}

/// Writes one CSV row per metric: refresh step, state index, eigenvalues of
/// `H` and of `A*` (space separated) and the trace term.
pub fn write_metric_csv<T: Real, W: Write>(
    out: &mut W,
    refresh_step: u64,
    metrics: &[(usize, &StateMetric<T>)],
    write_header: bool,
) -> std::io::Result<()> {
    if write_header {
        writeln!(out, "refresh_step,state_index,hessian_eigenvalues,metric_eigenvalues,trace_term,degenerate")?;
    }
    let join = |v: &[T]| v.iter().map(|x| format!("{}", x.as_f64())).collect::<Vec<_>>().join(" ");
    for (idx, m) in metrics {
        let trace = m
            .hessian_eigenvalues
            .iter()
            .zip(&m.metric_eigenvalues)
            .fold(T::zero(), |acc, (&l, &a)| acc + l / a);
        writeln!(
            out,
            "{refresh_step},{idx},{},{},{},{}",
            join(&m.hessian_eigenvalues),
            join(&m.metric_eigenvalues),
            trace.as_f64(),
            m.degenerate
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::determinant;

    fn eps() -> f64 {
        DEGENERACY_EPS
    }

    #[test]
    fn positive_definite_example() {
        let m = optimal_metric(&SymMatrix::<f64>::from_diag(&[4.0, 1.0]), eps());
        assert_eq!((m.d_plus, m.d_minus), (2, 0));
        assert!((m.alpha - 0.25).abs() < 1e-14);
        assert!(m.a.matrix().sub(&Matrix::from_diag(&[2.0, 0.5])).max_abs() < 1e-14);
        assert!(m.l.matmul(&m.l.transpose()).sub(m.a.matrix()).max_abs() < 1e-14);
    }

    #[test]
    fn mixed_sign_example() {
        let h = SymMatrix::<f64>::from_diag(&[2.0, -1.0]);
        let m = optimal_metric(&h, eps());
        let s2 = 2f64.sqrt();
        assert!(m.a.matrix().sub(&Matrix::from_diag(&[s2, 1.0 / s2])).max_abs() < 1e-14);
        assert!(trace_term(&m.a, &h).unwrap().abs() < 1e-14);
        assert!(m.trace_with(&h).abs() < 1e-14);
    }

    #[test]
    fn isotropic_hessian_gives_identity() {
        for c in [-3.0, 0.5, 7.0] {
            let m = optimal_metric(&SymMatrix::<f64>::identity(3).scale(c), eps());
            assert!(m.a.matrix().sub(&Matrix::identity(3)).max_abs() < 1e-14);
        }
    }

    #[test]
    fn zero_hessian_is_flagged() {
        let m = optimal_metric(&SymMatrix::<f64>::zeros(2), eps());
        assert!(m.degenerate);
        assert_eq!(m.a, SymMatrix::identity(2));
    }

    #[test]
    fn flat_direction_gets_geometric_mean() {
        let m = optimal_metric(&SymMatrix::<f64>::from_diag(&[4.0, 1.0, 0.0]), eps());
        assert_eq!((m.d_plus, m.d_minus), (2, 0));
        // M = diag(8, 2, 2) before normalisation
        let scale = (8.0f64 * 2.0 * 2.0).powf(-1.0 / 3.0);
        let expected = Matrix::from_diag(&[8.0 * scale, 2.0 * scale, 2.0 * scale]);
        assert!(m.a.matrix().sub(&expected).max_abs() < 1e-13);
        assert!((determinant(&m.a) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn trace_term_scaling_and_identity() {
        let h = SymMatrix::<f64>::from_rows(&[vec![2.0, 0.3], vec![0.3, -1.0]]).unwrap();
        assert!((trace_term(&SymMatrix::identity(2), &h).unwrap() - 1.0).abs() < 1e-15);
        let a = SymMatrix::<f64>::from_rows(&[vec![2.0, 0.5], vec![0.5, 1.0]]).unwrap();
        let t1 = trace_term(&a, &h).unwrap();
        let t3 = trace_term(&a.scale(3.0), &h).unwrap();
        assert!((t1 / 3.0 - t3).abs() < 1e-14);
    }

    #[test]
    fn f32_metric() {
        let m = optimal_metric(&SymMatrix::<f32>::from_diag(&[4.0, 1.0]), 1e-6);
        assert!((m.a[(0, 0)] - 2.0).abs() < 1e-5);
    }

    #[test]
    fn csv_dump_format() {
        let m = optimal_metric(&SymMatrix::<f64>::from_diag(&[2.0, -1.0]), eps());
        let mut buf = Vec::new();
        write_metric_csv(&mut buf, 3, &[(5, &m)], true).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 2);
        assert!(lines[1].starts_with("3,5,2 -1,"));
    }
}
