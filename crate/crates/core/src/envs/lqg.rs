//! Linear-quadratic-Gaussian benchmark with a closed-form value function.
//!
//! Dynamics `s' = F s + G a + ε`, `ε ~ N(0, Σ)`, reward `−(sᵀQs + aᵀRa)`.
//! For a linear target policy `a = K s` the discounted value is the quadratic
//! `V(s) = sᵀPs + c` with `P` the fixed point of
//! `P = −(Q + KᵀRK) + γ (F + GK)ᵀ P (F + GK)` and `c = γ tr(PΣ) / (1 − γ)`.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::EnvError;
use crate::numerics::{eigh_symmetric, Matrix, SymMatrix};
use crate::scalar::dot;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LqgSpec {
    pub f: Matrix<f64>,
    pub g: Matrix<f64>,
    pub q_cost: SymMatrix<f64>,
    /// Diagonal of the action cost.
    pub r_cost: Vec<f64>,
    pub noise_cov: SymMatrix<f64>,
    pub gamma: f64,
    /// Target policy gain, `a = K s`.
    pub k_policy: Matrix<f64>,
    pub horizon: usize,
    /// Initial states are drawn from `N(0, init_std² I)`.
    pub init_std: f64,
}

const FIXED_POINT_TOL: f64 = 1e-12;
const MAX_ITERS: usize = 200_000;

/// Symmetric PSD square root, clamping tiny negative eigenvalues to zero.
fn psd_sqrt(m: &SymMatrix<f64>) -> Matrix<f64> {
    eigh_symmetric(m).compose(|l| l.max(0.0).sqrt())
}

impl LqgSpec {
    pub fn state_dim(&self) -> usize {
        self.f.rows()
    }

    pub fn action_dim(&self) -> usize {
        self.g.cols()
    }

    pub fn validate(&self) -> Result<(), EnvError> {
        let (q, d) = (self.state_dim(), self.action_dim());
        let shape_ok = self.f.cols() == q
            && self.g.rows() == q
            && self.q_cost.dim() == q
            && self.r_cost.len() == d
            && self.noise_cov.dim() == q
            && self.k_policy.rows() == d
            && self.k_policy.cols() == q;
        if !shape_ok {
            return Err(EnvError::Config("inconsistent LQG matrix shapes".into()));
        }
        if !(0.0..1.0).contains(&self.gamma) {
            return Err(EnvError::Config(format!("discount {} outside [0, 1)", self.gamma)));
        }
        if self.r_cost.iter().any(|&r| r < 0.0) {
            return Err(EnvError::Config("action cost entries must be non-negative".into()));
        }
        if self.horizon == 0 {
            return Err(EnvError::Config("horizon must be positive".into()));
        }
        Ok(())
    }

    pub fn closed_loop(&self) -> Matrix<f64> {
        self.f.add(&self.g.matmul(&self.k_policy))
    }

    /// `ρ(F + GK)·√γ`, which must stay below one for the value to exist.
    pub fn discounted_spectral_radius(&self) -> f64 {
        self.closed_loop().spectral_radius_estimate() * self.gamma.sqrt()
    }

    /// Returns a copy with `n` extra action coordinates that do not move the
    /// state (zero columns in `G`, zero rows in `K`) and cost `r_dummy` each.
    pub fn with_dummy_dims(&self, n: usize, r_dummy: f64) -> Self {
        let (q, d) = (self.state_dim(), self.action_dim());
        let g = Matrix::from_fn(q, d + n, |i, j| if j < d { self.g[(i, j)] } else { 0.0 });
        let k = Matrix::from_fn(d + n, q, |i, j| if i < d { self.k_policy[(i, j)] } else { 0.0 });
        let mut r = self.r_cost.clone();
        r.extend(std::iter::repeat_n(r_dummy, n));
        Self { g, k_policy: k, r_cost: r, ..self.clone() }
    }

    pub fn reward(&self, s: &[f64], a: &[f64]) -> f64 {
        let qs = self.q_cost.matrix().matvec(s);
        let ra: f64 = a.iter().zip(&self.r_cost).map(|(&x, &r)| r * x * x).sum();
        -(dot(s, &qs) + ra)
    }

    pub fn mean_next_state(&self, s: &[f64], a: &[f64]) -> Vec<f64> {
        let mut next = self.f.matvec(s);
        for (n, ga) in next.iter_mut().zip(self.g.matvec(a)) {
            *n += ga;
        }
        next
    }

    pub fn step(&self, s: &[f64], a: &[f64], rng: &mut impl Rng) -> (Vec<f64>, f64) {
        let reward = self.reward(s, a);
        let mut next = self.mean_next_state(s, a);
        if self.noise_cov.matrix().max_abs() > 0.0 {
            let root = psd_sqrt(&self.noise_cov);
            let z: Vec<f64> = (0..self.state_dim()).map(|_| StandardNormal.sample(rng)).collect();
            for (n, e) in next.iter_mut().zip(root.matvec(&z)) {
                *n += e;
            }
        }
        (next, reward)
    }

    pub fn initial_state(&self, rng: &mut impl Rng) -> Vec<f64> {
        (0..self.state_dim())
            .map(|_| {
                let z: f64 = StandardNormal.sample(rng);
                self.init_std * z
            })
            .collect()
    }

    /// Discounted Lyapunov fixed point `(P, c)` with `V(s) = sᵀPs + c`.
    pub fn true_value(&self) -> Result<(SymMatrix<f64>, f64), EnvError> {
        let rho = self.discounted_spectral_radius();
        if rho >= 1.0 {
            return Err(EnvError::Unstable { discounted_spectral_radius: rho });
        }
        let m = self.closed_loop();
        let mt = m.transpose();
        let r = Matrix::from_diag(&self.r_cost);
        let stage = self.q_cost.matrix().add(&self.k_policy.transpose().matmul(&r).matmul(&self.k_policy));
        let mut p = stage.scale(-1.0);
        for _ in 0..MAX_ITERS {
            let next = stage.scale(-1.0).add(&mt.matmul(&p).matmul(&m).scale(self.gamma));
            let delta = next.sub(&p).max_abs();
            p = next;
            if delta <= FIXED_POINT_TOL * p.max_abs().max(1.0) {
                let p = SymMatrix::symmetrize(&p).map_err(|e| EnvError::Config(e.to_string()))?;
                let c = if self.gamma == 0.0 {
                    0.0
                } else {
                    self.gamma * p.matrix().matmul(self.noise_cov.matrix()).trace() / (1.0 - self.gamma)
                };
                return Ok((p, c));
            }
            if !p.is_finite() {
                break;
            }
        }
        Err(EnvError::Unstable { discounted_spectral_radius: rho })
    }

    /// `Q^π(s, a) = r(s, a) + γ[(Fs + Ga)ᵀP(Fs + Ga) + tr(PΣ) + c]`.
    pub fn true_q(&self, p: &SymMatrix<f64>, c: f64, s: &[f64], a: &[f64]) -> f64 {
        let mean = self.mean_next_state(s, a);
        let pm = p.matrix().matvec(&mean);
        let trace = p.matrix().matmul(self.noise_cov.matrix()).trace();
        self.reward(s, a) + self.gamma * (dot(&mean, &pm) + trace + c)
    }

    pub fn true_state_value(&self, p: &SymMatrix<f64>, c: f64, s: &[f64]) -> f64 {
        dot(s, &p.matrix().matvec(s)) + c
    }

    /// Action Hessian of `Q^π`, `2(−R + γ GᵀPG)`, constant in `(s, a)`.
    pub fn q_action_hessian(&self, p: &SymMatrix<f64>) -> SymMatrix<f64> {
        let gpg = self.g.transpose().matmul(p.matrix()).matmul(&self.g);
        let h = Matrix::from_diag(&self.r_cost).scale(-1.0).add(&gpg.scale(self.gamma)).scale(2.0);
        SymMatrix::symmetrize(&h).expect("finite hessian")
    }

    /// Normalised policy value `(1 − γ) E[V(s₀)]` under the initial distribution.
    pub fn normalized_policy_value(&self) -> Result<f64, EnvError> {
        let (p, c) = self.true_value()?;
        Ok((1.0 - self.gamma) * (self.init_std * self.init_std * p.trace() + c))
    }

    /// Embeds `Q^π` exactly into a quadratic-activation network on `(s; a)`.
    pub fn embed_true_q(&self, p: &SymMatrix<f64>, c: f64) -> crate::qfunc::QNetwork<f64> {
        use crate::qfunc::{Activation, Mlp, QNetwork};
        // Q(x) = xᵀ W x + const with x = (s; a)
        let (q, d) = (self.state_dim(), self.action_dim());
        let n = q + d;
        let mut fg = Matrix::zeros(q, n);
        for i in 0..q {
            for j in 0..q {
                fg[(i, j)] = self.f[(i, j)];
            }
            for j in 0..d {
                fg[(i, q + j)] = self.g[(i, j)];
            }
        }
        let mut w = fg.transpose().matmul(p.matrix()).matmul(&fg).scale(self.gamma);
        for i in 0..q {
            for j in 0..q {
                w[(i, j)] -= self.q_cost[(i, j)];
            }
        }
        for j in 0..d {
            w[(q + j, q + j)] -= self.r_cost[j];
        }
        let constant = self.gamma * (p.matrix().matmul(self.noise_cov.matrix()).trace() + c);
        let dec = eigh_symmetric(&SymMatrix::symmetrize(&w).expect("finite quadratic form"));
        let mut params = Vec::new();
        for k in 0..n {
            params.extend(dec.eigenvector(k));
        }
        params.extend(std::iter::repeat_n(0.0, n));
        params.extend(dec.eigenvalues.iter().copied());
        params.push(constant);
        let mlp = Mlp::from_params(&[n, n, 1], Activation::Square, params).expect("layout");
        QNetwork::from_mlp(mlp, d).expect("layout")
    }

    /// Four-state, two-action reference system.
    pub fn reference(gamma: f64) -> Self {
        let f = Matrix::from_rows(&[
            vec![0.95, 0.10, 0.0, 0.0],
            vec![0.0, 0.90, 0.10, 0.0],
            vec![0.0, 0.0, 0.90, 0.10],
            vec![0.05, 0.0, 0.0, 0.85],
        ]);
        let g = Matrix::from_rows(&[vec![0.5, 0.0], vec![0.3, 0.1], vec![0.0, 0.5], vec![0.1, 0.3]]);
        let k = Matrix::from_rows(&[vec![-0.6, -0.3, 0.0, -0.1], vec![0.0, -0.1, -0.6, -0.3]]);
        Self {
            f,
            g,
            q_cost: SymMatrix::identity(4),
            r_cost: vec![0.1, 0.1],
            noise_cov: SymMatrix::identity(4).scale(0.04),
            gamma,
            k_policy: k,
            horizon: 100,
            init_std: 1.0,
        }
    }

    /// Behavior gain used with [`LqgSpec::reference`]: the target gain with a
    /// weaker feedback on the first and third state coordinates.
    pub fn reference_behavior_gain() -> Matrix<f64> {
        Matrix::from_rows(&[vec![-0.3, -0.3, 0.0, -0.1], vec![0.0, -0.1, -0.3, -0.3]])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn scalar_spec(f: f64, g: f64, k: f64, q: f64, r: f64, sigma2: f64, gamma: f64) -> LqgSpec {
        LqgSpec {
            f: Matrix::from_rows(&[vec![f]]),
            g: Matrix::from_rows(&[vec![g]]),
            q_cost: SymMatrix::from_diag(&[q]),
            r_cost: vec![r],
            noise_cov: SymMatrix::from_diag(&[sigma2]),
            gamma,
            k_policy: Matrix::from_rows(&[vec![k]]),
            horizon: 100,
            init_std: 1.0,
        }
    }

    #[test]
    fn noiseless_identity_system_from_origin() {
        let mut spec = scalar_spec(1.0, 1.0, 0.0, 1.0, 1.0, 0.0, 0.5);
        spec.f = Matrix::identity(2);
        spec.g = Matrix::identity(2);
        spec.q_cost = SymMatrix::identity(2);
        spec.r_cost = vec![1.0, 1.0];
        spec.noise_cov = SymMatrix::zeros(2);
        spec.k_policy = Matrix::zeros(2, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (next, r) = spec.step(&[0.0, 0.0], &[0.0, 0.0], &mut rng);
        assert_eq!(next, vec![0.0, 0.0]);
        assert_eq!(r, 0.0);
        let (next, _) = spec.step(&[1.0, -2.0], &[0.5, 0.25], &mut rng);
        assert_eq!(next, vec![1.5, -1.75]);
    }

    #[test]
    fn myopic_value_is_stage_reward() {
        let spec = LqgSpec::reference(0.0);
        let (p, c) = spec.true_value().unwrap();
        let k = &spec.k_policy;
        let expected = spec
            .q_cost
            .matrix()
            .add(&k.transpose().matmul(&Matrix::from_diag(&spec.r_cost)).matmul(k))
            .scale(-1.0);
        assert!(p.matrix().sub(&expected).max_abs() < 1e-14);
        assert_eq!(c, 0.0);
    }

    #[test]
    fn scalar_geometric_series() {
        let spec = scalar_spec(0.5, 1.0, 0.0, 1.0, 0.0, 0.0, 0.9);
        let (p, c) = spec.true_value().unwrap();
        assert!((p[(0, 0)] + 1.0 / (1.0 - 0.9 * 0.25)).abs() < 1e-11);
        assert!((p[(0, 0)] + 1.290_322_580_645_161).abs() < 1e-11);
        assert_eq!(c, 0.0);
    }

    #[test]
    fn fixed_point_residual_is_tiny() {
        let spec = LqgSpec::reference(0.9);
        let (p, _) = spec.true_value().unwrap();
        let m = spec.closed_loop();
        let k = &spec.k_policy;
        let stage = spec.q_cost.matrix().add(&k.transpose().matmul(&Matrix::from_diag(&spec.r_cost)).matmul(k));
        let rhs = stage.scale(-1.0).add(&m.transpose().matmul(p.matrix()).matmul(&m).scale(0.9));
        assert!(rhs.sub(p.matrix()).max_abs() < 1e-10);
    }

    #[test]
    fn unstable_spec_is_rejected() {
        let spec = scalar_spec(1.2, 1.0, 0.0, 1.0, 0.0, 0.0, 0.9);
        match spec.true_value() {
            Err(EnvError::Unstable { discounted_spectral_radius }) => {
                assert!((discounted_spectral_radius - 1.2 * 0.9f64.sqrt()).abs() < 1e-6)
            }
            other => panic!("expected instability, got {other:?}"),
        }
    }

    #[test]
    fn on_policy_q_equals_state_value() {
        let spec = LqgSpec::reference(0.9);
        let (p, c) = spec.true_value().unwrap();
        let s = [0.3, -1.0, 0.7, 0.2];
        let a = spec.k_policy.matvec(&s);
        let q = spec.true_q(&p, c, &s, &a);
        assert!((q - spec.true_state_value(&p, c, &s)).abs() < 1e-10);
    }

    #[test]
    fn embedded_quadratic_network_reproduces_true_q() {
        let spec = LqgSpec::reference(0.9).with_dummy_dims(2, 1e-3);
        let (p, c) = spec.true_value().unwrap();
        let net = spec.embed_true_q(&p, c);
        let h = spec.q_action_hessian(&p);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..20 {
            let s: Vec<f64> = (0..4).map(|_| rng.random_range(-2.0..2.0)).collect();
            let a: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
            let exact = spec.true_q(&p, c, &s, &a);
            assert!((net.q_forward(&s, &a).unwrap() - exact).abs() < 1e-10 * exact.abs().max(1.0));
            let nh = net.hess_action(&s, &a).unwrap();
            assert!(nh.matrix().sub(h.matrix()).max_abs() < 1e-10);
        }
    }

    #[test]
    fn dummy_dims_do_not_move_the_state() {
        let base = LqgSpec::reference(0.9);
        let spec = base.with_dummy_dims(3, 1e-3);
        assert_eq!(spec.action_dim(), 5);
        let s = [0.1, 0.2, 0.3, 0.4];
        let m1 = spec.mean_next_state(&s, &[0.5, -0.5, 1.0, -1.0, 0.3]);
        let m2 = spec.mean_next_state(&s, &[0.5, -0.5, 0.0, 0.0, 0.0]);
        assert_eq!(m1, m2);
        let (p, _) = spec.true_value().unwrap();
        let (p0, _) = base.true_value().unwrap();
        assert!(p.matrix().sub(p0.matrix()).max_abs() < 1e-12);
        let h = spec.q_action_hessian(&p);
        assert!((h[(3, 3)] + 2e-3).abs() < 1e-15);
    }
}
