//! Feed-forward networks with hand-written derivatives.
//!
//! [`Mlp`] is a plain multilayer perceptron with smooth hidden activations
//! and a linear output layer. [`QNetwork`] wraps a scalar-output `Mlp` whose
//! input is the concatenation `(s; a)` and adds exact action-space
//! derivatives: gradient, Hessian and Laplacian, all obtained by layered
//! forward propagation of first and second order tangents.
//!
//! Parameters live in one flat vector, layer by layer, each layer storing its
//! weight matrix row-major (`out x in`) followed by its bias vector.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numerics::{Matrix, SymMatrix};
use crate::scalar::Real;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum QError {
    #[error("input dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("non-finite network input")]
    NonFiniteInput,
    #[error("non-finite update vector entry at index {index}")]
    NonFiniteUpdate { index: usize },
    #[error("update vector has length {found}, parameter vector has length {expected}")]
    UpdateLength { expected: usize, found: usize },
    #[error("invalid network layout: {0}")]
    Layout(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Tanh,
    Softplus,
    /// `σ(u) = u²`. Lets a one-hidden-layer network represent an exact
    /// quadratic form, which the analytic LQG oracles rely on.
    Square,
}

impl Activation {
    /// Returns `(σ(u), σ'(u), σ''(u))`.
    #[inline]
    fn eval<T: Real>(self, u: T) -> (T, T, T) {
        match self {
            Activation::Tanh => {
                let t = u.tanh();
                let d1 = T::one() - t * t;
                (t, d1, -(t + t) * d1)
            }
            Activation::Softplus => {
                // log(1 + e^u) = max(u, 0) + log1p(e^{-|u|})
                let v = u.max(T::zero()) + (-u.abs()).exp().ln_1p();
                let sig = if u >= T::zero() {
                    (T::one() + (-u).exp()).recip()
                } else {
                    let e = u.exp();
                    e / (T::one() + e)
                };
                (v, sig, sig * (T::one() - sig))
            }
            Activation::Square => (u * u, u + u, T::of(2.0)),
        }
    }

    #[inline]
    fn value<T: Real>(self, u: T) -> T {
        match self {
            Activation::Tanh => u.tanh(),
            Activation::Softplus => u.max(T::zero()) + (-u.abs()).exp().ln_1p(),
            Activation::Square => u * u,
        }
    }

    /// `σ'(u)` given both the pre-activation `u` and the output `y = σ(u)`.
    #[inline]
    fn derivative<T: Real>(self, u: T, y: T) -> T {
        match self {
            Activation::Tanh => T::one() - y * y,
            // y = log(1 + e^u)  =>  σ'(u) = 1 - e^{-y}
            Activation::Softplus => T::one() - (-y).exp(),
            Activation::Square => u + u,
        }
    }
}

/// Multilayer perceptron: hidden layers use `activation`, the last layer is linear.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp<T: Real> {
    sizes: Vec<usize>,
    activation: Activation,
    params: Vec<T>,
    offsets: Vec<usize>,
}

/// Forward-pass record used by reverse-mode differentiation.
#[derive(Clone, Debug, Default)]
pub struct Tape<T> {
    // acts[0] is the input, acts[l + 1] the output of layer l
    acts: Vec<Vec<T>>,
    // pre[l] holds the pre-activations of layer l
    pre: Vec<Vec<T>>,
}

impl<T: Real> Tape<T> {
    pub fn output(&self) -> &[T] {
        self.acts.last().map_or(&[], Vec::as_slice)
    }
}

pub fn param_count(sizes: &[usize]) -> usize {
    sizes.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
}

impl<T: Real> Mlp<T> {
    /// Seeded initialisation, every parameter uniform in `[-1/√fan_in, 1/√fan_in]`.
    pub fn new(sizes: &[usize], activation: Activation, seed: u64) -> Result<Self, QError> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Vec::with_capacity(param_count(sizes));
        for w in sizes.windows(2) {
            let bound = 1.0 / (w[0] as f64).sqrt();
            for _ in 0..(w[0] * w[1] + w[1]) {
                params.push(T::of(rng.random_range(-bound..=bound)));
            }
        }
        Self::from_params(sizes, activation, params)
    }

    pub fn from_params(sizes: &[usize], activation: Activation, params: Vec<T>) -> Result<Self, QError> {
        if sizes.len() < 2 || sizes.contains(&0) {
            return Err(QError::Layout(format!("layer sizes {sizes:?} need at least two positive entries")));
        }
        let expected = param_count(sizes);
        if params.len() != expected {
            return Err(QError::Layout(format!("expected {expected} parameters, found {}", params.len())));
        }
        let mut offsets = Vec::with_capacity(sizes.len() - 1);
        let mut off = 0;
        for w in sizes.windows(2) {
            offsets.push(off);
            off += w[0] * w[1] + w[1];
        }
        Ok(Self { sizes: sizes.to_vec(), activation, params, offsets })
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn params(&self) -> &[T] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [T] {
        &mut self.params
    }

    pub fn input_dim(&self) -> usize {
        self.sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.sizes.last().unwrap()
    }

    pub fn num_layers(&self) -> usize {
        self.sizes.len() - 1
    }

    #[inline]
    fn layer(&self, l: usize) -> (&[T], &[T], usize, usize) {
        let (n_in, n_out) = (self.sizes[l], self.sizes[l + 1]);
        let off = self.offsets[l];
        let w = &self.params[off..off + n_in * n_out];
        let b = &self.params[off + n_in * n_out..off + n_in * n_out + n_out];
        (w, b, n_in, n_out)
    }

    fn is_hidden(&self, l: usize) -> bool {
        l + 1 < self.num_layers()
    }

    pub fn forward(&self, input: &[T]) -> Vec<T> {
        let mut x = input.to_vec();
        for l in 0..self.num_layers() {
            let (w, b, n_in, n_out) = self.layer(l);
            let hidden = self.is_hidden(l);
            x = (0..n_out)
                .map(|o| {
                    let u = crate::scalar::dot(&w[o * n_in..(o + 1) * n_in], &x) + b[o];
                    if hidden {
                        self.activation.value(u)
                    } else {
                        u
                    }
                })
                .collect();
        }
        x
    }

    pub fn forward_tape(&self, input: &[T], tape: &mut Tape<T>) {
        tape.acts.resize(self.sizes.len(), Vec::new());
        tape.pre.resize(self.num_layers(), Vec::new());
        tape.acts[0].clear();
        tape.acts[0].extend_from_slice(input);
        for l in 0..self.num_layers() {
            let (w, b, n_in, n_out) = self.layer(l);
            let hidden = self.is_hidden(l);
            let (before, after) = tape.acts.split_at_mut(l + 1);
            let x = &before[l];
            let y = &mut after[0];
            let pre = &mut tape.pre[l];
            y.clear();
            pre.clear();
            for o in 0..n_out {
                let u = crate::scalar::dot(&w[o * n_in..(o + 1) * n_in], x) + b[o];
                pre.push(u);
                y.push(if hidden { self.activation.value(u) } else { u });
            }
        }
    }

    /// Reverse pass. Adds `scale * ∂(out_gradᵀ y)/∂θ` into `param_grad` and,
    /// if requested, writes `∂(out_gradᵀ y)/∂x` into `input_grad`.
    pub fn backward(
        &self,
        tape: &Tape<T>,
        out_grad: &[T],
        scale: T,
        param_grad: &mut [T],
        input_grad: Option<&mut [T]>,
    ) {
        let mut delta = out_grad.to_vec();
        let mut next = Vec::new();
        for l in (0..self.num_layers()).rev() {
            let (w, _, n_in, n_out) = self.layer(l);
            let x = &tape.acts[l];
            let off = self.offsets[l];
            for o in 0..n_out {
                let d = delta[o] * scale;
                if d != T::zero() {
                    let row = &mut param_grad[off + o * n_in..off + (o + 1) * n_in];
                    crate::scalar::axpy(d, x, row);
                }
                param_grad[off + n_in * n_out + o] += d;
            }
            if l == 0 && input_grad.is_none() {
                break;
            }
            next.clear();
            next.resize(n_in, T::zero());
            for o in 0..n_out {
                crate::scalar::axpy(delta[o], &w[o * n_in..(o + 1) * n_in], &mut next);
            }
            if l > 0 {
                // x is the activation output of layer l - 1
                for ((g, &xi), &ui) in next.iter_mut().zip(x).zip(&tape.pre[l - 1]) {
                    *g *= self.activation.derivative(ui, xi);
                }
            }
            std::mem::swap(&mut delta, &mut next);
        }
        if let Some(ig) = input_grad {
            ig.copy_from_slice(&delta);
        }
    }

}

/// Q-function network on concatenated `(state; action)` input with a scalar output.
#[derive(Clone, Debug, PartialEq)]
pub struct QNetwork<T: Real> {
    mlp: Mlp<T>,
    action_dim: usize,
    adam: AdamState<T>,
}

/// Adam moments and step counter.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamState<T> {
    pub m: Vec<T>,
    pub v: Vec<T>,
    pub step: u64,
}

impl<T: Real> AdamState<T> {
    pub fn new(n: usize) -> Self {
        Self { m: vec![T::zero(); n], v: vec![T::zero(); n], step: 0 }
    }
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// One Adam step that moves `params` along `+direction`.
pub fn adam_ascent<T: Real>(
    params: &mut [T],
    state: &mut AdamState<T>,
    direction: &[T],
    step_size: T,
) -> Result<(), QError> {
    if direction.len() != params.len() {
        return Err(QError::UpdateLength { expected: params.len(), found: direction.len() });
    }
    if let Some(index) = direction.iter().position(|g| !g.is_finite()) {
        return Err(QError::NonFiniteUpdate { index });
    }
    let (b1, b2, eps) = (T::of(ADAM_BETA1), T::of(ADAM_BETA2), T::of(ADAM_EPS));
    state.step += 1;
    let t = state.step as i32;
    let c1 = T::one() - b1.powi(t);
    let c2 = T::one() - b2.powi(t);
    for i in 0..params.len() {
        let g = direction[i];
        state.m[i] = b1 * state.m[i] + (T::one() - b1) * g;
        state.v[i] = b2 * state.v[i] + (T::one() - b2) * g * g;
        let m_hat = state.m[i] / c1;
        let v_hat = state.v[i] / c2;
        params[i] += step_size * m_hat / (v_hat.sqrt() + eps);
    }
    Ok(())
}

/// Reusable per-call buffers for [`QNetwork`] derivative evaluations.
#[derive(Clone, Debug, Default)]
pub struct QScratch<T> {
    tape: Tape<T>,
    input: Vec<T>,
}

impl<T: Real> QNetwork<T> {
    /// `hidden` lists hidden layer widths; input is `state_dim + action_dim`, output 1.
    pub fn new(
        state_dim: usize,
        action_dim: usize,
        hidden: &[usize],
        activation: Activation,
        seed: u64,
    ) -> Result<Self, QError> {
        let sizes = Self::layout(state_dim, action_dim, hidden);
        let mlp = Mlp::new(&sizes, activation, seed)?;
        Ok(Self::from_mlp(mlp, action_dim)?)
    }

    pub fn layout(state_dim: usize, action_dim: usize, hidden: &[usize]) -> Vec<usize> {
        let mut sizes = vec![state_dim + action_dim];
        sizes.extend_from_slice(hidden);
        sizes.push(1);
        sizes
    }

    pub fn from_mlp(mlp: Mlp<T>, action_dim: usize) -> Result<Self, QError> {
        if mlp.output_dim() != 1 {
            return Err(QError::Layout("Q-network output must be scalar".into()));
        }
        if action_dim == 0 || action_dim > mlp.input_dim() {
            return Err(QError::Layout(format!("action dim {action_dim} incompatible with input {}", mlp.input_dim())));
        }
        let n = mlp.params.len();
        Ok(Self { mlp, action_dim, adam: AdamState::new(n) })
    }

    pub fn mlp(&self) -> &Mlp<T> {
        &self.mlp
    }

    pub fn state_dim(&self) -> usize {
        self.mlp.input_dim() - self.action_dim
    }

    pub fn action_dim(&self) -> usize {
        self.action_dim
    }

    pub fn params(&self) -> &[T] {
        self.mlp.params()
    }

    pub fn num_params(&self) -> usize {
        self.mlp.params.len()
    }

    pub fn adam_state(&self) -> &AdamState<T> {
        &self.adam
    }

    fn check(&self, s: &[T], a: &[T]) -> Result<(), QError> {
        if s.len() != self.state_dim() {
            return Err(QError::DimensionMismatch { expected: self.state_dim(), found: s.len() });
        }
        if a.len() != self.action_dim {
            return Err(QError::DimensionMismatch { expected: self.action_dim, found: a.len() });
        }
        if !crate::scalar::all_finite(s) || !crate::scalar::all_finite(a) {
            return Err(QError::NonFiniteInput);
        }
        Ok(())
    }

    fn concat(s: &[T], a: &[T], buf: &mut Vec<T>) {
        buf.clear();
        buf.extend_from_slice(s);
        buf.extend_from_slice(a);
    }

    pub fn q_forward(&self, s: &[T], a: &[T]) -> Result<T, QError> {
        self.check(s, a)?;
        let mut x = Vec::with_capacity(s.len() + a.len());
        Self::concat(s, a, &mut x);
        Ok(self.mlp.forward(&x)[0])
    }

    /// `Q(s, a)`, adding `scale * ∇_θ Q(s, a)` into `acc`. Inputs are not validated.
    pub fn value_and_accumulate_grad(&self, s: &[T], a: &[T], scale: T, acc: &mut [T], scratch: &mut QScratch<T>) -> T {
        Self::concat(s, a, &mut scratch.input);
        self.mlp.forward_tape(&scratch.input, &mut scratch.tape);
        let q = scratch.tape.output()[0];
        if scale != T::zero() {
            self.mlp.backward(&scratch.tape, &[T::one()], scale, acc, None);
        }
        q
    }

    /// `(Q(s, a), ∇_θ Q(s, a))`
    pub fn value_and_grad_params(&self, s: &[T], a: &[T]) -> Result<(T, Vec<T>), QError> {
        self.check(s, a)?;
        let mut g = vec![T::zero(); self.num_params()];
        let q = self.value_and_accumulate_grad(s, a, T::one(), &mut g, &mut QScratch::default());
        Ok((q, g))
    }

    pub fn grad_params(&self, s: &[T], a: &[T]) -> Result<Vec<T>, QError> {
        Ok(self.value_and_grad_params(s, a)?.1)
    }

    pub fn grad_action(&self, s: &[T], a: &[T]) -> Result<Vec<T>, QError> {
        self.check(s, a)?;
        let mut x = Vec::new();
        Self::concat(s, a, &mut x);
        let mut tape = Tape::default();
        self.mlp.forward_tape(&x, &mut tape);
        let mut sink = vec![T::zero(); self.num_params()];
        let mut ig = vec![T::zero(); x.len()];
        self.mlp.backward(&tape, &[T::one()], T::zero(), &mut sink, Some(&mut ig));
        Ok(ig[self.state_dim()..].to_vec())
    }

    /// Second-order forward propagation over the action block.
    ///
    /// `pairs` lists the `(i, j)` second derivatives wanted. Returns the value,
    /// the action gradient and the requested second derivatives in order.
    fn second_order(&self, s: &[T], a: &[T], pairs: &[(usize, usize)]) -> (T, Vec<T>, Vec<T>) {
        let d = self.action_dim;
        let sd = self.state_dim();
        let mut x = Vec::with_capacity(sd + d);
        Self::concat(s, a, &mut x);
        let n_layers = self.mlp.num_layers();

        // first layer: tangents are columns of W, second-order tangents vanish
        let mut val: Vec<T>;
        let mut tan: Vec<Vec<T>>;
        let mut sec: Vec<Vec<T>>;
        {
            let (w, b, n_in, n_out) = self.mlp.layer(0);
            let u: Vec<T> = (0..n_out).map(|o| crate::scalar::dot(&w[o * n_in..(o + 1) * n_in], &x) + b[o]).collect();
            let du: Vec<Vec<T>> = (0..d).map(|i| (0..n_out).map(|o| w[o * n_in + sd + i]).collect()).collect();
            if n_layers == 1 {
                return (u[0], du.iter().map(|v| v[0]).collect(), vec![T::zero(); pairs.len()]);
            }
            let (v, t, s2) = self.activate(&u, &du, None, pairs);
            val = v;
            tan = t;
            sec = s2;
        }
        for l in 1..n_layers {
            let (w, b, n_in, n_out) = self.mlp.layer(l);
            let lin = |v: &[T], bias: bool| -> Vec<T> {
                (0..n_out)
                    .map(|o| {
                        let z = crate::scalar::dot(&w[o * n_in..(o + 1) * n_in], v);
                        if bias {
                            z + b[o]
                        } else {
                            z
                        }
                    })
                    .collect()
            };
            let u = lin(&val, true);
            let du: Vec<Vec<T>> = tan.iter().map(|t| lin(t, false)).collect();
            let d2u: Vec<Vec<T>> = sec.iter().map(|t| lin(t, false)).collect();
            if l + 1 == n_layers {
                return (u[0], du.iter().map(|v| v[0]).collect(), d2u.iter().map(|v| v[0]).collect());
            }
            let (v, t, s2) = self.activate(&u, &du, Some(&d2u), pairs);
            val = v;
            tan = t;
            sec = s2;
        }
        unreachable!("network has an output layer")
    }

    #[allow(clippy::type_complexity)]
    fn activate(
        &self,
        u: &[T],
        du: &[Vec<T>],
        d2u: Option<&[Vec<T>]>,
        pairs: &[(usize, usize)],
    ) -> (Vec<T>, Vec<Vec<T>>, Vec<Vec<T>>) {
        let n = u.len();
        let mut y = Vec::with_capacity(n);
        let mut s1 = Vec::with_capacity(n);
        let mut s2 = Vec::with_capacity(n);
        for &ui in u {
            let (a, b, c) = self.mlp.activation.eval(ui);
            y.push(a);
            s1.push(b);
            s2.push(c);
        }
        let tan: Vec<Vec<T>> = du.iter().map(|t| t.iter().zip(&s1).map(|(&ti, &di)| ti * di).collect()).collect();
        let sec: Vec<Vec<T>> = pairs
            .iter()
            .enumerate()
            .map(|(k, &(i, j))| {
                (0..n)
                    .map(|o| {
                        let curv = s2[o] * du[i][o] * du[j][o];
                        match d2u {
                            Some(d2) => curv + s1[o] * d2[k][o],
                            None => curv,
                        }
                    })
                    .collect()
            })
            .collect();
        (y, tan, sec)
    }

    fn upper_pairs(d: usize) -> Vec<(usize, usize)> {
        let mut p = Vec::with_capacity(d * (d + 1) / 2);
        for i in 0..d {
            for j in i..d {
                p.push((i, j));
            }
        }
        p
    }

    /// Exact action Hessian `∂²Q/∂a²`.
    pub fn hess_action(&self, s: &[T], a: &[T]) -> Result<SymMatrix<T>, QError> {
        self.check(s, a)?;
        Ok(self.value_and_hess_action_unchecked(s, a).1)
    }

    pub fn value_and_hess_action_unchecked(&self, s: &[T], a: &[T]) -> (T, SymMatrix<T>) {
        let d = self.action_dim;
        let pairs = Self::upper_pairs(d);
        let (q, _, sec) = self.second_order(s, a, &pairs);
        let mut h = Matrix::zeros(d, d);
        for (&(i, j), &v) in pairs.iter().zip(&sec) {
            h[(i, j)] = v;
            h[(j, i)] = v;
        }
        (q, SymMatrix::new(h).expect("hessian assembled symmetric and finite"))
    }

    /// Trace of the action Hessian, using only the diagonal second-order tangents.
    pub fn laplacian_action(&self, s: &[T], a: &[T]) -> Result<T, QError> {
        self.check(s, a)?;
        Ok(self.value_and_laplacian_unchecked(s, a).1)
    }

    pub fn value_and_laplacian_unchecked(&self, s: &[T], a: &[T]) -> (T, T) {
        let pairs: Vec<(usize, usize)> = (0..self.action_dim).map(|i| (i, i)).collect();
        let (q, _, sec) = self.second_order(s, a, &pairs);
        (q, sec.into_iter().sum())
    }

    /// Adam step applied as ascent along `update`.
    pub fn adam_step(&mut self, update: &[T], step_size: T) -> Result<(), QError> {
        adam_ascent(&mut self.mlp.params, &mut self.adam, update, step_size)
    }

    pub fn set_params(&mut self, params: &[T]) -> Result<(), QError> {
        if params.len() != self.num_params() {
            return Err(QError::UpdateLength { expected: self.num_params(), found: params.len() });
        }
        self.mlp.params.copy_from_slice(params);
        Ok(())
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint::from_parts(&self.mlp, self.action_dim, Some(&self.adam), None)
    }

    pub fn from_checkpoint(c: &Checkpoint) -> Result<Self, QError> {
        let params: Vec<T> = c.params.iter().map(|&p| T::of(p)).collect();
        let mlp = Mlp::from_params(&c.layer_sizes, c.activation, params)?;
        let mut net = Self::from_mlp(mlp, c.action_dim)?;
        if let Some(st) = &c.optimizer_state {
            if st.m.len() != net.num_params() || st.v.len() != net.num_params() {
                return Err(QError::Checkpoint("optimizer state length mismatch".into()));
            }
            net.adam = AdamState {
                m: st.m.iter().map(|&x| T::of(x)).collect(),
                v: st.v.iter().map(|&x| T::of(x)).collect(),
                step: c.step,
            };
        }
        Ok(net)
    }
}

/// JSON checkpoint: `{layer_sizes, activation, params, optimizer_state, step}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub layer_sizes: Vec<usize>,
    pub activation: Activation,
    pub action_dim: usize,
    pub params: Vec<f64>,
    pub optimizer_state: Option<AdamState<f64>>,
    pub step: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub policy_head: Option<String>,
}

impl Checkpoint {
    pub fn from_parts<T: Real>(mlp: &Mlp<T>, action_dim: usize, adam: Option<&AdamState<T>>, head: Option<&str>) -> Self {
        let conv = |v: &[T]| v.iter().map(|x| x.as_f64()).collect::<Vec<f64>>();
        Self {
            layer_sizes: mlp.sizes.clone(),
            activation: mlp.activation,
            action_dim,
            params: conv(&mlp.params),
            optimizer_state: adam.map(|a| AdamState { m: conv(&a.m), v: conv(&a.v), step: a.step }),
            step: adam.map_or(0, |a| a.step),
            policy_head: head.map(str::to_owned),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("checkpoint serialises")
    }

    pub fn from_json(s: &str) -> Result<Self, QError> {
        serde_json::from_str(s).map_err(|e| QError::Checkpoint(e.to_string()))
    }
}

/// Frozen copy of a Q-network used for bootstrap targets.
#[derive(Clone, Debug, PartialEq)]
pub struct TargetSnapshot<T: Real> {
    net: QNetwork<T>,
    step: u64,
}

impl<T: Real> TargetSnapshot<T> {
    pub fn new(net: &QNetwork<T>, step: u64) -> Self {
        let mut frozen = net.clone();
        frozen.adam = AdamState::new(0);
        Self { net: frozen, step }
    }

    /// Copies the current parameters into a new snapshot.
    pub fn hard_update(&self, net: &QNetwork<T>, step: u64) -> Self {
        Self::new(net, step)
    }

    /// Polyak averaging `θ̄ ← τθ + (1-τ)θ̄`.
    pub fn soft_update(&mut self, net: &QNetwork<T>, tau: T, step: u64) {
        for (t, &p) in self.net.mlp.params.iter_mut().zip(net.params()) {
            *t = tau * p + (T::one() - tau) * *t;
        }
        self.step = step;
    }

    pub fn net(&self) -> &QNetwork<T> {
        &self.net
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn params(&self) -> &[T] {
        self.net.params()
    }
}

/// Random draw used in tests and experiments.
pub fn random_vector<T: Real>(rng: &mut impl Rng, n: usize, lo: f64, hi: f64) -> Vec<T> {
    (0..n).map(|_| T::of(rng.random_range(lo..hi))).collect()
}
