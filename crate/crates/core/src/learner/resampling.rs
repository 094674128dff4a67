//! Resampling distribution over transitions and O(1) weighted draws.

use rand::Rng;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ResamplingError {
    #[error("resampling weights are empty")]
    Empty,
    #[error("resampling weight {index} is negative or non-finite: {value}")]
    InvalidWeight { index: usize, value: f64 },
    #[error("all resampling weights are zero")]
    AllZero,
}

/// Vose alias table for sampling indices with replacement.
#[derive(Clone, Debug, PartialEq)]
pub struct AliasTable {
    prob: Vec<f64>,
    alias: Vec<usize>,
}

impl AliasTable {
    /// Builds from non-negative weights (not necessarily normalised).
    pub fn new(weights: &[f64]) -> Result<Self, ResamplingError> {
        let n = weights.len();
        if n == 0 {
            return Err(ResamplingError::Empty);
        }
        if let Some((index, &value)) = weights.iter().enumerate().find(|(_, w)| !(w.is_finite() && **w >= 0.0)) {
            return Err(ResamplingError::InvalidWeight { index, value });
        }
        let total: f64 = crate::scalar::pairwise_sum(weights);
        if total <= 0.0 {
            return Err(ResamplingError::AllZero);
        }
        let mut scaled: Vec<f64> = weights.iter().map(|w| w * n as f64 / total).collect();
        let mut prob = vec![0.0; n];
        let mut alias = vec![0; n];
        let (mut small, mut large): (Vec<usize>, Vec<usize>) = (0..n).partition(|&i| scaled[i] < 1.0);
        while let (Some(&s), Some(&l)) = (small.last(), large.last()) {
            small.pop();
            prob[s] = scaled[s];
            alias[s] = l;
            scaled[l] = (scaled[l] + scaled[s]) - 1.0;
            if scaled[l] < 1.0 {
                large.pop();
                small.push(l);
            }
        }
        // leftovers carry probability one up to rounding
        for i in large.into_iter().chain(small) {
            prob[i] = 1.0;
            alias[i] = i;
        }
        Ok(Self { prob, alias })
    }

    pub fn len(&self) -> usize {
        self.prob.len()
    }

    pub fn is_empty(&self) -> bool {
        self.prob.is_empty()
    }

    pub fn sample(&self, rng: &mut impl Rng) -> usize {
        let i = rng.random_range(0..self.prob.len());
        if rng.random::<f64>() < self.prob[i] {
            i
        } else {
            self.alias[i]
        }
    }
}

/// Per-transition ratios `w_i`, probabilities `ρ_i = w_i / Σ_j w_j` and the
/// bias-correction mean `w̄ = (1/n) Σ_i w_i`.
#[derive(Clone, Debug, PartialEq)]
pub struct ResamplingTable {
    pub weights: Vec<f64>,
    pub probs: Vec<f64>,
    pub mean_weight: f64,
    /// Bandwidth the ratios were computed with.
    pub bandwidth: f64,
    alias: AliasTable,
}

impl ResamplingTable {
    pub fn from_weights(weights: Vec<f64>, bandwidth: f64) -> Result<Self, ResamplingError> {
        let alias = AliasTable::new(&weights)?;
        let total = crate::scalar::pairwise_sum(&weights);
        let probs = weights.iter().map(|w| w / total).collect();
        let mean_weight = total / weights.len() as f64;
        Ok(Self { weights, probs, mean_weight, bandwidth, alias })
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    /// `k` i.i.d. indices drawn from `ρ`.
    pub fn resample(&self, k: usize, rng: &mut impl Rng) -> Vec<usize> {
        (0..k).map(|_| self.alias.sample(rng)).collect()
    }

    /// Effective sample size `1 / Σ ρ_i²`.
    pub fn effective_sample_size(&self) -> f64 {
        1.0 / self.probs.iter().map(|p| p * p).sum::<f64>()
    }
}
