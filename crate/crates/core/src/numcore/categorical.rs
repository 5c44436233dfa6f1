use rand::Rng;
use serde::{Deserialize, Serialize};

use super::tape::log_sum_exp;

/// Categorical distribution over `K` codes, parameterised by logits.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CategoricalDist {
    logits: Vec<f64>,
}

impl CategoricalDist {
    pub fn from_logits(logits: Vec<f64>) -> Self {
        assert!(!logits.is_empty(), "categorical needs at least one class");
        CategoricalDist { logits }
    }

    /// Builds a distribution from probabilities (zeros become `-inf` logits).
    pub fn from_probs(probs: &[f64]) -> Self {
        CategoricalDist { logits: probs.iter().map(|p| p.ln()).collect() }
    }

    pub fn num_classes(&self) -> usize {
        self.logits.len()
    }

    pub fn logits(&self) -> &[f64] {
        &self.logits
    }

    pub fn log_probs(&self) -> Vec<f64> {
        let lse = log_sum_exp(&self.logits);
        self.logits.iter().map(|l| l - lse).collect()
    }

    pub fn probs(&self) -> Vec<f64> {
        self.log_probs().into_iter().map(f64::exp).collect()
    }

    /// Most likely class, lowest index on ties.
    pub fn mode(&self) -> usize {
        argmax(&self.logits)
    }

    pub fn sample<R: Rng>(&self, rng: &mut R) -> usize {
        sample_index(&self.probs(), rng)
    }

    pub fn kl(&self, other: &CategoricalDist) -> f64 {
        categorical_kl(&self.probs(), &other.probs())
    }

    pub fn total_variation(&self, other: &CategoricalDist) -> f64 {
        0.5 * self.probs().iter().zip(other.probs()).map(|(a, b)| (a - b).abs()).sum::<f64>()
    }
}

/// `KL(q ‖ f) = Σ q_i (ln q_i − ln f_i)` with `0·ln 0 = 0`.
pub fn categorical_kl(q: &[f64], f: &[f64]) -> f64 {
    assert_eq!(q.len(), f.len(), "KL needs equal support sizes");
    q.iter()
        .zip(f)
        .filter(|(qi, _)| **qi > 0.0)
        .map(|(qi, fi)| qi * (qi.ln() - fi.ln()))
        .sum()
}

/// Lowest index of the maximum.
pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in xs.iter().enumerate() {
        if *x > xs[best] {
            best = i;
        }
    }
    best
}

/// Inverse-CDF draw from a probability vector.
pub fn sample_index<R: Rng>(probs: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    // rounding left a sliver of mass; take the last class with positive probability
    probs.iter().rposition(|p| *p > 0.0).unwrap_or(probs.len() - 1)
}

/// Standard Gumbel noise `-ln(-ln U)`.
pub fn gumbel<R: Rng>(rng: &mut R) -> f64 {
    let u: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    -(-u.ln()).ln()
}
