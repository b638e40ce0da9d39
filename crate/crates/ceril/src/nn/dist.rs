//! Categorical action distributions.

use crate::scalar::Scalar;
use rand::Rng;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DistError {
    #[error("non-finite logit at index {0}")]
    NonFiniteLogit(usize),
    #[error("empty logit vector")]
    Empty,
}

/// Discrete distribution over actions, parametrized by logits.
#[derive(Debug, Clone, PartialEq)]
pub struct Categorical<S: Scalar> {
    logits: Vec<S>,
}

impl<S: Scalar> Categorical<S> {
    pub fn new(logits: Vec<S>) -> Result<Self, DistError> {
        if logits.is_empty() {
            return Err(DistError::Empty);
        }
        for (i, &l) in logits.iter().enumerate() {
            if !l.is_finite() {
                return Err(DistError::NonFiniteLogit(i));
            }
        }
        Ok(Categorical { logits })
    }

    pub fn action_count(&self) -> usize {
        self.logits.len()
    }

    pub fn logits(&self) -> &[S] {
        &self.logits
    }

    /// Normalized probabilities (stable softmax, computed in f64).
    pub fn probs(&self) -> Vec<f64> {
        let max = self
            .logits
            .iter()
            .map(|l| l.to_f64_lossy())
            .fold(f64::NEG_INFINITY, f64::max);
        let mut p: Vec<f64> = self
            .logits
            .iter()
            .map(|l| (l.to_f64_lossy() - max).exp())
            .collect();
        let z: f64 = p.iter().sum();
        p.iter_mut().for_each(|v| *v /= z);
        p
    }

    /// Inverse-CDF sample on the normalized probabilities.
    pub fn sample<R: Rng>(&self, rng: &mut R) -> usize {
        let u: f64 = rng.gen_range(0.0..1.0);
        let p = self.probs();
        let mut cum = 0.0;
        for (i, &pi) in p.iter().enumerate() {
            cum += pi;
            if u < cum {
                return i;
            }
        }
        p.len() - 1
    }

    /// Greedy action: argmax logit, lowest index on ties.
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, &l) in self.logits.iter().enumerate().skip(1) {
            if l > self.logits[best] {
                best = i;
            }
        }
        best
    }

    /// log pi(action) = logit - logsumexp(logits).
    pub fn log_prob(&self, action: usize) -> f64 {
        let max = self
            .logits
            .iter()
            .map(|l| l.to_f64_lossy())
            .fold(f64::NEG_INFINITY, f64::max);
        let lse: f64 = self
            .logits
            .iter()
            .map(|l| (l.to_f64_lossy() - max).exp())
            .sum::<f64>()
            .ln()
            + max;
        self.logits[action].to_f64_lossy() - lse
    }

    /// Shannon entropy -sum p log p.
    pub fn entropy(&self) -> f64 {
        self.probs()
            .iter()
            .map(|&p| if p > 0.0 { -p * p.ln() } else { 0.0 })
            .sum()
    }
}
