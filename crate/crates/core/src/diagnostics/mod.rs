//! Empirical checks of the block-gradient estimator and of the sequential
//! trainer's convergence, plus block-distribution summaries.
//!
//! The Monte-Carlo checks only make sense on synthetic users whose items are
//! drawn i.i.d.; a fixed real log is a single draw.

use rand::distributions::{Distribution, WeightedIndex};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::Feedback;
use crate::model::{LossConfig, ModelParams, SparseGrad};

mod convergence;
mod distribution;
mod lemma;

pub use convergence::{check_convergence_rate, ConvergenceReport, ConvexInstance};
pub use distribution::{block_distribution, emit_block_distribution, BlockDistribution, BoxplotSummary, SIZE_BINS};
pub use lemma::{check_lemma1_unbiasedness, check_variance_decay, UnbiasednessReport, VarianceDecayReport, VariancePoint};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LengthDist {
    Fixed(usize),
    /// Inclusive range.
    Uniform { min: usize, max: usize },
}

/// A user whose items are drawn i.i.d. from `item_probs`, each item being
/// preferred independently with probability `pos_prob[item]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticUserModel {
    pub item_probs: Vec<f64>,
    pub pos_prob: Vec<f64>,
    pub length: LengthDist,
    pub seed: u64,
}

impl SyntheticUserModel {
    /// Uniform item draws with the same positive probability for every item.
    pub fn uniform(n_items: usize, pos_prob: f64, length: usize, seed: u64) -> Self {
        SyntheticUserModel {
            item_probs: vec![1.0 / n_items as f64; n_items],
            pos_prob: vec![pos_prob; n_items],
            length: LengthDist::Fixed(length),
            seed,
        }
    }

    pub fn n_items(&self) -> usize {
        self.item_probs.len()
    }

    pub fn validate(&self) -> Result<()> {
        let m = self.item_probs.len();
        if m == 0 || self.pos_prob.len() != m {
            return Err(Error::Config("item and label probability vectors must be non-empty and equal length".into()));
        }
        if self
            .item_probs
            .iter()
            .chain(&self.pos_prob)
            .any(|p| !(0.0..=1.0).contains(p))
        {
            return Err(Error::Config("probabilities must lie in [0, 1]".into()));
        }
        let min_len = match self.length {
            LengthDist::Fixed(n) => n,
            LengthDist::Uniform { min, max } if min <= max => min,
            LengthDist::Uniform { .. } => return Err(Error::Config("empty length range".into())),
        };
        if min_len < 2 {
            return Err(Error::Config("sequence length must be >= 2".into()));
        }
        let (pos, neg) = self.label_masses();
        if pos <= 0.0 || neg <= 0.0 {
            return Err(Error::Diagnostic("model never yields both labels".into()));
        }
        Ok(())
    }

    fn label_masses(&self) -> (f64, f64) {
        self.item_probs
            .iter()
            .zip(&self.pos_prob)
            .fold((0.0, 0.0), |(p, n), (q, r)| (p + q * r, n + q * (1.0 - r)))
    }

    /// Item distributions conditioned on the label: `(preferred, non-preferred)`.
    pub fn conditional_item_probs(&self) -> (Vec<f64>, Vec<f64>) {
        let (pos, neg) = self.label_masses();
        let plus = self.item_probs.iter().zip(&self.pos_prob).map(|(q, r)| q * r / pos).collect();
        let minus = self
            .item_probs
            .iter()
            .zip(&self.pos_prob)
            .map(|(q, r)| q * (1.0 - r) / neg)
            .collect();
        (plus, minus)
    }

    pub(crate) fn sampler(&self) -> Result<EventSampler> {
        self.validate()?;
        Ok(EventSampler {
            items: WeightedIndex::new(&self.item_probs).map_err(|e| Error::Config(e.to_string()))?,
            pos_prob: self.pos_prob.clone(),
            length: self.length,
        })
    }

    /// RNG for Monte-Carlo run `stream`, independent of every other stream.
    pub fn rng(&self, stream: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(stream);
        rng
    }

    pub fn sample_sequence<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<Vec<(usize, Feedback)>> {
        Ok(self.sampler()?.sequence(rng))
    }
}

pub(crate) struct EventSampler {
    items: WeightedIndex<f64>,
    pos_prob: Vec<f64>,
    length: LengthDist,
}

impl EventSampler {
    pub(crate) fn event<R: Rng + ?Sized>(&self, rng: &mut R) -> (usize, Feedback) {
        let item = self.items.sample(rng);
        let fb = if rng.gen::<f64>() < self.pos_prob[item] {
            Feedback::Positive
        } else {
            Feedback::Negative
        };
        (item, fb)
    }

    pub(crate) fn sequence<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<(usize, Feedback)> {
        let len = match self.length {
            LengthDist::Fixed(n) => n,
            LengthDist::Uniform { min, max } => rng.gen_range(min..=max),
        };
        (0..len).map(|_| self.event(rng)).collect()
    }
}

/// Exact expected pair gradient for user `user` with the preferred item drawn
/// from the positive-conditional and the other from the negative-conditional
/// item distribution; dense in [`ModelParams::weights`] order.
pub fn population_gradient(model: &SyntheticUserModel, params: &ModelParams, cfg: &LossConfig, user: usize) -> Result<Vec<f64>> {
    model.validate()?;
    let (plus, minus) = model.conditional_item_probs();
    let mut grad = SparseGrad::new(params.dim());
    for (i, &pi) in plus.iter().enumerate().filter(|(_, &p)| p > 0.0) {
        for (j, &pj) in minus.iter().enumerate().filter(|(_, &p)| p > 0.0) {
            grad.add_pair(params, cfg, user, i, j, pi * pj);
        }
    }
    Ok(grad.to_dense(params.n_users(), params.n_items()))
}

/// Running mean and variance per coordinate.
#[derive(Debug, Clone)]
pub(crate) struct Welford {
    n: u64,
    mean: Vec<f64>,
    m2: Vec<f64>,
}

impl Welford {
    pub(crate) fn new(dim: usize) -> Self {
        Welford {
            n: 0,
            mean: vec![0.0; dim],
            m2: vec![0.0; dim],
        }
    }

    pub(crate) fn push(&mut self, x: &[f64]) {
        self.n += 1;
        let n = self.n as f64;
        for ((m, s), &v) in self.mean.iter_mut().zip(self.m2.iter_mut()).zip(x) {
            let delta = v - *m;
            *m += delta / n;
            *s += delta * (v - *m);
        }
    }

    pub(crate) fn mean(&self) -> &[f64] {
        &self.mean
    }

    /// Standard error of the mean per coordinate.
    pub(crate) fn std_error(&self) -> Vec<f64> {
        if self.n < 2 {
            return vec![f64::INFINITY; self.mean.len()];
        }
        let n = self.n as f64;
        self.m2.iter().map(|s| (s / (n - 1.0) / n).sqrt()).collect()
    }
}

/// Ordinary least squares `y = a + b x`; returns `(a, b, r_squared)`.
pub fn linear_fit(x: &[f64], y: &[f64]) -> (f64, f64, f64) {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx) * (a - mx)).sum();
    let syy: f64 = y.iter().map(|b| (b - my) * (b - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let r2 = if syy == 0.0 { f64::NAN } else { sxy * sxy / (sxx * syy) };
    (intercept, slope, r2)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn validation() {
        assert!(SyntheticUserModel::uniform(5, 0.5, 12, 0).validate().is_ok());
        assert!(matches!(
            SyntheticUserModel::uniform(5, 0.0, 12, 0).validate(),
            Err(Error::Diagnostic(_))
        ));
        assert!(matches!(
            SyntheticUserModel::uniform(5, 1.0, 12, 0).validate(),
            Err(Error::Diagnostic(_))
        ));
        assert!(SyntheticUserModel::uniform(5, 0.5, 1, 0).validate().is_err());
    }

    #[test]
    fn conditionals_sum_to_one() {
        let mut m = SyntheticUserModel::uniform(4, 0.5, 6, 0);
        m.pos_prob = vec![0.1, 0.9, 0.5, 1.0];
        let (p, n) = m.conditional_item_probs();
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        assert!((n.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        assert_eq!(n[3], 0.0);
    }

    #[test]
    fn fit_recovers_line() {
        let x = [0.0, 1.0, 2.0, 3.0];
        let y: Vec<f64> = x.iter().map(|v| 2.0 - 0.5 * v).collect();
        let (a, b, r2) = linear_fit(&x, &y);
        assert!((a - 2.0).abs() < 1e-12 && (b + 0.5).abs() < 1e-12 && (r2 - 1.0).abs() < 1e-12);
    }

    #[test]
    fn sequences_are_reproducible() {
        let m = SyntheticUserModel::uniform(5, 0.5, 12, 3);
        let a = m.sample_sequence(&mut m.rng(7)).unwrap();
        let b = m.sample_sequence(&mut m.rng(7)).unwrap();
        let c = m.sample_sequence(&mut m.rng(8)).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert_eq!(a.len(), 12);
    }
}
