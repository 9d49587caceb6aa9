//! Vocabulary, token distributions and the sampling primitives shared by every
//! decoding path.
//!
//! Distributions are plain probability vectors over the *base* vocabulary; mask
//! tokens only ever appear as model inputs, never as outputs.

use std::ops::Deref;
use std::sync::Arc;

use rand::{Rng as _, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type TokenId = usize;

/// Constructors renormalize inputs whose mass is within this distance of 1.
pub const RENORMALIZE_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocabulary {
    size: usize,
    mask_count: usize,
}

impl Vocabulary {
    pub fn new(size: usize, mask_count: usize) -> Result<Self> {
        if size == 0 {
            return Err(Error::InvalidInput("vocabulary size must be positive".into()));
        }
        Ok(Self { size, mask_count })
    }

    /// Number of base tokens (the output space).
    pub fn size(&self) -> usize {
        self.size
    }

    pub fn mask_count(&self) -> usize {
        self.mask_count
    }

    /// Size of the full input id space, base tokens plus mask tokens.
    pub fn total(&self) -> usize {
        self.size + self.mask_count
    }

    /// Id of `[MASK]_j`, `j` in `1..=mask_count`.
    pub fn mask_id(&self, j: usize) -> Result<TokenId> {
        if j == 0 || j > self.mask_count {
            return Err(Error::InvalidInput(format!(
                "mask index {j} outside 1..={}",
                self.mask_count
            )));
        }
        Ok(self.size + j - 1)
    }

    pub fn is_mask(&self, id: TokenId) -> bool {
        id >= self.size && id < self.total()
    }
}

/// A normalized probability vector over the base vocabulary.
///
/// Cloning is cheap: the probabilities are shared.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenDistribution {
    probs: Arc<[f64]>,
}

impl TokenDistribution {
    /// Validates `probs`. Inputs whose total mass is off by at most
    /// [`RENORMALIZE_TOLERANCE`] are renormalized, anything further off is
    /// rejected.
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() {
            return Err(Error::InvalidDistribution("empty probability vector".into()));
        }
        let mut sum = 0.0;
        for (i, &p) in probs.iter().enumerate() {
            if !p.is_finite() || p < 0.0 {
                return Err(Error::InvalidDistribution(format!(
                    "entry {i} is {p}, expected a finite non-negative value"
                )));
            }
            sum += p;
        }
        if (sum - 1.0).abs() > RENORMALIZE_TOLERANCE {
            return Err(Error::InvalidDistribution(format!(
                "probabilities sum to {sum}"
            )));
        }
        Ok(Self::normalized(probs, sum))
    }

    /// Normalizes arbitrary non-negative finite weights.
    pub fn from_weights(weights: Vec<f64>) -> Result<Self> {
        let mut sum = 0.0;
        for (i, &w) in weights.iter().enumerate() {
            if !w.is_finite() || w < 0.0 {
                return Err(Error::InvalidDistribution(format!(
                    "weight {i} is {w}, expected a finite non-negative value"
                )));
            }
            sum += w;
        }
        if weights.is_empty() || sum <= 0.0 {
            return Err(Error::InvalidDistribution("weights carry no mass".into()));
        }
        Ok(Self::normalized(weights, sum))
    }

    pub fn one_hot(len: usize, id: TokenId) -> Result<Self> {
        if id >= len {
            return Err(Error::TokenOutOfRange { id, limit: len });
        }
        let mut probs = vec![0.0; len];
        probs[id] = 1.0;
        Ok(Self {
            probs: probs.into(),
        })
    }

    pub fn uniform(len: usize) -> Result<Self> {
        if len == 0 {
            return Err(Error::InvalidDistribution("empty probability vector".into()));
        }
        Ok(Self {
            probs: vec![1.0 / len as f64; len].into(),
        })
    }

    fn normalized(mut probs: Vec<f64>, sum: f64) -> Self {
        // Leave already-normalized vectors bit-identical.
        if (sum - 1.0).abs() > 1e-12 {
            probs.iter_mut().for_each(|p| *p /= sum);
        }
        Self {
            probs: probs.into(),
        }
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    /// Highest-probability token, lowest id on ties.
    pub fn argmax(&self) -> TokenId {
        let mut best = 0;
        for (i, &p) in self.probs.iter().enumerate() {
            if p > self.probs[best] {
                best = i;
            }
        }
        best
    }

    /// Token ids ordered by descending probability, ties by ascending id.
    pub fn ranked(&self) -> Vec<TokenId> {
        let mut ids: Vec<TokenId> = (0..self.probs.len()).collect();
        ids.sort_by(|&a, &b| self.probs[b].total_cmp(&self.probs[a]).then(a.cmp(&b)));
        ids
    }

    /// Re-tempers a probability vector: `p^(1/T)` renormalized, argmax at `T = 0`.
    ///
    /// Zero entries stay zero. This is [`apply_temperature`] on log-probabilities
    /// without materializing `ln 0`.
    pub fn with_temperature(&self, temperature: f64) -> Result<Self> {
        check_temperature(temperature)?;
        if temperature == 0.0 {
            return Self::one_hot(self.len(), self.argmax());
        }
        if temperature == 1.0 {
            return Ok(self.clone());
        }
        let max = self.probs.iter().cloned().fold(0.0, f64::max);
        let inv = 1.0 / temperature;
        let weights = self
            .probs
            .iter()
            .map(|&p| if p > 0.0 { (p / max).powf(inv) } else { 0.0 })
            .collect();
        Self::from_weights(weights)
    }
}

impl Deref for TokenDistribution {
    type Target = [f64];

    fn deref(&self) -> &[f64] {
        &self.probs
    }
}

fn check_temperature(temperature: f64) -> Result<()> {
    if !temperature.is_finite() || temperature < 0.0 {
        return Err(Error::InvalidInput(format!(
            "temperature must be finite and non-negative, got {temperature}"
        )));
    }
    Ok(())
}

/// Softmax of `logits / temperature`; exact argmax one-hot when `temperature == 0`
/// (lowest id wins ties).
pub fn apply_temperature(logits: &[f64], temperature: f64) -> Result<TokenDistribution> {
    check_temperature(temperature)?;
    if logits.is_empty() {
        return Err(Error::InvalidInput("empty logits".into()));
    }
    if let Some(i) = logits.iter().position(|l| !l.is_finite()) {
        return Err(Error::InvalidInput(format!(
            "logit {i} is not finite ({})",
            logits[i]
        )));
    }
    let mut best = 0;
    for (i, &l) in logits.iter().enumerate() {
        if l > logits[best] {
            best = i;
        }
    }
    if temperature == 0.0 {
        return TokenDistribution::one_hot(logits.len(), best);
    }
    let max = logits[best];
    let weights: Vec<f64> = logits
        .iter()
        .map(|&l| ((l - max) / temperature).exp())
        .collect();
    TokenDistribution::from_weights(weights)
}

/// Inverse-CDF draw. Consumes exactly one uniform from `rng`.
pub fn sample(dist: &TokenDistribution, rng: &mut Rng) -> TokenId {
    let u = rng.uniform();
    let mut cum = 0.0;
    let mut last_positive = 0;
    for (i, &p) in dist.iter().enumerate() {
        if p > 0.0 {
            cum += p;
            last_positive = i;
            if u < cum {
                return i;
            }
        }
    }
    // Accumulated rounding left the total just under u.
    last_positive
}

/// `(p - q)_+` renormalized.
///
/// Fails with [`Error::DegenerateResidual`] when there is no positive residual
/// mass, which only happens when `p == q`; the acceptance ratio is then 1 and
/// no rejection can occur.
pub fn normalize_residual(p: &TokenDistribution, q: &TokenDistribution) -> Result<TokenDistribution> {
    check_same_len(p, q)?;
    let residual: Vec<f64> = p.iter().zip(q.iter()).map(|(a, b)| (a - b).max(0.0)).collect();
    let sum: f64 = residual.iter().sum();
    if sum <= 0.0 {
        return Err(Error::DegenerateResidual);
    }
    Ok(TokenDistribution::normalized(residual, sum))
}

/// Total variation distance, `0.5 * sum |p_i - q_i|`.
pub fn tv_distance(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::InvalidInput(format!(
            "length mismatch: {} vs {}",
            p.len(),
            q.len()
        )));
    }
    Ok(0.5 * p.iter().zip(q).map(|(a, b)| (a - b).abs()).sum::<f64>())
}

fn check_same_len(p: &TokenDistribution, q: &TokenDistribution) -> Result<()> {
    if p.len() != q.len() {
        return Err(Error::InvalidInput(format!(
            "distribution length mismatch: {} vs {}",
            p.len(),
            q.len()
        )));
    }
    Ok(())
}

/// Seeded, platform-independent random source (ChaCha8 stream).
///
/// Each decode session owns one; it is deliberately not `Clone` so a stream is
/// never consumed twice by accident.
#[derive(Debug)]
pub struct Rng {
    seed: u64,
    inner: ChaCha8Rng,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Uniform draw in `[0, 1)` with 53 bits of precision.
    pub fn uniform(&mut self) -> f64 {
        self.inner.gen::<f64>()
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform integer in `0..n`.
    pub fn below(&mut self, n: usize) -> usize {
        self.inner.gen_range(0..n)
    }

    /// Standard normal draw (Box-Muller).
    pub fn normal(&mut self) -> f64 {
        let u1 = 1.0 - self.uniform();
        let u2 = self.uniform();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }
}
