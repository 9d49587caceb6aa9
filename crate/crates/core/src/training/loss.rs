use crate::dist::{TokenDistribution, TokenId};
use crate::drafter::IGNORE_LABEL;
use crate::error::{Error, Result};
use crate::model::HiddenState;

/// Per-depth coefficients `λ_1..λ_K` for the mask slots.
#[derive(Debug, Clone, PartialEq)]
pub struct LossWeights {
    lambdas: Vec<f64>,
}

/// Decay base of the default schedule `λ_k = 0.8^k`.
pub const DEFAULT_DECAY: f64 = 0.8;

impl LossWeights {
    pub fn new(lambdas: Vec<f64>) -> Result<Self> {
        if let Some(l) = lambdas.iter().find(|l| !l.is_finite() || **l < 0.0) {
            return Err(Error::InvalidInput(format!("loss weight {l} must be finite and non-negative")));
        }
        Ok(Self { lambdas })
    }

    /// `λ_k = base^k` for `k = 1..=K`.
    pub fn decay(k: usize, base: f64) -> Result<Self> {
        Self::new((1..=k).map(|i| base.powi(i as i32)).collect())
    }

    pub fn default_for(k: usize) -> Self {
        Self::decay(k, DEFAULT_DECAY).expect("finite schedule")
    }

    pub fn k(&self) -> usize {
        self.lambdas.len()
    }

    /// `λ_k`, 1-based.
    pub fn lambda(&self, k: usize) -> f64 {
        self.lambdas[k - 1]
    }

    pub fn lambdas(&self) -> &[f64] {
        &self.lambdas
    }
}

fn label_index(label: i64, vocab: usize) -> Result<Option<TokenId>> {
    if label == IGNORE_LABEL {
        return Ok(None);
    }
    if label < 0 || label as usize >= vocab {
        return Err(Error::TokenOutOfRange {
            id: label.max(0) as usize,
            limit: vocab,
        });
    }
    Ok(Some(label as usize))
}

/// Parallel-group loss: `-log q_0(y_0) - Σ_k λ_k log q_k(y_k)` over the
/// depth-0 distribution and the `K` mask-slot distributions. Ignored labels
/// contribute nothing.
pub fn medusa_parallel_loss(group_dists: &[TokenDistribution], labels: &[i64], weights: &LossWeights) -> Result<f64> {
    if group_dists.len() != labels.len() || group_dists.len() != weights.k() + 1 {
        return Err(Error::DimensionMismatch(format!(
            "{} distributions, {} labels, {} weights (expected K + 1, K + 1, K)",
            group_dists.len(),
            labels.len(),
            weights.k()
        )));
    }
    let mut loss = 0.0;
    for (j, (q, &label)) in group_dists.iter().zip(labels).enumerate() {
        let w = if j == 0 { 1.0 } else { weights.lambda(j) };
        if let Some(y) = label_index(label, q.len())? {
            if w != 0.0 {
                loss -= w * q[y].ln();
            }
        }
    }
    Ok(loss)
}

/// Head-only loss `-Σ_k λ_k log p_k(y_k)` over `K` lookahead heads.
pub fn medusa_loss(head_dists: &[TokenDistribution], labels: &[i64], weights: &LossWeights) -> Result<f64> {
    if head_dists.len() != labels.len() || head_dists.len() != weights.k() {
        return Err(Error::DimensionMismatch(format!(
            "{} heads, {} labels, {} weights",
            head_dists.len(),
            labels.len(),
            weights.k()
        )));
    }
    let mut loss = 0.0;
    for (k, (p, &label)) in head_dists.iter().zip(labels).enumerate() {
        let w = weights.lambda(k + 1);
        if let Some(y) = label_index(label, p.len())? {
            if w != 0.0 {
                loss -= w * p[y].ln();
            }
        }
    }
    Ok(loss)
}

/// Mean over coordinates of `0.5 e^2` for `|e| < 1`, else `|e| - 0.5`.
pub fn smooth_l1(pred: &[f64], truth: &[f64]) -> Result<f64> {
    if pred.len() != truth.len() || pred.is_empty() {
        return Err(Error::DimensionMismatch(format!(
            "feature dimensions {} and {}",
            pred.len(),
            truth.len()
        )));
    }
    let sum: f64 = pred
        .iter()
        .zip(truth)
        .map(|(a, b)| {
            let e = (a - b).abs();
            if e < 1.0 {
                0.5 * e * e
            } else {
                e - 0.5
            }
        })
        .sum();
    Ok(sum / pred.len() as f64)
}

/// Derivative of [`smooth_l1`] with respect to one prediction coordinate.
pub(crate) fn smooth_l1_grad(pred: f64, truth: f64, dim: usize) -> f64 {
    let e = pred - truth;
    let g = if e.abs() < 1.0 { e } else { e.signum() };
    g / dim as f64
}

/// Feature regression plus token classification:
/// `w_reg · SmoothL1(f_pred, f_true) + w_cls · (-log μ(y))`.
pub fn eagle_loss(
    f_pred: &HiddenState,
    f_true: &HiddenState,
    mu: &TokenDistribution,
    y: TokenId,
    w_reg: f64,
    w_cls: f64,
) -> Result<f64> {
    if y >= mu.len() {
        return Err(Error::TokenOutOfRange { id: y, limit: mu.len() });
    }
    let reg = smooth_l1(&f_pred.0, &f_true.0)?;
    let cls = if w_cls == 0.0 { 0.0 } else { -mu[y].ln() };
    Ok(w_reg * reg + w_cls * cls)
}

/// `-log softmax(z)[y]` computed from logits, and its gradient `softmax(z) - e_y`.
pub(crate) fn cross_entropy_logits(z: &[f64], y: TokenId) -> (f64, Vec<f64>) {
    let (log_z, probs) = log_softmax_parts(z);
    let loss = log_z - z[y];
    let mut g = probs;
    g[y] -= 1.0;
    (loss, g)
}

/// `-Σ p_i log softmax(z)_i` against a soft target, and its gradient
/// `softmax(z) - p`.
pub(crate) fn soft_cross_entropy_logits(z: &[f64], p: &[f64]) -> (f64, Vec<f64>) {
    let (log_z, probs) = log_softmax_parts(z);
    let mut loss = 0.0;
    for (&pi, &zi) in p.iter().zip(z) {
        if pi > 0.0 {
            loss -= pi * (zi - log_z);
        }
    }
    let g = probs.iter().zip(p).map(|(a, b)| a - b).collect();
    (loss, g)
}

fn log_softmax_parts(z: &[f64]) -> (f64, Vec<f64>) {
    let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = z.iter().map(|&v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    let log_z = max + sum.ln();
    (log_z, exps.into_iter().map(|e| e / sum).collect())
}
