//! Language models used as targets and drafters.
//!
//! [`TinyTransformer`] is a pre-norm decoder whose forward pass takes an
//! explicit attention mask and per-token position indices, which is what tree
//! verification and group-wise drafter training both need. [`TabularLM`] is an
//! exact n-gram table used as an oracle target.

mod cache;
pub mod checkpoint;
pub(crate) mod grad;
mod tabular;
mod transformer;

pub use cache::KvCache;
pub use checkpoint::{load_checkpoint, save_checkpoint, FORMAT_VERSION};
pub use tabular::TabularLM;
pub(crate) use tabular::dirichlet as tabular_dirichlet;
pub use transformer::{ForwardOutput, ModelConfig, Tensor, TinyTransformer};
pub(crate) use transformer::{head_index, EMBEDDING};

use crate::dist::{apply_temperature, TokenDistribution, TokenId};
use crate::error::{Error, Result};

/// Who may attend to whom, plus the position index fed to the positional
/// encoding of each token.
///
/// `mask[i * n + j]` is true when token `i` may attend to token `j`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttentionSpec {
    n: usize,
    mask: Vec<bool>,
    positions: Vec<usize>,
}

impl AttentionSpec {
    pub fn new(mask: Vec<bool>, positions: Vec<usize>) -> Result<Self> {
        let n = positions.len();
        if mask.len() != n * n {
            return Err(Error::DimensionMismatch(format!(
                "mask has {} entries, expected {n}x{n}",
                mask.len()
            )));
        }
        if let Some(i) = (0..n).find(|&i| !mask[i * n + i]) {
            return Err(Error::InvalidInput(format!(
                "token {i} cannot attend to itself"
            )));
        }
        Ok(Self { n, mask, positions })
    }

    /// Lower-triangular mask with positions `0..n`.
    pub fn causal(n: usize) -> Self {
        Self::causal_from(n, 0)
    }

    /// Lower-triangular mask with positions `start..start + n`.
    pub fn causal_from(n: usize, start: usize) -> Self {
        let mut mask = vec![false; n * n];
        for i in 0..n {
            for j in 0..=i {
                mask[i * n + j] = true;
            }
        }
        Self {
            n,
            mask,
            positions: (start..start + n).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn allows(&self, i: usize, j: usize) -> bool {
        self.mask[i * self.n + j]
    }

    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    pub fn positions(&self) -> &[usize] {
        &self.positions
    }

    /// Flips one mask bit. Only meant for building deliberately broken fixtures.
    #[doc(hidden)]
    pub fn toggle(&mut self, i: usize, j: usize) {
        self.mask[i * self.n + j] ^= true;
    }
}

/// Last-layer feature at one token position.
#[derive(Debug, Clone, PartialEq)]
pub struct HiddenState(pub Vec<f64>);

impl HiddenState {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("hidden state has non-finite entries".into()));
        }
        Ok(Self(values))
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }
}

/// Next-token distribution after `prefix`.
pub trait NextToken {
    fn next_distribution(&self, prefix: &[TokenId], temperature: f64) -> Result<TokenDistribution>;
}

impl NextToken for TinyTransformer {
    fn next_distribution(&self, prefix: &[TokenId], temperature: f64) -> Result<TokenDistribution> {
        if prefix.is_empty() {
            return Err(Error::InvalidInput("transformer needs a non-empty prefix".into()));
        }
        let out = self.forward(prefix, &AttentionSpec::causal(prefix.len()))?;
        apply_temperature(out.logits_row(prefix.len() - 1), temperature)
    }
}

impl NextToken for TabularLM {
    fn next_distribution(&self, prefix: &[TokenId], temperature: f64) -> Result<TokenDistribution> {
        self.lookup(prefix)?.with_temperature(temperature)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn attention_spec_requires_self_attention() {
        assert!(AttentionSpec::new(vec![true, false, false, false], vec![0, 1]).is_err());
        assert!(AttentionSpec::new(vec![true, false, true], vec![0, 1]).is_err());
        let a = AttentionSpec::new(vec![true, false, false, true], vec![0, 0]).unwrap();
        assert!(a.allows(1, 1) && !a.allows(1, 0));
    }

    #[test]
    fn causal_spec_shape() {
        let a = AttentionSpec::causal_from(3, 5);
        assert_eq!(a.positions(), &[5, 6, 7]);
        assert!(a.allows(2, 0) && !a.allows(0, 2));
    }
}
