use crate::dist::TokenId;
use crate::error::{Error, Result};

use super::TinyTransformer;

/// Per-layer keys (already rotated) and values for a run of tokens.
///
/// Entries `0..committed_len()` belong to the committed prefix. Entries after
/// that are speculative: appended by the last forward and waiting for
/// [`commit_path`](Self::commit_path), [`commit_prefix`](Self::commit_prefix) or
/// [`rollback`](Self::rollback).
#[derive(Debug, Clone, PartialEq)]
pub struct KvCache {
    layers: usize,
    d_model: usize,
    keys: Vec<Vec<f64>>,
    values: Vec<Vec<f64>>,
    tokens: Vec<TokenId>,
    positions: Vec<usize>,
    committed: usize,
}

impl KvCache {
    pub fn new(model: &TinyTransformer) -> Self {
        let cfg = model.config();
        Self {
            layers: cfg.layers,
            d_model: cfg.d_model,
            keys: vec![Vec::new(); cfg.layers],
            values: vec![Vec::new(); cfg.layers],
            tokens: Vec::new(),
            positions: Vec::new(),
            committed: 0,
        }
    }

    pub(crate) fn check_owner(&self, model: &TinyTransformer) -> Result<()> {
        let cfg = model.config();
        if cfg.layers != self.layers || cfg.d_model != self.d_model {
            return Err(Error::Cache(format!(
                "cache built for {} layers of width {}, model has {} of width {}",
                self.layers, self.d_model, cfg.layers, cfg.d_model
            )));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn committed_len(&self) -> usize {
        self.committed
    }

    pub fn speculative_len(&self) -> usize {
        self.tokens.len() - self.committed
    }

    /// Token ids of every entry, committed first.
    pub fn tokens(&self) -> &[TokenId] {
        &self.tokens
    }

    pub fn positions(&self) -> &[usize] {
        &self.positions
    }

    pub(crate) fn layer(&self, layer: usize) -> (&[f64], &[f64]) {
        (&self.keys[layer], &self.values[layer])
    }

    pub(crate) fn append(&mut self, layer: usize, k: &[f64], v: &[f64]) {
        self.keys[layer].extend_from_slice(k);
        self.values[layer].extend_from_slice(v);
    }

    pub(crate) fn push_tokens(&mut self, tokens: &[TokenId], positions: &[usize]) {
        self.tokens.extend_from_slice(tokens);
        self.positions.extend_from_slice(positions);
    }

    /// Keeps the speculative entries at `path` (indices relative to the start of
    /// the speculative region, strictly increasing) and drops the rest. The kept
    /// entries become committed, packed in linear order.
    pub fn commit_path(&mut self, path: &[usize]) -> Result<()> {
        let spec = self.speculative_len();
        for (i, &p) in path.iter().enumerate() {
            if p >= spec {
                return Err(Error::Cache(format!(
                    "path entry {p} exceeds {spec} speculative entries"
                )));
            }
            if i > 0 && p <= path[i - 1] {
                return Err(Error::Cache("path indices must be strictly increasing".into()));
            }
        }
        let base = self.committed;
        let d = self.d_model;
        for (dst, &p) in path.iter().enumerate() {
            let (from, to) = (base + p, base + dst);
            if from == to {
                continue;
            }
            for l in 0..self.layers {
                self.keys[l].copy_within(from * d..(from + 1) * d, to * d);
                self.values[l].copy_within(from * d..(from + 1) * d, to * d);
            }
            self.tokens[to] = self.tokens[from];
            self.positions[to] = self.positions[from];
        }
        self.committed = base + path.len();
        self.truncate_entries(self.committed);
        Ok(())
    }

    /// Commits the first `accepted` speculative entries (chain layout) and
    /// discards the rest.
    pub fn commit_prefix(&mut self, accepted: usize) -> Result<()> {
        if accepted > self.speculative_len() {
            return Err(Error::Cache(format!(
                "cannot accept {accepted} of {} speculative entries",
                self.speculative_len()
            )));
        }
        self.committed += accepted;
        self.truncate_entries(self.committed);
        Ok(())
    }

    pub fn commit_all(&mut self) {
        self.committed = self.tokens.len();
    }

    /// Discards every speculative entry.
    pub fn rollback(&mut self) {
        self.truncate_entries(self.committed);
    }

    /// Drops entries past `len`, committed or not.
    pub fn truncate(&mut self, len: usize) {
        if len < self.tokens.len() {
            self.truncate_entries(len);
        }
        self.committed = self.committed.min(len);
    }

    fn truncate_entries(&mut self, len: usize) {
        let d = self.d_model;
        for l in 0..self.layers {
            self.keys[l].truncate(len * d);
            self.values[l].truncate(len * d);
        }
        self.tokens.truncate(len);
        self.positions.truncate(len);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dist::Rng;
    use crate::model::{AttentionSpec, ModelConfig};

    fn model() -> TinyTransformer {
        TinyTransformer::new(ModelConfig {
            layers: 2,
            d_model: 16,
            heads: 2,
            d_ff: 32,
            vocab: 9,
            max_position: 128,
            init_seed: 21,
            ..ModelConfig::default()
        })
        .unwrap()
    }

    fn causal_mask(n: usize) -> Vec<bool> {
        AttentionSpec::causal(n).mask().to_vec()
    }

    fn assert_close(a: &[f64], b: &[f64]) {
        for (x, y) in a.iter().zip(b) {
            assert!((x - y).abs() <= 1e-5 * y.abs().max(1e-9), "{x} vs {y}");
        }
    }

    fn reference_cache(m: &TinyTransformer, tokens: &[usize]) -> KvCache {
        let mut c = KvCache::new(m);
        let positions: Vec<usize> = (0..tokens.len()).collect();
        m.forward_cached(&mut c, tokens, &positions, &causal_mask(tokens.len()))
            .unwrap();
        c.commit_all();
        c
    }

    #[test]
    fn full_rollback_restores_state() {
        let m = model();
        let mut c = reference_cache(&m, &[1, 2, 3]);
        let before = c.clone();
        m.forward_cached(&mut c, &[4, 5], &[3, 4], &causal_mask(2)).unwrap();
        c.commit_prefix(0).unwrap();
        assert_eq!(c, before);
        m.forward_cached(&mut c, &[4, 5], &[3, 4], &causal_mask(2)).unwrap();
        c.rollback();
        assert_eq!(c, before);
    }

    #[test]
    fn accepting_whole_chain_matches_recompute() {
        let m = model();
        let mut c = reference_cache(&m, &[1, 2, 3]);
        m.forward_cached(&mut c, &[4, 5, 6], &[3, 4, 5], &causal_mask(3)).unwrap();
        c.commit_prefix(3).unwrap();
        let r = reference_cache(&m, &[1, 2, 3, 4, 5, 6]);
        assert_eq!(c.tokens(), r.tokens());
        for l in 0..2 {
            assert_close(c.layer(l).0, r.layer(l).0);
            assert_close(c.layer(l).1, r.layer(l).1);
        }
    }

    #[test]
    fn over_commit_is_an_error() {
        let m = model();
        let mut c = reference_cache(&m, &[1, 2]);
        m.forward_cached(&mut c, &[3], &[2], &causal_mask(1)).unwrap();
        assert!(c.commit_prefix(2).is_err());
        assert!(c.commit_path(&[1]).is_err());
        assert!(c.commit_path(&[0, 0]).is_err());
    }

    /// Two sibling branches after a shared prefix; keeping the second branch
    /// must leave the cache as if that branch had been decoded causally.
    #[test]
    fn tree_path_commit_remaps_to_linear_layout() {
        let m = model();
        let mut c = reference_cache(&m, &[1, 2]);
        // block: pending 3, then branch A = [4], branch B = [5, 6]
        let tokens = [3, 4, 5, 6];
        let positions = [2, 3, 3, 4];
        let parents: [Option<usize>; 4] = [None, Some(0), Some(0), Some(2)];
        let mut mask = vec![false; 16];
        for i in 0..4 {
            let mut a = Some(i);
            while let Some(j) = a {
                mask[i * 4 + j] = true;
                a = parents[j];
            }
        }
        m.forward_cached(&mut c, &tokens, &positions, &mask).unwrap();
        c.commit_path(&[0, 2, 3]).unwrap();
        let r = reference_cache(&m, &[1, 2, 3, 5, 6]);
        assert_eq!(c.tokens(), r.tokens());
        assert_eq!(c.positions(), r.positions());
        for l in 0..2 {
            assert_close(c.layer(l).0, r.layer(l).0);
            assert_close(c.layer(l).1, r.layer(l).1);
        }
    }

    #[test]
    fn random_commit_rollback_rounds_match_cache_free_run() {
        let m = model();
        let mut rng = Rng::new(99);
        let mut committed = vec![1usize];
        let mut c = KvCache::new(&m);
        for _ in 0..100 {
            if committed.len() > 100 {
                break;
            }
            // Speculate a chain after the pending token, accept a random prefix.
            let spec: Vec<usize> = (0..1 + rng.below(4)).map(|_| rng.below(9)).collect();
            let mut block = vec![*committed.last().unwrap()];
            block.extend(&spec);
            let start = committed.len() - 1;
            let positions: Vec<usize> = (start..start + block.len()).collect();
            m.forward_cached(&mut c, &block, &positions, &causal_mask(block.len()))
                .unwrap();
            let accepted = rng.below(spec.len() + 1);
            c.commit_prefix(1 + accepted).unwrap();
            committed.extend(&spec[..accepted]);
            committed.push(rng.below(9));
        }
        let pending = *committed.last().unwrap();
        let n = committed.len();
        let out = m
            .forward_cached(&mut c, &[pending], &[n - 1], &[true])
            .unwrap();
        let reference = m.forward(&committed, &AttentionSpec::causal(n)).unwrap();
        assert_close(out.logits_row(0), reference.logits_row(n - 1));
    }
}
