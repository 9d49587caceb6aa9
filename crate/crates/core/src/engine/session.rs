use crate::dist::{apply_temperature, TokenDistribution, TokenId};
use crate::drafter::common_prefix;
use crate::error::{Error, Result};
use crate::model::{KvCache, TabularLM, TinyTransformer};
use crate::tree::ancestor_mask;

/// A target model scored one block at a time.
///
/// `score` evaluates `context` followed by a tree-shaped block of candidate
/// tokens in one forward pass. The block entries stay speculative until
/// [`commit`](Self::commit) names the ones to keep.
pub trait CausalSession {
    fn vocab(&self) -> usize;

    /// Largest position index the model accepts, if bounded.
    fn max_position(&self) -> Option<usize>;

    /// Returns `block.len() + 1` distributions: index 0 predicts the token after
    /// `context`, index `i + 1` predicts the token after the path to block
    /// node `i`. `parents[i]` indexes an earlier block node or is `None` for
    /// children of the last context token.
    fn score(
        &mut self,
        context: &[TokenId],
        block: &[TokenId],
        parents: &[Option<usize>],
        temperature: f64,
    ) -> Result<Vec<TokenDistribution>>;

    /// Keeps the context of the last `score` call plus the block nodes in
    /// `nodes` (an ancestor chain, root side first); drops everything else.
    fn commit(&mut self, nodes: &[usize]) -> Result<()>;

    /// Model forward passes performed so far.
    fn forward_count(&self) -> u64;
}

impl<T: CausalSession + ?Sized> CausalSession for Box<T> {
    fn vocab(&self) -> usize {
        (**self).vocab()
    }

    fn max_position(&self) -> Option<usize> {
        (**self).max_position()
    }

    fn score(
        &mut self,
        context: &[TokenId],
        block: &[TokenId],
        parents: &[Option<usize>],
        temperature: f64,
    ) -> Result<Vec<TokenDistribution>> {
        (**self).score(context, block, parents, temperature)
    }

    fn commit(&mut self, nodes: &[usize]) -> Result<()> {
        (**self).commit(nodes)
    }

    fn forward_count(&self) -> u64 {
        (**self).forward_count()
    }
}

fn check_block(block: &[TokenId], parents: &[Option<usize>]) -> Result<()> {
    if block.len() != parents.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} block tokens, {} parents",
            block.len(),
            parents.len()
        )));
    }
    for (i, p) in parents.iter().enumerate() {
        if matches!(p, Some(p) if *p >= i) {
            return Err(Error::Topology(format!("block node {i} precedes its parent")));
        }
    }
    Ok(())
}

/// Incremental scoring with a [`TinyTransformer`] and a KV cache.
///
/// Each call reuses the cached entries shared with the new context, feeds the
/// rest of the context plus the block in a single forward, and leaves the block
/// speculative.
#[derive(Debug)]
pub struct TransformerSession<'a> {
    model: &'a TinyTransformer,
    cache: KvCache,
    /// Context tokens fed (and left speculative) by the last forward.
    pending_real: usize,
    forwards: u64,
}

impl<'a> TransformerSession<'a> {
    pub fn new(model: &'a TinyTransformer) -> Self {
        Self {
            model,
            cache: KvCache::new(model),
            pending_real: 0,
            forwards: 0,
        }
    }

    pub fn cache(&self) -> &KvCache {
        &self.cache
    }
}

impl CausalSession for TransformerSession<'_> {
    fn vocab(&self) -> usize {
        self.model.config().vocab
    }

    fn max_position(&self) -> Option<usize> {
        Some(self.model.config().max_position)
    }

    fn score(
        &mut self,
        context: &[TokenId],
        block: &[TokenId],
        parents: &[Option<usize>],
        temperature: f64,
    ) -> Result<Vec<TokenDistribution>> {
        if context.is_empty() {
            return Err(Error::InvalidInput("scoring needs a non-empty context".into()));
        }
        check_block(block, parents)?;
        self.cache.rollback();
        let keep = common_prefix(self.cache.tokens(), context).min(context.len() - 1);
        self.cache.truncate(keep);
        let real = context.len() - keep;
        let m = block.len();
        let n = real + m;

        let mut tokens = context[keep..].to_vec();
        tokens.extend_from_slice(block);
        let mut positions: Vec<usize> = (keep..context.len()).collect();
        let mut depth = vec![0usize; m];
        for i in 0..m {
            depth[i] = parents[i].map_or(1, |p| depth[p] + 1);
            positions.push(context.len() + depth[i] - 1);
        }
        let mut mask = vec![false; n * n];
        for i in 0..n {
            for j in 0..real.min(i + 1) {
                mask[i * n + j] = true;
            }
        }
        let tree = ancestor_mask(parents);
        for i in 0..m {
            for j in 0..m {
                mask[(real + i) * n + real + j] = tree[i * m + j];
            }
        }
        let out = self.model.forward_cached(&mut self.cache, &tokens, &positions, &mask)?;
        self.forwards += 1;
        self.pending_real = real;
        (real - 1..n)
            .map(|i| apply_temperature(out.logits_row(i), temperature))
            .collect()
    }

    fn commit(&mut self, nodes: &[usize]) -> Result<()> {
        let real = self.pending_real;
        let path: Vec<usize> = (0..real).chain(nodes.iter().map(|&i| real + i)).collect();
        self.cache.commit_path(&path)?;
        self.pending_real = 0;
        Ok(())
    }

    fn forward_count(&self) -> u64 {
        self.forwards
    }
}

/// Scoring against a [`TabularLM`]; one `score` call counts as one forward.
#[derive(Debug, Clone)]
pub struct TabularSession<'a> {
    model: &'a TabularLM,
    forwards: u64,
}

impl<'a> TabularSession<'a> {
    pub fn new(model: &'a TabularLM) -> Self {
        Self { model, forwards: 0 }
    }
}

impl CausalSession for TabularSession<'_> {
    fn vocab(&self) -> usize {
        self.model.vocab()
    }

    fn max_position(&self) -> Option<usize> {
        None
    }

    fn score(
        &mut self,
        context: &[TokenId],
        block: &[TokenId],
        parents: &[Option<usize>],
        temperature: f64,
    ) -> Result<Vec<TokenDistribution>> {
        check_block(block, parents)?;
        self.forwards += 1;
        let mut out = Vec::with_capacity(block.len() + 1);
        out.push(self.model.lookup(context)?.with_temperature(temperature)?);
        // Only the last `order` context tokens can matter.
        let tail = &context[context.len().saturating_sub(self.model.order())..];
        let mut path = tail.to_vec();
        for i in 0..block.len() {
            path.truncate(tail.len());
            let mut chain = vec![block[i]];
            let mut at = parents[i];
            while let Some(p) = at {
                chain.push(block[p]);
                at = parents[p];
            }
            path.extend(chain.iter().rev());
            out.push(self.model.lookup(&path)?.with_temperature(temperature)?);
        }
        Ok(out)
    }

    fn commit(&mut self, _nodes: &[usize]) -> Result<()> {
        Ok(())
    }

    fn forward_count(&self) -> u64 {
        self.forwards
    }
}
