//! Parallel drafting with `[MASK]` prompt tokens, and the group-wise layout used
//! to train a drafter so that training matches its one-pass inference.
//!
//! At inference the drafter sees `prefix ‖ [MASK]_1 … [MASK]_K` under a causal
//! mask with consecutive positions and reads `K + 1` distributions off the last
//! real token and the mask slots. In training every real token `x_t` opens its
//! own parallel group `x_t, [MASK]_1 … [MASK]_K`: slot `(t, j)` sits at position
//! `t + j`, is labelled with `y_{t+1+j}`, and sees only real tokens `≤ t` plus the
//! earlier masks of its own group. Under that layout one forward over the whole
//! sequence reproduces, group by group, what `draft_parallel` computes on each
//! prefix.

use std::collections::HashMap;

use crate::dist::{apply_temperature, Rng, TokenDistribution, TokenId, Vocabulary};
use crate::error::{Error, Result};
use crate::model::{AttentionSpec, ForwardOutput, KvCache, TinyTransformer};

/// Label value for slots that do not contribute to the loss.
pub const IGNORE_LABEL: i64 = -100;

/// A tiny transformer whose input vocabulary carries `K` mask tokens.
#[derive(Debug, Clone)]
pub struct ParallelDrafter {
    model: TinyTransformer,
}

impl ParallelDrafter {
    pub fn new(model: TinyTransformer) -> Self {
        Self { model }
    }

    /// Number of mask tokens; the drafter proposes `k() + 1` distributions.
    pub fn k(&self) -> usize {
        self.model.config().mask_count
    }

    pub fn vocabulary(&self) -> Vocabulary {
        let cfg = self.model.config();
        Vocabulary::new(cfg.vocab, cfg.mask_count).expect("validated config")
    }

    pub fn model(&self) -> &TinyTransformer {
        &self.model
    }

    pub fn model_mut(&mut self) -> &mut TinyTransformer {
        &mut self.model
    }

    pub fn into_model(self) -> TinyTransformer {
        self.model
    }

    fn masks(&self) -> Vec<TokenId> {
        let v = self.model.config().vocab;
        (0..self.k()).map(|j| v + j).collect()
    }

    /// Logit rows for depths `0..=K`, from one forward over `prefix ‖ masks`.
    pub fn draft_logits(&self, prefix: &[TokenId]) -> Result<Vec<Vec<f64>>> {
        if prefix.is_empty() {
            return Err(Error::InvalidInput("drafting needs a non-empty prefix".into()));
        }
        let mut tokens = prefix.to_vec();
        tokens.extend(self.masks());
        let out = self.model.forward(&tokens, &AttentionSpec::causal(tokens.len()))?;
        Ok((prefix.len() - 1..tokens.len())
            .map(|i| out.logits_row(i).to_vec())
            .collect())
    }

    /// `K + 1` next-token distributions in depth order, from a single forward.
    pub fn draft_parallel(&self, prefix: &[TokenId], temperature: f64) -> Result<Vec<TokenDistribution>> {
        self.draft_logits(prefix)?
            .iter()
            .map(|row| apply_temperature(row, temperature))
            .collect()
    }

    /// An incremental drafting session that caches the real-token prefix.
    pub fn session(&self) -> DraftSession<'_> {
        DraftSession {
            drafter: self,
            cache: KvCache::new(&self.model),
            forwards: 0,
        }
    }
}

/// Source of `K + 1` draft distributions per decoding round.
pub trait ParallelDraft {
    /// Number of mask tokens `K`.
    fn lookahead(&self) -> usize;

    fn vocab(&self) -> usize;

    /// Distributions for depths `0..=K` after `context`.
    fn draft(&mut self, context: &[TokenId], temperature: f64) -> Result<Vec<TokenDistribution>>;

    /// Model forward passes performed so far.
    fn forward_count(&self) -> u64;
}

/// [`ParallelDrafter`] with a KV cache over the committed real tokens. Mask
/// entries are rolled back after every draft.
#[derive(Debug)]
pub struct DraftSession<'a> {
    drafter: &'a ParallelDrafter,
    cache: KvCache,
    forwards: u64,
}

impl ParallelDraft for DraftSession<'_> {
    fn lookahead(&self) -> usize {
        self.drafter.k()
    }

    fn vocab(&self) -> usize {
        self.drafter.model.config().vocab
    }

    fn draft(&mut self, context: &[TokenId], temperature: f64) -> Result<Vec<TokenDistribution>> {
        if context.is_empty() {
            return Err(Error::InvalidInput("drafting needs a non-empty prefix".into()));
        }
        self.cache.rollback();
        let keep = common_prefix(self.cache.tokens(), context).min(context.len() - 1);
        self.cache.truncate(keep);
        let real = context.len() - keep;
        let mut tokens = context[keep..].to_vec();
        tokens.extend(self.drafter.masks());
        let positions: Vec<usize> = (keep..keep + tokens.len()).collect();
        let mask = AttentionSpec::causal(tokens.len()).mask().to_vec();
        let out = self
            .drafter
            .model
            .forward_cached(&mut self.cache, &tokens, &positions, &mask)?;
        self.forwards += 1;
        self.cache.commit_prefix(real)?;
        rows_to_dists(&out, real - 1..tokens.len(), temperature)
    }

    fn forward_count(&self) -> u64 {
        self.forwards
    }
}

pub(crate) fn common_prefix(a: &[TokenId], b: &[TokenId]) -> usize {
    a.iter().zip(b).take_while(|(x, y)| x == y).count()
}

fn rows_to_dists(
    out: &ForwardOutput,
    rows: std::ops::Range<usize>,
    temperature: f64,
) -> Result<Vec<TokenDistribution>> {
    rows.map(|i| apply_temperature(out.logits_row(i), temperature))
        .collect()
}

/// Table-driven parallel drafter: the `K + 1` distributions depend on the last
/// `order` context tokens. Used as an arbitrary (and arbitrarily bad) drafter
/// in losslessness checks.
#[derive(Debug, Clone)]
pub struct TabularDrafter {
    order: usize,
    vocab: usize,
    k: usize,
    table: HashMap<Vec<TokenId>, Vec<TokenDistribution>>,
    calls: u64,
}

impl TabularDrafter {
    pub fn new(
        order: usize,
        vocab: usize,
        k: usize,
        entries: impl IntoIterator<Item = (Vec<TokenId>, Vec<TokenDistribution>)>,
    ) -> Result<Self> {
        let mut table = HashMap::new();
        for (ctx, dists) in entries {
            if dists.len() != k + 1 || dists.iter().any(|d| d.len() != vocab) {
                return Err(Error::InvalidInput(format!(
                    "context {ctx:?}: expected {} distributions over {vocab} tokens",
                    k + 1
                )));
            }
            if ctx.len() > order {
                return Err(Error::InvalidInput(format!("context {ctx:?} longer than order {order}")));
            }
            table.insert(ctx, dists);
        }
        if !table.contains_key(&Vec::new()) {
            return Err(Error::InvalidInput("table needs an entry for the empty context".into()));
        }
        Ok(Self {
            order,
            vocab,
            k,
            table,
            calls: 0,
        })
    }

    /// Every context of length `0..=order` gets `K + 1` Dirichlet rows.
    pub fn random(vocab: usize, k: usize, order: usize, concentration: f64, rng: &mut Rng) -> Result<Self> {
        let mut entries = Vec::new();
        for len in 0..=order {
            for code in 0..vocab.pow(len as u32) {
                let mut ctx = vec![0; len];
                let mut c = code;
                for slot in ctx.iter_mut().rev() {
                    *slot = c % vocab;
                    c /= vocab;
                }
                let dists = (0..=k)
                    .map(|_| crate::model::tabular_dirichlet(vocab, concentration, rng))
                    .collect::<Result<Vec<_>>>()?;
                entries.push((ctx, dists));
            }
        }
        Self::new(order, vocab, k, entries)
    }

    /// Puts most of the mass on the tokens `target` finds least likely: an
    /// adversarial drafter for losslessness tests.
    pub fn adversarial(target: &crate::model::TabularLM, k: usize) -> Result<Self> {
        let vocab = target.vocab();
        let entries = target
            .entries()
            .map(|(ctx, p)| {
                let weights: Vec<f64> = p.iter().map(|&x| (1.0 - x).powi(8) + 1e-3).collect();
                let q = TokenDistribution::from_weights(weights)?;
                Ok((ctx.clone(), vec![q; k + 1]))
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(target.order(), vocab, k, entries)
    }

    fn lookup(&self, context: &[TokenId]) -> &[TokenDistribution] {
        let start = context.len().saturating_sub(self.order);
        let mut ctx = &context[start..];
        loop {
            if let Some(d) = self.table.get(ctx) {
                return d;
            }
            ctx = &ctx[1..];
        }
    }
}

impl ParallelDraft for TabularDrafter {
    fn lookahead(&self) -> usize {
        self.k
    }

    fn vocab(&self) -> usize {
        self.vocab
    }

    fn draft(&mut self, context: &[TokenId], temperature: f64) -> Result<Vec<TokenDistribution>> {
        self.calls += 1;
        let dists = self.lookup(context);
        if temperature == 1.0 {
            return Ok(dists.to_vec());
        }
        dists.iter().map(|d| d.with_temperature(temperature)).collect()
    }

    fn forward_count(&self) -> u64 {
        self.calls
    }
}

/// Expanded training sequence for one input sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupLayout {
    pub input_ids: Vec<TokenId>,
    pub attn: AttentionSpec,
    /// Next-token label per slot, [`IGNORE_LABEL`] where nothing is predicted.
    pub labels: Vec<i64>,
    /// `(t, j)` per slot: real-token index and offset within the group.
    pub group_index: Vec<(usize, usize)>,
    pub k: usize,
}

impl GroupLayout {
    pub fn len(&self) -> usize {
        self.input_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.input_ids.is_empty()
    }

    pub fn groups(&self) -> usize {
        self.input_ids.len() / (self.k + 1)
    }

    pub fn slot(&self, t: usize, j: usize) -> usize {
        t * (self.k + 1) + j
    }
}

/// Builds the group-wise layout for `sequence` with shift-one `targets`
/// (`targets[t]` is the token following `sequence[t]`).
pub fn build_group_layout(
    sequence: &[TokenId],
    targets: &[TokenId],
    k: usize,
    vocab: &Vocabulary,
) -> Result<GroupLayout> {
    let n = sequence.len();
    if n == 0 {
        return Err(Error::InvalidInput("empty sequence".into()));
    }
    if targets.len() != n {
        return Err(Error::DimensionMismatch(format!(
            "sequence has {n} tokens, targets have {}",
            targets.len()
        )));
    }
    if vocab.mask_count() < k {
        return Err(Error::InvalidInput(format!(
            "vocabulary has {} mask tokens, layout needs {k}",
            vocab.mask_count()
        )));
    }
    let g = k + 1;
    let len = n * g;
    let mut input_ids = Vec::with_capacity(len);
    let mut labels = Vec::with_capacity(len);
    let mut positions = Vec::with_capacity(len);
    let mut group_index = Vec::with_capacity(len);
    for t in 0..n {
        for j in 0..g {
            input_ids.push(if j == 0 { sequence[t] } else { vocab.mask_id(j)? });
            labels.push(if t + j < n { targets[t + j] as i64 } else { IGNORE_LABEL });
            positions.push(t + j);
            group_index.push((t, j));
        }
    }
    let mut mask = vec![false; len * len];
    for (a, &(t, j)) in group_index.iter().enumerate() {
        for (b, &(s, i)) in group_index.iter().enumerate() {
            mask[a * len + b] = if i == 0 { s <= t } else { s == t && i <= j };
        }
    }
    Ok(GroupLayout {
        input_ids,
        attn: AttentionSpec::new(mask, positions)?,
        labels,
        group_index,
        k,
    })
}

/// Outcome of comparing the training layout against one-pass drafting.
#[derive(Debug, Clone, PartialEq)]
pub struct ConsistencyReport {
    /// Groups whose logits disagreed beyond tolerance.
    pub mismatched_groups: Vec<usize>,
    /// Largest relative deviation seen over all compared logits.
    pub max_relative_error: f64,
    /// True when every compared logit matched bit for bit.
    pub bitwise: bool,
}

impl ConsistencyReport {
    pub fn is_consistent(&self) -> bool {
        self.mismatched_groups.is_empty()
    }
}

/// Relative tolerance when the two paths are not bitwise identical.
pub const CONSISTENCY_TOLERANCE: f64 = 1e-5;

/// Runs one forward over the group layout of `sequence` and checks that every
/// group's `K + 1` logit rows equal `draft_logits(sequence[..=t])`.
pub fn verify_train_inference_consistency(drafter: &ParallelDrafter, sequence: &[TokenId]) -> Result<ConsistencyReport> {
    let targets = vec![0; sequence.len()];
    let layout = build_group_layout(sequence, &targets, drafter.k(), &drafter.vocabulary())?;
    check_layout_consistency(drafter, sequence, &layout)
}

/// Same as [`verify_train_inference_consistency`] for a caller-supplied layout.
pub fn check_layout_consistency(
    drafter: &ParallelDrafter,
    sequence: &[TokenId],
    layout: &GroupLayout,
) -> Result<ConsistencyReport> {
    let out = drafter.model.forward(&layout.input_ids, &layout.attn)?;
    let mut report = ConsistencyReport {
        mismatched_groups: Vec::new(),
        max_relative_error: 0.0,
        bitwise: true,
    };
    for t in 0..sequence.len() {
        let reference = drafter.draft_logits(&sequence[..=t])?;
        let mut ok = true;
        for (j, row) in reference.iter().enumerate() {
            for (a, b) in out.logits_row(layout.slot(t, j)).iter().zip(row) {
                if a.to_bits() != b.to_bits() {
                    report.bitwise = false;
                }
                let rel = (a - b).abs() / b.abs().max(1e-12);
                report.max_relative_error = report.max_relative_error.max(rel);
                if rel > CONSISTENCY_TOLERANCE {
                    ok = false;
                }
            }
        }
        if !ok {
            report.mismatched_groups.push(t);
        }
    }
    Ok(report)
}
