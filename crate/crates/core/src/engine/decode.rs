use std::time::Instant;

use crate::dist::{sample, Rng, TokenDistribution, TokenId};
use crate::drafter::ParallelDraft;
use crate::error::{Error, Result};
use crate::tree::{build_draft_tree, sample_draft_tree, CandidateMode, DraftNode, DraftTree, TreeTopology};

use super::session::CausalSession;
use super::trace::{DecodeTrace, RoundRecord};
use super::verify::{verify_tree_with, Fault, RoundOutcome};

#[derive(Debug, Clone, PartialEq)]
pub struct DecodeConfig {
    pub topology: TreeTopology,
    /// Temperature applied to the target.
    pub temperature: f64,
    /// Temperature applied to the drafter; `None` follows `temperature`.
    pub draft_temperature: Option<f64>,
    pub candidates: CandidateMode,
    /// Decoding stops once at least this many tokens have been generated.
    pub min_new_tokens: usize,
    #[doc(hidden)]
    pub fault: Fault,
}

impl DecodeConfig {
    pub fn new(topology: TreeTopology, temperature: f64, min_new_tokens: usize) -> Self {
        Self {
            topology,
            temperature,
            draft_temperature: None,
            candidates: CandidateMode::default(),
            min_new_tokens,
            fault: Fault::None,
        }
    }

    pub fn draft_temperature(&self) -> f64 {
        self.draft_temperature.unwrap_or(self.temperature)
    }
}

/// Generated tokens (prompt excluded) and the per-round trace.
#[derive(Debug, Clone, PartialEq)]
pub struct Decoded {
    pub tokens: Vec<TokenId>,
    pub trace: DecodeTrace,
}

fn elapsed_ns(start: Instant) -> u64 {
    start.elapsed().as_nanos().min(u128::from(u64::MAX)) as u64
}

fn check_room(max_position: Option<usize>, prompt: usize, new: usize, depth: usize) -> Result<()> {
    if prompt == 0 {
        return Err(Error::InvalidInput("prompt is empty".into()));
    }
    if let Some(max) = max_position {
        // The last round may overshoot the target length by up to `depth` tokens.
        let needed = prompt + new + depth;
        if needed > max {
            return Err(Error::PositionOverflow {
                position: needed,
                max,
            });
        }
    }
    Ok(())
}

/// State of one speculative decode: the target and drafter sessions, the
/// committed sequence, and the trace so far.
pub struct DecodeSession<'a, S: CausalSession + ?Sized, D: ParallelDraft + ?Sized> {
    target: &'a mut S,
    drafter: &'a mut D,
    config: DecodeConfig,
    sequence: Vec<TokenId>,
    prompt_len: usize,
    trace: DecodeTrace,
}

impl<'a, S: CausalSession + ?Sized, D: ParallelDraft + ?Sized> DecodeSession<'a, S, D> {
    pub fn new(target: &'a mut S, drafter: &'a mut D, config: DecodeConfig, prompt: &[TokenId]) -> Result<Self> {
        let depth = config.topology.max_depth();
        if depth > drafter.lookahead() + 1 {
            return Err(Error::Topology(format!(
                "topology depth {depth} exceeds drafter lookahead K + 1 = {}",
                drafter.lookahead() + 1
            )));
        }
        if drafter.vocab() != target.vocab() {
            return Err(Error::DimensionMismatch(format!(
                "drafter vocabulary {} differs from target vocabulary {}",
                drafter.vocab(),
                target.vocab()
            )));
        }
        check_room(target.max_position(), prompt.len(), config.min_new_tokens, depth)?;
        if let Some(&id) = prompt.iter().find(|&&t| t >= target.vocab()) {
            return Err(Error::TokenOutOfRange {
                id,
                limit: target.vocab(),
            });
        }
        Ok(Self {
            target,
            drafter,
            config,
            sequence: prompt.to_vec(),
            prompt_len: prompt.len(),
            trace: DecodeTrace::default(),
        })
    }

    pub fn generated(&self) -> &[TokenId] {
        &self.sequence[self.prompt_len..]
    }

    pub fn trace(&self) -> &DecodeTrace {
        &self.trace
    }

    pub fn is_done(&self) -> bool {
        self.generated().len() >= self.config.min_new_tokens
    }

    /// One draft, one target forward, one verification.
    pub fn round(&mut self, rng: &mut Rng) -> Result<RoundOutcome> {
        let draft_forwards = self.drafter.forward_count();
        let start = Instant::now();
        let dists = self.drafter.draft(&self.sequence, self.config.draft_temperature())?;
        let draft_ns = elapsed_ns(start);
        let draft_forwards = self.drafter.forward_count() - draft_forwards;

        let tree = match self.config.candidates {
            CandidateMode::Sampled => sample_draft_tree(&dists, &self.config.topology, rng)?,
            CandidateMode::TopK => build_draft_tree(&dists, &self.config.topology)?,
        };
        let start = Instant::now();
        let target_dists = self.target.score(
            &self.sequence,
            &tree.tokens(),
            &tree.parents(),
            self.config.temperature,
        )?;
        let verify_ns = elapsed_ns(start);

        let mut outcome = verify_tree_with(&tree, &target_dists, rng, self.config.fault)?;
        self.target.commit(&outcome.path)?;
        outcome.draft_ns = draft_ns;
        outcome.verify_ns = verify_ns;
        self.sequence.extend(outcome.tokens());
        self.trace.push(RoundRecord {
            round: self.trace.len() as u64,
            draft_ns,
            verify_ns,
            draft_forwards,
            proposed: tree.len() as u64,
            accepted: outcome.accepted.len() as u64,
            committed_tokens: outcome.committed() as u64,
        });
        Ok(outcome)
    }

    pub fn run(mut self, rng: &mut Rng) -> Result<Decoded> {
        while !self.is_done() {
            self.round(rng)?;
        }
        Ok(Decoded {
            tokens: self.sequence.split_off(self.prompt_len),
            trace: self.trace,
        })
    }
}

/// Speculative decoding with a parallel drafter and tree verification.
pub fn speculative_decode<S: CausalSession + ?Sized, D: ParallelDraft + ?Sized>(
    target: &mut S,
    drafter: &mut D,
    prompt: &[TokenId],
    config: &DecodeConfig,
    rng: &mut Rng,
) -> Result<Decoded> {
    DecodeSession::new(target, drafter, config.clone(), prompt)?.run(rng)
}

/// One target forward and one sample per token. Every round commits one token
/// and records no draft work.
pub fn autoregressive_decode<S: CausalSession + ?Sized>(
    target: &mut S,
    prompt: &[TokenId],
    min_new_tokens: usize,
    temperature: f64,
    rng: &mut Rng,
) -> Result<Decoded> {
    check_room(target.max_position(), prompt.len(), min_new_tokens, 0)?;
    let mut sequence = prompt.to_vec();
    let mut trace = DecodeTrace::default();
    while sequence.len() - prompt.len() < min_new_tokens {
        let start = Instant::now();
        let dists = target.score(&sequence, &[], &[], temperature)?;
        let verify_ns = elapsed_ns(start);
        target.commit(&[])?;
        sequence.push(sample(&dists[0], rng));
        trace.push(RoundRecord {
            round: trace.len() as u64,
            draft_ns: 0,
            verify_ns,
            draft_forwards: 0,
            proposed: 0,
            accepted: 0,
            committed_tokens: 1,
        });
    }
    Ok(Decoded {
        tokens: sequence.split_off(prompt.len()),
        trace,
    })
}

/// Classic draft-then-verify: `gamma` sequential drafter calls, each sampling
/// one token, then one target forward over the chain.
pub fn chain_sps_decode<S: CausalSession + ?Sized, A: CausalSession + ?Sized>(
    target: &mut S,
    drafter: &mut A,
    prompt: &[TokenId],
    min_new_tokens: usize,
    gamma: usize,
    temperature: f64,
    rng: &mut Rng,
) -> Result<Decoded> {
    if drafter.vocab() != target.vocab() {
        return Err(Error::DimensionMismatch(format!(
            "drafter vocabulary {} differs from target vocabulary {}",
            drafter.vocab(),
            target.vocab()
        )));
    }
    check_room(target.max_position(), prompt.len(), min_new_tokens, gamma)?;
    check_room(drafter.max_position(), prompt.len(), min_new_tokens, gamma)?;
    let mut sequence = prompt.to_vec();
    let mut trace = DecodeTrace::default();
    while sequence.len() - prompt.len() < min_new_tokens {
        let before = drafter.forward_count();
        let start = Instant::now();
        let base = sequence.len();
        let mut nodes = Vec::with_capacity(gamma);
        let mut dists: Vec<TokenDistribution> = Vec::with_capacity(gamma);
        for i in 0..gamma {
            let q = drafter.score(&sequence, &[], &[], temperature)?.swap_remove(0);
            drafter.commit(&[])?;
            let token = sample(&q, rng);
            nodes.push(DraftNode {
                token,
                parent: i.checked_sub(1),
                depth: i + 1,
                rank: 0,
                source: i,
                draft_prob: q[token],
            });
            dists.push(q);
            sequence.push(token);
        }
        sequence.truncate(base);
        let draft_ns = elapsed_ns(start);
        let draft_forwards = drafter.forward_count() - before;
        let tree = DraftTree::from_nodes(nodes, dists, CandidateMode::Sampled)?;

        let start = Instant::now();
        let target_dists = target.score(&sequence, &tree.tokens(), &tree.parents(), temperature)?;
        let verify_ns = elapsed_ns(start);
        let outcome = verify_tree_with(&tree, &target_dists, rng, Fault::None)?;
        target.commit(&outcome.path)?;
        sequence.extend(outcome.tokens());
        trace.push(RoundRecord {
            round: trace.len() as u64,
            draft_ns,
            verify_ns,
            draft_forwards,
            proposed: gamma as u64,
            accepted: outcome.accepted.len() as u64,
            committed_tokens: outcome.committed() as u64,
        });
    }
    Ok(Decoded {
        tokens: sequence.split_off(prompt.len()),
        trace,
    })
}

/// Drafter that knows the target: it rolls the target out greedily for
/// `K + 1` steps and returns the target's own distributions along that path.
/// Under greedy decoding with a chain topology every candidate is accepted.
///
/// Each draft costs `K + 1` target forwards, which the forward counter reports.
pub struct OracleDrafter<S: CausalSession> {
    session: S,
    k: usize,
}

impl<S: CausalSession> OracleDrafter<S> {
    pub fn new(session: S, k: usize) -> Self {
        Self { session, k }
    }
}

impl<S: CausalSession> ParallelDraft for OracleDrafter<S> {
    fn lookahead(&self) -> usize {
        self.k
    }

    fn vocab(&self) -> usize {
        self.session.vocab()
    }

    fn draft(&mut self, context: &[TokenId], temperature: f64) -> Result<Vec<TokenDistribution>> {
        let mut path = context.to_vec();
        let mut out = Vec::with_capacity(self.k + 1);
        for _ in 0..=self.k {
            let d = self.session.score(&path, &[], &[], temperature)?.swap_remove(0);
            self.session.commit(&[])?;
            path.push(d.argmax());
            out.push(d);
        }
        Ok(out)
    }

    fn forward_count(&self) -> u64 {
        self.session.forward_count()
    }
}

/// Histogram over the first `len` generated tokens of `trials` runs of
/// `decode`, indexed by the base-`vocab` number the tokens form.
pub fn empirical_sequence_distribution<F>(
    mut decode: F,
    trials: usize,
    len: usize,
    vocab: usize,
    rng: &mut Rng,
) -> Result<Vec<f64>>
where
    F: FnMut(&mut Rng) -> Result<Vec<TokenId>>,
{
    let mut counts = vec![0u64; vocab.pow(len as u32)];
    for _ in 0..trials {
        let tokens = decode(rng)?;
        if tokens.len() < len {
            return Err(Error::InvalidInput(format!(
                "decode produced {} tokens, need {len}",
                tokens.len()
            )));
        }
        let code = tokens[..len].iter().fold(0, |c, &t| c * vocab + t);
        counts[code] += 1;
    }
    Ok(counts.iter().map(|&c| c as f64 / trials as f64).collect())
}
