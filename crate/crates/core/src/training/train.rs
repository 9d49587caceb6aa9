use std::io::Write as _;
use std::path::Path;

use crate::dist::{sample, Rng, TokenId};
use crate::drafter::ParallelDrafter;
use crate::error::{Error, Result};
use crate::model::{ModelConfig, NextToken, TinyTransformer};

use super::loss::LossWeights;
use super::objective::{backward, frozen_ranges, Example, Objective};
use super::optim::AdamW;

/// Where labels come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum DistillMode {
    /// Next tokens of the corpus sequences.
    #[default]
    Hard,
    /// The target model's distribution at every slot, computed on the fly.
    Soft,
}

impl std::str::FromStr for DistillMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "hard" => Ok(Self::Hard),
            "soft" => Ok(Self::Soft),
            other => Err(Error::Parse(format!("distill mode {other:?}, expected hard or soft"))),
        }
    }
}

impl std::fmt::Display for DistillMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Hard => "hard",
            Self::Soft => "soft",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub lr: f64,
    pub betas: (f64, f64),
    pub weight_decay: f64,
    pub epochs: usize,
    pub seed: u64,
    pub mode: DistillMode,
    pub objective: Objective,
    /// `None` uses `λ_k = 0.8^k`.
    pub weights: Option<LossWeights>,
    /// Copy the target's base embeddings and output head into the drafter and
    /// keep them frozen.
    pub share_embeddings: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 8,
            lr: 1e-3,
            betas: (0.9, 0.999),
            weight_decay: 0.0,
            epochs: 5,
            seed: 0,
            mode: DistillMode::Hard,
            objective: Objective::MedusaParallel,
            weights: None,
            share_embeddings: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::InvalidInput("batch_size and epochs must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepLog {
    pub epoch: usize,
    pub step: usize,
    pub loss: f64,
}

/// Per-step mean group loss.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    pub steps: Vec<StepLog>,
}

impl TrainLog {
    /// Group-weighted mean loss per epoch, in epoch order.
    pub fn epoch_means(&self) -> Vec<f64> {
        let epochs = self.steps.iter().map(|s| s.epoch + 1).max().unwrap_or(0);
        (0..epochs)
            .map(|e| {
                let v: Vec<f64> = self.steps.iter().filter(|s| s.epoch == e).map(|s| s.loss).collect();
                v.iter().sum::<f64>() / v.len().max(1) as f64
            })
            .collect()
    }

    /// `epoch,step,loss` with a header row.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,step,loss\n");
        for r in &self.steps {
            s.push_str(&format!("{},{},{}\n", r.epoch, r.step, r.loss));
        }
        s
    }
}

/// Fresh drafter shaped like `target` but with one layer and `k` mask tokens.
pub fn new_drafter(target: &TinyTransformer, k: usize, seed: u64, share_embeddings: bool) -> Result<ParallelDrafter> {
    let t = target.config();
    let cfg = ModelConfig {
        layers: 1,
        mask_count: k,
        init_seed: seed,
        share_embeddings_with_target: false,
        ..t.clone()
    };
    let mut model = TinyTransformer::new(cfg)?;
    if share_embeddings {
        model.share_embeddings_from(target)?;
    }
    Ok(ParallelDrafter::new(model))
}

/// Trains a fresh `K`-mask drafter on `corpus`.
pub fn train_drafter(
    target: &TinyTransformer,
    corpus: &[Vec<TokenId>],
    k: usize,
    config: &TrainConfig,
) -> Result<(ParallelDrafter, TrainLog)> {
    let drafter = new_drafter(target, k, config.seed, config.share_embeddings)?;
    continue_training(target, drafter, corpus, config)
}

/// Trains an existing drafter further.
pub fn continue_training(
    target: &TinyTransformer,
    mut drafter: ParallelDrafter,
    corpus: &[Vec<TokenId>],
    config: &TrainConfig,
) -> Result<(ParallelDrafter, TrainLog)> {
    config.validate()?;
    let k = drafter.k();
    let weights = config.weights.clone().unwrap_or_else(|| LossWeights::default_for(k));
    let max = drafter.model().config().max_position;
    let mut examples = Vec::with_capacity(corpus.len());
    for (i, seq) in corpus.iter().enumerate() {
        if seq.len() + k > max + 1 {
            return Err(Error::PositionOverflow {
                position: seq.len() + k - 1,
                max,
            });
        }
        let ex = match config.mode {
            DistillMode::Hard => Example::hard(seq, k, &drafter),
            DistillMode::Soft => Example::distilled(seq, k, &drafter, target),
        }
        .map_err(|e| Error::InvalidInput(format!("corpus sequence {i}: {e}")))?;
        examples.push(ex);
    }
    if examples.is_empty() {
        return Err(Error::InvalidInput("empty corpus".into()));
    }

    let frozen = frozen_ranges(drafter.model().config());
    let mut opt = AdamW::new(drafter.model(), config.lr, config.betas, config.weight_decay, frozen)?;
    let mut rng = Rng::new(config.seed);
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut log = TrainLog::default();
    let mut step = 0;
    for epoch in 0..config.epochs {
        for i in (1..order.len()).rev() {
            let j = rng.below(i + 1);
            order.swap(i, j);
        }
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<Example> = chunk.iter().map(|&i| examples[i].clone()).collect();
            let (loss, grads) = match backward(&drafter, &batch, &config.objective, &weights) {
                Ok(r) => r,
                Err(Error::InvalidInput(msg)) if msg.starts_with("loss is not finite") => {
                    return Err(Error::Divergence {
                        epoch,
                        step,
                        loss: f64::NAN,
                    })
                }
                Err(e) => return Err(e),
            };
            let mean = loss.mean();
            if !mean.is_finite() {
                return Err(Error::Divergence { epoch, step, loss: mean });
            }
            opt.step(drafter.model_mut(), &grads);
            log.steps.push(StepLog { epoch, step, loss: mean });
            step += 1;
        }
    }
    Ok((drafter, log))
}

/// `count` sequences of `len` tokens sampled from `model` at temperature 1,
/// each starting from a uniformly drawn first token.
pub fn sample_corpus<M: NextToken>(model: &M, vocab: usize, count: usize, len: usize, rng: &mut Rng) -> Result<Vec<Vec<TokenId>>> {
    let mut corpus = Vec::with_capacity(count);
    for _ in 0..count {
        let mut seq = vec![rng.below(vocab)];
        while seq.len() < len {
            let d = model.next_distribution(&seq, 1.0)?;
            seq.push(sample(&d, rng));
        }
        corpus.push(seq);
    }
    Ok(corpus)
}

/// One whitespace-separated token sequence per line; blank lines are skipped.
pub fn parse_corpus(text: &str) -> Result<Vec<Vec<TokenId>>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let seq = line
            .split_whitespace()
            .map(|w| {
                w.parse::<TokenId>()
                    .map_err(|_| Error::Parse(format!("corpus line {}: bad token {w:?}", i + 1)))
            })
            .collect::<Result<Vec<_>>>()?;
        out.push(seq);
    }
    Ok(out)
}

pub fn read_corpus(path: &Path) -> Result<Vec<Vec<TokenId>>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_corpus(&text)
}

pub fn write_corpus(path: &Path, corpus: &[Vec<TokenId>]) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    for seq in corpus {
        let line: Vec<String> = seq.iter().map(|t| t.to_string()).collect();
        writeln!(f, "{}", line.join(" ")).map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}
