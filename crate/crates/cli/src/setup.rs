//! Turning a [`RunConfig`] into models, drafters, topologies and prompts.

use std::path::PathBuf;

use specdec::drafter::{ParallelDraft, ParallelDrafter, TabularDrafter};
use specdec::engine::{CausalSession, DecodeConfig, OracleDrafter, TabularSession, TransformerSession};
use specdec::model::{load_checkpoint, ModelConfig, NextToken, TabularLM, TinyTransformer};
use specdec::training::{new_drafter, read_corpus, sample_corpus};
use specdec::tree::{default_topology, CandidateMode, TreeTopology};
use specdec::{Rng, TokenDistribution, TokenId};

use crate::config::RunConfig;
use crate::error::{CliError, CliResult};

/// Independent seed for a named stream and index.
pub fn derive_seed(seed: u64, stream: u64, index: u64) -> u64 {
    // splitmix64 finalizer over a mixed input.
    let mut z = seed
        .wrapping_add(stream.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(index.wrapping_mul(0xD1B5_4A32_D192_ED03));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub(crate) mod stream {
    pub const TARGET: u64 = 1;
    pub const DRAFTER: u64 = 2;
    pub const PROMPTS: u64 = 3;
    pub const CORPUS: u64 = 4;
    pub const SPECULATIVE: u64 = 5;
    pub const AUTOREGRESSIVE: u64 = 6;
    pub const TRAIN: u64 = 7;
}

pub enum TargetModel {
    Transformer(TinyTransformer),
    Tabular(TabularLM),
}

impl TargetModel {
    pub fn load(cfg: &RunConfig) -> CliResult<Self> {
        let spec = cfg.require("model", "target")?;
        let seed = derive_seed(cfg.seed()?, stream::TARGET, 0);
        let seed = cfg.parse_or("model", "target_seed", seed)?;
        match spec {
            "random" => {
                let mc = model_shape(cfg, seed)?;
                Ok(Self::Transformer(TinyTransformer::new(mc)?))
            }
            "random-tabular" => {
                let vocab = cfg.parse_or("model", "vocab", 4)?;
                let order = cfg.parse_or("model", "order", 2)?;
                let concentration = cfg.parse_or("model", "concentration", 0.5)?;
                Ok(Self::Tabular(TabularLM::random(vocab, order, concentration, &mut Rng::new(seed))?))
            }
            _ => {
                let path = cfg.existing_path("model", "target")?.expect("key present");
                if path.extension().is_some_and(|e| e == "json") {
                    Ok(Self::Tabular(TabularLM::load_json(&path)?))
                } else {
                    Ok(Self::Transformer(load_checkpoint(&path)?))
                }
            }
        }
    }

    pub fn vocab(&self) -> usize {
        match self {
            Self::Transformer(m) => m.config().vocab,
            Self::Tabular(t) => t.vocab(),
        }
    }

    pub fn session(&self) -> Box<dyn CausalSession + '_> {
        match self {
            Self::Transformer(m) => Box::new(TransformerSession::new(m)),
            Self::Tabular(t) => Box::new(TabularSession::new(t)),
        }
    }

    pub fn transformer(&self) -> Option<&TinyTransformer> {
        match self {
            Self::Transformer(m) => Some(m),
            Self::Tabular(_) => None,
        }
    }

    pub fn tabular(&self) -> Option<&TabularLM> {
        match self {
            Self::Tabular(t) => Some(t),
            Self::Transformer(_) => None,
        }
    }

    pub fn describe(&self) -> String {
        match self {
            Self::Transformer(m) => {
                let c = m.config();
                format!(
                    "transformer layers={} d_model={} heads={} d_ff={} vocab={}",
                    c.layers, c.d_model, c.heads, c.d_ff, c.vocab
                )
            }
            Self::Tabular(t) => format!("tabular vocab={} order={}", t.vocab(), t.order()),
        }
    }
}

impl NextToken for TargetModel {
    fn next_distribution(&self, prefix: &[TokenId], temperature: f64) -> specdec::Result<TokenDistribution> {
        match self {
            Self::Transformer(m) => m.next_distribution(prefix, temperature),
            Self::Tabular(t) => t.next_distribution(prefix, temperature),
        }
    }
}

/// Transformer shape from `[model]`, defaulting to the standard target.
pub fn model_shape(cfg: &RunConfig, seed: u64) -> CliResult<ModelConfig> {
    let d = ModelConfig::target(cfg.parse_or("model", "vocab", 64)?);
    let mc = ModelConfig {
        layers: cfg.parse_or("model", "layers", d.layers)?,
        d_model: cfg.parse_or("model", "d_model", d.d_model)?,
        heads: cfg.parse_or("model", "heads", d.heads)?,
        d_ff: cfg.parse_or("model", "d_ff", d.d_ff)?,
        max_position: cfg.parse_or("model", "max_position", d.max_position)?,
        init_seed: seed,
        ..d
    };
    mc.validate()
        .map_err(|e| CliError::config("model", "d_model", &e.to_string()))?;
    Ok(mc)
}

/// Where the drafter comes from.
#[derive(Debug, Clone, PartialEq)]
pub enum DrafterSource {
    /// Rolls the target out greedily: the perfect drafter.
    Oracle,
    /// Fresh mask-token drafter sharing the target's embeddings.
    Untrained,
    /// Trained per run from the `[train]` section.
    Train,
    RandomTabular { order: usize, concentration: f64 },
    Adversarial,
    /// Checkpoint path; `{k}` is replaced by the mask count.
    Checkpoint(String),
}

impl DrafterSource {
    pub fn from_config(cfg: &RunConfig) -> CliResult<Self> {
        Ok(match cfg.require("model", "drafter")? {
            "oracle" => Self::Oracle,
            "untrained" => Self::Untrained,
            "train" => Self::Train,
            "random-tabular" => Self::RandomTabular {
                order: cfg.parse_or("model", "drafter_order", 1)?,
                concentration: cfg.parse_or("model", "drafter_concentration", 0.5)?,
            },
            "adversarial" => Self::Adversarial,
            other => Self::Checkpoint(other.to_string()),
        })
    }

    pub fn describe(&self) -> String {
        match self {
            Self::Oracle => "oracle".into(),
            Self::Untrained => "untrained".into(),
            Self::Train => "train".into(),
            Self::RandomTabular { order, concentration } => {
                format!("random-tabular order={order} concentration={concentration}")
            }
            Self::Adversarial => "adversarial".into(),
            Self::Checkpoint(p) => p.clone(),
        }
    }
}

pub enum DrafterModel {
    Parallel(ParallelDrafter),
    Oracle(usize),
    Tabular(TabularDrafter),
}

impl DrafterModel {
    /// Builds the drafter for `k` mask tokens. `Train` is handled by the caller.
    pub fn build(cfg: &RunConfig, source: &DrafterSource, target: &TargetModel, k: usize) -> CliResult<Self> {
        let seed = derive_seed(cfg.seed()?, stream::DRAFTER, k as u64);
        match source {
            DrafterSource::Oracle => Ok(Self::Oracle(k)),
            DrafterSource::Untrained => {
                let t = target
                    .transformer()
                    .ok_or_else(|| CliError::config("model", "drafter", "untrained drafters need a transformer target"))?;
                Ok(Self::Parallel(new_drafter(t, k, seed, true)?))
            }
            DrafterSource::Train => Err(CliError::config("model", "drafter", "train is only valid for ablate-k")),
            DrafterSource::RandomTabular { order, concentration } => Ok(Self::Tabular(TabularDrafter::random(
                target.vocab(),
                k,
                *order,
                *concentration,
                &mut Rng::new(seed),
            )?)),
            DrafterSource::Adversarial => {
                let t = target
                    .tabular()
                    .ok_or_else(|| CliError::config("model", "drafter", "adversarial drafters need a tabular target"))?;
                Ok(Self::Tabular(TabularDrafter::adversarial(t, k)?))
            }
            DrafterSource::Checkpoint(template) => {
                let value = template.replace("{k}", &k.to_string());
                let path = cfg.resolve(&value);
                if !path.is_file() {
                    return Err(CliError::config(
                        "model",
                        "drafter",
                        &format!("file {} does not exist", path.display()),
                    ));
                }
                let d = ParallelDrafter::new(load_checkpoint(&path)?);
                check_k(&d, k, "model", "drafter")?;
                Ok(Self::Parallel(d))
            }
        }
    }

    /// A fresh drafting session; counters start at zero.
    pub fn instance<'a>(&'a self, target: &'a TargetModel) -> Box<dyn ParallelDraft + 'a> {
        match self {
            Self::Parallel(d) => Box::new(d.session()),
            Self::Oracle(k) => Box::new(OracleDrafter::new(target.session(), *k)),
            Self::Tabular(t) => Box::new(t.clone()),
        }
    }
}

pub fn check_k(drafter: &ParallelDrafter, k: usize, section: &str, key: &str) -> CliResult<()> {
    if drafter.k() != k {
        return Err(CliError::config(
            section,
            key,
            &format!("checkpoint has {} mask tokens but model.k = {k}", drafter.k()),
        ));
    }
    Ok(())
}

/// `default`, `chain`, `chain:N`, `empty`, or a topology file.
pub fn topology(cfg: &RunConfig, k: usize) -> CliResult<TreeTopology> {
    let spec = cfg.get("decode", "topology").unwrap_or("default");
    let bad = |e: specdec::Error| CliError::config("decode", "topology", &e.to_string());
    match spec {
        "default" => default_topology(k).map_err(bad),
        "chain" => Ok(TreeTopology::chain(k)),
        "empty" => Ok(TreeTopology::empty()),
        s if s.starts_with("chain:") => {
            let depth = s["chain:".len()..]
                .parse()
                .map_err(|_| CliError::config("decode", "topology", &format!("bad chain depth in {s:?}")))?;
            Ok(TreeTopology::chain(depth))
        }
        _ => {
            let path = cfg.existing_path("decode", "topology")?.expect("key present");
            let text = std::fs::read_to_string(&path).map_err(|e| CliError::io(&path, e))?;
            TreeTopology::from_text(&text).map_err(bad)
        }
    }
}

/// Whether the topology follows `K` or is fixed by a file / explicit depth.
pub fn topology_follows_k(cfg: &RunConfig) -> bool {
    matches!(cfg.get("decode", "topology").unwrap_or("default"), "default" | "chain" | "empty")
}

pub fn decode_config(cfg: &RunConfig, topology: TreeTopology, new_tokens: usize) -> CliResult<DecodeConfig> {
    let mut dc = DecodeConfig::new(topology, cfg.parse_or("decode", "temperature", 1.0)?, new_tokens);
    dc.draft_temperature = cfg.parse_opt("decode", "draft_temperature")?;
    dc.candidates = cfg.parse_or("decode", "candidates", CandidateMode::default())?;
    Ok(dc)
}

/// `[decode] prompts` file, else `prompt_count` prompts of `prompt_len`
/// tokens sampled from the target.
pub fn prompts(cfg: &RunConfig, target: &TargetModel) -> CliResult<(Vec<Vec<TokenId>>, String)> {
    if let Some(path) = cfg.existing_path("decode", "prompts")? {
        let p = read_corpus(&path)?;
        if p.is_empty() || p.iter().any(Vec::is_empty) {
            return Err(CliError::config("decode", "prompts", "needs at least one non-empty prompt"));
        }
        return Ok((p, format!("file {}", display_name(&path))));
    }
    let count = cfg.parse_or("decode", "prompt_count", 8)?;
    let len = cfg.parse_or("decode", "prompt_len", 8)?;
    if count == 0 || len == 0 {
        return Err(CliError::config("decode", "prompt_count", "prompt_count and prompt_len must be positive"));
    }
    let mut rng = Rng::new(derive_seed(cfg.seed()?, stream::PROMPTS, 0));
    let p = sample_corpus(target, target.vocab(), count, len, &mut rng)?;
    Ok((p, format!("sampled count={count} len={len}")))
}

pub fn display_name(path: &std::path::Path) -> String {
    path.file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| path.display().to_string())
}

pub fn output_path(out: &std::path::Path, name: &str) -> PathBuf {
    out.join(name)
}
