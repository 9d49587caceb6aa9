use std::path::Path;
use std::time::Instant;

use specdec::drafter::ParallelDrafter;
use specdec::engine::{autoregressive_decode, empirical_sequence_distribution, speculative_decode, DecodeConfig, Fault};
use specdec::model::{save_checkpoint, load_checkpoint, TinyTransformer};
use specdec::training::{
    continue_training, new_drafter, read_corpus, sample_corpus, DistillMode, LossWeights, Objective, TrainConfig, TrainLog,
};
use specdec::{Rng, TokenId};

use crate::config::RunConfig;
use crate::error::{CliError, CliResult};
use crate::report::{
    ablation_csv, bench_metrics_csv, lossless_metrics_csv, trace_lines, write_json, write_trace, AblationEntry,
    AblationReport, AblationTiming, AblationTimingRow, BenchReport, BenchSettings, LosslessReport, LosslessTiming,
    PromptRun, TrainReport, TrainTiming, TIMING_CAVEAT,
};
use crate::setup::{
    check_k, decode_config, derive_seed, model_shape, prompts, stream, topology, topology_follows_k, DrafterModel,
    DrafterSource, TargetModel,
};

pub const REPORT_FILE: &str = "report.json";
pub const TRACE_FILE: &str = "trace.jsonl";
pub const METRICS_FILE: &str = "metrics.csv";
pub const TRAIN_LOG_FILE: &str = "train_log.csv";

fn elapsed_ns(start: Instant) -> u64 {
    start.elapsed().as_nanos().min(u128::from(u64::MAX)) as u64
}

fn prepare_out(out: &Path) -> CliResult<()> {
    std::fs::create_dir_all(out).map_err(|e| CliError::io(out, e))
}

fn model_k(cfg: &RunConfig) -> CliResult<usize> {
    cfg.require("model", "k")?;
    cfg.parse_or("model", "k", 0)
}

/// Training settings from `[train]`.
pub fn train_config(cfg: &RunConfig) -> CliResult<TrainConfig> {
    let d = TrainConfig::default();
    let mut objective: Objective = cfg.parse_or("train", "objective", Objective::MedusaParallel)?;
    if let Objective::Eagle { w_reg, w_cls } = &mut objective {
        *w_reg = cfg.parse_or("train", "w_reg", *w_reg)?;
        *w_cls = cfg.parse_or("train", "w_cls", *w_cls)?;
    }
    let tc = TrainConfig {
        batch_size: cfg.parse_or("train", "batch_size", d.batch_size)?,
        lr: cfg.parse_or("train", "lr", d.lr)?,
        betas: (
            cfg.parse_or("train", "beta1", d.betas.0)?,
            cfg.parse_or("train", "beta2", d.betas.1)?,
        ),
        weight_decay: cfg.parse_or("train", "weight_decay", d.weight_decay)?,
        epochs: cfg.parse_or("train", "epochs", d.epochs)?,
        seed: derive_seed(cfg.seed()?, stream::TRAIN, 0),
        mode: cfg.parse_or("train", "mode", DistillMode::Hard)?,
        objective,
        weights: None,
        share_embeddings: cfg.parse_or("train", "share_embeddings", d.share_embeddings)?,
    };
    tc.validate()
        .map_err(|e| CliError::config("train", "epochs", &e.to_string()))?;
    Ok(tc)
}

fn loss_weights(cfg: &RunConfig, k: usize) -> CliResult<Option<LossWeights>> {
    if let Some(l) = cfg.list::<f64>("train", "lambdas")? {
        if l.len() != k {
            return Err(CliError::config("train", "lambdas", &format!("needs {k} values, got {}", l.len())));
        }
        return Ok(Some(LossWeights::new(l).map_err(|e| CliError::config("train", "lambdas", &e.to_string()))?));
    }
    match cfg.parse_opt::<f64>("train", "decay")? {
        Some(base) => Ok(Some(
            LossWeights::decay(k, base).map_err(|e| CliError::config("train", "decay", &e.to_string()))?,
        )),
        None => Ok(None),
    }
}

/// Checks `[train] corpus` up front so a bad path is reported before any
/// model is loaded.
fn corpus_source(cfg: &RunConfig) -> CliResult<Option<std::path::PathBuf>> {
    let path = cfg.existing_path("train", "corpus")?;
    if path.is_none() && cfg.get("train", "corpus_samples").is_none() {
        return Err(CliError::config("train", "corpus", "is required (or set train.corpus_samples)"));
    }
    Ok(path)
}

fn load_corpus(cfg: &RunConfig, path: Option<&Path>, source: Option<&TargetModel>) -> CliResult<Vec<Vec<TokenId>>> {
    if let Some(p) = path {
        return Ok(read_corpus(p)?);
    }
    let count = cfg.parse_or("train", "corpus_samples", 0usize)?;
    let len = cfg.parse_or("train", "corpus_len", 32usize)?;
    let target = source.ok_or_else(|| CliError::config("train", "corpus_samples", "needs model.target to sample from"))?;
    let mut rng = Rng::new(derive_seed(cfg.seed()?, stream::CORPUS, 0));
    Ok(sample_corpus(target, target.vocab(), count, len, &mut rng)?)
}

/// Trains a drafter (`[train] role = drafter`, the default) or a causal
/// target model (`role = target`) and writes the checkpoint, the loss log and
/// a summary report.
pub fn cmd_train(cfg: &RunConfig, out: &Path) -> CliResult<TrainReport> {
    let role = cfg.get("train", "role").unwrap_or("drafter");
    if role != "drafter" && role != "target" {
        return Err(CliError::config("train", "role", &format!("{role:?}, expected drafter or target")));
    }
    let corpus_path = corpus_source(cfg)?;
    let mut tc = train_config(cfg)?;
    let start = Instant::now();
    let source = if cfg.get("model", "target").is_some() {
        Some(TargetModel::load(cfg)?)
    } else {
        None
    };
    let corpus = load_corpus(cfg, corpus_path.as_deref(), source.as_ref())?;

    let (model, log, k): (TinyTransformer, TrainLog, usize) = if role == "target" {
        if tc.mode != DistillMode::Hard {
            return Err(CliError::config("train", "mode", "target training uses hard labels"));
        }
        let mut shape = model_shape(cfg, derive_seed(cfg.seed()?, stream::TARGET, 0))?;
        if let Some(s) = &source {
            shape.vocab = s.vocab();
        }
        let fresh = TinyTransformer::new(shape)?;
        tc.share_embeddings = false;
        tc.objective = Objective::MedusaParallel;
        let (m, log) = continue_training(&fresh.clone(), ParallelDrafter::new(fresh), &corpus, &tc)?;
        (m.into_model(), log, 0)
    } else {
        let k = model_k(cfg)?;
        let target = source
            .as_ref()
            .and_then(TargetModel::transformer)
            .ok_or_else(|| CliError::config("model", "target", "drafter training needs a transformer checkpoint"))?;
        tc.weights = loss_weights(cfg, k)?;
        let drafter = match cfg.existing_path("train", "resume")? {
            Some(p) => {
                let d = ParallelDrafter::new(load_checkpoint(&p)?);
                check_k(&d, k, "train", "resume")?;
                d
            }
            None => new_drafter(target, k, tc.seed, tc.share_embeddings)?,
        };
        let (d, log) = continue_training(target, drafter, &corpus, &tc)?;
        (d.into_model(), log, k)
    };

    prepare_out(out)?;
    let default_name = if role == "target" { "target.ckpt" } else { "drafter.ckpt" };
    let name = cfg.get("train", "checkpoint").unwrap_or(default_name);
    save_checkpoint(&model, &out.join(name))?;
    let log_path = out.join(TRAIN_LOG_FILE);
    std::fs::write(&log_path, log.to_csv()).map_err(|e| CliError::io(&log_path, e))?;
    let report = TrainReport {
        command: "train".into(),
        role: role.into(),
        k,
        objective: objective_name(&tc.objective),
        mode: tc.mode.to_string(),
        epochs: tc.epochs,
        steps: log.steps.len(),
        sequences: corpus.len(),
        seed: cfg.seed()?,
        epoch_mean_loss: log.epoch_means(),
        final_loss: log.steps.last().map_or(f64::NAN, |s| s.loss),
        checkpoint: name.into(),
        timing: TrainTiming {
            wall_ns: elapsed_ns(start),
        },
    };
    write_json(&out.join(REPORT_FILE), &report)?;
    Ok(report)
}

fn objective_name(o: &Objective) -> String {
    match o {
        Objective::MedusaParallel => "medusa-parallel".into(),
        Objective::Medusa => "medusa".into(),
        Objective::Eagle { w_reg, w_cls } => format!("eagle w_reg={w_reg} w_cls={w_cls}"),
    }
}

/// Speculative and autoregressive decodes of every prompt, each with its own
/// seeded stream.
pub fn run_prompts(
    target: &TargetModel,
    drafter: &DrafterModel,
    dc: &DecodeConfig,
    prompts: &[Vec<TokenId>],
    seed: u64,
) -> CliResult<Vec<PromptRun>> {
    prompts
        .iter()
        .enumerate()
        .map(|(i, prompt)| {
            let mut session = target.session();
            let mut draft = drafter.instance(target);
            let mut rng = Rng::new(derive_seed(seed, stream::SPECULATIVE, i as u64));
            let spec = speculative_decode(&mut *session, &mut *draft, prompt, dc, &mut rng)?;
            let mut session = target.session();
            let mut rng = Rng::new(derive_seed(seed, stream::AUTOREGRESSIVE, i as u64));
            let ar = autoregressive_decode(&mut *session, prompt, dc.min_new_tokens, dc.temperature, &mut rng)?;
            Ok(PromptRun {
                index: i,
                prompt: prompt.clone(),
                speculative: spec.trace,
                baseline: ar.trace,
            })
        })
        .collect()
}

/// Decodes the prompt set with both engines and writes `report.json`,
/// `trace.jsonl` and `metrics.csv`.
pub fn cmd_bench(cfg: &RunConfig, out: &Path) -> CliResult<BenchReport> {
    let target = TargetModel::load(cfg)?;
    let k = model_k(cfg)?;
    let source = DrafterSource::from_config(cfg)?;
    let drafter = DrafterModel::build(cfg, &source, &target, k)?;
    let topo = topology(cfg, k)?;
    let new_tokens = cfg.parse_or("decode", "max_new_tokens", 32)?;
    let dc = decode_config(cfg, topo, new_tokens)?;
    let (prompt_set, prompt_desc) = prompts(cfg, &target)?;
    let seed = cfg.seed()?;

    let runs = run_prompts(&target, &drafter, &dc, &prompt_set, seed)?;
    let settings = BenchSettings {
        target: target.describe(),
        drafter: source.describe(),
        k,
        topology: dc.topology.to_text(),
        candidates: dc.candidates.to_string(),
        temperature: dc.temperature,
        draft_temperature: dc.draft_temperature(),
        max_new_tokens: new_tokens,
        seed,
        prompts: prompt_desc,
    };
    let report = BenchReport::from_runs(settings, &runs);
    prepare_out(out)?;
    write_json(&out.join(REPORT_FILE), &report)?;
    write_trace(&out.join(TRACE_FILE), &trace_lines(&runs, None))?;
    let metrics = out.join(METRICS_FILE);
    std::fs::write(&metrics, bench_metrics_csv(&report)).map_err(|e| CliError::io(&metrics, e))?;
    Ok(report)
}

fn histogram_tv(a: &[f64], b: &[f64]) -> f64 {
    0.5 * a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>()
}

fn marginals(hist: &[f64], vocab: usize, len: usize) -> Vec<Vec<f64>> {
    let mut m = vec![vec![0.0; vocab]; len];
    for (code, &p) in hist.iter().enumerate() {
        let mut c = code;
        for pos in (0..len).rev() {
            m[pos][c % vocab] += p;
            c /= vocab;
        }
    }
    m
}

/// Largest outcome space the histogram comparison will allocate.
const MAX_OUTCOMES: usize = 1 << 24;

/// Compares `trials` speculative decodes against `trials` autoregressive
/// decodes of the same tabular target. Writes `report.json` and
/// `metrics.csv`; the report's `pass` field carries the verdict.
pub fn cmd_lossless(cfg: &RunConfig, out: &Path) -> CliResult<LosslessReport> {
    let target = TargetModel::load(cfg)?;
    let table = target
        .tabular()
        .ok_or_else(|| CliError::config("model", "target", "losslessness checks need a tabular target"))?;
    let k = model_k(cfg)?;
    let source = DrafterSource::from_config(cfg)?;
    let drafter = DrafterModel::build(cfg, &source, &target, k)?;
    let len = cfg.parse_or("lossless", "length", 3usize)?;
    let trials = cfg.parse_or("lossless", "trials", 1_000_000usize)?;
    let threshold = cfg.parse_or("lossless", "threshold", 0.01)?;
    let prompt = cfg.list::<TokenId>("lossless", "prompt")?.unwrap_or_else(|| vec![0]);
    if len == 0 || trials == 0 {
        return Err(CliError::config("lossless", "length", "length and trials must be positive"));
    }
    let vocab = target.vocab();
    if vocab.checked_pow(len as u32).is_none_or(|n| n > MAX_OUTCOMES) {
        return Err(CliError::config("lossless", "length", "vocab^length outcome space is too large"));
    }
    let mut dc = decode_config(cfg, topology(cfg, k)?, len)?;
    dc.fault = match cfg.get("lossless", "fault") {
        None | Some("none") => Fault::None,
        Some("always-accept") => Fault::AlwaysAccept,
        Some(other) => return Err(CliError::config("lossless", "fault", &format!("unknown fault {other:?}"))),
    };
    let seed = cfg.seed()?;
    let start = Instant::now();

    let mut session = target.session();
    let mut draft = drafter.instance(&target);
    let spec = empirical_sequence_distribution(
        |rng| Ok(speculative_decode(&mut *session, &mut *draft, &prompt, &dc, rng)?.tokens),
        trials,
        len,
        vocab,
        &mut Rng::new(derive_seed(seed, stream::SPECULATIVE, 0)),
    )?;
    let mut session = target.session();
    let ar = empirical_sequence_distribution(
        |rng| Ok(autoregressive_decode(&mut *session, &prompt, len, dc.temperature, rng)?.tokens),
        trials,
        len,
        vocab,
        &mut Rng::new(derive_seed(seed, stream::AUTOREGRESSIVE, 0)),
    )?;
    let exact = table.sequence_distribution(&prompt, len, dc.temperature)?;
    let tv = histogram_tv(&spec, &ar);
    let (ms, ma) = (marginals(&spec, vocab, len), marginals(&ar, vocab, len));
    let report = LosslessReport {
        command: "lossless".into(),
        target: target.describe(),
        drafter: source.describe(),
        topology: dc.topology.to_text(),
        candidates: dc.candidates.to_string(),
        temperature: dc.temperature,
        draft_temperature: dc.draft_temperature(),
        prompt,
        length: len,
        trials,
        seed,
        tv,
        threshold,
        pass: tv < threshold,
        marginal_tv: ms.iter().zip(&ma).map(|(a, b)| histogram_tv(a, b)).collect(),
        speculative_exact_tv: histogram_tv(&spec, &exact),
        autoregressive_exact_tv: histogram_tv(&ar, &exact),
        timing: LosslessTiming {
            wall_ns: elapsed_ns(start),
        },
    };
    prepare_out(out)?;
    write_json(&out.join(REPORT_FILE), &report)?;
    let metrics = out.join(METRICS_FILE);
    std::fs::write(&metrics, lossless_metrics_csv(&report)).map_err(|e| CliError::io(&metrics, e))?;
    Ok(report)
}

/// Benches one drafter per `K` with the topology rebuilt for each `K`.
/// `ks` overrides `[ablate] ks`. Writes `report.json`, `trace.jsonl` and
/// `metrics.csv` (`k,tau,speedup`).
pub fn cmd_ablate_k(cfg: &RunConfig, out: &Path, ks: Option<Vec<usize>>) -> CliResult<AblationReport> {
    let ks = match ks {
        Some(ks) => ks,
        None => cfg
            .list::<usize>("ablate", "ks")?
            .ok_or_else(|| CliError::config("ablate", "ks", "is required"))?,
    };
    if ks.is_empty() || ks.contains(&0) {
        return Err(CliError::config("ablate", "ks", "needs positive K values"));
    }
    let source = DrafterSource::from_config(cfg)?;
    let corpus_path = if source == DrafterSource::Train {
        corpus_source(cfg)?
    } else {
        None
    };
    let target = TargetModel::load(cfg)?;
    let corpus = if source == DrafterSource::Train {
        Some(load_corpus(cfg, corpus_path.as_deref(), Some(&target))?)
    } else {
        None
    };
    if !topology_follows_k(cfg) {
        eprintln!("note: decode.topology is fixed, so every K uses the same tree");
    }
    let new_tokens = cfg.parse_or("decode", "max_new_tokens", 32)?;
    let (prompt_set, _) = prompts(cfg, &target)?;
    let seed = cfg.seed()?;

    let mut rows = Vec::new();
    let mut timing = Vec::new();
    let mut lines = Vec::new();
    for &k in &ks {
        let drafter = match (&source, &corpus) {
            (DrafterSource::Train, Some(corpus)) => {
                let t = target
                    .transformer()
                    .ok_or_else(|| CliError::config("model", "target", "drafter training needs a transformer target"))?;
                let mut tc = train_config(cfg)?;
                tc.weights = loss_weights(cfg, k)?;
                tc.seed = derive_seed(seed, stream::TRAIN, k as u64);
                let d = new_drafter(t, k, tc.seed, tc.share_embeddings)?;
                DrafterModel::Parallel(continue_training(t, d, corpus, &tc)?.0)
            }
            _ => DrafterModel::build(cfg, &source, &target, k)?,
        };
        let dc = decode_config(cfg, topology(cfg, k)?, new_tokens)?;
        let runs = run_prompts(&target, &drafter, &dc, &prompt_set, seed)?;
        let settings = BenchSettings {
            target: target.describe(),
            drafter: source.describe(),
            k,
            topology: dc.topology.to_text(),
            candidates: dc.candidates.to_string(),
            temperature: dc.temperature,
            draft_temperature: dc.draft_temperature(),
            max_new_tokens: new_tokens,
            seed,
            prompts: String::new(),
        };
        let bench = BenchReport::from_runs(settings, &runs);
        rows.push(AblationEntry {
            k,
            topology: dc.topology.to_text(),
            tau: bench.aggregate.tau,
            rounds: bench.aggregate.rounds,
            tokens: bench.aggregate.tokens,
        });
        timing.push(AblationTimingRow {
            k,
            speedup: bench.timing.aggregate.speedup,
            tokens_per_s: bench.timing.aggregate.tokens_per_s,
            baseline_tokens_per_s: bench.timing.aggregate.baseline_tokens_per_s,
        });
        lines.extend(trace_lines(&runs, Some(k)));
    }
    let report = AblationReport {
        command: "ablate-k".into(),
        target: target.describe(),
        drafter: source.describe(),
        seed,
        rows,
        timing: AblationTiming {
            caveat: TIMING_CAVEAT.into(),
            rows: timing,
        },
    };
    prepare_out(out)?;
    write_json(&out.join(REPORT_FILE), &report)?;
    write_trace(&out.join(TRACE_FILE), &lines)?;
    let metrics = out.join(METRICS_FILE);
    std::fs::write(&metrics, ablation_csv(&report.csv_rows())).map_err(|e| CliError::io(&metrics, e))?;
    Ok(report)
}
