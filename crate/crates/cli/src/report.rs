//! Output files and their schemas.
//!
//! Every report is JSON with the deterministic content at the top level and
//! wall-clock measurements confined to a `timing` object, so two runs with
//! the same config and seed differ only inside `timing`.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use specdec::engine::{DecodeTrace, RoundRecord};
use specdec::TokenId;

use crate::error::{CliError, CliResult};

pub const TIMING_CAVEAT: &str = "wall times are measured on desk-scale models on this machine; \
speedup ratios reflect toy-model cost structure and are not comparable to large-model GPU results";

/// One line of `trace.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceLine {
    pub engine: String,
    pub prompt: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub k: Option<usize>,
    #[serde(flatten)]
    pub record: RoundRecord,
}

pub const SPECULATIVE: &str = "speculative";
pub const AUTOREGRESSIVE: &str = "autoregressive";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchSettings {
    pub target: String,
    pub drafter: String,
    pub k: usize,
    pub topology: String,
    pub candidates: String,
    pub temperature: f64,
    pub draft_temperature: f64,
    pub max_new_tokens: usize,
    pub seed: u64,
    pub prompts: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptMetrics {
    pub index: usize,
    pub prompt: Vec<TokenId>,
    pub rounds: u64,
    pub tokens: u64,
    pub tau: f64,
    pub draft_forwards: u64,
    pub baseline_tokens: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchAggregate {
    pub tau: f64,
    pub rounds: f64,
    pub tokens: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptTiming {
    pub index: usize,
    pub wall_ns: u64,
    pub baseline_wall_ns: u64,
    pub tokens_per_s: f64,
    pub baseline_tokens_per_s: f64,
    pub speedup: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimingAggregate {
    pub total_wall_ns: u64,
    pub total_baseline_wall_ns: u64,
    pub tokens_per_s: f64,
    pub baseline_tokens_per_s: f64,
    pub speedup: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchTiming {
    pub caveat: String,
    pub prompts: Vec<PromptTiming>,
    pub aggregate: TimingAggregate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub command: String,
    pub settings: BenchSettings,
    pub prompts: Vec<PromptMetrics>,
    pub aggregate: BenchAggregate,
    pub timing: BenchTiming,
}

/// Per-prompt traces of both engines.
#[derive(Debug, Clone)]
pub struct PromptRun {
    pub index: usize,
    pub prompt: Vec<TokenId>,
    pub speculative: DecodeTrace,
    pub baseline: DecodeTrace,
}

fn wall_ns(t: &DecodeTrace) -> u64 {
    t.draft_ns() + t.verify_ns()
}

fn per_second(tokens: u64, ns: u64) -> f64 {
    tokens as f64 / (ns.max(1) as f64 * 1e-9)
}

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    s / n.max(1) as f64
}

impl BenchReport {
    /// Metrics from the traces: τ from the round counters, wall time as the
    /// sum of drafting and verification time over rounds.
    pub fn from_runs(settings: BenchSettings, runs: &[PromptRun]) -> Self {
        let prompts: Vec<PromptMetrics> = runs
            .iter()
            .map(|r| PromptMetrics {
                index: r.index,
                prompt: r.prompt.clone(),
                rounds: r.speculative.len() as u64,
                tokens: r.speculative.committed_tokens(),
                tau: r.speculative.tau().unwrap_or(0.0),
                draft_forwards: r.speculative.draft_forwards(),
                baseline_tokens: r.baseline.committed_tokens(),
            })
            .collect();
        let timing: Vec<PromptTiming> = runs
            .iter()
            .map(|r| {
                let (w, b) = (wall_ns(&r.speculative), wall_ns(&r.baseline));
                PromptTiming {
                    index: r.index,
                    wall_ns: w,
                    baseline_wall_ns: b,
                    tokens_per_s: per_second(r.speculative.committed_tokens(), w),
                    baseline_tokens_per_s: per_second(r.baseline.committed_tokens(), b),
                    speedup: b.max(1) as f64 / w.max(1) as f64,
                }
            })
            .collect();
        let aggregate = BenchAggregate {
            tau: mean(prompts.iter().map(|p| p.tau)),
            rounds: mean(prompts.iter().map(|p| p.rounds as f64)),
            tokens: mean(prompts.iter().map(|p| p.tokens as f64)),
        };
        let timing_aggregate = TimingAggregate {
            total_wall_ns: timing.iter().map(|t| t.wall_ns).sum(),
            total_baseline_wall_ns: timing.iter().map(|t| t.baseline_wall_ns).sum(),
            tokens_per_s: mean(timing.iter().map(|t| t.tokens_per_s)),
            baseline_tokens_per_s: mean(timing.iter().map(|t| t.baseline_tokens_per_s)),
            speedup: mean(timing.iter().map(|t| t.speedup)),
        };
        Self {
            command: "bench".into(),
            settings,
            prompts,
            aggregate,
            timing: BenchTiming {
                caveat: TIMING_CAVEAT.into(),
                prompts: timing,
                aggregate: timing_aggregate,
            },
        }
    }
}

pub fn trace_lines(runs: &[PromptRun], k: Option<usize>) -> Vec<TraceLine> {
    let mut lines = Vec::new();
    for r in runs {
        for (engine, trace) in [(SPECULATIVE, &r.speculative), (AUTOREGRESSIVE, &r.baseline)] {
            lines.extend(trace.rounds.iter().map(|rec| TraceLine {
                engine: engine.into(),
                prompt: r.index,
                k,
                record: *rec,
            }));
        }
    }
    lines
}

pub fn write_trace(path: &Path, lines: &[TraceLine]) -> CliResult<()> {
    let file = File::create(path).map_err(|e| CliError::io(path, e))?;
    let mut out = BufWriter::new(file);
    for l in lines {
        let s = serde_json::to_string(l).map_err(|e| CliError::Report(e.to_string()))?;
        writeln!(out, "{s}").map_err(|e| CliError::io(path, e))?;
    }
    out.flush().map_err(|e| CliError::io(path, e))
}

pub fn read_trace(path: &Path) -> CliResult<Vec<TraceLine>> {
    let file = File::open(path).map_err(|e| CliError::io(path, e))?;
    let mut lines = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| CliError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        lines.push(
            serde_json::from_str(&line)
                .map_err(|e| CliError::Report(format!("{} line {}: {e}", path.display(), i + 1)))?,
        );
    }
    Ok(lines)
}

/// Pretty JSON with a trailing newline.
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let mut s = serde_json::to_string_pretty(value).map_err(|e| CliError::Report(e.to_string()))?;
    s.push('\n');
    std::fs::write(path, s).map_err(|e| CliError::io(path, e))
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> CliResult<T> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| CliError::Report(format!("{}: {e}", path.display())))
}

/// The report with its `timing` object removed, serialized compactly.
pub fn deterministic_part(report_json: &str) -> CliResult<String> {
    let mut v: serde_json::Value =
        serde_json::from_str(report_json).map_err(|e| CliError::Report(e.to_string()))?;
    if let Some(obj) = v.as_object_mut() {
        obj.remove("timing");
    }
    Ok(v.to_string())
}

pub fn bench_metrics_csv(report: &BenchReport) -> String {
    let mut s = String::from("prompt,engine,rounds,tokens,tau,wall_ns,tokens_per_s\n");
    for (p, t) in report.prompts.iter().zip(&report.timing.prompts) {
        s.push_str(&format!(
            "{},{SPECULATIVE},{},{},{},{},{}\n",
            p.index, p.rounds, p.tokens, p.tau, t.wall_ns, t.tokens_per_s
        ));
        s.push_str(&format!(
            "{},{AUTOREGRESSIVE},{},{},1,{},{}\n",
            p.index, p.baseline_tokens, p.baseline_tokens, t.baseline_wall_ns, t.baseline_tokens_per_s
        ));
    }
    s
}

/// One row of the K sweep.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub k: usize,
    pub tau: f64,
    pub speedup: f64,
}

pub const ABLATION_HEADER: &str = "k,tau,speedup";

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut s = format!("{ABLATION_HEADER}\n");
    for r in rows {
        s.push_str(&format!("{},{},{}\n", r.k, r.tau, r.speedup));
    }
    s
}

pub fn parse_ablation_csv(text: &str) -> CliResult<Vec<AblationRow>> {
    let mut lines = text.lines();
    if lines.next().map(str::trim) != Some(ABLATION_HEADER) {
        return Err(CliError::Report(format!("expected header {ABLATION_HEADER:?}")));
    }
    lines
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, l)| {
            let bad = || CliError::Report(format!("ablation row {}: {l:?}", i + 1));
            let f: Vec<&str> = l.split(',').map(str::trim).collect();
            if f.len() != 3 {
                return Err(bad());
            }
            Ok(AblationRow {
                k: f[0].parse().map_err(|_| bad())?,
                tau: f[1].parse().map_err(|_| bad())?,
                speedup: f[2].parse().map_err(|_| bad())?,
            })
        })
        .collect()
}

pub fn read_ablation_csv(path: &Path) -> CliResult<Vec<AblationRow>> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    parse_ablation_csv(&text)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationEntry {
    pub k: usize,
    pub topology: String,
    pub tau: f64,
    pub rounds: f64,
    pub tokens: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationTimingRow {
    pub k: usize,
    pub speedup: f64,
    pub tokens_per_s: f64,
    pub baseline_tokens_per_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationTiming {
    pub caveat: String,
    pub rows: Vec<AblationTimingRow>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub command: String,
    pub target: String,
    pub drafter: String,
    pub seed: u64,
    pub rows: Vec<AblationEntry>,
    pub timing: AblationTiming,
}

impl AblationReport {
    pub fn csv_rows(&self) -> Vec<AblationRow> {
        self.rows
            .iter()
            .zip(&self.timing.rows)
            .map(|(r, t)| AblationRow {
                k: r.k,
                tau: r.tau,
                speedup: t.speedup,
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LosslessReport {
    pub command: String,
    pub target: String,
    pub drafter: String,
    pub topology: String,
    pub candidates: String,
    pub temperature: f64,
    pub draft_temperature: f64,
    pub prompt: Vec<TokenId>,
    pub length: usize,
    pub trials: usize,
    pub seed: u64,
    /// Full-sequence TV between the speculative and autoregressive histograms.
    pub tv: f64,
    pub threshold: f64,
    pub pass: bool,
    pub marginal_tv: Vec<f64>,
    /// TV of each histogram against the exact sequence law of the target.
    pub speculative_exact_tv: f64,
    pub autoregressive_exact_tv: f64,
    pub timing: LosslessTiming,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LosslessTiming {
    pub wall_ns: u64,
}

pub fn lossless_metrics_csv(report: &LosslessReport) -> String {
    let mut s = String::from("position,marginal_tv\n");
    for (i, tv) in report.marginal_tv.iter().enumerate() {
        s.push_str(&format!("{i},{tv}\n"));
    }
    s
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub command: String,
    pub role: String,
    pub k: usize,
    pub objective: String,
    pub mode: String,
    pub epochs: usize,
    pub steps: usize,
    pub sequences: usize,
    pub seed: u64,
    pub epoch_mean_loss: Vec<f64>,
    pub final_loss: f64,
    pub checkpoint: String,
    pub timing: TrainTiming,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainTiming {
    pub wall_ns: u64,
}
