use std::path::Path;
use std::process::Command;

use serde_json::Value;
use specdec_cli::commands::{METRICS_FILE, REPORT_FILE, TRACE_FILE};
use specdec_cli::report::{deterministic_part, read_ablation_csv};
use specdec_cli::{cmd_ablate_k, cmd_bench, cmd_lossless, RunConfig};

fn specdec(dir: &Path, args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_specdec"))
        .current_dir(dir)
        .args(args)
        .output()
        .unwrap()
}

fn write(dir: &Path, name: &str, text: &str) {
    std::fs::write(dir.join(name), text).unwrap();
}

const SMALL_TARGET: &str = "\
[model]
target = random
vocab = 16
layers = 1
d_model = 16
heads = 2
d_ff = 32
max_position = 64
";

fn bench_config(extra_model: &str, decode: &str) -> String {
    format!("[run]\nseed = 9\n{SMALL_TARGET}{extra_model}\n[decode]\nmax_new_tokens = 16\nprompt_count = 3\nprompt_len = 4\n{decode}")
}

#[test]
fn missing_corpus_names_the_field() {
    let dir = tempfile::tempdir().unwrap();
    write(dir.path(), "c.ini", &format!("{SMALL_TARGET}k = 2\n[train]\ncorpus = nowhere.txt\n"));
    let out = specdec(dir.path(), &["train", "--config", "c.ini", "--out", "o"]);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("train.corpus"), "{err}");
}

#[test]
fn training_is_bitwise_reproducible_and_checks_resume_k() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = format!("{SMALL_TARGET}k = 2\n[train]\ncorpus_samples = 16\ncorpus_len = 8\nepochs = 2\n");
    write(dir.path(), "c.ini", &cfg);
    for o in ["a", "b"] {
        let out = specdec(dir.path(), &["train", "--config", "c.ini", "--seed", "4", "--out", o]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    }
    let a = std::fs::read(dir.path().join("a/drafter.ckpt")).unwrap();
    let b = std::fs::read(dir.path().join("b/drafter.ckpt")).unwrap();
    assert_eq!(a, b);
    let log = std::fs::read_to_string(dir.path().join("a/train_log.csv")).unwrap();
    assert!(log.starts_with("epoch,step,loss\n") && log.lines().count() == 5);

    // A different seed moves the weights.
    let out = specdec(dir.path(), &["train", "--config", "c.ini", "--seed", "5", "--out", "c"]);
    assert!(out.status.success());
    assert_ne!(a, std::fs::read(dir.path().join("c/drafter.ckpt")).unwrap());

    // Resuming a K=2 checkpoint under model.k = 3 fails.
    write(dir.path(), "r.ini", &format!("{}\n[train]\ncorpus_samples = 16\nresume = a/drafter.ckpt\n", cfg.replace("k = 2", "k = 3").split("[train]").next().unwrap()));
    let out = specdec(dir.path(), &["train", "--config", "r.ini", "--out", "r"]);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("train.resume") && err.contains("mask tokens"), "{err}");

    // Resuming with the matching K works.
    write(dir.path(), "r2.ini", &format!("{SMALL_TARGET}k = 2\n[train]\ncorpus_samples = 16\ncorpus_len = 8\nepochs = 1\nresume = a/drafter.ckpt\n"));
    assert!(specdec(dir.path(), &["train", "--config", "r2.ini", "--out", "r2"]).status.success());
}

#[test]
fn perfect_drafter_chain_four_gives_tau_five() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = RunConfig::parse(&bench_config("k = 4\ndrafter = oracle", "topology = chain\ntemperature = 0\n"), dir.path()).unwrap();
    let r = cmd_bench(&cfg, &dir.path().join("o")).unwrap();
    assert_eq!(r.aggregate.tau, 5.0);
    assert!(r.prompts.iter().all(|p| p.tau == 5.0));
}

#[test]
fn empty_topology_gives_tau_one() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = RunConfig::parse(&bench_config("k = 2\ndrafter = untrained", "topology = empty\n"), dir.path()).unwrap();
    let r = cmd_bench(&cfg, &dir.path().join("o")).unwrap();
    assert_eq!(r.aggregate.tau, 1.0);
    assert!(r.prompts.iter().all(|p| p.rounds == p.tokens));
}

/// Recomputes every report number from `trace.jsonl` with plain JSON access.
#[test]
fn report_is_recomputable_from_trace() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = RunConfig::parse(&bench_config("k = 3\ndrafter = untrained", "temperature = 1\n"), dir.path()).unwrap();
    let out = dir.path().join("o");
    cmd_bench(&cfg, &out).unwrap();
    let report: Value = serde_json::from_str(&std::fs::read_to_string(out.join(REPORT_FILE)).unwrap()).unwrap();
    let trace: Vec<Value> = std::fs::read_to_string(out.join(TRACE_FILE))
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    let prompts = report["prompts"].as_array().unwrap();
    let mut taus = Vec::new();
    let mut speedups = Vec::new();
    for (i, p) in prompts.iter().enumerate() {
        let rows = |engine: &str| -> Vec<&Value> {
            trace.iter().filter(|l| l["engine"] == engine && l["prompt"] == i).collect()
        };
        let sum = |rows: &[&Value], f: &str| rows.iter().map(|r| r[f].as_u64().unwrap()).sum::<u64>();
        let spec = rows("speculative");
        let ar = rows("autoregressive");
        let committed = sum(&spec, "committed_tokens");
        let tau = committed as f64 / spec.len() as f64;
        assert_eq!(p["tau"].as_f64().unwrap(), tau);
        assert_eq!(p["rounds"].as_u64().unwrap(), spec.len() as u64);
        assert_eq!(p["tokens"].as_u64().unwrap(), committed);
        assert_eq!(p["draft_forwards"].as_u64().unwrap(), spec.len() as u64);
        assert_eq!(p["baseline_tokens"].as_u64().unwrap(), sum(&ar, "committed_tokens"));
        let wall = sum(&spec, "draft_ns") + sum(&spec, "verify_ns");
        let base = sum(&ar, "draft_ns") + sum(&ar, "verify_ns");
        let t = &report["timing"]["prompts"][i];
        assert_eq!(t["wall_ns"].as_u64().unwrap(), wall);
        assert_eq!(t["baseline_wall_ns"].as_u64().unwrap(), base);
        let speedup = base as f64 / wall as f64;
        assert!((t["speedup"].as_f64().unwrap() - speedup).abs() <= 1e-12 * speedup);
        assert!(tau >= 1.0 && speedup > 0.0);
        taus.push(tau);
        speedups.push(speedup);
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    assert!((report["aggregate"]["tau"].as_f64().unwrap() - mean(&taus)).abs() < 1e-12);
    assert!((report["timing"]["aggregate"]["speedup"].as_f64().unwrap() - mean(&speedups)).abs() < 1e-9);
    let csv = std::fs::read_to_string(out.join(METRICS_FILE)).unwrap();
    assert_eq!(csv.lines().count(), 1 + 2 * prompts.len());
}

#[test]
fn same_seed_gives_identical_report_outside_timing() {
    let dir = tempfile::tempdir().unwrap();
    let text = bench_config("k = 2\ndrafter = untrained", "temperature = 1\n");
    let cfg = RunConfig::parse(&text, dir.path()).unwrap();
    let read = |o: &str| std::fs::read_to_string(dir.path().join(o).join(REPORT_FILE)).unwrap();
    cmd_bench(&cfg, &dir.path().join("a")).unwrap();
    cmd_bench(&cfg, &dir.path().join("b")).unwrap();
    assert_eq!(deterministic_part(&read("a")).unwrap(), deterministic_part(&read("b")).unwrap());
    cmd_bench(&cfg.with_seed(Some(10)), &dir.path().join("c")).unwrap();
    assert_ne!(deterministic_part(&read("a")).unwrap(), deterministic_part(&read("c")).unwrap());
}

fn lossless_config(drafter: &str, extra: &str) -> String {
    format!(
        "[run]\nseed = 2\n[model]\ntarget = random-tabular\nvocab = 4\norder = 2\nconcentration = 0.5\nk = 2\ndrafter = {drafter}\n\
         [decode]\ntemperature = 1\n[lossless]\nlength = 3\ntrials = 1000000\n{extra}"
    )
}

#[test]
fn lossless_passes_for_conforming_engine() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = RunConfig::parse(&lossless_config("random-tabular", ""), dir.path()).unwrap();
    let r = cmd_lossless(&cfg, &dir.path().join("o")).unwrap();
    assert!(r.pass && r.tv < 0.01, "tv {}", r.tv);
    assert_eq!(r.marginal_tv.len(), 3);
    assert!(r.speculative_exact_tv < 0.01 && r.autoregressive_exact_tv < 0.01);
}

#[test]
fn lossless_passes_when_drafter_is_target() {
    let dir = tempfile::tempdir().unwrap();
    let text = lossless_config("oracle", "").replace("trials = 1000000", "trials = 200000");
    let cfg = RunConfig::parse(&text, dir.path()).unwrap();
    let r = cmd_lossless(&cfg, &dir.path().join("o")).unwrap();
    // Sampling noise over 64 outcomes at 2e5 trials is about 0.01.
    assert!(r.tv < 0.02, "tv {}", r.tv);
}

#[test]
fn lossless_fault_fixture_fails_with_nonzero_exit() {
    let dir = tempfile::tempdir().unwrap();
    let text = lossless_config("adversarial", "fault = always-accept\n").replace("trials = 1000000", "trials = 100000");
    write(dir.path(), "l.ini", &text);
    let out = specdec(dir.path(), &["lossless", "--config", "l.ini", "--out", "o"]);
    assert_eq!(out.status.code(), Some(1));
    let report: Value = serde_json::from_str(&std::fs::read_to_string(dir.path().join("o").join(REPORT_FILE)).unwrap()).unwrap();
    assert_eq!(report["pass"], false);
    assert!(report["tv"].as_f64().unwrap() > 0.1);
}

#[test]
fn lossless_rejects_non_tabular_targets() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = RunConfig::parse(&bench_config("k = 1\ndrafter = oracle", ""), dir.path()).unwrap();
    let e = cmd_lossless(&cfg, &dir.path().join("o")).unwrap_err().to_string();
    assert!(e.contains("model.target"), "{e}");
}

#[test]
fn ablate_k_rows_and_csv_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let text = bench_config("drafter = oracle", "topology = chain\ntemperature = 0\n") + "[ablate]\nks = 1, 2, 3, 4\n";
    let cfg = RunConfig::parse(&text, dir.path()).unwrap();
    let out = dir.path().join("o");
    let r = cmd_ablate_k(&cfg, &out, None).unwrap();
    let rows = read_ablation_csv(&out.join(METRICS_FILE)).unwrap();
    assert_eq!(rows, r.csv_rows());
    assert_eq!(rows.iter().map(|r| r.k).collect::<Vec<_>>(), vec![1, 2, 3, 4]);
    for row in &rows {
        assert_eq!(row.tau, row.k as f64 + 1.0);
    }
    let r = cmd_ablate_k(&cfg, &dir.path().join("p"), Some(vec![2])).unwrap();
    assert_eq!(r.rows.len(), 1);
}

#[test]
fn config_errors_exit_nonzero() {
    let dir = tempfile::tempdir().unwrap();
    write(dir.path(), "b.ini", "[model]\ntarget = missing.ckpt\nk = 1\ndrafter = oracle\n");
    let out = specdec(dir.path(), &["bench", "--config", "b.ini", "--out", "o"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("model.target"));
    let out = specdec(dir.path(), &["bench", "--config", "nope.ini"]);
    assert!(!out.status.success());
}
