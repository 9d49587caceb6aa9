use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use specdec_cli::{cmd_ablate_k, cmd_bench, cmd_lossless, cmd_train, CliResult, RunConfig};

#[derive(Parser)]
#[command(name = "specdec", version, about = "Parallel-drafting speculative decoding on desk-scale models")]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// Run configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Overrides `[run] seed`.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Output directory (default: `[run] out`, else `specdec-out`).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Train a drafter (or a target) and write checkpoint, loss log and report.
    Train,
    /// Speculative vs autoregressive decoding over a prompt set.
    Bench,
    /// Compare speculative and autoregressive output distributions on a tabular target.
    Lossless,
    /// Sweep the number of mask tokens K.
    AblateK {
        /// Comma-separated K values; overrides `[ablate] ks`.
        #[arg(long, value_delimiter = ',')]
        ks: Option<Vec<usize>>,
    },
}

fn run(cli: Cli) -> CliResult<bool> {
    let config = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    }
    .with_seed(cli.seed);
    let out = match (&cli.out, config.get("run", "out")) {
        (Some(o), _) => o.clone(),
        (None, Some(o)) => config.resolve(o),
        (None, None) => PathBuf::from("specdec-out"),
    };
    match cli.command {
        Command::Train => {
            let r = cmd_train(&config, &out)?;
            println!(
                "trained {} (K={}) for {} steps, final loss {:.4}; wrote {}",
                r.role,
                r.k,
                r.steps,
                r.final_loss,
                out.join(&r.checkpoint).display()
            );
        }
        Command::Bench => {
            let r = cmd_bench(&config, &out)?;
            println!(
                "tau {:.4} over {} prompts, speedup {:.3}x; wrote {}",
                r.aggregate.tau,
                r.prompts.len(),
                r.timing.aggregate.speedup,
                out.display()
            );
        }
        Command::Lossless => {
            let r = cmd_lossless(&config, &out)?;
            println!(
                "{}: TV {:.5} (threshold {}) over {} trials",
                if r.pass { "PASS" } else { "FAIL" },
                r.tv,
                r.threshold,
                r.trials
            );
            return Ok(r.pass);
        }
        Command::AblateK { ks } => {
            let r = cmd_ablate_k(&config, &out, ks)?;
            for (row, t) in r.rows.iter().zip(&r.timing.rows) {
                println!("K={} tau={:.4} speedup={:.3}x", row.k, row.tau, t.speedup);
            }
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
