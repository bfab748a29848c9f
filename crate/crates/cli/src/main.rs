//! `snf`: train, evaluate, sample, benchmark and diagnose self normalizing
//! flows.
//!
//! Exit codes: 0 on success, 1 when training or evaluation breaks down
//! numerically, 2 for usage and configuration errors (including unreadable
//! inputs such as a missing checkpoint).

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use snf_core::gradients::GradMode;
use snf_core::SnfError;

use crate::commands::BenchArgs;
use crate::config::RunOpts;

#[derive(Parser)]
#[command(name = "snf", version, about = "Self normalizing flows: training, exact evaluation and diagnostics")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model; writes metrics.csv, best.ckpt, final.ckpt and config.txt.
    Train(RunOpts),
    /// Exact NLL of a checkpoint on a data split, through the amortized
    /// log-determinant cache.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// train, val or all.
        #[arg(long, default_value = "val")]
        split: String,
        /// Nudge one parameter by this amount and evaluate again, to show the
        /// cache being rebuilt.
        #[arg(long)]
        perturb: Option<f64>,
        #[command(flatten)]
        opts: RunOpts,
    },
    /// Draw samples through the learned and/or the exact inverse.
    Sample {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 64)]
        n: usize,
        /// learned, exact or both.
        #[arg(long, default_value = "both")]
        inverse: String,
        #[command(flatten)]
        opts: RunOpts,
    },
    /// Time one gradient step of a single fully connected layer across sizes.
    Bench {
        #[arg(long, value_delimiter = ',', default_value = "64,128,256,512,1024")]
        dims: Vec<usize>,
        #[arg(long, value_delimiter = ',', default_value = "snf,exact")]
        modes: Vec<GradMode>,
        #[arg(long, default_value_t = 128)]
        batch: usize,
        /// Timed batches per size.
        #[arg(long, default_value_t = 5)]
        batches: usize,
        /// Untimed batches run first at each size.
        #[arg(long, default_value_t = 2)]
        warmup_batches: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Accepted for uniformity; the benchmark always runs on one thread.
        #[arg(long, default_value_t = 1)]
        threads: usize,
        #[arg(long, default_value = "snf-run")]
        out: PathBuf,
    },
    /// Train in self-normalizing mode and record the angle to the exact
    /// gradient; writes angles.csv.
    DiagAngle {
        /// Measure every n-th batch.
        #[arg(long, default_value_t = 10)]
        every: usize,
        #[command(flatten)]
        opts: RunOpts,
    },
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Train(opts) => commands::train(opts),
        Command::Eval {
            checkpoint,
            split,
            perturb,
            opts,
        } => commands::eval(opts, &checkpoint, &split, perturb),
        Command::Sample {
            checkpoint,
            n,
            inverse,
            opts,
        } => commands::sample(opts, &checkpoint, n, &inverse),
        Command::Bench {
            dims,
            modes,
            batch,
            batches,
            warmup_batches,
            seed,
            threads,
            out,
        } => {
            if threads != 1 {
                eprintln!("note: timing runs single-threaded; ignoring --threads {threads}");
            }
            commands::bench(BenchArgs {
                dims,
                modes,
                batch,
                batches,
                warmup_batches,
                seed,
                out,
            })
        }
        Command::DiagAngle { every, opts } => commands::diag_angle(opts, every),
    }
}

/// Numerical breakdown maps to 1; everything else is a usage or input
/// problem.
fn exit_code(err: &anyhow::Error) -> u8 {
    let numerical = err.chain().any(|e| {
        matches!(
            e.downcast_ref::<SnfError>(),
            Some(SnfError::Diverged { .. } | SnfError::SingularMatrix { .. } | SnfError::NoConvergence { .. })
        )
    });
    if numerical {
        1
    } else {
        2
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
