//! `nevo`: Adam pretraining, DE fine-tuning, robustness evaluation.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 data or I/O
//! error, 3 numeric failure (non-finite loss, gradient or fitness).

mod common;
mod stages;
mod tools;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Parser, Subcommand};
use nevo::train::TrainError;

use common::{NumericError, UsageError};

#[derive(Parser)]
#[command(name = "nevo", version, about = "Adam pretraining followed by differential-evolution fine-tuning")]
struct Cli {
    /// Worker threads (results do not depend on it).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Write 0 for wall_ms in metric streams so reruns are byte-identical.
    #[arg(long, global = true)]
    no_wall_clock: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Download and verify a dataset into the cache (or --out).
    Fetch {
        #[arg(long)]
        dataset: String,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Mirror to download from instead of the built-in URL.
        #[arg(long)]
        base_url: Option<String>,
        /// Checksum manifest replacing the built-in one.
        #[arg(long)]
        manifest: Option<PathBuf>,
    },
    /// Adam pretraining; writes RUN/bp.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// DE fine-tuning seeded from RUN's checkpoint ring; writes RUN/de.
    Evolve {
        #[arg(long)]
        run: PathBuf,
        /// Defaults to the config the run was trained with.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Seed from random initializations instead; writes RUN/de_soup.
        #[arg(long)]
        soup: bool,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        generations: Option<usize>,
    },
    /// Accuracy of a checkpoint on a test split and/or corrupted copies.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        dataset: Option<String>,
        #[arg(long)]
        data_dir: Option<PathBuf>,
        /// Directory of <corruption>/test_images.npy + test_labels.npy.
        #[arg(long)]
        corrupted: Option<PathBuf>,
        /// Output of an earlier `eval --corrupted`; adds mCE columns.
        #[arg(long)]
        baseline: Option<PathBuf>,
        /// Also write the JSON result here.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 1024)]
        batch_size: usize,
    },
    /// Writes corrupted copies of a test split as NPY files.
    Corrupt {
        #[arg(long)]
        dataset: String,
        #[arg(long)]
        data_dir: Option<PathBuf>,
        /// Corruption name, or `all`.
        #[arg(long)]
        kind: String,
        #[arg(long)]
        severity: u8,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Only the first N test samples.
        #[arg(long)]
        limit: Option<usize>,
    },
    /// Merged accuracy table over run directories.
    Report {
        #[arg(long, num_args = 0..)]
        runs: Vec<PathBuf>,
        #[arg(long, default_value = "csv")]
        format: String,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// DE over the F x Cr x lr grid, pretraining missing runs first.
    Gridsearch {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Existing runs, one per learning rate.
        #[arg(long, num_args = 1..)]
        runs: Vec<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
}

fn run(cli: Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(common::usage("--threads must be at least 1"));
        }
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    let wall_clock = !cli.no_wall_clock;
    match cli.command {
        Command::Fetch {
            dataset,
            out,
            base_url,
            manifest,
        } => tools::cmd_fetch(&dataset, out, base_url, manifest),
        Command::Train {
            config,
            out,
            seed,
            epochs,
        } => stages::cmd_train(stages::TrainArgs {
            config,
            out,
            seed,
            epochs,
            wall_clock,
        }),
        Command::Evolve {
            run,
            config,
            soup,
            seed,
            generations,
        } => stages::cmd_evolve(stages::EvolveArgs {
            run,
            config,
            soup,
            seed,
            generations,
            wall_clock,
        }),
        Command::Eval {
            ckpt,
            dataset,
            data_dir,
            corrupted,
            baseline,
            out,
            batch_size,
        } => tools::cmd_eval(tools::EvalArgs {
            ckpt,
            dataset,
            data_dir,
            corrupted,
            baseline,
            out,
            batch_size,
        }),
        Command::Corrupt {
            dataset,
            data_dir,
            kind,
            severity,
            out,
            seed,
            limit,
        } => tools::cmd_corrupt(tools::CorruptArgs {
            dataset,
            data_dir,
            kind,
            severity,
            out,
            seed,
            limit,
        }),
        Command::Report { runs, format, out } => tools::cmd_report(&runs, &format, out),
        Command::Gridsearch { config, out, runs, seed } => stages::cmd_gridsearch(stages::GridArgs {
            config,
            out,
            runs,
            seed,
            wall_clock,
        }),
    }
}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.is::<UsageError>() {
            return 1;
        }
        if cause.is::<NumericError>() {
            return 3;
        }
        if let Some(TrainError::NonFinite { .. } | TrainError::BadGradient) = cause.downcast_ref::<TrainError>() {
            return 3;
        }
    }
    2
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
