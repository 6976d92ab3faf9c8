//! `ren`: train, evaluate and inspect relevance-encoding VAEs from config files.

mod commands;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

/// Errors caused by the invocation rather than by the computation.
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

#[derive(Parser, Debug)]
#[command(name = "ren", version, about = "Relevance-encoding VAE experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a model; writes a checkpoint, the epoch log and a run manifest.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Resume from this checkpoint instead of starting fresh.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        /// Also save a checkpoint every N epochs (0 = only at the end).
        #[arg(long, default_value_t = 0)]
        save_every: usize,
        /// Suppress per-epoch progress on stderr.
        #[arg(long)]
        quiet: bool,
    },
    /// Evaluate a checkpoint: reconstruction MSE, relevance ranking, energy distance.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset name or config file; defaults to the checkpoint's own dataset.
        #[arg(long)]
        dataset: Option<String>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        n_generate: Option<usize>,
    },
    /// Write plot data (scatters, reconstructions, generations, relevance bars) as CSV.
    DumpPlots {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: Option<String>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        n_generate: Option<usize>,
    },
    /// Generate toy data as CSV, or write image data as IDX files.
    GenData {
        #[arg(long)]
        dataset: Option<String>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Convert a `label,pixel,...` CSV (one image per line) instead.
        #[arg(long, conflicts_with = "from_raw")]
        from_csv: Option<PathBuf>,
        /// Convert a raw dump of unsigned-byte pixels instead.
        #[arg(long)]
        from_raw: Option<PathBuf>,
        #[arg(long, requires = "width")]
        height: Option<usize>,
        #[arg(long, requires = "height")]
        width: Option<usize>,
        /// With --from-csv: write a stratified subsample of this many images as the
        /// training split and the rest as the test split.
        #[arg(long, requires = "from_csv")]
        train_count: Option<usize>,
        /// With --from-csv: the label is the last field of each line, not the first.
        #[arg(long, requires = "from_csv")]
        label_last: bool,
    },
    /// Print a checkpoint's manifest as JSON.
    Inspect {
        #[arg(long)]
        checkpoint: PathBuf,
    },
}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.downcast_ref::<UsageError>().is_some() {
            return 2;
        }
        if let Some(e) = cause.downcast_ref::<ren_core::Error>() {
            return match e {
                ren_core::Error::Config(_) | ren_core::Error::InvalidArgument(_) => 2,
                _ => 1,
            };
        }
    }
    1
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    let result = match cli.command {
        Command::Train {
            config,
            checkpoint,
            out,
            seed,
            save_every,
            quiet,
        } => commands::train(commands::TrainArgs {
            config,
            checkpoint,
            out,
            seed,
            save_every,
            quiet,
        }),
        Command::Eval {
            checkpoint,
            dataset,
            out,
            seed,
            n_generate,
        } => commands::eval(&commands::EvalArgs {
            checkpoint,
            dataset,
            out,
            seed,
            n_generate,
        }),
        Command::DumpPlots {
            checkpoint,
            dataset,
            out,
            seed,
            n_generate,
        } => commands::dump_plots(&commands::EvalArgs {
            checkpoint,
            dataset,
            out,
            seed,
            n_generate,
        }),
        Command::GenData {
            dataset,
            config,
            out,
            seed,
            from_csv,
            from_raw,
            height,
            width,
            train_count,
            label_last,
        } => commands::gen_data(commands::GenDataArgs {
            dataset,
            config,
            out,
            seed,
            from_csv,
            from_raw,
            shape: height.zip(width),
            train_count,
            label_last,
        }),
        Command::Inspect { checkpoint } => commands::inspect(&checkpoint),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            for cause in e.chain().skip(1) {
                eprintln!("  caused by: {cause}");
            }
            ExitCode::from(exit_code(&e))
        }
    }
}
