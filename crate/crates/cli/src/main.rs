//! `mpo`: command-line driver for the preference optimization pipeline.

mod commands;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use mpo_core::Error;

const LONG_VERSION: &str = concat!(
    env!("CARGO_PKG_VERSION"),
    "\ncheckpoint format 1\nconfig schema 1\nmanifest format 1"
);

#[derive(Parser, Debug)]
#[command(name = "mpo", version, long_version = LONG_VERSION, about = "Multidimensional preference optimization pipeline")]
pub struct Cli {
    /// Base seed for every random choice the command makes.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Key-value config file; flags given on the command line win.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Upper bound on worker threads.
    #[arg(long, global = true)]
    pub workers: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

/// Config overrides shared by the training-related commands.
#[derive(Args, Debug, Default, Clone)]
pub struct Overrides {
    /// Any config key, e.g. `--set top_k=20`. May be repeated.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    #[arg(long)]
    pub steps: Option<u64>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub beta: Option<f64>,
    #[arg(long)]
    pub lambda: Option<f64>,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
pub enum Style {
    Studio,
    Found,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
pub enum Mode {
    DpoOnly,
    Mpo,
    CombinedRankings,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate the synthetic world (token tables and speakers).
    MakeWorld {
        #[arg(long)]
        out: PathBuf,
    },
    /// Sample a corpus of prompts with reference responses.
    MakeCorpus {
        #[arg(long)]
        world: PathBuf,
        #[arg(long)]
        n: usize,
        #[arg(long, value_enum, default_value = "studio")]
        style: Style,
        /// Corpora whose prompts must not reappear.
        #[arg(long)]
        exclude: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Supervised training on a corpus.
    Sft {
        #[arg(long)]
        world: PathBuf,
        #[arg(long)]
        train: PathBuf,
        #[arg(long)]
        heldout: PathBuf,
        /// Continue from this checkpoint instead of a fresh model.
        #[arg(long)]
        init: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Sample and score candidate responses for every prompt.
    GenCandidates {
        #[arg(long)]
        world: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        /// Candidates per prompt (defaults to the config's `n_candidates`).
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Turn scored candidates into preference sets.
    BuildPrefset {
        #[arg(long)]
        candidates: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Preference optimization from an SFT checkpoint.
    Train {
        #[arg(long, value_enum)]
        mode: Mode,
        #[arg(long)]
        world: PathBuf,
        #[arg(long)]
        sft: PathBuf,
        #[arg(long)]
        prefset: PathBuf,
        #[arg(long)]
        heldout: PathBuf,
        /// Supervised corpus for `ce_source = held-out-sft-data`.
        #[arg(long)]
        ce_data: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Greedy-decode the held-out prompts and score them.
    Eval {
        #[arg(long)]
        world: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        heldout: PathBuf,
        /// Row label used by `compare` (defaults to the model file stem).
        #[arg(long)]
        name: Option<String>,
        #[arg(long, default_value_t = 40)]
        max_len: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Tabulate evaluation reports against the first one.
    Compare {
        #[arg(required = true)]
        reports: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Io { .. } | Error::Format { .. } => 2,
        Error::Config { .. } => 3,
        Error::Divergence { .. } => 4,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli.workers {
        if n == 0 {
            eprintln!("error: invalid config field `workers`: must be positive");
            return ExitCode::from(3);
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .expect("thread pool is configured once");
    }
    match commands::run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
