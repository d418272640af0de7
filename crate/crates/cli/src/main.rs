//! `mekb`: end-to-end pipeline from raw dataset files to an evaluation
//! report. Run `synth` to generate a seeded dataset with a ready config,
//! then `build-alias`, `link`, `build-mekb`, `train-vocab`, `pretrain`,
//! `train`, `evaluate`, `retrieve` in order.

mod commands;
mod config;
mod pipeline;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use commands::{InitMode, SynthArgs};
use config::PipelineConfig;
use pipeline::{CliError, CliResult};

#[derive(Parser)]
#[command(name = "mekb", about = "Personal-knowledge-graph cross-domain recommender pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a seeded synthetic dataset and its config file.
    Synth {
        /// Output directory for data files and config.toml.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long)]
        users: Option<usize>,
        #[arg(long)]
        topics: Option<usize>,
        #[arg(long)]
        entities: Option<usize>,
        #[arg(long)]
        source_items: Option<usize>,
        #[arg(long)]
        target_items: Option<usize>,
        /// Planted-separable preset (one target item per topic).
        #[arg(long)]
        separable: bool,
    },
    /// Build the mention -> entity alias table from the anchor corpus.
    BuildAlias {
        #[arg(long)]
        config: PathBuf,
    },
    /// Link every item's text and attributes to knowledge-graph entities.
    Link {
        #[arg(long)]
        config: PathBuf,
    },
    /// Aggregate per-user interest profiles (MeKBs).
    BuildMekb {
        #[arg(long)]
        config: PathBuf,
    },
    /// Train the subword vocabulary over entity titles.
    TrainVocab {
        #[arg(long)]
        config: PathBuf,
    },
    /// Masked-token pretraining of the user encoder.
    Pretrain {
        #[arg(long)]
        config: PathBuf,
    },
    /// Dual-encoder fine-tuning on the target-domain train split.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_enum, default_value_t = InitMode::Auto)]
        init: InitMode,
    },
    /// Rank the test split and write the frequency-binned report.
    Evaluate {
        #[arg(long)]
        config: PathBuf,
    },
    /// Print the top-n target items for one user.
    Retrieve {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        user: String,
        #[arg(long, default_value_t = 10)]
        top: usize,
    },
}

fn load_config(path: &PathBuf) -> CliResult<PipelineConfig> {
    pipeline::require_file(path)?;
    PipelineConfig::load(path).map_err(CliError::generic)
}

fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Synth { out, seed, users, topics, entities, source_items, target_items, separable } => {
            commands::synth(&SynthArgs {
                out,
                seed,
                users,
                topics,
                entities,
                source_items,
                target_items,
                separable,
            })
        }
        Command::BuildAlias { config } => commands::build_alias(&load_config(&config)?),
        Command::Link { config } => commands::link(&load_config(&config)?),
        Command::BuildMekb { config } => commands::build_mekb_cmd(&load_config(&config)?),
        Command::TrainVocab { config } => commands::train_vocab_cmd(&load_config(&config)?),
        Command::Pretrain { config } => commands::pretrain(&load_config(&config)?),
        Command::Train { config, init } => commands::train(&load_config(&config)?, init),
        Command::Evaluate { config } => commands::evaluate_cmd(&load_config(&config)?),
        Command::Retrieve { config, user, top } => {
            commands::retrieve(&load_config(&config)?, &user, top)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError { code, error }) => {
            eprintln!("error: {error:#}");
            ExitCode::from(code as u8)
        }
    }
}
