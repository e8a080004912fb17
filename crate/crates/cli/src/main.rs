//! `zeroprompt` command-line tool.
//!
//! Exit codes: 0 on success, 2 for usage errors, 1 for anything that goes
//! wrong at run time.

mod commands;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(name = "zeroprompt", version, about = "Chunk-streaming CTC decoding with zero-prompt display")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train the toy model on a synthetic corpus.
    TrainToy(TrainToyArgs),
    /// Stream a corpus through a model and write the display timeline.
    Decode(DecodeArgs),
    /// Sweep chunk sizes, prompt lengths and start layers; write a report.
    Bench(BenchArgs),
    /// Print the attention mask for one chunk step.
    InspectMask(InspectMaskArgs),
}

#[derive(Debug, clap::Args)]
pub struct TrainToyArgs {
    #[arg(long, default_value_t = zeroprompt::trainer::TOY_SEED)]
    pub seed: u64,
    /// Output directory; created if missing.
    #[arg(long)]
    pub out: PathBuf,
    /// Override the recipe's epoch count.
    #[arg(long)]
    pub epochs: Option<usize>,
}

#[derive(Debug, clap::Args)]
pub struct DecodeArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Corpus file of feature matrices.
    #[arg(long)]
    pub feats: PathBuf,
    /// Output directory for `timeline.jsonl` and `manifest.json`.
    #[arg(long)]
    pub out: PathBuf,
    /// Defaults to the model's training chunk.
    #[arg(long)]
    pub chunk_ms: Option<u32>,
    #[arg(long, default_value = "causal", value_parser = ["causal", "zeroprompt", "lookahead"])]
    pub mode: String,
    /// Defaults to one chunk.
    #[arg(long)]
    pub zp_ms: Option<u32>,
    /// -1 disables the prompt; defaults to 0.
    #[arg(long, allow_hyphen_values = true)]
    pub start_layer: Option<i32>,
    /// Defaults to one chunk.
    #[arg(long)]
    pub lookahead_ms: Option<u32>,
    /// Worker threads; defaults to the number of CPUs.
    #[arg(long)]
    pub threads: Option<usize>,
}

#[derive(Debug, clap::Args)]
pub struct BenchArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub corpus: PathBuf,
    /// Output directory for `report.json`, `report.txt` and `manifest.json`.
    #[arg(long)]
    pub out: PathBuf,
    /// Comma-separated; defaults to the model's training chunk.
    #[arg(long, value_delimiter = ',')]
    pub chunk_ms: Option<Vec<u32>>,
    /// Comma-separated; defaults to `0,<chunk>`.
    #[arg(long, value_delimiter = ',')]
    pub zp_ms: Option<Vec<u32>>,
    /// Comma-separated; defaults to `0`.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    pub start_layer: Option<Vec<i32>>,
    /// Timing is measured single-threaded; only 1 is accepted.
    #[arg(long, default_value_t = 1)]
    pub threads: usize,
}

#[derive(Debug, clap::Args)]
pub struct InspectMaskArgs {
    #[arg(long, default_value_t = 0)]
    pub cache: usize,
    #[arg(long, default_value_t = 2)]
    pub real: usize,
    #[arg(long, default_value_t = 0)]
    pub zp: usize,
    #[arg(long, default_value_t = 2)]
    pub block: usize,
}

/// Errors carry the exit code they map to.
#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Runtime(anyhow::Error),
}

impl<E: Into<anyhow::Error>> From<E> for CliError {
    fn from(e: E) -> Self {
        CliError::Runtime(e.into())
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(e.exit_code() as u8);
        }
    };
    let result = match cli.command {
        Command::TrainToy(a) => commands::train_toy(&a),
        Command::Decode(a) => commands::decode(&a),
        Command::Bench(a) => commands::bench(&a),
        Command::InspectMask(a) => commands::inspect_mask(&a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(CliError::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
