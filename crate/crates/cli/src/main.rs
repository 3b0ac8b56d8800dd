mod commands;
mod config;

use std::fmt;
use std::path::PathBuf;
use std::process::ExitCode;

use acsa_core::model::ModelVariant;
use clap::{Args, Parser, Subcommand};

#[derive(Parser, Debug)]
#[command(name = "acsa", version, about = "Joint aspect-category sentiment analysis")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train one or more seeded runs and write checkpoints and reports.
    Train(TrainArgs),
    /// Score a checkpoint on an annotated corpus.
    Evaluate(EvaluateArgs),
    /// Predict aspect categories and polarities for raw texts.
    Predict(PredictArgs),
    /// Write the seeded synthetic corpus and its label file.
    GenSynth(GenSynthArgs),
    /// Print trainable parameter counts for a model configuration.
    Census(CensusArgs),
}

/// Options shared by commands that resolve a run configuration.
#[derive(Args, Debug, Default)]
struct ConfigArgs {
    /// TOML run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one setting, e.g. `train.alpha_sc=0.6`; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long, value_parser = parse_variant)]
    variant: Option<ModelVariant>,
    /// Label-space file.
    #[arg(long)]
    labels: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[command(flatten)]
    common: ConfigArgs,
    /// Training corpus (.xml or .jsonl).
    #[arg(long)]
    data: Option<PathBuf>,
    /// Validation corpus; split off the training corpus when absent.
    #[arg(long)]
    val: Option<PathBuf>,
    /// Held-out test corpus; reports use the validation split when absent.
    #[arg(long)]
    test: Option<PathBuf>,
    /// Pretrained word vectors in text format.
    #[arg(long)]
    embeddings: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    runs: Option<usize>,
    #[arg(long)]
    tau: Option<f64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct EvaluateArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Corpus format; inferred from the extension when omitted.
    #[arg(long)]
    format: Option<String>,
    /// Expected label space; must match the checkpoint's.
    #[arg(long)]
    labels: Option<PathBuf>,
    /// Detection threshold; defaults to the checkpoint's.
    #[arg(long)]
    tau: Option<f64>,
    /// Also write the report here (JSON for `.json`, text otherwise).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct PredictArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Text to analyse; repeatable.
    #[arg(long)]
    text: Vec<String>,
    /// File with one text per line.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    tau: Option<f64>,
    /// Include the four attention weight vectors per predicted aspect.
    #[arg(long)]
    attention: bool,
}

#[derive(Args, Debug)]
struct GenSynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = acsa_core::data::synth::DEFAULT_SIZE)]
    size: usize,
    #[arg(long, default_value_t = acsa_core::data::synth::DEFAULT_SEED)]
    seed: u64,
}

#[derive(Args, Debug)]
struct CensusArgs {
    #[command(flatten)]
    common: ConfigArgs,
    /// Report the model stored in a checkpoint instead.
    #[arg(long, conflicts_with_all = ["aspects", "polarities", "vocab_size"])]
    checkpoint: Option<PathBuf>,
    #[arg(long, default_value_t = 5)]
    aspects: usize,
    #[arg(long, default_value_t = 3)]
    polarities: usize,
    #[arg(long, default_value_t = 5000)]
    vocab_size: usize,
    /// Print JSON instead of text.
    #[arg(long)]
    json: bool,
}

fn parse_variant(s: &str) -> Result<ModelVariant, String> {
    s.parse().map_err(|e: acsa_core::Error| e.to_string())
}

#[derive(Debug)]
pub struct CliError {
    pub code: u8,
    pub message: String,
}

impl CliError {
    pub const USAGE: u8 = 1;
    pub const DATA: u8 = 2;
    pub const RUNTIME: u8 = 3;

    pub fn usage(message: impl Into<String>) -> Self {
        Self { code: Self::USAGE, message: message.into() }
    }

    pub fn data(message: impl Into<String>) -> Self {
        Self { code: Self::DATA, message: message.into() }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl From<acsa_core::Error> for CliError {
    fn from(e: acsa_core::Error) -> Self {
        let code = match e.kind() {
            acsa_core::ErrorKind::Usage => Self::USAGE,
            acsa_core::ErrorKind::Data => Self::DATA,
            acsa_core::ErrorKind::Runtime => Self::RUNTIME,
        };
        Self { code, message: e.to_string() }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(CliError::USAGE) } else { ExitCode::SUCCESS };
        }
    };
    let result = match cli.command {
        Command::Train(a) => commands::train(a),
        Command::Evaluate(a) => commands::evaluate(a),
        Command::Predict(a) => commands::predict(a),
        Command::GenSynth(a) => commands::gen_synth(a),
        Command::Census(a) => commands::census(a),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code)
        }
    }
}
