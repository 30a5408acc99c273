//! `absa`: data preparation, training, grid experiments and prediction.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use absa_core::heads::HeadKind;
use absa_core::training::StopMetric;
use absa_core::AbsaError;
use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::config::RunConfig;

#[derive(Parser)]
#[command(name = "absa", version, about = "Aspect-based sentiment analysis toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic labelled corpus as JSON lines.
    Generate(GenerateArgs),
    /// Validate a corpus, split it and build the vocabulary from the training split.
    Prepare(PrepareArgs),
    /// Print category, label and length statistics of a corpus as JSON.
    Stats(StatsArgs),
    /// Train one model and save its best checkpoint and history.
    Train(TrainArgs),
    /// Run a head x encoder grid over several seeds and write aggregated reports.
    Experiment(ExperimentArgs),
    /// Score a checkpoint on a labelled split and print metrics as JSON.
    Evaluate(EvaluateArgs),
    /// Classify the sentiment toward one aspect of a sentence.
    Predict(PredictArgs),
}

#[derive(Args)]
pub struct ConfigArg {
    /// TOML run configuration; flags given on the command line take precedence.
    #[arg(long, env = "ABSA_CONFIG", value_name = "FILE")]
    pub config: Option<PathBuf>,
}

impl ConfigArg {
    pub fn load(&self) -> absa_core::Result<RunConfig> {
        match &self.config {
            Some(path) => RunConfig::load(path),
            None => Ok(RunConfig::default()),
        }
    }
}

#[derive(Args)]
pub struct GenerateArgs {
    /// Number of examples.
    #[arg(long, default_value_t = 3000)]
    pub n: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Number of distinct filler words.
    #[arg(long, default_value_t = 200)]
    pub vocab_size: usize,
    #[arg(long, value_name = "FILE")]
    pub out: PathBuf,
}

#[derive(Args)]
pub struct PrepareArgs {
    #[command(flatten)]
    pub config: ConfigArg,
    /// Input corpus (JSON lines).
    #[arg(long, value_name = "FILE")]
    pub data: Option<PathBuf>,
    /// Output directory for train/val/test files and vocab.txt.
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub train_frac: Option<f64>,
    #[arg(long)]
    pub val_frac: Option<f64>,
    #[arg(long)]
    pub test_frac: Option<f64>,
    #[arg(long)]
    pub split_seed: Option<u64>,
    /// Split without preserving label proportions.
    #[arg(long)]
    pub no_stratify: bool,
    /// Minimum training-split frequency for a vocabulary entry.
    #[arg(long)]
    pub min_freq: Option<usize>,
}

#[derive(Args)]
pub struct StatsArgs {
    /// Input corpus (JSON lines).
    #[arg(long, value_name = "FILE")]
    pub data: PathBuf,
    /// Width of the token-length histogram bins.
    #[arg(long, default_value_t = 10)]
    pub bin_width: usize,
    /// Write the report here instead of standard output.
    #[arg(long, value_name = "FILE")]
    pub out: Option<PathBuf>,
}

/// Flags shared by `train` and `experiment`.
#[derive(Args)]
pub struct RunArgs {
    #[command(flatten)]
    pub config: ConfigArg,
    /// Directory written by `prepare`.
    #[arg(long, value_name = "DIR")]
    pub prepared: Option<PathBuf>,
    /// Directory with train.emb, val.emb and test.emb for the precomputed encoder.
    #[arg(long, value_name = "DIR")]
    pub features: Option<PathBuf>,
    #[arg(long)]
    pub max_len: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub dropout: Option<f64>,
    /// Epochs without improvement before stopping.
    #[arg(long, conflicts_with = "no_early_stop")]
    pub patience: Option<usize>,
    /// Train for the full epoch count.
    #[arg(long)]
    pub no_early_stop: bool,
    /// Validation metric watched by early stopping.
    #[arg(long, value_enum)]
    pub metric: Option<MetricArg>,
    #[arg(long)]
    pub warmup_steps: Option<usize>,
}

#[derive(Clone, Copy, ValueEnum)]
pub enum MetricArg {
    ValAccuracy,
    ValMacroF1,
    ValLoss,
}

impl From<MetricArg> for StopMetric {
    fn from(m: MetricArg) -> Self {
        match m {
            MetricArg::ValAccuracy => StopMetric::ValAccuracy,
            MetricArg::ValMacroF1 => StopMetric::ValMacroF1,
            MetricArg::ValLoss => StopMetric::ValLoss,
        }
    }
}

#[derive(Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub run: RunArgs,
    /// Encoder preset (tiny, mini, bert-base, covid-twitter-bert) or `precomputed`.
    #[arg(long)]
    pub preset: Option<String>,
    #[arg(long)]
    pub head: Option<HeadKind>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, value_name = "FILE")]
    pub checkpoint: Option<PathBuf>,
    #[arg(long, value_name = "FILE")]
    pub history: Option<PathBuf>,
}

#[derive(Args)]
pub struct ExperimentArgs {
    #[command(flatten)]
    pub run: RunArgs,
    /// Comma-separated head kinds.
    #[arg(long, value_delimiter = ',')]
    pub heads: Option<Vec<HeadKind>>,
    /// Comma-separated encoder presets.
    #[arg(long, value_delimiter = ',')]
    pub presets: Option<Vec<String>>,
    /// Comma-separated seeds.
    #[arg(long, value_delimiter = ',')]
    pub seeds: Option<Vec<u64>>,
    /// Output directory for the manifest, histories and reports.
    #[arg(long, value_name = "DIR")]
    pub reports: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
pub enum SplitArg {
    Train,
    Val,
    Test,
}

impl SplitArg {
    pub fn name(self) -> &'static str {
        match self {
            SplitArg::Train => "train",
            SplitArg::Val => "val",
            SplitArg::Test => "test",
        }
    }
}

#[derive(Args)]
pub struct EvaluateArgs {
    #[command(flatten)]
    pub config: ConfigArg,
    #[arg(long, value_name = "FILE")]
    pub checkpoint: Option<PathBuf>,
    /// Prepared split to score.
    #[arg(long, value_enum, default_value = "test")]
    pub split: SplitArg,
    #[arg(long, value_name = "DIR")]
    pub prepared: Option<PathBuf>,
    /// Explicit labelled file; overrides --split.
    #[arg(long, value_name = "FILE")]
    pub data: Option<PathBuf>,
    /// Embedding file for --data, or a directory of per-split files.
    #[arg(long, value_name = "PATH")]
    pub features: Option<PathBuf>,
}

#[derive(Args)]
pub struct PredictArgs {
    #[arg(long, value_name = "FILE")]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub text: String,
    /// Aspect term; its first occurrence in the text is used.
    #[arg(long, conflicts_with = "span", required_unless_present = "span")]
    pub aspect: Option<String>,
    /// Aspect span as START:END character offsets, end exclusive.
    #[arg(long, value_parser = parse_span)]
    pub span: Option<(usize, usize)>,
    /// Print a JSON object instead of text.
    #[arg(long)]
    pub json: bool,
}

fn parse_span(s: &str) -> Result<(usize, usize), String> {
    let (a, b) = s
        .split_once(':')
        .ok_or_else(|| format!("expected START:END, got {s:?}"))?;
    let parse = |v: &str| v.trim().parse::<usize>().map_err(|e| format!("{v:?}: {e}"));
    Ok((parse(a)?, parse(b)?))
}

/// Process exit status for an error.
fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<AbsaError>() {
        Some(AbsaError::Config(_)) => 3,
        Some(
            AbsaError::Parse { .. }
            | AbsaError::Validation { .. }
            | AbsaError::Stratification(_)
            | AbsaError::Encoding(_)
            | AbsaError::Label { .. },
        ) => 4,
        Some(AbsaError::Diverged { .. }) => 5,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Generate(a) => commands::generate(&a),
        Command::Prepare(a) => commands::prepare(&a),
        Command::Stats(a) => commands::stats(&a),
        Command::Train(a) => commands::train(&a),
        Command::Experiment(a) => commands::experiment(&a),
        Command::Evaluate(a) => commands::evaluate(&a),
        Command::Predict(a) => commands::predict(&a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
