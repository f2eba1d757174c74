use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use evirank::bm25::IdfScope;
use evirank::coverage::EncoderSharing;
use evirank::strength::{Method, DEFAULT_STRENGTH_K};
use serde::Serialize;

#[derive(Debug, Parser)]
#[command(
    name = "evirank",
    version,
    about = "Evidence-aggregating answer re-rankers for open-domain QA"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Re-rank candidate answers and write predictions
    Rerank(RerankArgs),
    /// Train the coverage re-ranker
    Train(TrainArgs),
    /// Score a predictions file against gold answers
    Eval(EvalArgs),
    /// Finite-difference check of the coverage network gradients
    Gradcheck(GradcheckArgs),
    /// Print dataset statistics
    Stats(StatsArgs),
    /// Generate a synthetic dataset with matching embeddings
    Synth(SynthArgs),
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Rerank(_) => "rerank",
            Command::Train(_) => "train",
            Command::Eval(_) => "eval",
            Command::Gradcheck(_) => "gradcheck",
            Command::Stats(_) => "stats",
            Command::Synth(_) => "synth",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum MethodArg {
    Count,
    Prob,
    Bm25,
    Coverage,
    Full,
}

impl MethodArg {
    pub fn method(self) -> Method {
        match self {
            MethodArg::Count => Method::Count,
            MethodArg::Prob => Method::Prob,
            MethodArg::Bm25 => Method::Bm25,
            MethodArg::Coverage => Method::Coverage,
            MethodArg::Full => Method::Full,
        }
    }

    pub fn needs_model(self) -> bool {
        matches!(self, MethodArg::Coverage | MethodArg::Full)
    }

    pub fn default_k(self) -> usize {
        match self {
            MethodArg::Count | MethodArg::Prob => DEFAULT_STRENGTH_K,
            _ => 5,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum IdfArg {
    Question,
    Corpus,
}

impl From<IdfArg> for IdfScope {
    fn from(v: IdfArg) -> Self {
        match v {
            IdfArg::Question => IdfScope::Question,
            IdfArg::Corpus => IdfScope::Corpus,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum SharingArg {
    Shared,
    Separate,
}

impl From<SharingArg> for EncoderSharing {
    fn from(v: SharingArg) -> Self {
        match v {
            SharingArg::Shared => EncoderSharing::Shared,
            SharingArg::Separate => EncoderSharing::Separate,
        }
    }
}

#[derive(Debug, Args, Serialize)]
pub struct RerankArgs {
    /// Questions with passages and candidates (JSONL)
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_enum)]
    pub method: MethodArg,
    /// List size: reader spans for count/prob, candidate answers otherwise.
    /// Defaults to 50 for count/prob and 5 for the rest
    #[arg(long)]
    pub k: Option<usize>,
    /// Span budget of the count and prob inputs to --method full
    #[arg(long, default_value_t = DEFAULT_STRENGTH_K)]
    pub strength_k: usize,
    /// Coverage checkpoint, required by coverage and full
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Word vectors the checkpoint was trained with
    #[arg(long)]
    pub embeddings: Option<PathBuf>,
    /// Combination weights for full, as count,prob,coverage
    #[arg(long, conflicts_with = "grid_step")]
    pub weights: Option<String>,
    /// Pick full's weights by grid search on --dev with this spacing
    #[arg(long, requires = "dev")]
    pub grid_step: Option<f64>,
    #[arg(long)]
    pub dev: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = IdfArg::Question)]
    pub idf: IdfArg,
    #[arg(long, default_value_t = 1.2)]
    pub k1: f64,
    #[arg(long, default_value_t = 0.75)]
    pub b: f64,
    /// Predictions file (JSONL); a manifest is written next to it
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct TrainArgs {
    #[arg(long)]
    pub train: PathBuf,
    #[arg(long)]
    pub dev: PathBuf,
    /// Word vectors; out-of-vocabulary tokens embed as zeros
    #[arg(long)]
    pub embeddings: Option<PathBuf>,
    /// Receives checkpoint.json, history.csv and manifest.json
    #[arg(long)]
    pub out_dir: PathBuf,
    #[arg(long, default_value_t = 5)]
    pub k: usize,
    #[arg(long, default_value_t = 0.002)]
    pub lr: f64,
    #[arg(long, default_value_t = 30)]
    pub batch: usize,
    #[arg(long, default_value_t = 0.2)]
    pub dropout: f64,
    #[arg(long, default_value_t = 20)]
    pub epochs: usize,
    #[arg(long, default_value_t = 13)]
    pub seed: u64,
    #[arg(long, default_value_t = 32)]
    pub l: usize,
    #[arg(long, default_value_t = 16)]
    pub d: usize,
    #[arg(long, value_enum, default_value_t = SharingArg::Shared)]
    pub sharing: SharingArg,
    #[arg(long, default_value_t = 400)]
    pub max_union_len: usize,
    #[arg(long, default_value_t = 60)]
    pub max_q_len: usize,
    #[arg(long, default_value_t = 10)]
    pub max_a_len: usize,
    /// Probability given to injected gold candidates
    #[arg(long, default_value_t = 0.0)]
    pub gold_prob_floor: f64,
}

#[derive(Debug, Args, Serialize)]
pub struct EvalArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub predictions: PathBuf,
    /// Top-k recall upper bounds for these k, e.g. 1,3,5
    #[arg(long, value_delimiter = ',')]
    pub recall: Option<Vec<usize>>,
    /// Also write the recall table as CSV
    #[arg(long, requires = "recall")]
    pub recall_csv: Option<PathBuf>,
    /// Scores per gold answer length
    #[arg(long)]
    pub breakdown: bool,
    /// Print the report as JSON instead of text
    #[arg(long)]
    pub json: bool,
}

#[derive(Debug, Args, Serialize)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    /// Number of consecutive seeds to check, starting at --seed
    #[arg(long, default_value_t = 1)]
    pub seeds: u64,
    #[arg(long, default_value_t = 1e-5)]
    pub h: f64,
    #[arg(long, value_enum, default_value_t = SharingArg::Shared)]
    pub sharing: SharingArg,
}

#[derive(Debug, Args, Serialize)]
pub struct StatsArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Candidate groups counted for the union-passage average
    #[arg(long, default_value_t = 5)]
    pub k: usize,
}

#[derive(Debug, Args, Serialize)]
pub struct SynthArgs {
    /// Receives train.jsonl, dev.jsonl, embeddings.txt and manifest.json
    #[arg(long)]
    pub out_dir: PathBuf,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    #[arg(long, default_value_t = 200)]
    pub train: usize,
    #[arg(long, default_value_t = 50)]
    pub dev: usize,
    #[arg(long, default_value_t = evirank::corpus::DEFAULT_SYNTHETIC_VOCAB)]
    pub vocab: usize,
    /// Embedding dimension
    #[arg(long, default_value_t = 16)]
    pub dim: usize,
}
