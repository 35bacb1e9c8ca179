//! `divkit` command-line front end.
//!
//! Every subcommand writes its outputs plus a `manifest.json` into
//! `--output-dir`. Failures print a single line starting with
//! `divkit: error:` and exit non-zero.

mod commands;
mod manifest;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

pub use manifest::RunManifest;

pub const ERROR_PREFIX: &str = "divkit: error:";

#[derive(Debug, Parser)]
#[command(name = "divkit", version, about = "Prompt-diversity analytics and preference dataset curation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Unique n-gram rate, prompt count and diversity of a JSONL corpus.
    Analyze(AnalyzeArgs),
    /// Grid-search the decay index against measured scores.
    FitDecay(FitDecayArgs),
    /// Plan an annotation budget and build nested subsets.
    Subset(SubsetArgs),
    /// Re-rank responses with a reward scorer.
    Rerank(RerankArgs),
    /// Grow a seed set with Jaccard-filtered pool samples.
    Augment(AugmentArgs),
    /// Evaluate SFT/PRO losses and verify their gradients.
    LossCheck(LossCheckArgs),
}

#[derive(Debug, Args, Serialize)]
pub struct OutputArgs {
    /// Directory receiving all outputs and manifest.json.
    #[arg(long)]
    #[serde(skip)]
    pub output_dir: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct AnalyzeArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long, default_value_t = divkit_core::DEFAULT_NGRAM)]
    pub ngram: usize,
    #[arg(long, default_value_t = divkit_core::DEFAULT_DECAY)]
    pub decay: f64,
    /// Also report file-order prefixes of these sizes, e.g. 1500,3000.
    #[arg(long, value_delimiter = ',')]
    pub sizes: Vec<usize>,
    #[command(flatten)]
    #[serde(skip)]
    pub out: OutputArgs,
}

#[derive(Debug, Args, Serialize)]
pub struct FitDecayArgs {
    /// CSV with header `corpus,score`; corpus paths are relative to this file.
    #[arg(long)]
    pub runs: PathBuf,
    #[arg(long, default_value_t = divkit_core::DEFAULT_NGRAM)]
    pub ngram: usize,
    #[arg(long, default_value_t = 0.05)]
    pub step: f64,
    #[arg(long, default_value_t = 1.0)]
    pub p_max: f64,
    /// Require strictly increasing diversity instead of non-decreasing.
    #[arg(long)]
    pub strict: bool,
    /// Accept grid points whose diversity sequence is not ascending.
    #[arg(long)]
    pub allow_non_ascending: bool,
    #[command(flatten)]
    #[serde(skip)]
    pub out: OutputArgs,
}

#[derive(Debug, Args, Serialize)]
pub struct SubsetArgs {
    #[arg(long)]
    pub input: PathBuf,
    /// Total annotated responses to spend.
    #[arg(long)]
    pub budget: usize,
    #[arg(long, value_delimiter = ',', default_values_t = [2, 3, 4])]
    pub lengths: Vec<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Emit every planned size with every length, not just the planned pairs.
    #[arg(long)]
    pub all_combinations: bool,
    #[arg(long, default_value_t = divkit_core::DEFAULT_NGRAM)]
    pub ngram: usize,
    #[arg(long, default_value_t = divkit_core::DEFAULT_DECAY)]
    pub decay: f64,
    #[command(flatten)]
    #[serde(skip)]
    pub out: OutputArgs,
}

#[derive(Debug, Args, Serialize)]
pub struct RerankArgs {
    #[arg(long)]
    pub input: PathBuf,
    /// Scoring service base URL; falls back to DIVKIT_SCORER_URL.
    #[arg(long)]
    pub scorer_url: Option<String>,
    /// Use the deterministic hash scorer instead of a remote service.
    #[arg(long, conflicts_with = "scorer_url")]
    pub mock: bool,
    #[arg(long, default_value_t = 8)]
    pub max_in_flight: usize,
    #[command(flatten)]
    #[serde(skip)]
    pub out: OutputArgs,
}

#[derive(Debug, Args, Serialize)]
pub struct AugmentArgs {
    #[arg(long)]
    pub seed_set: PathBuf,
    #[arg(long)]
    pub pool: PathBuf,
    #[arg(long, default_value_t = 2)]
    pub n_support: usize,
    #[arg(long, default_value_t = 8)]
    pub batch: usize,
    #[arg(long)]
    pub count: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = divkit_core::DEFAULT_NGRAM)]
    pub ngram: usize,
    #[arg(long, default_value_t = divkit_core::DEFAULT_DECAY)]
    pub decay: f64,
    #[command(flatten)]
    #[serde(skip)]
    pub out: OutputArgs,
}

#[derive(Debug, Args, Serialize)]
pub struct LossCheckArgs {
    /// JSON array of {candidate_logprobs, top_token_logprobs, rewards, beta}.
    #[arg(long)]
    pub input: PathBuf,
    /// Finite-difference step.
    #[arg(long, default_value_t = 1e-5)]
    pub h: f64,
    /// Maximum relative gradient error before the check fails.
    #[arg(long, default_value_t = 1e-4)]
    pub tolerance: f64,
    #[command(flatten)]
    #[serde(skip)]
    pub out: OutputArgs,
}

/// Runs the CLI on `argv` (program name first) and returns the exit code.
pub fn run<S: AsRef<str>>(argv: &[S]) -> i32 {
    let cli = match Cli::try_parse_from(argv.iter().map(AsRef::as_ref)) {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            // --help / --version
            print!("{e}");
            return 0;
        }
        Err(e) => {
            let rendered = e.to_string();
            let first = rendered
                .lines()
                .next()
                .unwrap_or_default()
                .trim_start_matches("error: ");
            eprintln!("{ERROR_PREFIX} {first}");
            return 2;
        }
    };
    let result = match cli.command {
        Command::Analyze(a) => commands::analyze(&a),
        Command::FitDecay(a) => commands::fit_decay(&a),
        Command::Subset(a) => commands::subset(&a),
        Command::Rerank(a) => commands::rerank(&a),
        Command::Augment(a) => commands::augment(&a),
        Command::LossCheck(a) => commands::loss_check(&a),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            let msg = format!("{e:#}").replace('\n', " ");
            eprintln!("{ERROR_PREFIX} {msg}");
            1
        }
    }
}
