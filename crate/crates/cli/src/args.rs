use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Debug, Parser)]
#[command(
    name = "apc",
    version,
    about = "Persona-consistency scoring for role-playing agents"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Score (query, response) interactions against a persona.
    Score {
        /// Persona JSONL: {"id"?: int, "statement": str} per line.
        persona: PathBuf,
        /// Interactions JSONL: {"query": str, "response": str, "method"?: str} per line.
        interactions: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Generate relevance and NLI training datasets.
    Distill {
        persona: PathBuf,
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        params: DistillArgs,
    },
    /// Sample and filter preference pairs for DPO.
    Pairs {
        persona: PathBuf,
        /// Queries JSONL: {"query": str} per line.
        queries: PathBuf,
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        params: PairsArgs,
    },
    /// Print the statements most relevant to a query.
    Rank {
        persona: PathBuf,
        query: String,
        #[arg(long, default_value_t = apc_core::scoring::DEFAULT_TOP_K)]
        k: usize,
        #[command(flatten)]
        common: Common,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum BackendChoice {
    Oracle,
    Chat,
    CachedChat,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ReportFormat {
    Json,
    Markdown,
    Csv,
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    #[arg(long, value_enum, default_value_t = BackendChoice::Oracle)]
    pub backend: BackendChoice,
    /// Table of judge probabilities for the oracle backend.
    #[arg(long)]
    pub oracle_file: Option<PathBuf>,
    /// Base URL of an OpenAI-compatible chat-completion API.
    #[arg(long)]
    pub endpoint: Option<String>,
    #[arg(long)]
    pub model: Option<String>,
    /// Directory holding cache.jsonl; wraps whichever backend is selected.
    #[arg(long)]
    pub cache_dir: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub format: Option<ReportFormat>,
    #[arg(long, default_value_t = 0.5)]
    pub tau_rel: f64,
    #[arg(long, default_value_t = 0.5)]
    pub tau_ent: f64,
    #[arg(long, default_value_t = 0.5)]
    pub tau_con: f64,
    #[arg(long, default_value_t = 8)]
    pub max_in_flight: usize,
    /// Completions averaged per chat judgment.
    #[arg(long, default_value_t = 1)]
    pub votes: u32,
    #[arg(long, default_value_t = 0.0)]
    pub judge_temperature: f64,
    /// Per-request timeout in seconds.
    #[arg(long, default_value_t = 60.0)]
    pub timeout: f64,
    /// Chat retries after the first attempt (delays 1 s, 2 s, 4 s, ...).
    #[arg(long, default_value_t = 3)]
    pub max_retries: u32,
    /// Character name; defaults to the persona file stem.
    #[arg(long)]
    pub character: Option<String>,
    /// Directory of prompt templates overriding the built-in ones.
    #[arg(long)]
    pub prompt_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct DistillArgs {
    #[arg(long, default_value_t = 3)]
    pub queries_per_statement: usize,
    #[arg(long, default_value_t = 5)]
    pub negatives: usize,
    #[arg(long, default_value_t = 3)]
    pub distractors: usize,
    #[arg(long, default_value_t = 1.0)]
    pub generation_temperature: f64,
    /// Only use generated pairs, not discriminated ones judged relevant, for NLI generation.
    #[arg(long)]
    pub generated_pairs_only: bool,
}

#[derive(Debug, Clone, Args)]
pub struct PairsArgs {
    /// Candidate pairs sampled before filtering.
    #[arg(long, default_value_t = 100)]
    pub pairs: usize,
    #[arg(long, default_value_t = 0.2)]
    pub margin: f64,
    #[arg(long, default_value_t = 1.0)]
    pub sample_temperature: f64,
}
