//! Training-data generation and preference-loss reference math.
//!
//! - [`distill`]: four-stage relevance/NLI dataset generation from a strong
//!   generator and judge.
//! - [`preference`]: sampled response pairs ranked by ΔAPC and filtered by a
//!   score margin.
//! - [`dpo`]: the pairwise DPO loss and its relevance-weighted APC variant.

pub mod distill;
pub mod dpo;
pub mod preference;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::judge::JudgeError;
use crate::scoring::ScoreError;
use crate::types::CoreError;

pub use distill::{
    build_nli_dataset, build_relevance_dataset, gen_nli_responses, gen_relevant_queries,
    DistillParams, NliDataset, NliRecord, NliResponses, RelevanceDataset, RelevanceRecord,
};
pub use dpo::{
    apc_dpo_loss, constraint_rewards, dpo_pair_loss, dpo_pair_loss_grad, per_statement_preferences,
    ConstraintRewards, DpoGradient, PerStatementDpoTerm, StatementPreference,
};
pub use preference::{
    assign_preference, build_preference_dataset, sample_response_pair, CandidatePair,
    PreferenceDataset, PreferenceParams, PreferenceRecord,
};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("invalid parameters: {0}")]
    Params(String),
    #[error("{context}: {source}")]
    Backend {
        context: String,
        #[source]
        source: JudgeError,
    },
    #[error("{context}: generator returned an empty completion after {attempts} attempts")]
    EmptyGeneration { context: String, attempts: u32 },
    #[error("{context}: expected {expected} completions, got {got}")]
    Arity {
        context: String,
        expected: usize,
        got: usize,
    },
    #[error("query {query_index}: {source}")]
    Score {
        query_index: usize,
        #[source]
        source: ScoreError,
    },
    #[error(transparent)]
    Domain(#[from] CoreError),
}

impl PipelineError {
    /// True for failures that come from parameters or inputs rather than a
    /// backend.
    pub fn is_input_error(&self) -> bool {
        match self {
            PipelineError::Params(_) | PipelineError::Domain(_) => true,
            PipelineError::Backend { source, .. } => source.is_config(),
            _ => false,
        }
    }
}

/// Whether a record came from a generation prompt or a discrimination prompt.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RecordSource {
    Generated,
    Discriminated,
}

/// Sidecar document written next to each dataset file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetMetadata<P> {
    pub params: P,
    pub seed: u64,
    pub counts: BTreeMap<String, usize>,
}

/// Fresh regeneration attempts allowed for an empty completion.
pub const EMPTY_RETRIES: u32 = 3;

pub(crate) fn to_jsonl<T: Serialize>(records: &[T]) -> String {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r).expect("record serializes"));
        out.push('\n');
    }
    out
}
