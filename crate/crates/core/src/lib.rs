//! Persona-consistency scoring for role-playing agents.
//!
//! A persona is a list of atomic statements. Each statement is checked
//! against a (query, response) pair by a relevance judge and an NLI judge;
//! the per-statement probabilities combine into an expected count of
//! satisfied constraints ([`scoring::v_apc`]) and its baseline-adjusted
//! form ([`scoring::delta_v_apc`]).
//!
//! [`judge`] holds the backends (oracle table, OpenAI-style chat API, and a
//! persistent cache over either). [`pipeline`] builds distillation and
//! preference datasets and carries reference DPO losses.

pub mod judge;
mod parallel;
pub mod pipeline;
pub mod scoring;
pub mod types;

pub use judge::{
    BackendKind, Cached, ChatBackend, GenerationRequest, Generator, Judge, JudgeBackendConfig,
    JudgeError, OracleJudge, OracleTable, PromptTemplates, RelevanceLabel,
};
pub use pipeline::PipelineError;
pub use scoring::{
    delta_v_apc, evaluate_constraint, p_apc, rank_statements, score_interaction,
    score_interactions, v_apc, ScoreError, ScoreOptions,
};
pub use types::{
    validate_persona, Aggregates, ApcReport, ConstraintEval, CoreError, Interaction,
    InteractionScore, NliDist, NliLabel, Persona, PersonaStatement, RelevanceDist, Thresholds,
    ViolationKind, ViolationTrace,
};
