//! Active-passive constraint (APC) scoring.
//!
//! A persona statement is an *active* constraint when it is relevant to the
//! query (the response must be entailed by it) and a *passive* one otherwise
//! (the response must merely not contradict it). The Boolean form checks
//! this per statement; the quantified form replaces each check with its
//! probability under the relevance and NLI judges:
//!
//! ```text
//! p_apc(s) = P_rel(s) * P_ent(s) + (1 - P_rel(s)) * (1 - P_con(s))
//! V        = sum_s p_apc(s)
//! ΔV       = V - sum_s (1 - P_rel(s))
//!          = sum_s P_rel(s) P_ent(s) - sum_s (1 - P_rel(s)) P_con(s)
//! ```
//!
//! The subtracted sum is what a responder neutral to every statement would
//! score, so ΔV reads as active reward minus passive penalty.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::judge::{Judge, JudgeError};
use crate::parallel::parallel_map;
use crate::types::{
    ApcReport, ConstraintEval, Interaction, InteractionScore, NliDist, NliLabel, Persona,
    PersonaStatement, RelevanceDist, Thresholds, ViolationKind, ViolationTrace,
};

#[derive(Debug, Error)]
pub enum ScoreError {
    #[error("{}statement_id={statement_id}: {source}", interaction_prefix(*.interaction_index))]
    Judge {
        interaction_index: Option<usize>,
        statement_id: u64,
        #[source]
        source: JudgeError,
    },
    #[error("top-k must be at least 1")]
    InvalidTopK,
}

fn interaction_prefix(index: Option<usize>) -> String {
    index.map_or_else(String::new, |i| format!("interaction {i}, "))
}

impl ScoreError {
    pub fn judge_error(&self) -> Option<&JudgeError> {
        match self {
            ScoreError::Judge { source, .. } => Some(source),
            ScoreError::InvalidTopK => None,
        }
    }
}

/// Hard relevance and NLI labels for one statement.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct BooleanJudgment {
    pub relevant: bool,
    pub nli_label: NliLabel,
}

pub fn boolean_apc(j: BooleanJudgment) -> bool {
    (j.relevant && j.nli_label == NliLabel::Entailed)
        || (!j.relevant && j.nli_label != NliLabel::Contradicted)
}

/// Conjunction over the whole persona; vacuously true when empty.
pub fn boolean_apc_global(js: &[BooleanJudgment]) -> bool {
    js.iter().copied().all(boolean_apc)
}

pub fn p_apc(rel: RelevanceDist, nli: NliDist) -> f64 {
    let p = rel.p_relevant();
    (p * nli.p_entailed() + (1.0 - p) * nli.p_not_contradicted()).clamp(0.0, 1.0)
}

pub fn evaluate_constraint(statement_id: u64, rel: RelevanceDist, nli: NliDist) -> ConstraintEval {
    let p = rel.p_relevant();
    ConstraintEval::from_parts(
        statement_id,
        rel,
        nli,
        p_apc(rel, nli),
        p * nli.p_entailed(),
        (1.0 - p) * nli.p_contradicted(),
    )
    .expect("shares are computed from the same inputs")
}

pub fn v_apc(evals: &[ConstraintEval]) -> f64 {
    evals.iter().map(ConstraintEval::p_apc).sum()
}

/// Score of a responder that is neutral toward every statement.
pub fn neutral_baseline(rels: &[RelevanceDist]) -> f64 {
    rels.iter().map(RelevanceDist::p_irrelevant).sum()
}

pub fn delta_v_apc(v: f64, rels: &[RelevanceDist]) -> f64 {
    v - neutral_baseline(rels)
}

/// Regularized score computed straight from the evals.
pub fn delta_v_apc_of(evals: &[ConstraintEval]) -> f64 {
    let rels: Vec<RelevanceDist> = evals.iter().map(ConstraintEval::relevance).collect();
    delta_v_apc(v_apc(evals), &rels)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Decomposition {
    /// Expected number of relevant statements the response entails.
    pub active_reward: f64,
    /// Expected number of irrelevant statements the response contradicts.
    pub passive_penalty: f64,
}

pub fn decompose(evals: &[ConstraintEval]) -> Decomposition {
    Decomposition {
        active_reward: evals.iter().map(ConstraintEval::active_share).sum(),
        passive_penalty: evals
            .iter()
            .map(ConstraintEval::passive_penalty_share)
            .sum(),
    }
}

/// Flags relevant statements the response misses and irrelevant ones it
/// contradicts.
///
/// Active misses come first, weakest entailment first; then passive
/// contradictions, strongest contradiction first. Ties go to the lower
/// statement id.
pub fn trace_violations(evals: &[ConstraintEval], thresholds: &Thresholds) -> Vec<ViolationTrace> {
    let mut active = Vec::new();
    let mut passive = Vec::new();
    for e in evals {
        let rel = e.relevance().p_relevant();
        let nli = e.nli();
        if rel >= thresholds.tau_rel {
            if nli.p_entailed() < thresholds.tau_ent {
                active.push(ViolationTrace {
                    statement_id: e.statement_id(),
                    kind: ViolationKind::ActiveMiss,
                    relevance: rel,
                    offending_probability: nli.p_entailed(),
                });
            }
        } else if nli.p_contradicted() >= thresholds.tau_con {
            passive.push(ViolationTrace {
                statement_id: e.statement_id(),
                kind: ViolationKind::PassiveContradiction,
                relevance: rel,
                offending_probability: nli.p_contradicted(),
            });
        }
    }
    active.sort_by(|a, b| {
        a.offending_probability
            .total_cmp(&b.offending_probability)
            .then(a.statement_id.cmp(&b.statement_id))
    });
    passive.sort_by(|a, b| {
        b.offending_probability
            .total_cmp(&a.offending_probability)
            .then(a.statement_id.cmp(&b.statement_id))
    });
    active.extend(passive);
    active
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ScoreOptions {
    pub thresholds: Thresholds,
    /// Overrides the judge's own concurrency ceiling.
    pub max_in_flight: Option<usize>,
}

fn in_flight<J: Judge + ?Sized>(judge: &J, options: &ScoreOptions) -> usize {
    options
        .max_in_flight
        .unwrap_or_else(|| judge.max_in_flight())
        .max(1)
}

/// Judges every persona statement against one interaction and assembles
/// its report row.
pub fn score_interaction<J: Judge + ?Sized>(
    persona: &Persona,
    interaction_index: usize,
    interaction: &Interaction,
    judge: &J,
    options: &ScoreOptions,
) -> Result<InteractionScore, ScoreError> {
    let character = persona.character_name();
    let evals = parallel_map(
        persona.statements(),
        in_flight(judge, options),
        |_, statement| {
            let wrap = |source| ScoreError::Judge {
                interaction_index: Some(interaction_index),
                statement_id: statement.id(),
                source,
            };
            let rel = judge
                .judge_relevance(character, statement, interaction.query())
                .map_err(wrap)?;
            let nli = judge
                .judge_nli(
                    character,
                    statement,
                    interaction.query(),
                    interaction.response(),
                )
                .map_err(wrap)?;
            Ok(evaluate_constraint(statement.id(), rel, nli))
        },
    )?;
    let v = v_apc(&evals);
    let decomposition = decompose(&evals);
    Ok(InteractionScore {
        interaction_index,
        method: interaction.method_label().map(str::to_owned),
        query: interaction.query().to_owned(),
        v_apc: v,
        delta_v_apc: delta_v_apc_of(&evals),
        active_reward: decomposition.active_reward,
        passive_penalty: decomposition.passive_penalty,
        violations: trace_violations(&evals, &options.thresholds),
        evals,
    })
}

/// Scores each interaction in turn and aggregates the results.
pub fn score_interactions<J: Judge + ?Sized>(
    persona: &Persona,
    interactions: &[Interaction],
    judge: &J,
    options: &ScoreOptions,
) -> Result<ApcReport, ScoreError> {
    let rows = interactions
        .iter()
        .enumerate()
        .map(|(i, interaction)| score_interaction(persona, i, interaction, judge, options))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(ApcReport::new(persona, options.thresholds, rows))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedStatement {
    pub statement: PersonaStatement,
    pub p_relevant: f64,
}

/// Default number of statements retrieved for a query.
pub const DEFAULT_TOP_K: usize = 5;

/// The `k` statements most relevant to `query`, by descending relevance
/// with ties broken by ascending id.
pub fn rank_statements<J: Judge + ?Sized>(
    query: &str,
    persona: &Persona,
    judge: &J,
    k: usize,
) -> Result<Vec<RankedStatement>, ScoreError> {
    if k == 0 {
        return Err(ScoreError::InvalidTopK);
    }
    let character = persona.character_name();
    let mut ranked = parallel_map(persona.statements(), judge.max_in_flight(), |_, s| {
        judge
            .judge_relevance(character, s, query)
            .map(|d| RankedStatement {
                statement: s.clone(),
                p_relevant: d.p_relevant(),
            })
            .map_err(|source| ScoreError::Judge {
                interaction_index: None,
                statement_id: s.id(),
                source,
            })
    })?;
    ranked.sort_by(|a, b| match b.p_relevant.total_cmp(&a.p_relevant) {
        Ordering::Equal => a.statement.id().cmp(&b.statement.id()),
        other => other,
    });
    ranked.truncate(k);
    Ok(ranked)
}
