//! Preference pairs for DPO: two sampled responses per query, ranked by
//! ΔAPC and kept only when the score gap clears a margin.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{to_jsonl, DatasetMetadata, PipelineError};
use crate::judge::{GenerationRequest, Generator, Judge, PromptTemplates};
use crate::parallel::parallel_map;
use crate::scoring::{score_interaction, ScoreOptions};
use crate::types::{ConstraintEval, Interaction, Persona};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PreferenceParams {
    /// Candidate pairs sampled before filtering; queries are cycled.
    pub pairs_before_filter: usize,
    pub score_margin: f64,
    pub sample_temperature: f64,
    pub rng_seed: u64,
}

impl Default for PreferenceParams {
    fn default() -> Self {
        Self {
            pairs_before_filter: 100,
            score_margin: 0.2,
            sample_temperature: 1.0,
            rng_seed: 0,
        }
    }
}

impl PreferenceParams {
    pub fn check(&self) -> Result<(), PipelineError> {
        if !(self.score_margin.is_finite() && self.score_margin >= 0.0) {
            return Err(PipelineError::Params(format!(
                "score margin must be >= 0, got {}",
                self.score_margin
            )));
        }
        if !(self.sample_temperature.is_finite() && self.sample_temperature >= 0.0) {
            return Err(PipelineError::Params(format!(
                "sample temperature must be >= 0, got {}",
                self.sample_temperature
            )));
        }
        Ok(())
    }
}

/// `(chosen, rejected)` indices into `[a, b]` when the gap strictly exceeds
/// `margin`, otherwise `None`.
pub fn assign_preference(score_a: f64, score_b: f64, margin: f64) -> Option<(usize, usize)> {
    if (score_a - score_b).abs() > margin {
        if score_a > score_b {
            Some((0, 1))
        } else {
            Some((1, 0))
        }
    } else {
        None
    }
}

/// Two responses to one prompt, requested as a single `n = 2` sample.
pub fn sample_response_pair<G: Generator + ?Sized>(
    generator: &G,
    prompt: &str,
    params: &PreferenceParams,
    draw: u64,
) -> Result<[String; 2], PipelineError> {
    let request = GenerationRequest::new(prompt, params.sample_temperature, 2).with_draw(draw);
    let context = || format!("response pair sampling (draw {draw})");
    let out = generator
        .generate_text(&request)
        .map_err(|source| PipelineError::Backend {
            context: context(),
            source,
        })?;
    match <[String; 2]>::try_from(out) {
        Ok(pair) => Ok(pair),
        Err(out) => Err(PipelineError::Arity {
            context: context(),
            expected: 2,
            got: out.len(),
        }),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreferenceRecord {
    pub query: String,
    pub chosen: String,
    pub rejected: String,
    pub score_chosen: f64,
    pub score_rejected: f64,
}

/// Every sampled pair, kept or not, with the per-statement evaluations that
/// produced its scores.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidatePair {
    pub round: usize,
    pub query_index: usize,
    pub responses: [String; 2],
    pub scores: [f64; 2],
    pub evals: [Vec<ConstraintEval>; 2],
    pub preference: Option<(usize, usize)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PreferenceDataset {
    pub records: Vec<PreferenceRecord>,
    pub candidates: Vec<CandidatePair>,
    pub metadata: DatasetMetadata<PreferenceParams>,
}

impl PreferenceDataset {
    pub fn to_jsonl(&self) -> String {
        to_jsonl(&self.records)
    }

    pub fn kept(&self) -> usize {
        self.records.len()
    }

    pub fn dropped(&self) -> usize {
        self.candidates.len() - self.records.len()
    }
}

/// Cache draw index for a sampling round. Distinct rounds, and distinct
/// seeds below 2^32, never share a draw.
fn draw_for(seed: u64, round: usize) -> u64 {
    seed.wrapping_shl(32) | (round as u64 & 0xffff_ffff)
}

/// Samples `pairs_before_filter` pairs, cycling through `queries`, scores
/// each response by ΔAPC against the full persona and keeps the pairs whose
/// gap exceeds the margin.
pub fn build_preference_dataset<G, J>(
    persona: &Persona,
    queries: &[String],
    generator: &G,
    judge: &J,
    prompts: &PromptTemplates,
    params: &PreferenceParams,
    options: &ScoreOptions,
) -> Result<PreferenceDataset, PipelineError>
where
    G: Generator + ?Sized,
    J: Judge + ?Sized,
{
    params.check()?;
    if queries.is_empty() && params.pairs_before_filter > 0 {
        return Err(PipelineError::Params("no queries to sample from".into()));
    }
    let rounds: Vec<usize> = (0..params.pairs_before_filter).collect();
    let prompt_for =
        |q: &str| prompts.roleplay_prompt(persona.character_name(), persona.statements(), q);
    let samples = parallel_map(&rounds, generator.max_in_flight(), |_, &round| {
        let query = &queries[round % queries.len()];
        sample_response_pair(
            generator,
            &prompt_for(query),
            params,
            draw_for(params.rng_seed, round),
        )
    })?;

    let mut records = Vec::new();
    let mut candidates = Vec::with_capacity(samples.len());
    for (round, responses) in samples.into_iter().enumerate() {
        let query_index = round % queries.len();
        let query = &queries[query_index];
        let mut scored = Vec::with_capacity(2);
        for response in &responses {
            let interaction = Interaction::new(query.as_str(), response.as_str(), None)?;
            let row = score_interaction(persona, round, &interaction, judge, options).map_err(
                |source| PipelineError::Score {
                    query_index,
                    source,
                },
            )?;
            scored.push(row);
        }
        let [a, b]: [_; 2] = scored.try_into().expect("two rows");
        let scores = [a.delta_v_apc, b.delta_v_apc];
        let preference = assign_preference(scores[0], scores[1], params.score_margin);
        if let Some((w, l)) = preference {
            records.push(PreferenceRecord {
                query: query.clone(),
                chosen: responses[w].clone(),
                rejected: responses[l].clone(),
                score_chosen: scores[w],
                score_rejected: scores[l],
            });
        }
        candidates.push(CandidatePair {
            round,
            query_index,
            responses,
            scores,
            evals: [a.evals, b.evals],
            preference,
        });
    }

    let mut counts = BTreeMap::new();
    counts.insert("candidates".to_owned(), candidates.len());
    counts.insert("kept".to_owned(), records.len());
    counts.insert("dropped".to_owned(), candidates.len() - records.len());
    Ok(PreferenceDataset {
        records,
        candidates,
        metadata: DatasetMetadata {
            params: *params,
            seed: params.rng_seed,
            counts,
        },
    })
}
