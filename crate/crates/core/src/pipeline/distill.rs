//! Relevance and NLI dataset generation for training small discriminators.
//!
//! Stages:
//! 1. generate `queries_per_statement` queries per statement (label: relevant);
//! 2. for each query, judge `relevance_negatives_per_query` other statements,
//!    sampled without replacement;
//! 3. for each relevant (statement, query) pair, generate an entailed, a
//!    neutral and a contradicted response;
//! 4. for each (query, response), judge `nli_distractors_per_pair` other
//!    statements, sampled without replacement.
//!
//! Sampling uses ChaCha8 seeded with `rng_seed` (stream 0 for stage 2,
//! stream 1 for stage 4). All draws happen before any judge call, so record
//! order and content do not depend on completion order.

use std::collections::{BTreeMap, HashMap};

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{to_jsonl, DatasetMetadata, PipelineError, RecordSource, EMPTY_RETRIES};
use crate::judge::{GenerationRequest, Generator, Judge, PromptTemplates, RelevanceLabel};
use crate::parallel::parallel_map;
use crate::types::{NliLabel, Persona, PersonaStatement};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DistillParams {
    pub queries_per_statement: usize,
    pub relevance_negatives_per_query: usize,
    pub nli_distractors_per_pair: usize,
    pub rng_seed: u64,
    pub generation_temperature: f64,
    /// Feed stage-2 pairs judged relevant into stage 3 alongside the
    /// generated ones.
    pub include_discriminated_relevant: bool,
}

impl Default for DistillParams {
    fn default() -> Self {
        Self {
            queries_per_statement: 3,
            relevance_negatives_per_query: 5,
            nli_distractors_per_pair: 3,
            rng_seed: 0,
            generation_temperature: 1.0,
            include_discriminated_relevant: true,
        }
    }
}

impl DistillParams {
    /// Checks both stages' parameters against the persona size.
    pub fn check(&self, persona: &Persona) -> Result<(), PipelineError> {
        self.check_relevance(persona)?;
        self.check_nli(persona)
    }

    fn check_common(&self) -> Result<(), PipelineError> {
        if !(self.generation_temperature.is_finite() && self.generation_temperature >= 0.0) {
            return Err(PipelineError::Params(format!(
                "generation temperature must be >= 0, got {}",
                self.generation_temperature
            )));
        }
        Ok(())
    }

    fn check_relevance(&self, persona: &Persona) -> Result<(), PipelineError> {
        self.check_common()?;
        let others = persona.len() - 1;
        if others < self.relevance_negatives_per_query {
            return Err(PipelineError::Params(format!(
                "{} relevance negatives per query need at least {} statements, persona has {}",
                self.relevance_negatives_per_query,
                self.relevance_negatives_per_query + 1,
                persona.len()
            )));
        }
        Ok(())
    }

    fn check_nli(&self, persona: &Persona) -> Result<(), PipelineError> {
        self.check_common()?;
        let others = persona.len() - 1;
        if others < self.nli_distractors_per_pair {
            return Err(PipelineError::Params(format!(
                "{} NLI distractors per pair need at least {} statements, persona has {}",
                self.nli_distractors_per_pair,
                self.nli_distractors_per_pair + 1,
                persona.len()
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RelevanceRecord {
    pub statement: String,
    pub query: String,
    pub label: RelevanceLabel,
    pub source: RecordSource,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NliRecord {
    pub statement: String,
    pub query: String,
    pub response: String,
    pub label: NliLabel,
    pub source: RecordSource,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RelevanceDataset {
    pub records: Vec<RelevanceRecord>,
    pub metadata: DatasetMetadata<DistillParams>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NliDataset {
    pub records: Vec<NliRecord>,
    pub metadata: DatasetMetadata<DistillParams>,
}

impl RelevanceDataset {
    pub fn to_jsonl(&self) -> String {
        to_jsonl(&self.records)
    }
}

impl NliDataset {
    pub fn to_jsonl(&self) -> String {
        to_jsonl(&self.records)
    }
}

fn source_key(source: RecordSource) -> &'static str {
    match source {
        RecordSource::Generated => "generated",
        RecordSource::Discriminated => "discriminated",
    }
}

fn backend_err(context: String) -> impl FnOnce(crate::judge::JudgeError) -> PipelineError {
    move |source| PipelineError::Backend { context, source }
}

/// Keeps asking for a single completion until it is non-empty, up to
/// [`EMPTY_RETRIES`] extra requests. Each retry uses a fresh draw index so a
/// caching layer does not hand back the same empty string.
fn non_empty<G: Generator + ?Sized>(
    generator: &G,
    prompt: &str,
    temperature: f64,
    first: String,
    next_draw: &mut u64,
    context: &dyn Fn() -> String,
) -> Result<String, PipelineError> {
    let mut text = first.trim().to_owned();
    let mut attempts = 0;
    while text.is_empty() {
        if attempts == EMPTY_RETRIES {
            return Err(PipelineError::EmptyGeneration {
                context: context(),
                attempts: attempts + 1,
            });
        }
        attempts += 1;
        *next_draw += 1;
        let request = GenerationRequest::new(prompt, temperature, 1).with_draw(*next_draw);
        let out = generator
            .generate_text(&request)
            .map_err(backend_err(context()))?;
        text = out.into_iter().next().unwrap_or_default().trim().to_owned();
    }
    Ok(text)
}

fn generate_exact<G: Generator + ?Sized>(
    generator: &G,
    request: &GenerationRequest,
    context: &dyn Fn() -> String,
) -> Result<Vec<String>, PipelineError> {
    let out = generator
        .generate_text(request)
        .map_err(backend_err(context()))?;
    if out.len() != request.n {
        return Err(PipelineError::Arity {
            context: context(),
            expected: request.n,
            got: out.len(),
        });
    }
    Ok(out)
}

/// Stage 1 for one statement: `n` non-empty queries the statement answers.
pub fn gen_relevant_queries<G: Generator + ?Sized>(
    statement: &PersonaStatement,
    character: &str,
    generator: &G,
    prompts: &PromptTemplates,
    n: usize,
    temperature: f64,
) -> Result<Vec<String>, PipelineError> {
    if n == 0 {
        return Ok(Vec::new());
    }
    let prompt = prompts.query_prompt(character, statement.text());
    let context = || format!("query generation for statement {}", statement.id());
    let first = generate_exact(
        generator,
        &GenerationRequest::new(prompt.as_str(), temperature, n),
        &context,
    )?;
    let mut draw = 0;
    first
        .into_iter()
        .map(|q| non_empty(generator, &prompt, temperature, q, &mut draw, &context))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NliResponses {
    pub entailed: String,
    pub neutral: String,
    pub contradicted: String,
}

impl NliResponses {
    /// Responses in `(entailed, neutral, contradicted)` order.
    pub fn labeled(&self) -> [(NliLabel, &str); 3] {
        [
            (NliLabel::Entailed, self.entailed.as_str()),
            (NliLabel::Neutral, self.neutral.as_str()),
            (NliLabel::Contradicted, self.contradicted.as_str()),
        ]
    }
}

/// Stage 3 for one relevant pair: a response of each NLI label.
pub fn gen_nli_responses<G: Generator + ?Sized>(
    statement: &PersonaStatement,
    query: &str,
    character: &str,
    generator: &G,
    prompts: &PromptTemplates,
    temperature: f64,
) -> Result<NliResponses, PipelineError> {
    let mut out = Vec::with_capacity(3);
    for label in NliLabel::ALL {
        let prompt = prompts.response_prompt(label, character, statement.text(), query);
        let context = || {
            format!(
                "{} response generation for statement {}",
                label.as_str(),
                statement.id()
            )
        };
        let first = generate_exact(
            generator,
            &GenerationRequest::new(prompt.as_str(), temperature, 1),
            &context,
        )?;
        let mut draw = 0;
        let first = first.into_iter().next().unwrap_or_default();
        out.push(non_empty(
            generator,
            &prompt,
            temperature,
            first,
            &mut draw,
            &context,
        )?);
    }
    let contradicted = out.pop().expect("three responses");
    let neutral = out.pop().expect("three responses");
    let entailed = out.pop().expect("three responses");
    Ok(NliResponses {
        entailed,
        neutral,
        contradicted,
    })
}

/// `k` distinct indices in `0..len`, never `exclude`, in draw order.
fn sample_others(rng: &mut ChaCha8Rng, len: usize, exclude: usize, k: usize) -> Vec<usize> {
    if k == 0 {
        return Vec::new();
    }
    index::sample(rng, len - 1, k)
        .into_iter()
        .map(|i| if i >= exclude { i + 1 } else { i })
        .collect()
}

fn rng_for_stage(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Stages 1 and 2.
pub fn build_relevance_dataset<G, J>(
    persona: &Persona,
    generator: &G,
    judge: &J,
    prompts: &PromptTemplates,
    params: &DistillParams,
) -> Result<RelevanceDataset, PipelineError>
where
    G: Generator + ?Sized,
    J: Judge + ?Sized,
{
    params.check_relevance(persona)?;
    let character = persona.character_name();
    let statements = persona.statements();
    let queries: Vec<Vec<String>> = parallel_map(statements, generator.max_in_flight(), |_, s| {
        gen_relevant_queries(
            s,
            character,
            generator,
            prompts,
            params.queries_per_statement,
            params.generation_temperature,
        )
    })?;

    let mut rng = rng_for_stage(params.rng_seed, 0);
    // (source statement, query index, sampled statement)
    let mut jobs: Vec<(usize, usize, usize)> = Vec::new();
    for (si, qs) in queries.iter().enumerate() {
        for qi in 0..qs.len() {
            for other in sample_others(
                &mut rng,
                statements.len(),
                si,
                params.relevance_negatives_per_query,
            ) {
                jobs.push((si, qi, other));
            }
        }
    }
    let labels = parallel_map(&jobs, judge.max_in_flight(), |_, &(si, qi, other)| {
        let statement = &statements[other];
        judge
            .judge_relevance(character, statement, &queries[si][qi])
            .map(RelevanceLabel::from_dist)
            .map_err(backend_err(format!(
                "relevance discrimination of statement {} for query {qi} of statement {}",
                statement.id(),
                statements[si].id()
            )))
    })?;

    let mut records = Vec::with_capacity(queries.len() + jobs.len());
    let mut judged = jobs.iter().zip(labels);
    for (si, qs) in queries.iter().enumerate() {
        for q in qs {
            records.push(RelevanceRecord {
                statement: statements[si].text().to_owned(),
                query: q.clone(),
                label: RelevanceLabel::Relevant,
                source: RecordSource::Generated,
            });
            for _ in 0..params.relevance_negatives_per_query {
                let (&(_, _, other), label) = judged.next().expect("one job per sample");
                records.push(RelevanceRecord {
                    statement: statements[other].text().to_owned(),
                    query: q.clone(),
                    label,
                    source: RecordSource::Discriminated,
                });
            }
        }
    }

    let mut counts = BTreeMap::new();
    counts.insert("total".to_owned(), records.len());
    for key in ["relevant", "irrelevant", "generated", "discriminated"] {
        counts.insert(key.to_owned(), 0);
    }
    for r in &records {
        *counts.get_mut(relevance_key(r.label)).unwrap() += 1;
        *counts.get_mut(source_key(r.source)).unwrap() += 1;
    }
    Ok(RelevanceDataset {
        records,
        metadata: DatasetMetadata {
            params: *params,
            seed: params.rng_seed,
            counts,
        },
    })
}

fn relevance_key(label: RelevanceLabel) -> &'static str {
    match label {
        RelevanceLabel::Relevant => "relevant",
        RelevanceLabel::Irrelevant => "irrelevant",
    }
}

/// Stages 3 and 4, over the relevant pairs of a stage-2 dataset.
pub fn build_nli_dataset<G, J>(
    persona: &Persona,
    relevance: &RelevanceDataset,
    generator: &G,
    judge: &J,
    prompts: &PromptTemplates,
    params: &DistillParams,
) -> Result<NliDataset, PipelineError>
where
    G: Generator + ?Sized,
    J: Judge + ?Sized,
{
    params.check_nli(persona)?;
    let character = persona.character_name();
    let statements = persona.statements();
    let mut by_text: HashMap<&str, usize> = HashMap::new();
    for (i, s) in statements.iter().enumerate() {
        by_text.entry(s.text()).or_insert(i);
    }
    let pairs: Vec<(usize, &str)> = relevance
        .records
        .iter()
        .filter(|r| r.label == RelevanceLabel::Relevant)
        .filter(|r| r.source == RecordSource::Generated || params.include_discriminated_relevant)
        .map(|r| {
            by_text
                .get(r.statement.as_str())
                .map(|&i| (i, r.query.as_str()))
                .ok_or_else(|| {
                    PipelineError::Params(format!(
                        "relevance record statement {:?} is not in the persona",
                        r.statement
                    ))
                })
        })
        .collect::<Result<_, _>>()?;

    let responses: Vec<NliResponses> =
        parallel_map(&pairs, generator.max_in_flight(), |_, &(si, query)| {
            gen_nli_responses(
                &statements[si],
                query,
                character,
                generator,
                prompts,
                params.generation_temperature,
            )
        })?;

    let mut rng = rng_for_stage(params.rng_seed, 1);
    // (pair index, response label, sampled statement)
    let mut jobs: Vec<(usize, NliLabel, usize)> = Vec::new();
    for (pi, &(si, _)) in pairs.iter().enumerate() {
        for label in NliLabel::ALL {
            for other in sample_others(
                &mut rng,
                statements.len(),
                si,
                params.nli_distractors_per_pair,
            ) {
                jobs.push((pi, label, other));
            }
        }
    }
    let response_for = |pi: usize, label: NliLabel| -> &str {
        let r = &responses[pi];
        match label {
            NliLabel::Entailed => &r.entailed,
            NliLabel::Neutral => &r.neutral,
            NliLabel::Contradicted => &r.contradicted,
        }
    };
    let labels = parallel_map(&jobs, judge.max_in_flight(), |_, &(pi, label, other)| {
        let (si, query) = pairs[pi];
        judge
            .judge_nli(
                character,
                &statements[other],
                query,
                response_for(pi, label),
            )
            .map(|d| d.argmax())
            .map_err(backend_err(format!(
                "NLI discrimination of statement {} against the {} response for statement {}",
                statements[other].id(),
                label.as_str(),
                statements[si].id()
            )))
    })?;

    let mut records = Vec::with_capacity(pairs.len() * 3 + jobs.len());
    let mut judged = jobs.iter().zip(labels);
    for (pi, &(si, query)) in pairs.iter().enumerate() {
        for (label, response) in responses[pi].labeled() {
            records.push(NliRecord {
                statement: statements[si].text().to_owned(),
                query: query.to_owned(),
                response: response.to_owned(),
                label,
                source: RecordSource::Generated,
            });
            for _ in 0..params.nli_distractors_per_pair {
                let (&(_, _, other), judged_label) = judged.next().expect("one job per sample");
                records.push(NliRecord {
                    statement: statements[other].text().to_owned(),
                    query: query.to_owned(),
                    response: response.to_owned(),
                    label: judged_label,
                    source: RecordSource::Discriminated,
                });
            }
        }
    }

    let mut counts = BTreeMap::new();
    counts.insert("total".to_owned(), records.len());
    counts.insert("pairs".to_owned(), pairs.len());
    for label in NliLabel::ALL {
        counts.insert(label.as_str().to_owned(), 0);
    }
    for source in ["generated", "discriminated"] {
        counts.insert(source.to_owned(), 0);
    }
    for r in &records {
        *counts.get_mut(r.label.as_str()).unwrap() += 1;
        *counts.get_mut(source_key(r.source)).unwrap() += 1;
    }
    Ok(NliDataset {
        records,
        metadata: DatasetMetadata {
            params: *params,
            seed: params.rng_seed,
            counts,
        },
    })
}
