use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use apc_core::pipeline::{
    build_nli_dataset, build_preference_dataset, build_relevance_dataset, DistillParams,
    PreferenceParams,
};
use apc_core::scoring::{rank_statements, score_interactions, ScoreOptions};
use apc_core::{PipelineError, ScoreError};
use serde::Serialize;

use crate::args::{Cli, Command, DistillArgs, PairsArgs, ReportFormat};
use crate::backend::{RunConfig, Service};
use crate::input::{read_interactions, read_persona, read_queries};
use crate::{report, CliError};

pub fn dispatch(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Score {
            persona,
            interactions,
            common,
        } => cmd_score(
            &persona,
            &interactions,
            &RunConfig::from_args(&common)?,
            common.character.as_deref(),
        ),
        Command::Distill {
            persona,
            common,
            params,
        } => cmd_distill(
            &persona,
            &RunConfig::from_args(&common)?,
            common.character.as_deref(),
            &distill_params(&params, common.seed),
        ),
        Command::Pairs {
            persona,
            queries,
            common,
            params,
        } => cmd_pairs(
            &persona,
            &queries,
            &RunConfig::from_args(&common)?,
            common.character.as_deref(),
            &pairs_params(&params, common.seed),
        ),
        Command::Rank {
            persona,
            query,
            k,
            common,
        } => cmd_rank(
            &persona,
            &query,
            k,
            &RunConfig::from_args(&common)?,
            common.character.as_deref(),
        ),
    }
}

fn distill_params(a: &DistillArgs, seed: u64) -> DistillParams {
    DistillParams {
        queries_per_statement: a.queries_per_statement,
        relevance_negatives_per_query: a.negatives,
        nli_distractors_per_pair: a.distractors,
        rng_seed: seed,
        generation_temperature: a.generation_temperature,
        include_discriminated_relevant: !a.generated_pairs_only,
    }
}

fn pairs_params(a: &PairsArgs, seed: u64) -> PreferenceParams {
    PreferenceParams {
        pairs_before_filter: a.pairs,
        score_margin: a.margin,
        sample_temperature: a.sample_temperature,
        rng_seed: seed,
    }
}

fn score_error(e: ScoreError) -> CliError {
    let input = match &e {
        ScoreError::InvalidTopK => true,
        other => other.judge_error().is_some_and(|j| j.is_config()),
    };
    if input {
        CliError::Input(e.to_string())
    } else {
        CliError::Backend(e.to_string())
    }
}

fn pipeline_error(e: PipelineError) -> CliError {
    if e.is_input_error() {
        CliError::Input(e.to_string())
    } else {
        CliError::Backend(e.to_string())
    }
}

fn write_file(path: &Path, text: &str) -> Result<(), CliError> {
    fs::write(path, text)
        .map_err(|e| CliError::Input(format!("cannot write {}: {e}", path.display())))
}

fn emit(out: Option<&Path>, text: &str) -> Result<(), CliError> {
    match out {
        Some(path) => write_file(path, text),
        None => std::io::stdout()
            .write_all(text.as_bytes())
            .map_err(|e| CliError::Input(format!("cannot write to stdout: {e}"))),
    }
}

fn pretty<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("value serializes");
    s.push('\n');
    s
}

/// Runs `f` against the connected backend, reporting cache counts either way.
fn with_service<T>(
    config: &RunConfig,
    f: impl FnOnce(&Service, &apc_core::PromptTemplates) -> Result<T, CliError>,
) -> Result<T, CliError> {
    let prompts = config.prompts()?;
    let service = config.connect(&prompts)?;
    let result = f(&service, &prompts);
    service.report_cache();
    result
}

pub fn cmd_score(
    persona_file: &Path,
    interactions_file: &Path,
    config: &RunConfig,
    character: Option<&str>,
) -> Result<(), CliError> {
    let persona = read_persona(persona_file, character)?;
    let interactions = read_interactions(interactions_file)?;
    let options = ScoreOptions {
        thresholds: config.thresholds,
        max_in_flight: None,
    };
    let report = with_service(config, |service, _| {
        score_interactions(&persona, &interactions, service.get(), &options).map_err(score_error)
    })?;
    let text = match config.report_format.unwrap_or(ReportFormat::Json) {
        ReportFormat::Json => pretty(&report),
        ReportFormat::Markdown => report::markdown(&report, &persona),
        ReportFormat::Csv => {
            report::csv(&report).map_err(|e| CliError::Input(format!("csv output: {e}")))?
        }
    };
    emit(config.output_path.as_deref(), &text)
}

pub fn cmd_distill(
    persona_file: &Path,
    config: &RunConfig,
    character: Option<&str>,
    params: &DistillParams,
) -> Result<(), CliError> {
    let persona = read_persona(persona_file, character)?;
    params.check(&persona).map_err(pipeline_error)?;
    let dir = config
        .output_path
        .clone()
        .unwrap_or_else(|| PathBuf::from("."));
    let (relevance, nli) = with_service(config, |service, prompts| {
        if !service.has_generator() {
            return Err(CliError::Input(
                "distill needs a generator: pass --endpoint and --model".into(),
            ));
        }
        let b = service.get();
        let relevance =
            build_relevance_dataset(&persona, b, b, prompts, params).map_err(pipeline_error)?;
        let nli = build_nli_dataset(&persona, &relevance, b, b, prompts, params)
            .map_err(pipeline_error)?;
        Ok((relevance, nli))
    })?;
    fs::create_dir_all(&dir)
        .map_err(|e| CliError::Input(format!("cannot create {}: {e}", dir.display())))?;
    write_file(&dir.join("relevance.jsonl"), &relevance.to_jsonl())?;
    write_file(
        &dir.join("relevance.meta.json"),
        &pretty(&relevance.metadata),
    )?;
    write_file(&dir.join("nli.jsonl"), &nli.to_jsonl())?;
    write_file(&dir.join("nli.meta.json"), &pretty(&nli.metadata))?;
    println!(
        "relevance: {} records, nli: {} records, written to {}",
        relevance.records.len(),
        nli.records.len(),
        dir.display()
    );
    Ok(())
}

fn sidecar_path(out: &Path) -> PathBuf {
    out.with_extension("meta.json")
}

pub fn cmd_pairs(
    persona_file: &Path,
    queries_file: &Path,
    config: &RunConfig,
    character: Option<&str>,
    params: &PreferenceParams,
) -> Result<(), CliError> {
    let persona = read_persona(persona_file, character)?;
    let queries = read_queries(queries_file)?;
    params.check().map_err(pipeline_error)?;
    let out = config
        .output_path
        .clone()
        .unwrap_or_else(|| PathBuf::from("preferences.jsonl"));
    let options = ScoreOptions {
        thresholds: config.thresholds,
        max_in_flight: None,
    };
    let dataset = with_service(config, |service, prompts| {
        if !service.has_generator() {
            return Err(CliError::Input(
                "pairs needs a generator: pass --endpoint and --model".into(),
            ));
        }
        let b = service.get();
        build_preference_dataset(&persona, &queries, b, b, prompts, params, &options)
            .map_err(pipeline_error)
    })?;
    write_file(&out, &dataset.to_jsonl())?;
    write_file(&sidecar_path(&out), &pretty(&dataset.metadata))?;
    println!("kept {}, dropped {}", dataset.kept(), dataset.dropped());
    Ok(())
}

pub fn cmd_rank(
    persona_file: &Path,
    query: &str,
    k: usize,
    config: &RunConfig,
    character: Option<&str>,
) -> Result<(), CliError> {
    let persona = read_persona(persona_file, character)?;
    if query.trim().is_empty() {
        return Err(CliError::Input("query is empty".into()));
    }
    let ranked = with_service(config, |service, _| {
        rank_statements(query, &persona, service.get(), k).map_err(score_error)
    })?;
    let text = match config.report_format {
        None => report::ranking_text(&ranked),
        Some(ReportFormat::Json) => pretty(&ranked),
        Some(ReportFormat::Markdown) => report::ranking_markdown(&ranked),
        Some(ReportFormat::Csv) => {
            report::ranking_csv(&ranked).map_err(|e| CliError::Input(format!("csv output: {e}")))?
        }
    };
    emit(config.output_path.as_deref(), &text)
}
