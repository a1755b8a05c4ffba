//! JSONL input files. Blank lines are skipped; diagnostics cite 1-based
//! line numbers.

use std::fs;
use std::path::Path;

use apc_core::{Interaction, OracleTable, Persona, PersonaStatement};
use serde::Deserialize;

use crate::CliError;

fn read(path: &Path) -> Result<String, CliError> {
    fs::read_to_string(path)
        .map_err(|e| CliError::Input(format!("cannot read {}: {e}", path.display())))
}

/// Non-blank lines with their 1-based numbers, parsed as `T`.
fn parse_lines<T: for<'de> Deserialize<'de>>(
    path: &Path,
    text: &str,
) -> Result<Vec<(usize, T)>, CliError> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l)
                .map(|v| (i + 1, v))
                .map_err(|e| at(path, i + 1, e))
        })
        .collect()
}

fn at(path: &Path, line: usize, e: impl std::fmt::Display) -> CliError {
    CliError::Input(format!("{}:{line}: {e}", path.display()))
}

#[derive(Deserialize)]
struct PersonaLine {
    id: Option<u64>,
    statement: String,
}

#[derive(Deserialize)]
struct InteractionLine {
    query: String,
    response: String,
    method: Option<String>,
}

#[derive(Deserialize)]
struct QueryLine {
    query: String,
}

/// Ids are taken from the file when every line has one (they must ascend)
/// and assigned 0.. when none do.
pub fn read_persona(path: &Path, character: Option<&str>) -> Result<Persona, CliError> {
    let lines: Vec<(usize, PersonaLine)> = parse_lines(path, &read(path)?)?;
    if lines.is_empty() {
        return Err(CliError::Input(format!(
            "{}: persona has no statements",
            path.display()
        )));
    }
    let explicit = lines[0].1.id.is_some();
    let mut statements = Vec::with_capacity(lines.len());
    let mut previous: Option<u64> = None;
    for (n, (line, raw)) in lines.into_iter().enumerate() {
        let id = match (explicit, raw.id) {
            (true, Some(id)) => {
                if previous.is_some_and(|p| id <= p) {
                    return Err(at(
                        path,
                        line,
                        format!(
                            "statement id {id} does not ascend from {}",
                            previous.unwrap()
                        ),
                    ));
                }
                previous = Some(id);
                id
            }
            (false, None) => n as u64,
            _ => {
                return Err(at(
                    path,
                    line,
                    "either every statement has an \"id\" or none does",
                ))
            }
        };
        statements.push(PersonaStatement::new(id, raw.statement).map_err(|e| at(path, line, e))?);
    }
    let name = match character {
        Some(c) => c.to_owned(),
        None => path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default(),
    };
    Persona::new(name, statements).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))
}

pub fn read_interactions(path: &Path) -> Result<Vec<Interaction>, CliError> {
    parse_lines::<InteractionLine>(path, &read(path)?)?
        .into_iter()
        .map(|(line, r)| {
            Interaction::new(r.query, r.response, r.method).map_err(|e| at(path, line, e))
        })
        .collect()
}

pub fn read_queries(path: &Path) -> Result<Vec<String>, CliError> {
    let queries: Vec<String> = parse_lines::<QueryLine>(path, &read(path)?)?
        .into_iter()
        .map(|(line, q)| {
            let query = q.query.trim();
            if query.is_empty() {
                Err(at(path, line, "empty query"))
            } else {
                Ok(query.to_owned())
            }
        })
        .collect::<Result<_, _>>()?;
    if queries.is_empty() {
        return Err(CliError::Input(format!("{}: no queries", path.display())));
    }
    Ok(queries)
}

pub fn read_oracle(path: &Path) -> Result<OracleTable, CliError> {
    OracleTable::from_json_str(&read(path)?)
        .map_err(|e| CliError::Input(format!("{}: {e}", path.display())))
}
