//! Prompt templates for discrimination, generation and role-play.
//!
//! Templates are plain text with `{character}`, `{statement}`, `{query}`,
//! `{response}` and (role-play only) `{statements}` slots. Any other brace
//! text is left untouched, so JSON examples inside a template survive
//! rendering.

use std::fs;
use std::path::Path;

use serde::Serialize;

use crate::types::{NliLabel, PersonaStatement};

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct PromptTemplates {
    pub relevance: String,
    pub nli: String,
    pub generate_query: String,
    pub generate_entailed: String,
    pub generate_neutral: String,
    pub generate_contradicted: String,
    pub roleplay: String,
}

impl Default for PromptTemplates {
    fn default() -> Self {
        Self {
            relevance: include_str!("../../assets/prompts/relevance.txt").to_owned(),
            nli: include_str!("../../assets/prompts/nli.txt").to_owned(),
            generate_query: include_str!("../../assets/prompts/generate_query.txt").to_owned(),
            generate_entailed: include_str!("../../assets/prompts/generate_entailed.txt")
                .to_owned(),
            generate_neutral: include_str!("../../assets/prompts/generate_neutral.txt").to_owned(),
            generate_contradicted: include_str!("../../assets/prompts/generate_contradicted.txt")
                .to_owned(),
            roleplay: include_str!("../../assets/prompts/roleplay.txt").to_owned(),
        }
    }
}

/// Values substituted into a template.
#[derive(Debug, Default, Clone, Copy)]
pub struct Slots<'a> {
    pub character: &'a str,
    pub statement: &'a str,
    pub query: &'a str,
    pub response: &'a str,
    pub statements: &'a str,
}

impl PromptTemplates {
    /// Defaults, with any `<name>.txt` found in `dir` overriding the
    /// matching template.
    pub fn from_dir(dir: &Path) -> std::io::Result<Self> {
        let mut t = Self::default();
        let fields: [(&str, &mut String); 7] = [
            ("relevance", &mut t.relevance),
            ("nli", &mut t.nli),
            ("generate_query", &mut t.generate_query),
            ("generate_entailed", &mut t.generate_entailed),
            ("generate_neutral", &mut t.generate_neutral),
            ("generate_contradicted", &mut t.generate_contradicted),
            ("roleplay", &mut t.roleplay),
        ];
        for (name, slot) in fields {
            let path = dir.join(format!("{name}.txt"));
            if path.exists() {
                *slot = fs::read_to_string(&path)?;
            }
        }
        Ok(t)
    }

    pub fn relevance_prompt(&self, character: &str, statement: &str, query: &str) -> String {
        render(
            &self.relevance,
            &Slots {
                character,
                statement,
                query,
                ..Default::default()
            },
        )
    }

    pub fn nli_prompt(
        &self,
        character: &str,
        statement: &str,
        query: &str,
        response: &str,
    ) -> String {
        render(
            &self.nli,
            &Slots {
                character,
                statement,
                query,
                response,
                ..Default::default()
            },
        )
    }

    pub fn query_prompt(&self, character: &str, statement: &str) -> String {
        render(
            &self.generate_query,
            &Slots {
                character,
                statement,
                ..Default::default()
            },
        )
    }

    pub fn response_prompt(
        &self,
        label: NliLabel,
        character: &str,
        statement: &str,
        query: &str,
    ) -> String {
        let template = match label {
            NliLabel::Entailed => &self.generate_entailed,
            NliLabel::Neutral => &self.generate_neutral,
            NliLabel::Contradicted => &self.generate_contradicted,
        };
        render(
            template,
            &Slots {
                character,
                statement,
                query,
                ..Default::default()
            },
        )
    }

    /// Role-play prompt with the given statements placed in context, one per
    /// line.
    pub fn roleplay_prompt(
        &self,
        character: &str,
        statements: &[PersonaStatement],
        query: &str,
    ) -> String {
        let listing = statements
            .iter()
            .map(|s| format!("- {}", s.text()))
            .collect::<Vec<_>>()
            .join("\n");
        render(
            &self.roleplay,
            &Slots {
                character,
                query,
                statements: &listing,
                ..Default::default()
            },
        )
    }
}

/// Single-pass substitution: slot values are never re-scanned, so a query
/// containing `{response}` stays literal.
pub fn render(template: &str, slots: &Slots<'_>) -> String {
    let names: [(&str, &str); 5] = [
        ("{character}", slots.character),
        ("{statement}", slots.statement),
        ("{query}", slots.query),
        ("{response}", slots.response),
        ("{statements}", slots.statements),
    ];
    let mut out = String::with_capacity(template.len() + 256);
    let mut rest = template;
    'outer: while let Some(pos) = rest.find('{') {
        out.push_str(&rest[..pos]);
        let tail = &rest[pos..];
        for (name, value) in names {
            if let Some(after) = tail.strip_prefix(name) {
                out.push_str(value);
                rest = after;
                continue 'outer;
            }
        }
        out.push('{');
        rest = &tail[1..];
    }
    out.push_str(rest);
    out
}
