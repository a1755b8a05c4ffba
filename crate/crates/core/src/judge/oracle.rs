use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{Judge, JudgeError};
use crate::types::{NliDist, PersonaStatement, RelevanceDist};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct RelevanceEntry {
    statement: String,
    query: String,
    p_relevant: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct NliEntry {
    statement: String,
    query: String,
    response: String,
    /// `[entailed, neutral, contradicted]`
    p: [f64; 3],
}

#[derive(Debug, Default, Serialize, Deserialize)]
struct OracleDocument {
    #[serde(default)]
    relevance: Vec<RelevanceEntry>,
    #[serde(default)]
    nli: Vec<NliEntry>,
}

/// Fixed judgments keyed by text.
///
/// Statement keys are trimmed the same way persona statements are; queries
/// and responses must match exactly.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct OracleTable {
    relevance: HashMap<(String, String), RelevanceDist>,
    nli: HashMap<(String, String, String), NliDist>,
}

impl OracleTable {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert_relevance(&mut self, statement: &str, query: &str, dist: RelevanceDist) {
        self.relevance
            .insert((statement.trim().to_owned(), query.to_owned()), dist);
    }

    pub fn insert_nli(&mut self, statement: &str, query: &str, response: &str, dist: NliDist) {
        self.nli.insert(
            (
                statement.trim().to_owned(),
                query.to_owned(),
                response.to_owned(),
            ),
            dist,
        );
    }

    pub fn with_relevance(mut self, statement: &str, query: &str, p_relevant: f64) -> Self {
        let dist = RelevanceDist::new(p_relevant).expect("p_relevant in [0, 1]");
        self.insert_relevance(statement, query, dist);
        self
    }

    pub fn with_nli(mut self, statement: &str, query: &str, response: &str, p: [f64; 3]) -> Self {
        let dist = NliDist::new(p[0], p[1], p[2]).expect("valid NLI distribution");
        self.insert_nli(statement, query, response, dist);
        self
    }

    pub fn relevance(&self, statement: &str, query: &str) -> Option<RelevanceDist> {
        self.relevance
            .get(&(statement.to_owned(), query.to_owned()))
            .copied()
    }

    pub fn nli(&self, statement: &str, query: &str, response: &str) -> Option<NliDist> {
        self.nli
            .get(&(statement.to_owned(), query.to_owned(), response.to_owned()))
            .copied()
    }

    /// Parses the oracle document format. Duplicate keys are rejected.
    pub fn from_json_str(text: &str) -> Result<Self, JudgeError> {
        let doc: OracleDocument = serde_json::from_str(text)
            .map_err(|e| JudgeError::Config(format!("oracle table: {e}")))?;
        let mut table = OracleTable::new();
        for (i, e) in doc.relevance.into_iter().enumerate() {
            let dist = RelevanceDist::new(e.p_relevant)
                .map_err(|err| JudgeError::Config(format!("oracle relevance[{i}]: {err}")))?;
            let key = (e.statement.trim().to_owned(), e.query);
            if table.relevance.insert(key, dist).is_some() {
                return Err(JudgeError::Config(format!(
                    "oracle relevance[{i}] duplicates an earlier entry"
                )));
            }
        }
        for (i, e) in doc.nli.into_iter().enumerate() {
            let dist = NliDist::new(e.p[0], e.p[1], e.p[2])
                .map_err(|err| JudgeError::Config(format!("oracle nli[{i}]: {err}")))?;
            let key = (e.statement.trim().to_owned(), e.query, e.response);
            if table.nli.insert(key, dist).is_some() {
                return Err(JudgeError::Config(format!(
                    "oracle nli[{i}] duplicates an earlier entry"
                )));
            }
        }
        Ok(table)
    }

    /// Serializes to the oracle document format with entries sorted, so the
    /// output (and the digest) does not depend on insertion order.
    pub fn to_json_string(&self) -> String {
        let mut relevance: Vec<RelevanceEntry> = self
            .relevance
            .iter()
            .map(|((s, q), d)| RelevanceEntry {
                statement: s.clone(),
                query: q.clone(),
                p_relevant: d.p_relevant(),
            })
            .collect();
        relevance.sort_by(|a, b| (&a.statement, &a.query).cmp(&(&b.statement, &b.query)));
        let mut nli: Vec<NliEntry> = self
            .nli
            .iter()
            .map(|((s, q, r), d)| NliEntry {
                statement: s.clone(),
                query: q.clone(),
                response: r.clone(),
                p: d.as_array(),
            })
            .collect();
        nli.sort_by(|a, b| {
            (&a.statement, &a.query, &a.response).cmp(&(&b.statement, &b.query, &b.response))
        });
        serde_json::to_string(&OracleDocument { relevance, nli }).expect("serializable")
    }

    pub fn digest(&self) -> String {
        let hash = Sha256::digest(self.to_json_string().as_bytes());
        hex::encode(&hash[..8])
    }
}

/// Table-backed judge. Misses are errors, never defaults.
#[derive(Debug, Clone)]
pub struct OracleJudge {
    table: OracleTable,
    identity: String,
    max_in_flight: usize,
}

impl OracleJudge {
    pub fn new(table: OracleTable) -> Self {
        let identity = format!("oracle:{}", table.digest());
        Self {
            table,
            identity,
            max_in_flight: 1,
        }
    }

    pub fn with_max_in_flight(mut self, n: usize) -> Self {
        self.max_in_flight = n.max(1);
        self
    }

    pub fn table(&self) -> &OracleTable {
        &self.table
    }
}

impl Judge for OracleJudge {
    fn identity(&self) -> String {
        self.identity.clone()
    }

    fn max_in_flight(&self) -> usize {
        self.max_in_flight
    }

    fn judge_relevance(
        &self,
        _character: &str,
        statement: &PersonaStatement,
        query: &str,
    ) -> Result<RelevanceDist, JudgeError> {
        self.table
            .relevance(statement.text(), query)
            .ok_or_else(|| JudgeError::MissingRelevance {
                statement: statement.text().to_owned(),
                query: query.to_owned(),
            })
    }

    fn judge_nli(
        &self,
        _character: &str,
        statement: &PersonaStatement,
        query: &str,
        response: &str,
    ) -> Result<NliDist, JudgeError> {
        self.table
            .nli(statement.text(), query, response)
            .ok_or_else(|| JudgeError::MissingNli {
                statement: statement.text().to_owned(),
                query: query.to_owned(),
                response: response.to_owned(),
            })
    }
}
