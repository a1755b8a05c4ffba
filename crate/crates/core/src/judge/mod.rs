//! Probabilistic judges for statement–query relevance and statement-to-response
//! NLI, plus the text-generation side used by the dataset pipeline.
//!
//! Backends:
//! - [`OracleJudge`]: lookup table, deterministic, used for fixtures and tests.
//! - [`ChatBackend`]: chat-completion endpoint with label parsing, vote
//!   averaging and retries. Implements both [`Judge`] and [`Generator`].
//! - [`Cached`]: wraps either of the above with an on-disk digest-keyed cache.

mod cache;
mod chat;
mod oracle;
pub mod prompts;
mod replay;

use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::types::{CoreError, NliDist, NliLabel, PersonaStatement, RelevanceDist};

pub use cache::{CacheStats, Cached, CACHE_FILE_NAME};
pub use chat::{
    ChatBackend, ChatChoice, ChatMessage, ChatRequest, ChatResponse, ChoiceMessage, HttpTransport,
    RetryPolicy, Transport, TransportError, API_KEY_ENV, RETRY_INSTRUCTION,
};
pub use oracle::{OracleJudge, OracleTable};
pub use prompts::PromptTemplates;
pub use replay::{Exchange, Outcome, RecordingTransport, ReplayTransport};

#[derive(Debug, Error)]
pub enum JudgeError {
    #[error("oracle has no relevance entry for statement {statement:?} and query {query:?}")]
    MissingRelevance { statement: String, query: String },
    #[error(
        "oracle has no NLI entry for statement {statement:?}, query {query:?} and response {response:?}"
    )]
    MissingNli {
        statement: String,
        query: String,
        response: String,
    },
    #[error("transport error during {context}: {message}")]
    Transport { context: String, message: String },
    #[error("could not parse a label payload ({reason}) from {raw:?}")]
    Parse { raw: String, reason: String },
    #[error("cache record {line} in {path} is corrupt: {reason}")]
    CacheCorrupt {
        path: String,
        line: usize,
        reason: String,
    },
    #[error("cache I/O error on {path}: {source}")]
    CacheIo {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("backend configuration: {0}")]
    Config(String),
    #[error("backend produced an invalid distribution: {0}")]
    Invalid(#[from] CoreError),
}

impl JudgeError {
    /// True when the failure came from configuration rather than from a
    /// running backend.
    pub fn is_config(&self) -> bool {
        matches!(self, JudgeError::Config(_))
    }
}

/// Closed label set a judge may emit.
pub trait JudgeLabel: Copy + Eq + 'static {
    fn all() -> &'static [Self];
    fn as_str(&self) -> &'static str;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RelevanceLabel {
    Relevant,
    Irrelevant,
}

impl JudgeLabel for RelevanceLabel {
    fn all() -> &'static [Self] {
        &[RelevanceLabel::Relevant, RelevanceLabel::Irrelevant]
    }

    fn as_str(&self) -> &'static str {
        match self {
            RelevanceLabel::Relevant => "relevant",
            RelevanceLabel::Irrelevant => "irrelevant",
        }
    }
}

impl RelevanceLabel {
    /// Hard label for a relevance distribution; 0.5 counts as relevant.
    pub fn from_dist(dist: RelevanceDist) -> Self {
        if dist.p_relevant() >= 0.5 {
            RelevanceLabel::Relevant
        } else {
            RelevanceLabel::Irrelevant
        }
    }
}

impl JudgeLabel for NliLabel {
    fn all() -> &'static [Self] {
        &NliLabel::ALL
    }

    fn as_str(&self) -> &'static str {
        NliLabel::as_str(self)
    }
}

/// Extracts the first JSON object in `text` that carries a `"label"` field
/// whose value (case-insensitive, trimmed) belongs to `L`.
///
/// Prose before or after the object is ignored.
pub fn parse_label_payload<L: JudgeLabel>(text: &str) -> Result<L, JudgeError> {
    let mut saw_payload = false;
    for (start, _) in text.match_indices('{') {
        let mut stream =
            serde_json::Deserializer::from_str(&text[start..]).into_iter::<serde_json::Value>();
        let Some(Ok(serde_json::Value::Object(map))) = stream.next() else {
            continue;
        };
        let Some(label) = map.get("label").and_then(|v| v.as_str()) else {
            continue;
        };
        saw_payload = true;
        let label = label.trim();
        if let Some(found) = L::all()
            .iter()
            .find(|l| l.as_str().eq_ignore_ascii_case(label))
        {
            return Ok(*found);
        }
    }
    let reason = if saw_payload {
        "label not in the expected set"
    } else {
        "no payload object with a label field"
    };
    Err(JudgeError::Parse {
        raw: text.to_owned(),
        reason: reason.to_owned(),
    })
}

/// Relevance distribution as the vote frequency of `relevant`.
pub fn relevance_from_votes(votes: &[RelevanceLabel]) -> Result<RelevanceDist, JudgeError> {
    if votes.is_empty() {
        return Err(JudgeError::Config("vote-averaging over zero votes".into()));
    }
    let hits = votes
        .iter()
        .filter(|v| **v == RelevanceLabel::Relevant)
        .count();
    Ok(RelevanceDist::new(hits as f64 / votes.len() as f64)?)
}

/// NLI distribution as label frequencies over the votes.
pub fn nli_from_votes(votes: &[NliLabel]) -> Result<NliDist, JudgeError> {
    if votes.is_empty() {
        return Err(JudgeError::Config("vote-averaging over zero votes".into()));
    }
    let mut counts = [0usize; 3];
    for v in votes {
        counts[*v as usize] += 1;
    }
    let n = votes.len() as f64;
    Ok(NliDist::new(
        counts[0] as f64 / n,
        counts[1] as f64 / n,
        counts[2] as f64 / n,
    )?)
}

/// Relevance (P_g) and NLI (P_h) judge.
pub trait Judge: Send + Sync {
    /// Stable description of the backend, used as part of cache keys.
    fn identity(&self) -> String;

    fn votes_per_judgment(&self) -> u32 {
        1
    }

    /// Concurrency ceiling callers should respect.
    fn max_in_flight(&self) -> usize {
        1
    }

    fn judge_relevance(
        &self,
        character: &str,
        statement: &PersonaStatement,
        query: &str,
    ) -> Result<RelevanceDist, JudgeError>;

    fn judge_nli(
        &self,
        character: &str,
        statement: &PersonaStatement,
        query: &str,
        response: &str,
    ) -> Result<NliDist, JudgeError>;
}

/// A request for `n` completions of a single user prompt.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GenerationRequest {
    pub prompt: String,
    pub temperature: f64,
    pub n: usize,
    /// Distinguishes repeated samples of the same prompt in the cache; never
    /// sent over the wire.
    pub draw: u64,
}

impl GenerationRequest {
    pub fn new(prompt: impl Into<String>, temperature: f64, n: usize) -> Self {
        Self {
            prompt: prompt.into(),
            temperature,
            n,
            draw: 0,
        }
    }

    pub fn with_draw(mut self, draw: u64) -> Self {
        self.draw = draw;
        self
    }
}

/// Text-generation backend.
pub trait Generator: Send + Sync {
    fn identity(&self) -> String;

    fn max_in_flight(&self) -> usize {
        1
    }

    /// Returns exactly `request.n` completions in order, or an error with no
    /// partial output.
    fn generate_text(&self, request: &GenerationRequest) -> Result<Vec<String>, JudgeError>;
}

impl<T: Judge + ?Sized> Judge for Arc<T> {
    fn identity(&self) -> String {
        (**self).identity()
    }
    fn votes_per_judgment(&self) -> u32 {
        (**self).votes_per_judgment()
    }
    fn max_in_flight(&self) -> usize {
        (**self).max_in_flight()
    }
    fn judge_relevance(
        &self,
        character: &str,
        statement: &PersonaStatement,
        query: &str,
    ) -> Result<RelevanceDist, JudgeError> {
        (**self).judge_relevance(character, statement, query)
    }
    fn judge_nli(
        &self,
        character: &str,
        statement: &PersonaStatement,
        query: &str,
        response: &str,
    ) -> Result<NliDist, JudgeError> {
        (**self).judge_nli(character, statement, query, response)
    }
}

impl<T: Generator + ?Sized> Generator for Arc<T> {
    fn identity(&self) -> String {
        (**self).identity()
    }
    fn max_in_flight(&self) -> usize {
        (**self).max_in_flight()
    }
    fn generate_text(&self, request: &GenerationRequest) -> Result<Vec<String>, JudgeError> {
        (**self).generate_text(request)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    Oracle,
    ChatApi,
    Cached(Box<BackendKind>),
}

impl BackendKind {
    fn innermost(&self) -> &BackendKind {
        match self {
            BackendKind::Cached(inner) => inner.innermost(),
            other => other,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JudgeBackendConfig {
    pub backend_kind: BackendKind,
    pub endpoint_url: Option<String>,
    pub model_name: Option<String>,
    pub votes_per_judgment: u32,
    pub max_in_flight: usize,
    pub timeout_seconds: f64,
    /// Sampling temperature for judgments.
    pub judge_temperature: f64,
}

impl Default for JudgeBackendConfig {
    fn default() -> Self {
        Self {
            backend_kind: BackendKind::Oracle,
            endpoint_url: None,
            model_name: None,
            votes_per_judgment: 1,
            max_in_flight: 8,
            timeout_seconds: 60.0,
            judge_temperature: 0.0,
        }
    }
}

impl JudgeBackendConfig {
    pub fn validate(&self) -> Result<(), JudgeError> {
        if self.votes_per_judgment == 0 {
            return Err(JudgeError::Config("votes_per_judgment must be >= 1".into()));
        }
        if self.max_in_flight == 0 {
            return Err(JudgeError::Config("max_in_flight must be >= 1".into()));
        }
        if !(self.timeout_seconds.is_finite() && self.timeout_seconds > 0.0) {
            return Err(JudgeError::Config(
                "timeout_seconds must be positive".into(),
            ));
        }
        if !(self.judge_temperature.is_finite() && self.judge_temperature >= 0.0) {
            return Err(JudgeError::Config("judge temperature must be >= 0".into()));
        }
        if *self.backend_kind.innermost() == BackendKind::ChatApi {
            if self.endpoint_url.as_deref().is_none_or(str::is_empty) {
                return Err(JudgeError::Config(
                    "chat backend requires an endpoint URL".into(),
                ));
            }
            if self.model_name.as_deref().is_none_or(str::is_empty) {
                return Err(JudgeError::Config(
                    "chat backend requires a model name".into(),
                ));
            }
        }
        Ok(())
    }

    pub fn timeout(&self) -> Duration {
        Duration::from_secs_f64(self.timeout_seconds)
    }
}
