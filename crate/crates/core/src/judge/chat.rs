//! Chat-completion backend.
//!
//! Wire format: `POST {endpoint}/chat/completions` with `model`, `messages`,
//! `temperature` and `n`; completions are read from
//! `choices[*].message.content`. The bearer token comes from `APC_API_KEY`.

use std::sync::Arc;
use std::thread;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::prompts::PromptTemplates;
use super::{
    nli_from_votes, parse_label_payload, relevance_from_votes, GenerationRequest, Generator, Judge,
    JudgeBackendConfig, JudgeError, JudgeLabel, RelevanceLabel,
};
use crate::types::{NliDist, NliLabel, PersonaStatement, RelevanceDist};

pub const API_KEY_ENV: &str = "APC_API_KEY";

/// Appended to a judgment prompt after a reply that held no usable label.
pub const RETRY_INSTRUCTION: &str =
    "\n\nRespond with only the JSON payload, for example {\"label\": \"...\"}, and nothing else.";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: String,
    pub content: String,
}

impl ChatMessage {
    pub fn user(content: impl Into<String>) -> Self {
        Self {
            role: "user".into(),
            content: content.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub model: String,
    pub messages: Vec<ChatMessage>,
    pub temperature: f64,
    pub n: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChoiceMessage {
    #[serde(default)]
    pub content: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatChoice {
    pub message: ChoiceMessage,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatResponse {
    pub choices: Vec<ChatChoice>,
}

impl ChatResponse {
    pub fn from_contents<S: Into<String>>(contents: impl IntoIterator<Item = S>) -> Self {
        Self {
            choices: contents
                .into_iter()
                .map(|c| ChatChoice {
                    message: ChoiceMessage {
                        content: Some(c.into()),
                    },
                })
                .collect(),
        }
    }

    fn contents(self) -> impl Iterator<Item = String> {
        self.choices
            .into_iter()
            .map(|c| c.message.content.unwrap_or_default())
    }
}

#[derive(Debug, Clone, Error)]
#[error("{0}")]
pub struct TransportError(pub String);

/// Moves one chat request over some channel.
pub trait Transport: Send + Sync {
    fn send(&self, request: &ChatRequest) -> Result<ChatResponse, TransportError>;
}

impl<T: Transport + ?Sized> Transport for Arc<T> {
    fn send(&self, request: &ChatRequest) -> Result<ChatResponse, TransportError> {
        (**self).send(request)
    }
}

/// Blocking HTTP transport.
pub struct HttpTransport {
    agent: ureq::Agent,
    url: String,
    api_key: Option<String>,
}

impl HttpTransport {
    /// `endpoint` is the API base (for example `http://localhost:8000/v1`).
    pub fn new(endpoint: &str, timeout: Duration, api_key: Option<String>) -> Self {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .build()
            .into();
        Self {
            agent,
            url: format!("{}/chat/completions", endpoint.trim_end_matches('/')),
            api_key,
        }
    }

    /// Reads the bearer token from [`API_KEY_ENV`].
    pub fn from_env(endpoint: &str, timeout: Duration) -> Self {
        let key = std::env::var(API_KEY_ENV).ok().filter(|k| !k.is_empty());
        Self::new(endpoint, timeout, key)
    }
}

impl Transport for HttpTransport {
    fn send(&self, request: &ChatRequest) -> Result<ChatResponse, TransportError> {
        let mut req = self.agent.post(&self.url);
        if let Some(key) = &self.api_key {
            req = req.header("Authorization", &format!("Bearer {key}"));
        }
        let response = req
            .send_json(request)
            .map_err(|e| TransportError(format!("POST {}: {e}", self.url)))?;
        response
            .into_body()
            .read_json::<ChatResponse>()
            .map_err(|e| TransportError(format!("decoding response from {}: {e}", self.url)))
    }
}

/// Retry schedule shared by transport and parse failures.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RetryPolicy {
    /// Retries after the first attempt.
    pub max_retries: u32,
    /// Delay before the first retry; doubles on each further retry.
    pub base_delay: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_retries: 3,
            base_delay: Duration::from_secs(1),
        }
    }
}

impl RetryPolicy {
    pub fn immediate(max_retries: u32) -> Self {
        Self {
            max_retries,
            base_delay: Duration::ZERO,
        }
    }

    pub fn delay(&self, retry: u32) -> Duration {
        self.base_delay * 2u32.saturating_pow(retry.saturating_sub(1))
    }

    fn wait(&self, retry: u32) {
        let d = self.delay(retry);
        if !d.is_zero() {
            thread::sleep(d);
        }
    }
}

/// Judge and generator backed by a chat-completion model.
pub struct ChatBackend {
    transport: Arc<dyn Transport>,
    endpoint: String,
    model: String,
    votes: u32,
    judge_temperature: f64,
    max_in_flight: usize,
    retry: RetryPolicy,
    prompts: PromptTemplates,
}

impl ChatBackend {
    pub fn new(transport: Arc<dyn Transport>, endpoint: &str, model: &str) -> Self {
        Self {
            transport,
            endpoint: endpoint.to_owned(),
            model: model.to_owned(),
            votes: 1,
            judge_temperature: 0.0,
            max_in_flight: 8,
            retry: RetryPolicy::default(),
            prompts: PromptTemplates::default(),
        }
    }

    /// Builds an HTTP-backed chat backend from a validated config.
    pub fn from_config(config: &JudgeBackendConfig) -> Result<Self, JudgeError> {
        config.validate()?;
        let endpoint = config
            .endpoint_url
            .as_deref()
            .ok_or_else(|| JudgeError::Config("chat backend requires an endpoint URL".into()))?;
        let model = config
            .model_name
            .as_deref()
            .ok_or_else(|| JudgeError::Config("chat backend requires a model name".into()))?;
        let transport = HttpTransport::from_env(endpoint, config.timeout());
        Ok(Self::new(Arc::new(transport), endpoint, model)
            .with_votes(config.votes_per_judgment)
            .with_judge_temperature(config.judge_temperature)
            .with_max_in_flight(config.max_in_flight))
    }

    pub fn with_votes(mut self, votes: u32) -> Self {
        self.votes = votes.max(1);
        self
    }

    pub fn with_judge_temperature(mut self, t: f64) -> Self {
        self.judge_temperature = t;
        self
    }

    pub fn with_max_in_flight(mut self, n: usize) -> Self {
        self.max_in_flight = n.max(1);
        self
    }

    pub fn with_retry(mut self, retry: RetryPolicy) -> Self {
        self.retry = retry;
        self
    }

    pub fn with_prompts(mut self, prompts: PromptTemplates) -> Self {
        self.prompts = prompts;
        self
    }

    pub fn prompts(&self) -> &PromptTemplates {
        &self.prompts
    }

    fn request(&self, prompt: &str, temperature: f64, n: usize) -> ChatRequest {
        ChatRequest {
            model: self.model.clone(),
            messages: vec![ChatMessage::user(prompt)],
            temperature,
            n,
        }
    }

    /// Collects `self.votes` parsed labels, re-prompting on transport and
    /// parse failures.
    fn collect_votes<L: JudgeLabel>(&self, prompt: &str, task: &str) -> Result<Vec<L>, JudgeError> {
        let wanted = self.votes as usize;
        let mut labels: Vec<L> = Vec::with_capacity(wanted);
        let mut current_prompt = prompt.to_owned();
        let mut retry = 0;
        loop {
            let need = wanted - labels.len();
            let mut last_err = None;
            match self
                .transport
                .send(&self.request(&current_prompt, self.judge_temperature, need))
            {
                Ok(response) => {
                    for content in response.contents() {
                        if labels.len() == wanted {
                            break;
                        }
                        match parse_label_payload::<L>(&content) {
                            Ok(label) => labels.push(label),
                            Err(e) => last_err = Some(e),
                        }
                    }
                }
                Err(e) => {
                    last_err = Some(JudgeError::Transport {
                        context: format!("{task} judgment"),
                        message: e.0,
                    });
                }
            }
            if labels.len() == wanted {
                return Ok(labels);
            }
            if matches!(last_err, Some(JudgeError::Parse { .. })) {
                current_prompt = format!("{prompt}{RETRY_INSTRUCTION}");
            }
            retry += 1;
            if retry > self.retry.max_retries {
                return Err(last_err.unwrap_or_else(|| JudgeError::Transport {
                    context: format!("{task} judgment"),
                    message: format!("backend returned {} of {wanted} votes", labels.len()),
                }));
            }
            self.retry.wait(retry);
        }
    }
}

impl Judge for ChatBackend {
    fn identity(&self) -> String {
        format!(
            "chat:{}:{}:t={}",
            self.endpoint, self.model, self.judge_temperature
        )
    }

    fn votes_per_judgment(&self) -> u32 {
        self.votes
    }

    fn max_in_flight(&self) -> usize {
        self.max_in_flight
    }

    fn judge_relevance(
        &self,
        character: &str,
        statement: &PersonaStatement,
        query: &str,
    ) -> Result<RelevanceDist, JudgeError> {
        let prompt = self
            .prompts
            .relevance_prompt(character, statement.text(), query);
        let votes = self.collect_votes::<RelevanceLabel>(&prompt, "relevance")?;
        relevance_from_votes(&votes)
    }

    fn judge_nli(
        &self,
        character: &str,
        statement: &PersonaStatement,
        query: &str,
        response: &str,
    ) -> Result<NliDist, JudgeError> {
        let prompt = self
            .prompts
            .nli_prompt(character, statement.text(), query, response);
        let votes = self.collect_votes::<NliLabel>(&prompt, "nli")?;
        nli_from_votes(&votes)
    }
}

impl Generator for ChatBackend {
    fn identity(&self) -> String {
        format!("chat:{}:{}", self.endpoint, self.model)
    }

    fn max_in_flight(&self) -> usize {
        self.max_in_flight
    }

    fn generate_text(&self, request: &GenerationRequest) -> Result<Vec<String>, JudgeError> {
        if !(request.temperature.is_finite() && request.temperature >= 0.0) {
            return Err(JudgeError::Config(format!(
                "temperature must be >= 0, got {}",
                request.temperature
            )));
        }
        let mut out = Vec::with_capacity(request.n);
        let mut retry = 0;
        while out.len() < request.n {
            let need = request.n - out.len();
            match self
                .transport
                .send(&self.request(&request.prompt, request.temperature, need))
            {
                Ok(response) => out.extend(response.contents().take(need)),
                Err(e) => {
                    retry += 1;
                    if retry > self.retry.max_retries {
                        return Err(JudgeError::Transport {
                            context: format!(
                                "generation (n={}, temperature={}, prompt {:?})",
                                request.n,
                                request.temperature,
                                preview(&request.prompt)
                            ),
                            message: e.0,
                        });
                    }
                    self.retry.wait(retry);
                }
            }
        }
        Ok(out)
    }
}

fn preview(text: &str) -> String {
    const MAX: usize = 60;
    match text.char_indices().nth(MAX) {
        Some((i, _)) => format!("{}...", &text[..i]),
        None => text.to_owned(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::judge::{Exchange, Outcome, ReplayTransport};

    fn backend(exchanges: Vec<Exchange>) -> (Arc<ReplayTransport>, ChatBackend) {
        let t = Arc::new(ReplayTransport::new(exchanges));
        let b = ChatBackend::new(t.clone(), "http://test/v1", "judge-model")
            .with_retry(RetryPolicy::immediate(3));
        (t, b)
    }

    fn req(b: &ChatBackend, prompt: &str, temperature: f64, n: usize) -> ChatRequest {
        b.request(prompt, temperature, n)
    }

    #[test]
    fn one_vote_is_one_hot() {
        let (_, probe) = backend(vec![]);
        let s = PersonaStatement::new(0, "s").unwrap();
        let prompt = probe.prompts.nli_prompt("c", "s", "q", "r");
        let ex = Exchange::ok(
            req(&probe, &prompt, 0.0, 1),
            ChatResponse::from_contents([r#"{"label": "contradicted"}"#]),
        );
        let (_, b) = backend(vec![ex]);
        assert_eq!(
            b.judge_nli("c", &s, "q", "r").unwrap().as_array(),
            [0.0, 0.0, 1.0]
        );
    }

    #[test]
    fn generation_keeps_order_and_arity() {
        let (_, probe) = backend(vec![]);
        let ex = Exchange::ok(
            req(&probe, "p", 1.0, 2),
            ChatResponse::from_contents(["x", "y"]),
        );
        let (t, b) = backend(vec![ex]);
        let out = b
            .generate_text(&GenerationRequest::new("p", 1.0, 2))
            .unwrap();
        assert_eq!(out, vec!["x", "y"]);
        assert_eq!(t.requests().len(), 1);
        assert_eq!(t.requests()[0].n, 2);
    }

    #[test]
    fn short_reply_requests_the_remainder() {
        let (_, probe) = backend(vec![]);
        let (t, b) = backend(vec![
            Exchange::ok(req(&probe, "p", 1.0, 3), ChatResponse::from_contents(["a"])),
            Exchange::ok(
                req(&probe, "p", 1.0, 2),
                ChatResponse::from_contents(["b", "c"]),
            ),
        ]);
        let out = b
            .generate_text(&GenerationRequest::new("p", 1.0, 3))
            .unwrap();
        assert_eq!(out, vec!["a", "b", "c"]);
        assert_eq!(t.requests().len(), 2);
    }

    #[test]
    fn backend_down_yields_no_partial_output() {
        let (_, probe) = backend(vec![]);
        let (t, b) = backend(vec![Exchange {
            request: req(&probe, "p", 1.0, 2),
            outcome: Outcome::Error("connection refused".into()),
        }]);
        let err = b
            .generate_text(&GenerationRequest::new("p", 1.0, 2))
            .unwrap_err();
        match err {
            JudgeError::Transport { context, message } => {
                assert!(context.contains("n=2"), "{context}");
                assert_eq!(message, "connection refused");
            }
            other => panic!("unexpected {other:?}"),
        }
        assert_eq!(t.requests().len(), 4);
    }

    #[test]
    fn negative_temperature_rejected() {
        let (_, b) = backend(vec![]);
        assert!(b
            .generate_text(&GenerationRequest::new("p", -1.0, 1))
            .unwrap_err()
            .is_config());
    }

    #[test]
    fn retry_delays_double() {
        let p = RetryPolicy::default();
        assert_eq!(p.delay(1), Duration::from_secs(1));
        assert_eq!(p.delay(2), Duration::from_secs(2));
        assert_eq!(p.delay(3), Duration::from_secs(4));
    }

    #[test]
    fn identity_includes_model_and_temperature() {
        let (_, b) = backend(vec![]);
        let b = b.with_judge_temperature(0.7);
        assert_eq!(Judge::identity(&b), "chat:http://test/v1:judge-model:t=0.7");
        assert_eq!(Generator::identity(&b), "chat:http://test/v1:judge-model");
    }

    #[test]
    fn preview_truncates_on_char_boundary() {
        let long = "é".repeat(100);
        let p = preview(&long);
        assert!(p.ends_with("...") && p.chars().count() == 63);
    }
}
