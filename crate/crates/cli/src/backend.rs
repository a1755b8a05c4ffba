use std::path::PathBuf;
use std::sync::Arc;

use apc_core::judge::{HttpTransport, RetryPolicy};
use apc_core::{
    BackendKind, Cached, ChatBackend, GenerationRequest, Generator, Judge, JudgeBackendConfig,
    JudgeError, NliDist, OracleJudge, PersonaStatement, PromptTemplates, RelevanceDist, Thresholds,
};

use crate::args::{BackendChoice, Common, ReportFormat};
use crate::input::read_oracle;
use crate::CliError;

/// Settings shared by every command.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub backend: JudgeBackendConfig,
    pub oracle_file: Option<PathBuf>,
    pub cache_dir: Option<PathBuf>,
    pub thresholds: Thresholds,
    pub output_path: Option<PathBuf>,
    pub report_format: Option<ReportFormat>,
    pub max_retries: u32,
    pub prompt_dir: Option<PathBuf>,
}

impl RunConfig {
    pub fn from_args(c: &Common) -> Result<Self, CliError> {
        let thresholds = Thresholds::new(c.tau_rel, c.tau_ent, c.tau_con)
            .map_err(|e| CliError::Input(format!("thresholds: {e}")))?;
        let base = match c.backend {
            BackendChoice::Oracle => BackendKind::Oracle,
            BackendChoice::Chat | BackendChoice::CachedChat => BackendKind::ChatApi,
        };
        if c.backend == BackendChoice::CachedChat && c.cache_dir.is_none() {
            return Err(CliError::Input(
                "--backend cached-chat needs --cache-dir".into(),
            ));
        }
        let backend_kind = if c.cache_dir.is_some() {
            BackendKind::Cached(Box::new(base))
        } else {
            base
        };
        let backend = JudgeBackendConfig {
            backend_kind,
            endpoint_url: c.endpoint.clone(),
            model_name: c.model.clone(),
            votes_per_judgment: c.votes,
            max_in_flight: c.max_in_flight,
            timeout_seconds: c.timeout,
            judge_temperature: c.judge_temperature,
        };
        backend
            .validate()
            .map_err(|e| CliError::Input(e.to_string()))?;
        if c.backend == BackendChoice::Oracle && c.oracle_file.is_none() {
            return Err(CliError::Input(
                "--backend oracle needs --oracle-file".into(),
            ));
        }
        Ok(Self {
            backend,
            oracle_file: c.oracle_file.clone(),
            cache_dir: c.cache_dir.clone(),
            thresholds,
            output_path: c.out.clone(),
            report_format: c.format,
            max_retries: c.max_retries,
            prompt_dir: c.prompt_dir.clone(),
        })
    }

    pub fn prompts(&self) -> Result<PromptTemplates, CliError> {
        match &self.prompt_dir {
            Some(dir) => PromptTemplates::from_dir(dir)
                .map_err(|e| CliError::Input(format!("prompt directory {}: {e}", dir.display()))),
            None => Ok(PromptTemplates::default()),
        }
    }

    fn is_oracle(&self) -> bool {
        let mut kind = &self.backend.backend_kind;
        while let BackendKind::Cached(inner) = kind {
            kind = inner;
        }
        *kind == BackendKind::Oracle
    }

    fn chat(&self, prompts: &PromptTemplates) -> Option<Arc<ChatBackend>> {
        let endpoint = self.backend.endpoint_url.as_deref()?;
        let model = self.backend.model_name.as_deref()?;
        let transport = HttpTransport::from_env(endpoint, self.backend.timeout());
        let retry = RetryPolicy {
            max_retries: self.max_retries,
            ..RetryPolicy::default()
        };
        Some(Arc::new(
            ChatBackend::new(Arc::new(transport), endpoint, model)
                .with_votes(self.backend.votes_per_judgment)
                .with_judge_temperature(self.backend.judge_temperature)
                .with_max_in_flight(self.backend.max_in_flight)
                .with_retry(retry)
                .with_prompts(prompts.clone()),
        ))
    }

    /// Builds the judge and, when a chat endpoint is configured, the
    /// generator. The oracle backend generates through the chat endpoint if
    /// one is given.
    pub fn connect(&self, prompts: &PromptTemplates) -> Result<Service, CliError> {
        let chat = self.chat(prompts);
        let judge: Arc<dyn Judge> = if self.is_oracle() {
            let path = self.oracle_file.as_deref().expect("checked in from_args");
            Arc::new(
                OracleJudge::new(read_oracle(path)?).with_max_in_flight(self.backend.max_in_flight),
            )
        } else {
            chat.clone().expect("checked in from_args")
        };
        let backend = Backend {
            judge,
            generator: chat.map(|c| c as Arc<dyn Generator>),
        };
        match &self.cache_dir {
            Some(dir) => {
                let cached = Cached::open(backend, dir).map_err(|e| match e {
                    JudgeError::CacheCorrupt { .. } | JudgeError::CacheIo { .. } => {
                        CliError::Input(e.to_string())
                    }
                    other => CliError::Backend(other.to_string()),
                })?;
                Ok(Service::Cached(Arc::new(cached)))
            }
            None => Ok(Service::Plain(Arc::new(backend))),
        }
    }
}

/// A judge plus an optional generator behind one cacheable value.
pub struct Backend {
    judge: Arc<dyn Judge>,
    generator: Option<Arc<dyn Generator>>,
}

impl Backend {
    pub fn has_generator(&self) -> bool {
        self.generator.is_some()
    }
}

impl Judge for Backend {
    fn identity(&self) -> String {
        self.judge.identity()
    }
    fn votes_per_judgment(&self) -> u32 {
        self.judge.votes_per_judgment()
    }
    fn max_in_flight(&self) -> usize {
        self.judge.max_in_flight()
    }
    fn judge_relevance(
        &self,
        character: &str,
        statement: &PersonaStatement,
        query: &str,
    ) -> Result<RelevanceDist, JudgeError> {
        self.judge.judge_relevance(character, statement, query)
    }
    fn judge_nli(
        &self,
        character: &str,
        statement: &PersonaStatement,
        query: &str,
        response: &str,
    ) -> Result<NliDist, JudgeError> {
        self.judge.judge_nli(character, statement, query, response)
    }
}

impl Generator for Backend {
    fn identity(&self) -> String {
        self.generator
            .as_ref()
            .map_or_else(|| "none".to_owned(), |g| g.identity())
    }
    fn max_in_flight(&self) -> usize {
        self.generator.as_ref().map_or(1, |g| g.max_in_flight())
    }
    fn generate_text(&self, request: &GenerationRequest) -> Result<Vec<String>, JudgeError> {
        match &self.generator {
            Some(g) => g.generate_text(request),
            None => Err(JudgeError::Config(
                "no generator configured: pass --endpoint and --model".into(),
            )),
        }
    }
}

pub enum Service {
    Plain(Arc<Backend>),
    Cached(Arc<Cached<Backend>>),
}

pub trait JudgeAndGenerator: Judge + Generator {}
impl<T: Judge + Generator> JudgeAndGenerator for T {}

impl Service {
    pub fn get(&self) -> &dyn JudgeAndGenerator {
        match self {
            Service::Plain(b) => b.as_ref(),
            Service::Cached(c) => c.as_ref(),
        }
    }

    pub fn has_generator(&self) -> bool {
        match self {
            Service::Plain(b) => b.has_generator(),
            Service::Cached(c) => c.inner().has_generator(),
        }
    }

    /// Prints cache hit/miss counts to stderr when caching is on.
    pub fn report_cache(&self) {
        if let Service::Cached(c) = self {
            let s = c.stats();
            eprintln!(
                "cache: {} hits, {} misses ({})",
                s.hits,
                s.misses,
                c.path().display()
            );
        }
    }
}
