//! Domain types shared by the judge, scoring and pipeline modules.
//!
//! Every type here is immutable once built. Constructors check the
//! probability and identity invariants, and deserialization goes through
//! the same constructors, so a value that exists is a valid value.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Tolerance for exact-by-construction probability identities.
pub const PROB_TOLERANCE: f64 = 1e-9;

/// Tolerance for aggregated report fields.
pub const REPORT_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum CoreError {
    #[error("persona has no statements")]
    EmptyPersona,
    #[error("statement at index {index} is empty")]
    EmptyStatement { index: usize },
    #[error("character name is empty")]
    EmptyCharacterName,
    #[error("statement ids must be unique and ascending: id {id} follows {previous}")]
    StatementOrder { previous: u64, id: u64 },
    #[error("query is empty")]
    EmptyQuery,
    #[error("{what} = {value} is not a probability in [0, 1]")]
    Probability { what: &'static str, value: f64 },
    #[error("NLI distribution ({entailed}, {neutral}, {contradicted}) does not sum to 1")]
    NliSum {
        entailed: f64,
        neutral: f64,
        contradicted: f64,
    },
    #[error("constraint eval for statement {statement_id} violates {identity}")]
    EvalIdentity {
        statement_id: u64,
        identity: &'static str,
    },
    #[error("{what} must be finite, got {value}")]
    NonFinite { what: &'static str, value: f64 },
    #[error("beta must be non-negative, got {0}")]
    NegativeBeta(f64),
}

fn check_probability(what: &'static str, value: f64) -> Result<f64, CoreError> {
    if (0.0..=1.0).contains(&value) {
        Ok(value)
    } else {
        Err(CoreError::Probability { what, value })
    }
}

/// One atomic fact about the character.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "RawStatement")]
pub struct PersonaStatement {
    id: u64,
    text: String,
}

#[derive(Deserialize)]
struct RawStatement {
    id: u64,
    text: String,
}

impl TryFrom<RawStatement> for PersonaStatement {
    type Error = CoreError;

    fn try_from(raw: RawStatement) -> Result<Self, Self::Error> {
        PersonaStatement::new(raw.id, raw.text)
    }
}

impl PersonaStatement {
    /// Builds a statement, trimming surrounding whitespace from `text`.
    pub fn new(id: u64, text: impl AsRef<str>) -> Result<Self, CoreError> {
        let text = text.as_ref().trim();
        if text.is_empty() {
            return Err(CoreError::EmptyStatement {
                index: usize::try_from(id).unwrap_or(usize::MAX),
            });
        }
        Ok(Self {
            id,
            text: text.to_owned(),
        })
    }

    pub fn id(&self) -> u64 {
        self.id
    }

    pub fn text(&self) -> &str {
        &self.text
    }
}

/// A character and the ordered set of statements that constrain it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RawPersona")]
pub struct Persona {
    character_name: String,
    statements: Vec<PersonaStatement>,
}

#[derive(Deserialize)]
struct RawPersona {
    character_name: String,
    statements: Vec<PersonaStatement>,
}

impl TryFrom<RawPersona> for Persona {
    type Error = CoreError;

    fn try_from(raw: RawPersona) -> Result<Self, Self::Error> {
        Persona::new(raw.character_name, raw.statements)
    }
}

impl Persona {
    pub fn new(
        character_name: impl Into<String>,
        statements: Vec<PersonaStatement>,
    ) -> Result<Self, CoreError> {
        let character_name = character_name.into().trim().to_owned();
        if character_name.is_empty() {
            return Err(CoreError::EmptyCharacterName);
        }
        if statements.is_empty() {
            return Err(CoreError::EmptyPersona);
        }
        for pair in statements.windows(2) {
            if pair[1].id <= pair[0].id {
                return Err(CoreError::StatementOrder {
                    previous: pair[0].id,
                    id: pair[1].id,
                });
            }
        }
        Ok(Self {
            character_name,
            statements,
        })
    }

    pub fn character_name(&self) -> &str {
        &self.character_name
    }

    pub fn statements(&self) -> &[PersonaStatement] {
        &self.statements
    }

    pub fn len(&self) -> usize {
        self.statements.len()
    }

    /// Always false for a constructed persona; present for API symmetry.
    pub fn is_empty(&self) -> bool {
        self.statements.is_empty()
    }

    pub fn statement(&self, id: u64) -> Option<&PersonaStatement> {
        self.statements
            .binary_search_by_key(&id, |s| s.id)
            .ok()
            .map(|i| &self.statements[i])
    }
}

/// Builds a persona from raw statement strings, numbering them `0..n` in
/// input order.
pub fn validate_persona<S: AsRef<str>>(
    character_name: &str,
    raw_statements: &[S],
) -> Result<Persona, CoreError> {
    if raw_statements.is_empty() {
        return Err(CoreError::EmptyPersona);
    }
    let statements = raw_statements
        .iter()
        .enumerate()
        .map(|(index, raw)| {
            PersonaStatement::new(index as u64, raw)
                .map_err(|_| CoreError::EmptyStatement { index })
        })
        .collect::<Result<Vec<_>, _>>()?;
    Persona::new(character_name, statements)
}

/// A single query/response exchange. Prior turns, if any, are flattened into
/// the query by the caller.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RawInteraction")]
pub struct Interaction {
    query: String,
    response: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    method_label: Option<String>,
}

#[derive(Deserialize)]
struct RawInteraction {
    query: String,
    response: String,
    #[serde(default)]
    method_label: Option<String>,
}

impl TryFrom<RawInteraction> for Interaction {
    type Error = CoreError;

    fn try_from(raw: RawInteraction) -> Result<Self, Self::Error> {
        Interaction::new(raw.query, raw.response, raw.method_label)
    }
}

impl Interaction {
    pub fn new(
        query: impl Into<String>,
        response: impl Into<String>,
        method_label: Option<String>,
    ) -> Result<Self, CoreError> {
        let query = query.into();
        if query.trim().is_empty() {
            return Err(CoreError::EmptyQuery);
        }
        Ok(Self {
            query,
            response: response.into(),
            method_label,
        })
    }

    pub fn query(&self) -> &str {
        &self.query
    }

    pub fn response(&self) -> &str {
        &self.response
    }

    pub fn method_label(&self) -> Option<&str> {
        self.method_label.as_deref()
    }
}

/// Probability that a statement is relevant to a query.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawRelevance")]
pub struct RelevanceDist {
    p_relevant: f64,
}

#[derive(Deserialize)]
struct RawRelevance {
    p_relevant: f64,
}

impl TryFrom<RawRelevance> for RelevanceDist {
    type Error = CoreError;

    fn try_from(raw: RawRelevance) -> Result<Self, Self::Error> {
        RelevanceDist::new(raw.p_relevant)
    }
}

impl RelevanceDist {
    pub fn new(p_relevant: f64) -> Result<Self, CoreError> {
        check_probability("p_relevant", p_relevant).map(|p_relevant| Self { p_relevant })
    }

    pub fn relevant() -> Self {
        Self { p_relevant: 1.0 }
    }

    pub fn irrelevant() -> Self {
        Self { p_relevant: 0.0 }
    }

    pub fn p_relevant(&self) -> f64 {
        self.p_relevant
    }

    pub fn p_irrelevant(&self) -> f64 {
        1.0 - self.p_relevant
    }
}

/// Three-way NLI label.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NliLabel {
    Entailed,
    Neutral,
    Contradicted,
}

impl NliLabel {
    pub const ALL: [NliLabel; 3] = [
        NliLabel::Entailed,
        NliLabel::Neutral,
        NliLabel::Contradicted,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            NliLabel::Entailed => "entailed",
            NliLabel::Neutral => "neutral",
            NliLabel::Contradicted => "contradicted",
        }
    }
}

/// Distribution over NLI labels for a statement against a response.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawNli")]
pub struct NliDist {
    p_entailed: f64,
    p_neutral: f64,
    p_contradicted: f64,
}

#[derive(Deserialize)]
struct RawNli {
    p_entailed: f64,
    p_neutral: f64,
    p_contradicted: f64,
}

impl TryFrom<RawNli> for NliDist {
    type Error = CoreError;

    fn try_from(raw: RawNli) -> Result<Self, Self::Error> {
        NliDist::new(raw.p_entailed, raw.p_neutral, raw.p_contradicted)
    }
}

impl NliDist {
    pub fn new(p_entailed: f64, p_neutral: f64, p_contradicted: f64) -> Result<Self, CoreError> {
        check_probability("p_entailed", p_entailed)?;
        check_probability("p_neutral", p_neutral)?;
        check_probability("p_contradicted", p_contradicted)?;
        if ((p_entailed + p_neutral + p_contradicted) - 1.0).abs() > PROB_TOLERANCE {
            return Err(CoreError::NliSum {
                entailed: p_entailed,
                neutral: p_neutral,
                contradicted: p_contradicted,
            });
        }
        Ok(Self {
            p_entailed,
            p_neutral,
            p_contradicted,
        })
    }

    pub fn one_hot(label: NliLabel) -> Self {
        let mut p = [0.0; 3];
        p[label as usize] = 1.0;
        Self {
            p_entailed: p[0],
            p_neutral: p[1],
            p_contradicted: p[2],
        }
    }

    pub fn neutral() -> Self {
        Self::one_hot(NliLabel::Neutral)
    }

    pub fn p_entailed(&self) -> f64 {
        self.p_entailed
    }

    pub fn p_neutral(&self) -> f64 {
        self.p_neutral
    }

    pub fn p_contradicted(&self) -> f64 {
        self.p_contradicted
    }

    /// Probability that the response is not contradicted by the statement.
    pub fn p_not_contradicted(&self) -> f64 {
        1.0 - self.p_contradicted
    }

    pub fn as_array(&self) -> [f64; 3] {
        [self.p_entailed, self.p_neutral, self.p_contradicted]
    }

    /// Most probable label; ties resolve in `entailed, neutral, contradicted`
    /// order.
    pub fn argmax(&self) -> NliLabel {
        let p = self.as_array();
        let mut best = 0;
        for i in 1..3 {
            if p[i] > p[best] {
                best = i;
            }
        }
        NliLabel::ALL[best]
    }
}

/// Per-statement scoring record.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawEval")]
pub struct ConstraintEval {
    statement_id: u64,
    relevance: RelevanceDist,
    nli: NliDist,
    p_apc: f64,
    active_share: f64,
    passive_penalty_share: f64,
}

#[derive(Deserialize)]
struct RawEval {
    statement_id: u64,
    relevance: RelevanceDist,
    nli: NliDist,
    p_apc: f64,
    active_share: f64,
    passive_penalty_share: f64,
}

impl TryFrom<RawEval> for ConstraintEval {
    type Error = CoreError;

    fn try_from(raw: RawEval) -> Result<Self, Self::Error> {
        ConstraintEval::from_parts(
            raw.statement_id,
            raw.relevance,
            raw.nli,
            raw.p_apc,
            raw.active_share,
            raw.passive_penalty_share,
        )
    }
}

impl ConstraintEval {
    /// Assembles a record from precomputed shares, checking that they agree
    /// with the relevance and NLI inputs.
    pub fn from_parts(
        statement_id: u64,
        relevance: RelevanceDist,
        nli: NliDist,
        p_apc: f64,
        active_share: f64,
        passive_penalty_share: f64,
    ) -> Result<Self, CoreError> {
        check_probability("p_apc", p_apc)?;
        let p_rel = relevance.p_relevant();
        let expected = p_rel * nli.p_entailed() + (1.0 - p_rel) * nli.p_not_contradicted();
        let identity_err = |identity| CoreError::EvalIdentity {
            statement_id,
            identity,
        };
        if (p_apc - expected).abs() > PROB_TOLERANCE {
            return Err(identity_err("p_apc marginalization"));
        }
        if (active_share - p_rel * nli.p_entailed()).abs() > PROB_TOLERANCE {
            return Err(identity_err("active share"));
        }
        if (passive_penalty_share - (1.0 - p_rel) * nli.p_contradicted()).abs() > PROB_TOLERANCE {
            return Err(identity_err("passive penalty share"));
        }
        if ((p_apc - (1.0 - p_rel)) - (active_share - passive_penalty_share)).abs() > PROB_TOLERANCE
        {
            return Err(identity_err("reward/penalty decomposition"));
        }
        Ok(Self {
            statement_id,
            relevance,
            nli,
            p_apc,
            active_share,
            passive_penalty_share,
        })
    }

    pub fn statement_id(&self) -> u64 {
        self.statement_id
    }

    pub fn relevance(&self) -> RelevanceDist {
        self.relevance
    }

    pub fn nli(&self) -> NliDist {
        self.nli
    }

    pub fn p_apc(&self) -> f64 {
        self.p_apc
    }

    pub fn active_share(&self) -> f64 {
        self.active_share
    }

    pub fn passive_penalty_share(&self) -> f64 {
        self.passive_penalty_share
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ViolationKind {
    /// A relevant statement the response fails to entail.
    ActiveMiss,
    /// An irrelevant statement the response contradicts.
    PassiveContradiction,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ViolationTrace {
    pub statement_id: u64,
    pub kind: ViolationKind,
    pub relevance: f64,
    /// `p_entailed` for active misses, `p_contradicted` for passive
    /// contradictions.
    pub offending_probability: f64,
}

/// Cut-offs used when tracing violations.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Thresholds {
    pub tau_rel: f64,
    pub tau_ent: f64,
    pub tau_con: f64,
}

impl Default for Thresholds {
    fn default() -> Self {
        Self {
            tau_rel: 0.5,
            tau_ent: 0.5,
            tau_con: 0.5,
        }
    }
}

impl Thresholds {
    pub fn new(tau_rel: f64, tau_ent: f64, tau_con: f64) -> Result<Self, CoreError> {
        Ok(Self {
            tau_rel: check_probability("tau_rel", tau_rel)?,
            tau_ent: check_probability("tau_ent", tau_ent)?,
            tau_con: check_probability("tau_con", tau_con)?,
        })
    }
}

/// Scores for one interaction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InteractionScore {
    pub interaction_index: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub method: Option<String>,
    pub query: String,
    pub evals: Vec<ConstraintEval>,
    /// Unregularized score: expected number of satisfied constraints.
    pub v_apc: f64,
    pub delta_v_apc: f64,
    pub active_reward: f64,
    pub passive_penalty: f64,
    pub violations: Vec<ViolationTrace>,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Aggregates {
    pub mean_v_apc: f64,
    pub mean_delta_v_apc: f64,
    pub mean_active_reward: f64,
    pub mean_passive_penalty: f64,
    pub interaction_count: usize,
}

impl Aggregates {
    pub fn from_rows<'a>(rows: impl IntoIterator<Item = &'a InteractionScore>) -> Self {
        let mut acc = Aggregates::default();
        for row in rows {
            acc.mean_v_apc += row.v_apc;
            acc.mean_delta_v_apc += row.delta_v_apc;
            acc.mean_active_reward += row.active_reward;
            acc.mean_passive_penalty += row.passive_penalty;
            acc.interaction_count += 1;
        }
        if acc.interaction_count > 0 {
            let n = acc.interaction_count as f64;
            acc.mean_v_apc /= n;
            acc.mean_delta_v_apc /= n;
            acc.mean_active_reward /= n;
            acc.mean_passive_penalty /= n;
        }
        acc
    }
}

/// Group key used for interactions that carry no method label.
pub const UNLABELED_METHOD: &str = "unlabeled";

/// Full scoring report over a set of interactions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApcReport {
    pub character: String,
    pub statement_count: usize,
    pub thresholds: Thresholds,
    pub per_interaction: Vec<InteractionScore>,
    pub aggregates: Aggregates,
    pub by_method: BTreeMap<String, Aggregates>,
}

impl ApcReport {
    pub fn new(
        persona: &Persona,
        thresholds: Thresholds,
        per_interaction: Vec<InteractionScore>,
    ) -> Self {
        let aggregates = Aggregates::from_rows(&per_interaction);
        let mut groups: BTreeMap<String, Vec<&InteractionScore>> = BTreeMap::new();
        for row in &per_interaction {
            let key = row.method.as_deref().unwrap_or(UNLABELED_METHOD).to_owned();
            groups.entry(key).or_default().push(row);
        }
        let by_method = groups
            .into_iter()
            .map(|(k, rows)| (k, Aggregates::from_rows(rows)))
            .collect();
        Self {
            character: persona.character_name().to_owned(),
            statement_count: persona.len(),
            thresholds,
            per_interaction,
            aggregates,
            by_method,
        }
    }
}

/// Log-probabilities of a preferred (`w`) and dispreferred (`l`) response
/// under the trained policy and a frozen reference policy.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DpoPairTerms {
    pub beta: f64,
    pub policy_logp_w: f64,
    pub policy_logp_l: f64,
    pub ref_logp_w: f64,
    pub ref_logp_l: f64,
}

impl DpoPairTerms {
    pub fn validate(&self) -> Result<(), CoreError> {
        let fields = [
            ("beta", self.beta),
            ("policy_logp_w", self.policy_logp_w),
            ("policy_logp_l", self.policy_logp_l),
            ("ref_logp_w", self.ref_logp_w),
            ("ref_logp_l", self.ref_logp_l),
        ];
        for (what, value) in fields {
            if !value.is_finite() {
                return Err(CoreError::NonFinite { what, value });
            }
        }
        if self.beta < 0.0 {
            return Err(CoreError::NegativeBeta(self.beta));
        }
        Ok(())
    }
}
