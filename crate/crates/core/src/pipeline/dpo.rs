//! Reference implementations of the pairwise DPO loss and the
//! relevance-weighted APC loss built on it.
//!
//! `pi_ref` in the pairwise loss is the frozen reference policy. The active
//! and passive "reward models" (P_ent and 1 - P_con) only decide which
//! response of a pair is preferred for each statement; see
//! [`per_statement_preferences`].

use serde::{Deserialize, Serialize};

use crate::types::{ConstraintEval, CoreError, DpoPairTerms, NliDist};

/// `-ln(sigmoid(z))`, stable for large |z|.
fn neg_log_sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        (-z).exp().ln_1p()
    } else {
        -z + z.exp().ln_1p()
    }
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

fn margin(terms: &DpoPairTerms) -> f64 {
    terms.beta
        * ((terms.policy_logp_w - terms.ref_logp_w) - (terms.policy_logp_l - terms.ref_logp_l))
}

/// `-ln sigmoid(beta * [(log pi(y_w) - log ref(y_w)) - (log pi(y_l) - log ref(y_l))])`
pub fn dpo_pair_loss(terms: &DpoPairTerms) -> Result<f64, CoreError> {
    terms.validate()?;
    Ok(neg_log_sigmoid(margin(terms)))
}

/// Partial derivatives of [`dpo_pair_loss`] with respect to the policy
/// log-probabilities.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DpoGradient {
    pub d_policy_logp_w: f64,
    pub d_policy_logp_l: f64,
}

pub fn dpo_pair_loss_grad(terms: &DpoPairTerms) -> Result<DpoGradient, CoreError> {
    terms.validate()?;
    // d/dz [-ln sigmoid(z)] = -sigmoid(-z)
    let s = sigmoid(-margin(terms));
    Ok(DpoGradient {
        d_policy_logp_w: -terms.beta * s,
        d_policy_logp_l: terms.beta * s,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConstraintRewards {
    /// Entailment probability; rewards a response under an active constraint.
    pub active: f64,
    /// Non-contradiction probability; rewards it under a passive one.
    pub passive: f64,
}

pub fn constraint_rewards(nli: NliDist) -> ConstraintRewards {
    ConstraintRewards {
        active: nli.p_entailed(),
        passive: nli.p_not_contradicted(),
    }
}

/// Active and passive DPO losses for one statement, weighted by its
/// relevance to the query.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PerStatementDpoTerm {
    p_relevant: f64,
    loss_active: f64,
    loss_passive: f64,
}

impl PerStatementDpoTerm {
    pub fn new(p_relevant: f64, loss_active: f64, loss_passive: f64) -> Result<Self, CoreError> {
        if !(0.0..=1.0).contains(&p_relevant) {
            return Err(CoreError::Probability {
                what: "p_relevant",
                value: p_relevant,
            });
        }
        for (what, value) in [("loss_active", loss_active), ("loss_passive", loss_passive)] {
            if !value.is_finite() {
                return Err(CoreError::NonFinite { what, value });
            }
            if value < 0.0 {
                return Err(CoreError::Probability { what, value });
            }
        }
        Ok(Self {
            p_relevant,
            loss_active,
            loss_passive,
        })
    }

    /// Builds the term from the pair log-probabilities ordered by the active
    /// and passive rewards respectively.
    pub fn from_pairs(
        p_relevant: f64,
        active: &DpoPairTerms,
        passive: &DpoPairTerms,
    ) -> Result<Self, CoreError> {
        Self::new(p_relevant, dpo_pair_loss(active)?, dpo_pair_loss(passive)?)
    }

    pub fn p_relevant(&self) -> f64 {
        self.p_relevant
    }

    pub fn loss_active(&self) -> f64 {
        self.loss_active
    }

    pub fn loss_passive(&self) -> f64 {
        self.loss_passive
    }

    pub fn weighted(&self) -> f64 {
        self.p_relevant * self.loss_active + (1.0 - self.p_relevant) * self.loss_passive
    }
}

/// `sum_i [p_rel_i * L_active_i + (1 - p_rel_i) * L_passive_i]`
pub fn apc_dpo_loss(terms: &[PerStatementDpoTerm]) -> f64 {
    terms.iter().map(PerStatementDpoTerm::weighted).sum()
}

/// Per-statement preference direction between two responses to the same
/// query. Index 0 is response `a`, 1 is response `b`; `None` means tied.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StatementPreference {
    pub statement_id: u64,
    pub p_relevant: f64,
    /// (winner, loser) by entailment probability.
    pub active: Option<(usize, usize)>,
    /// (winner, loser) by non-contradiction probability.
    pub passive: Option<(usize, usize)>,
}

fn order(a: f64, b: f64) -> Option<(usize, usize)> {
    if a > b {
        Some((0, 1))
    } else if b > a {
        Some((1, 0))
    } else {
        None
    }
}

/// Pairs up evals by position; both slices must come from the same persona
/// and query. Statements whose ids disagree are skipped.
pub fn per_statement_preferences(
    evals_a: &[ConstraintEval],
    evals_b: &[ConstraintEval],
) -> Vec<StatementPreference> {
    evals_a
        .iter()
        .zip(evals_b)
        .filter(|(a, b)| a.statement_id() == b.statement_id())
        .map(|(a, b)| {
            let ra = constraint_rewards(a.nli());
            let rb = constraint_rewards(b.nli());
            StatementPreference {
                statement_id: a.statement_id(),
                p_relevant: a.relevance().p_relevant(),
                active: order(ra.active, rb.active),
                passive: order(ra.passive, rb.passive),
            }
        })
        .collect()
}
