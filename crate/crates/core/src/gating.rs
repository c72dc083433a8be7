//! Threshold gate deciding whether the next step receives a visual thought.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Default threshold.
pub const DEFAULT_TAU: f64 = 0.2;

/// How insertions are decided for a trace.
///
/// `Always` and `Never` are the degenerate baselines: `Always` behaves like an
/// infinite threshold (insert after every step), `Never` like `tau = 0`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "policy")]
pub enum InsertionPolicy {
    Gated { tau: f64 },
    Always,
    Never,
}

impl InsertionPolicy {
    /// The threshold actually compared against.
    pub fn effective_tau(&self) -> f64 {
        match *self {
            InsertionPolicy::Gated { tau } => tau,
            InsertionPolicy::Always => f64::INFINITY,
            InsertionPolicy::Never => 0.0,
        }
    }

    pub fn label(&self) -> String {
        match self {
            InsertionPolicy::Gated { tau } => format!("gated(tau={tau})"),
            InsertionPolicy::Always => "always".to_string(),
            InsertionPolicy::Never => "never".to_string(),
        }
    }
}

impl Default for InsertionPolicy {
    fn default() -> Self {
        InsertionPolicy::Gated { tau: DEFAULT_TAU }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct GatingConfig {
    pub policy: InsertionPolicy,
    /// `None` means unlimited.
    pub max_insertions_per_trace: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GatingConfigError {
    #[error("tau must be finite, got {0}")]
    NonFiniteTau(f64),
}

impl GatingConfig {
    pub fn gated(tau: f64) -> Self {
        Self {
            policy: InsertionPolicy::Gated { tau },
            ..Self::default()
        }
    }

    /// Checks the threshold. Returns `Ok(true)` when tau lies outside the
    /// usual `[0, 1]` search range; such values are allowed but worth a warning.
    pub fn validate(&self) -> Result<bool, GatingConfigError> {
        match self.policy {
            InsertionPolicy::Gated { tau } if !tau.is_finite() => Err(GatingConfigError::NonFiniteTau(tau)),
            InsertionPolicy::Gated { tau } => Ok(!(0.0..=1.0).contains(&tau)),
            _ => Ok(false),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GatingReason {
    BelowThreshold,
    AtOrAboveThreshold,
    InsertionBudgetExhausted,
    EmptyCandidatePool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GatingDecision {
    pub insert: bool,
    #[serde(with = "crate::floatrepr")]
    pub confidence: f64,
    #[serde(with = "crate::floatrepr")]
    pub tau_used: f64,
    pub reason: GatingReason,
}

impl GatingDecision {
    /// Downgrades an insert decision when there is nothing to insert.
    pub fn without_candidates(mut self) -> Self {
        if self.insert {
            self.insert = false;
            self.reason = GatingReason::EmptyCandidatePool;
        }
        self
    }
}

/// Insert iff `confidence < tau` (strict) and the per-trace budget is open.
pub fn decide_insertion(confidence: f64, config: &GatingConfig, insertions_so_far: usize) -> GatingDecision {
    let tau = config.policy.effective_tau();
    let below = match config.policy {
        InsertionPolicy::Always => true,
        InsertionPolicy::Never => false,
        InsertionPolicy::Gated { tau } => confidence < tau,
    };
    let budget_open = config
        .max_insertions_per_trace
        .is_none_or(|cap| insertions_so_far < cap);
    let (insert, reason) = match (below, budget_open) {
        (false, _) => (false, GatingReason::AtOrAboveThreshold),
        (true, false) => (false, GatingReason::InsertionBudgetExhausted),
        (true, true) => (true, GatingReason::BelowThreshold),
    };
    GatingDecision {
        insert,
        confidence,
        tau_used: tau,
        reason,
    }
}

/// Total insertions per threshold, with an unlimited budget.
pub fn sweep_insertion_counts(confidence_sequences: &[Vec<f64>], tau_grid: &[f64]) -> Vec<(f64, usize)> {
    tau_grid
        .iter()
        .map(|&tau| {
            let config = GatingConfig::gated(tau);
            let count = confidence_sequences
                .iter()
                .flatten()
                .filter(|&&c| decide_insertion(c, &config, 0).insert)
                .count();
            (tau, count)
        })
        .collect()
}
