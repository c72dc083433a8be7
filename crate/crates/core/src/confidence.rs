//! Step confidence from top-1/top-2 log-score margins.
//!
//! Each decoding position contributes the gap between its best and
//! second-best candidate scores; the step confidence is the mean gap over the
//! rationale's scored positions. Log-probabilities and raw logits differ only
//! by a per-position normalizer, so the gap is the same for either source.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::StepRecord;

/// One candidate token at a decoding position.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenAlternative {
    pub token: String,
    #[serde(with = "crate::floatrepr")]
    pub log_score: f64,
}

impl TokenAlternative {
    pub fn new(token: impl Into<String>, log_score: f64) -> Self {
        Self {
            token: token.into(),
            log_score,
        }
    }
}

/// Top-k alternatives at one generated position, best first.
///
/// `token` is the text actually emitted there. Under greedy decoding it is
/// the top-1 alternative; sampling backends may emit something else.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PositionLogits {
    pub position_index: usize,
    pub token: String,
    pub top_entries: Vec<TokenAlternative>,
}

impl PositionLogits {
    /// Builds a position, sorting the alternatives best-first. The sort is
    /// stable so equal scores keep the order the backend reported.
    pub fn new(position_index: usize, token: impl Into<String>, mut top_entries: Vec<TokenAlternative>) -> Self {
        top_entries.sort_by(|a, b| b.log_score.total_cmp(&a.log_score));
        Self {
            position_index,
            token: token.into(),
            top_entries,
        }
    }

    /// Builds a greedy position: the emitted token is the best alternative.
    pub fn greedy(position_index: usize, top_entries: Vec<TokenAlternative>) -> Self {
        let mut p = Self::new(position_index, String::new(), top_entries);
        p.token = p.top_entries.first().map(|e| e.token.clone()).unwrap_or_default();
        p
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfidenceReport {
    pub margins: Vec<f64>,
    #[serde(with = "crate::floatrepr")]
    pub aggregate: f64,
    pub position_count: usize,
}

impl ConfidenceReport {
    /// Report for a step with no scored positions. Treated as the least
    /// confident possible signal by the gate.
    pub fn empty() -> Self {
        Self {
            margins: Vec::new(),
            aggregate: 0.0,
            position_count: 0,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.position_count == 0
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ConfidenceError {
    #[error(
        "position {position} has {available} scored alternative(s), need {required}; \
         raise the backend's top-k log-probability count"
    )]
    MarginUnavailable {
        position: usize,
        available: usize,
        required: usize,
    },
    #[error("step has no scored positions")]
    EmptyStep,
    #[error("position {position} has alternatives out of order or a NaN score")]
    MalformedScores { position: usize },
}

/// Gap between the best and second-best log-score at one position.
pub fn local_margin(p: &PositionLogits) -> Result<f64, ConfidenceError> {
    let [first, second, ..] = p.top_entries.as_slice() else {
        return Err(ConfidenceError::MarginUnavailable {
            position: p.position_index,
            available: p.top_entries.len(),
            required: 2,
        });
    };
    let margin = first.log_score - second.log_score;
    if margin.is_nan() || margin < 0.0 {
        return Err(ConfidenceError::MalformedScores {
            position: p.position_index,
        });
    }
    Ok(margin)
}

/// Arithmetic mean of the margins.
pub fn aggregate_confidence(margins: &[f64]) -> Result<f64, ConfidenceError> {
    if margins.is_empty() {
        return Err(ConfidenceError::EmptyStep);
    }
    let sum: f64 = margins.iter().sum();
    Ok(sum / margins.len() as f64)
}

/// Margin series and mean confidence for a generated step.
///
/// Only `step.position_logits` are scored; positions consumed by a matched
/// stop sequence live in the step's excluded tail and never reach here.
pub fn confidence_from_step(step: &StepRecord, k_required: usize) -> Result<ConfidenceReport, ConfidenceError> {
    let required = k_required.max(2);
    let margins = step
        .position_logits
        .iter()
        .map(|p| {
            if p.top_entries.len() < required {
                return Err(ConfidenceError::MarginUnavailable {
                    position: p.position_index,
                    available: p.top_entries.len(),
                    required,
                });
            }
            local_margin(p)
        })
        .collect::<Result<Vec<_>, _>>()?;
    let aggregate = aggregate_confidence(&margins)?;
    Ok(ConfidenceReport {
        position_count: margins.len(),
        margins,
        aggregate,
    })
}
