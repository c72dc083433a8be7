//! Token accounting, insertion frequency, confidence change after insertion,
//! and accuracy over finished traces.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::orchestrator::ReasoningTrace;

/// Token cost of a full input image when the endpoint does not report one.
pub const DEFAULT_FULL_IMAGE_TOKENS: u64 = 576;

/// Area-proportional image cost: a crop covering fraction `a` of the source
/// costs `ceil(full_image_tokens * a)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageTokenEstimator {
    pub full_image_tokens: u64,
}

impl Default for ImageTokenEstimator {
    fn default() -> Self {
        Self {
            full_image_tokens: DEFAULT_FULL_IMAGE_TOKENS,
        }
    }
}

impl ImageTokenEstimator {
    pub fn crop_cost(&self, area_fraction: f64) -> u64 {
        let a = if area_fraction.is_finite() {
            area_fraction.clamp(0.0, 1.0)
        } else {
            1.0
        };
        // Trim float noise so exact products like 576 * 0.25 do not round up.
        let raw = self.full_image_tokens as f64 * a;
        ((raw * 1e9).round() / 1e9).ceil() as u64
    }

    pub fn source_cost(&self) -> u64 {
        self.full_image_tokens
    }
}

/// Rounds half away from zero to one decimal, after trimming binary noise
/// (so 72.55000000000001 and 72.54999999999999 both become 72.6).
pub fn round_half_up_1(x: f64) -> f64 {
    if !x.is_finite() {
        return x;
    }
    let scaled = ((x * 10.0) * 1e6).round() / 1e6;
    let rounded = if scaled >= 0.0 {
        (scaled + 0.5).floor()
    } else {
        -((-scaled + 0.5).floor())
    };
    rounded / 10.0
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct TokenLedger {
    pub trace_id: String,
    /// Prompt text plus completions.
    pub text_tokens: u64,
    /// Inserted crops only.
    pub image_tokens: u64,
    pub total_tokens: u64,
    pub insertions: usize,
    /// The original input image, kept apart so totals can be read with or
    /// without it.
    pub source_image_tokens: u64,
}

impl TokenLedger {
    pub fn total_with_source(&self) -> u64 {
        self.total_tokens + self.source_image_tokens
    }
}

pub fn tally_tokens(trace: &ReasoningTrace) -> TokenLedger {
    let mut ledger = TokenLedger {
        trace_id: trace.trace_id.clone(),
        insertions: trace.insertion_count(),
        ..TokenLedger::default()
    };
    for s in &trace.steps {
        let u = &s.step.usage;
        ledger.text_tokens += u.prompt_text_tokens + u.completion_tokens;
        ledger.image_tokens += u.prompt_image_tokens;
        ledger.source_image_tokens += u.source_image_tokens;
    }
    ledger.total_tokens = ledger.text_tokens + ledger.image_tokens;
    ledger
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MetricsError {
    #[error("baseline total is zero")]
    DivisionByZeroBaseline,
    #[error("no traces to aggregate")]
    EmptyInput,
    #[error("no insertion is followed by a measured step")]
    NoInsertions,
    #[error("{predictions} predictions for {gold} gold labels")]
    LengthMismatch { predictions: usize, gold: usize },
}

/// Percentage saved by `candidate` relative to `baseline`, one decimal.
pub fn reduction_ratio(candidate: f64, baseline: f64) -> Result<f64, MetricsError> {
    if baseline.is_nan() || baseline <= 0.0 {
        return Err(MetricsError::DivisionByZeroBaseline);
    }
    Ok(round_half_up_1(100.0 * (baseline - candidate) / baseline))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InsertionStats {
    pub mean_insertions: f64,
    pub mean_image_tokens: f64,
}

pub fn insertion_stats(traces: &[ReasoningTrace]) -> Result<InsertionStats, MetricsError> {
    if traces.is_empty() {
        return Err(MetricsError::EmptyInput);
    }
    let n = traces.len() as f64;
    let (ins, img) = traces
        .iter()
        .map(tally_tokens)
        .fold((0u64, 0u64), |(i, t), l| (i + l.insertions as u64, t + l.image_tokens));
    Ok(InsertionStats {
        mean_insertions: ins as f64 / n,
        mean_image_tokens: img as f64 / n,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfidenceDelta {
    pub trace_id: String,
    pub step_index: usize,
    pub before: f64,
    pub after: f64,
    pub improved: bool,
}

/// Pairs each insertion's triggering confidence with the confidence of the
/// step generated right after it. Insertions with no measured follow-up step
/// (trace ended, or the follow-up had no scored positions) are skipped.
pub fn confidence_deltas(trace: &ReasoningTrace) -> Vec<ConfidenceDelta> {
    trace
        .steps
        .windows(2)
        .filter(|w| w[0].inserted() && !w[1].confidence.is_empty())
        .map(|w| {
            let before = w[0].confidence.aggregate;
            let after = w[1].confidence.aggregate;
            ConfidenceDelta {
                trace_id: trace.trace_id.clone(),
                step_index: w[0].step.step_index,
                before,
                after,
                improved: after > before,
            }
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DeltaStats {
    pub improved_fraction: f64,
    pub mean_delta: f64,
    pub measured_insertions: usize,
}

pub fn delta_stats(deltas: &[ConfidenceDelta]) -> Result<DeltaStats, MetricsError> {
    if deltas.is_empty() {
        return Err(MetricsError::NoInsertions);
    }
    let n = deltas.len() as f64;
    let improved = deltas.iter().filter(|d| d.improved).count();
    // Summed in sorted order so the result does not depend on input order.
    let mut changes: Vec<f64> = deltas.iter().map(|d| d.after - d.before).collect();
    changes.sort_by(f64::total_cmp);
    let mean_delta = changes.iter().sum::<f64>() / n;
    Ok(DeltaStats {
        improved_fraction: improved as f64 / n,
        mean_delta,
        measured_insertions: deltas.len(),
    })
}

pub fn confidence_delta_stats(traces: &[ReasoningTrace]) -> Result<DeltaStats, MetricsError> {
    let deltas: Vec<ConfidenceDelta> = traces.iter().flat_map(confidence_deltas).collect();
    delta_stats(&deltas)
}

/// Share of positions whose prediction equals gold, as a one-decimal
/// percentage. Missing predictions count as wrong.
pub fn score_accuracy(predictions: &[Option<String>], gold: &[String]) -> Result<f64, MetricsError> {
    if predictions.len() != gold.len() {
        return Err(MetricsError::LengthMismatch {
            predictions: predictions.len(),
            gold: gold.len(),
        });
    }
    if gold.is_empty() {
        return Ok(0.0);
    }
    let correct = predictions
        .iter()
        .zip(gold)
        .filter(|(p, g)| p.as_deref() == Some(g.as_str()))
        .count();
    Ok(round_half_up_1(100.0 * correct as f64 / gold.len() as f64))
}

pub fn mean_total_tokens(ledgers: &[TokenLedger]) -> f64 {
    if ledgers.is_empty() {
        return 0.0;
    }
    ledgers.iter().map(|l| l.total_tokens as f64).sum::<f64>() / ledgers.len() as f64
}
