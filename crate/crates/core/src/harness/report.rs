use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::config::TauSetting;
use super::dataset::Sample;
use crate::metrics::{
    confidence_delta_stats, insertion_stats, reduction_ratio, round_half_up_1, score_accuracy, tally_tokens,
    DeltaStats, InsertionStats, TokenLedger,
};
use crate::orchestrator::{ReasoningTrace, Verdict};

pub const REPORT_SCHEMA_VERSION: &str = "icot-report/1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub sample_id: String,
    pub trace_id: String,
    pub gold_label: String,
    pub predicted: Option<String>,
    pub correct: bool,
    pub verdict: Verdict,
    pub steps: usize,
    pub ledger: TokenLedger,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineComparison {
    pub baseline: String,
    pub baseline_mean_total_tokens: f64,
    pub reduction_pct: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub schema_version: String,
    pub config_hash: String,
    pub policy: String,
    pub tau: TauSetting,
    pub samples: usize,
    pub accuracy: f64,
    /// Accuracy among samples with each gold label.
    pub per_label_accuracy: BTreeMap<String, f64>,
    pub mean_text_tokens: f64,
    pub mean_image_tokens: f64,
    pub mean_total_tokens: f64,
    pub mean_source_image_tokens: f64,
    pub insertions: InsertionStats,
    /// Absent when no insertion was followed by a measured step.
    pub confidence_delta: Option<DeltaStats>,
    pub verdicts: BTreeMap<String, usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub baseline: Option<BaselineComparison>,
    pub rows: Vec<TraceRow>,
}

fn verdict_name(v: Verdict) -> String {
    serde_json::to_value(v)
        .ok()
        .and_then(|v| v.as_str().map(str::to_string))
        .unwrap_or_default()
}

fn mean(values: impl Iterator<Item = u64>, n: usize) -> f64 {
    if n == 0 {
        0.0
    } else {
        values.sum::<u64>() as f64 / n as f64
    }
}

/// Aggregates `(sample, trace)` pairs; callers pass them sorted by sample id.
pub fn build_report(config_hash: &str, tau: TauSetting, pairs: &[(Sample, ReasoningTrace)]) -> RunReport {
    let rows: Vec<TraceRow> = pairs
        .iter()
        .map(|(sample, trace)| TraceRow {
            sample_id: sample.sample_id.clone(),
            trace_id: trace.trace_id.clone(),
            gold_label: sample.gold_label.clone(),
            predicted: trace.final_answer.clone(),
            correct: trace.final_answer.as_deref() == Some(sample.gold_label.as_str()),
            verdict: trace.verdict,
            steps: trace.steps.len(),
            ledger: tally_tokens(trace),
        })
        .collect();
    let n = rows.len();
    let predictions: Vec<Option<String>> = rows.iter().map(|r| r.predicted.clone()).collect();
    let gold: Vec<String> = rows.iter().map(|r| r.gold_label.clone()).collect();
    let accuracy = score_accuracy(&predictions, &gold).unwrap_or(0.0);

    let mut per_label: BTreeMap<String, (usize, usize)> = BTreeMap::new();
    for r in &rows {
        let e = per_label.entry(r.gold_label.clone()).or_default();
        e.0 += usize::from(r.correct);
        e.1 += 1;
    }
    let per_label_accuracy = per_label
        .into_iter()
        .map(|(label, (hit, total))| (label, round_half_up_1(100.0 * hit as f64 / total as f64)))
        .collect();

    let mut verdicts = BTreeMap::new();
    for r in &rows {
        *verdicts.entry(verdict_name(r.verdict)).or_insert(0) += 1;
    }
    let traces: Vec<ReasoningTrace> = pairs.iter().map(|(_, t)| t.clone()).collect();
    RunReport {
        schema_version: REPORT_SCHEMA_VERSION.into(),
        config_hash: config_hash.into(),
        policy: tau.policy().label(),
        tau,
        samples: n,
        accuracy,
        per_label_accuracy,
        mean_text_tokens: mean(rows.iter().map(|r| r.ledger.text_tokens), n),
        mean_image_tokens: mean(rows.iter().map(|r| r.ledger.image_tokens), n),
        mean_total_tokens: mean(rows.iter().map(|r| r.ledger.total_tokens), n),
        mean_source_image_tokens: mean(rows.iter().map(|r| r.ledger.source_image_tokens), n),
        insertions: insertion_stats(&traces).unwrap_or(InsertionStats {
            mean_insertions: 0.0,
            mean_image_tokens: 0.0,
        }),
        confidence_delta: confidence_delta_stats(&traces).ok(),
        verdicts,
        baseline: None,
        rows,
    }
}

impl RunReport {
    pub fn compare_to(&mut self, name: impl Into<String>, baseline: &RunReport) {
        self.baseline = reduction_ratio(self.mean_total_tokens, baseline.mean_total_tokens)
            .ok()
            .map(|reduction_pct| BaselineComparison {
                baseline: name.into(),
                baseline_mean_total_tokens: baseline.mean_total_tokens,
                reduction_pct,
            });
    }

    /// Human-readable summary lines.
    pub fn summary(&self) -> String {
        let mut out = format!(
            "policy {} | samples {} | accuracy {:.1}% | mean tokens {:.1} (text {:.1}, image {:.1}) | mean insertions {:.2}",
            self.policy,
            self.samples,
            self.accuracy,
            self.mean_total_tokens,
            self.mean_text_tokens,
            self.mean_image_tokens,
            self.insertions.mean_insertions
        );
        if let Some(d) = &self.confidence_delta {
            out.push_str(&format!(
                "\nconfidence improved after {:.1}% of {} measured insertions (mean change {:+.4})",
                round_half_up_1(100.0 * d.improved_fraction),
                d.measured_insertions,
                d.mean_delta
            ));
        }
        if let Some(b) = &self.baseline {
            out.push_str(&format!(
                "\n{:.1}% fewer tokens than {} ({:.1})",
                b.reduction_pct, b.baseline, b.baseline_mean_total_tokens
            ));
        }
        let verdicts: Vec<String> = self.verdicts.iter().map(|(k, v)| format!("{k}={v}")).collect();
        out.push_str(&format!("\nverdicts: {}", verdicts.join(", ")));
        out
    }
}
