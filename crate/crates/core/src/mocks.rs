//! Deterministic stand-ins for the external services: a scripted generation
//! backend, a scripted chat-completions endpoint that speaks the real wire
//! format, a lookup-table relevance scorer, and a fixed segmenter.

use std::collections::HashMap;
use std::sync::Mutex;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::backend::{
    account_usage, split_at_stop, word_tokens, BackendError, ContextContent, GenerationBackend, ImageRef, Role,
    StepRecord, StepRequest, StepUsage, StopReason, UsageSource,
};
use crate::confidence::{PositionLogits, TokenAlternative};
use crate::metrics::ImageTokenEstimator;
use crate::objectpool::{ObjectCandidate, PoolError, SegmentationProvider, SegmentedRegion};
use crate::relevance::{RelevanceError, RelevanceProvider};
use crate::transport::{HttpRequest, HttpResponse, Transport, TransportError};

/// How a scripted step's per-position scores are produced. The emitted token
/// always scores 0 and the runner-up sits `margin` below it, unless explicit
/// `(top1, top2)` pairs are given.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ScriptScores {
    Flat { margin: f64 },
    Margins { margins: Vec<f64> },
    Pairs { pairs: Vec<(f64, f64)> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScriptStep {
    pub text: String,
    #[serde(flatten)]
    pub scores: ScriptScores,
    /// Reason reported when neither a stop sequence nor the token cap ends
    /// the step.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stop_reason: Option<StopReason>,
    /// Fixed usage instead of the estimate.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub usage: Option<StepUsage>,
    /// Replaces this step when a crop was inserted right before it.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub after_insertion: Option<Box<ScriptStep>>,
}

impl ScriptStep {
    pub fn flat(text: impl Into<String>, margin: f64) -> Self {
        Self {
            text: text.into(),
            scores: ScriptScores::Flat { margin },
            stop_reason: None,
            usage: None,
            after_insertion: None,
        }
    }

    pub fn with_margins(text: impl Into<String>, margins: Vec<f64>) -> Self {
        Self {
            scores: ScriptScores::Margins { margins },
            ..Self::flat(text, 0.0)
        }
    }

    pub fn with_pairs(text: impl Into<String>, pairs: Vec<(f64, f64)>) -> Self {
        Self {
            scores: ScriptScores::Pairs { pairs },
            ..Self::flat(text, 0.0)
        }
    }

    pub fn or_after_insertion(mut self, step: ScriptStep) -> Self {
        self.after_insertion = Some(Box::new(step));
        self
    }

    pub fn with_usage(mut self, usage: StepUsage) -> Self {
        self.usage = Some(usage);
        self
    }

    pub fn with_stop_reason(mut self, reason: StopReason) -> Self {
        self.stop_reason = Some(reason);
        self
    }

    fn validate(&self, at: usize) -> Result<(), String> {
        let tokens = word_tokens(&self.text).len();
        let bad = |what: &str| Err(format!("script step {at}: {what}"));
        match &self.scores {
            ScriptScores::Flat { margin } if !(margin.is_finite() && *margin >= 0.0) => {
                return bad("margin must be finite and non-negative")
            }
            ScriptScores::Margins { margins } => {
                if margins.len() != tokens {
                    return bad(&format!("{} margins for {tokens} tokens", margins.len()));
                }
                if margins.iter().any(|m| !(m.is_finite() && *m >= 0.0)) {
                    return bad("margins must be finite and non-negative");
                }
            }
            ScriptScores::Pairs { pairs } => {
                if pairs.len() != tokens {
                    return bad(&format!("{} score pairs for {tokens} tokens", pairs.len()));
                }
                if pairs.iter().any(|(a, b)| !(a.is_finite() && b.is_finite() && a >= b)) {
                    return bad("pairs must be finite with top1 >= top2");
                }
            }
            ScriptScores::Flat { .. } => {}
        }
        if let Some(next) = &self.after_insertion {
            next.validate(at)?;
        }
        Ok(())
    }

    fn positions(&self) -> Vec<PositionLogits> {
        word_tokens(&self.text)
            .into_iter()
            .enumerate()
            .map(|(i, token)| {
                let (top, second) = match &self.scores {
                    ScriptScores::Flat { margin } => (0.0, -margin),
                    ScriptScores::Margins { margins } => (0.0, -margins[i]),
                    ScriptScores::Pairs { pairs } => pairs[i],
                };
                let entries = vec![
                    TokenAlternative::new(token.clone(), top),
                    TokenAlternative::new("<alt>", second),
                ];
                PositionLogits::new(i, token, entries)
            })
            .collect()
    }
}

/// Steps served in order, one per generation call.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct BackendScript {
    pub steps: Vec<ScriptStep>,
}

impl BackendScript {
    pub fn new(steps: Vec<ScriptStep>) -> Self {
        Self { steps }
    }

    pub fn validate(&self) -> Result<(), String> {
        self.steps.iter().enumerate().try_for_each(|(i, s)| s.validate(i + 1))
    }
}

fn crop_inserted_since_last_assistant(request: &StepRequest) -> bool {
    request
        .context
        .iter()
        .rev()
        .take_while(|item| item.role != Role::Assistant)
        .any(|item| {
            matches!(
                item.content,
                ContextContent::Image {
                    image_ref: ImageRef::Crop { .. }
                }
            )
        })
}

struct Generated {
    positions: Vec<PositionLogits>,
    capped: bool,
}

fn generate(step: &ScriptStep, max_tokens: usize) -> Generated {
    let mut positions = step.positions();
    let capped = positions.len() > max_tokens;
    positions.truncate(max_tokens);
    Generated { positions, capped }
}

/// Serves a [`BackendScript`] directly, bypassing any wire format.
pub struct ScriptedBackend {
    script: BackendScript,
    cursor: Mutex<usize>,
    pub estimator: ImageTokenEstimator,
}

impl ScriptedBackend {
    pub fn new(script: BackendScript) -> Self {
        Self {
            script,
            cursor: Mutex::new(0),
            estimator: ImageTokenEstimator::default(),
        }
    }

    pub fn calls(&self) -> usize {
        *self.cursor.lock().unwrap_or_else(|e| e.into_inner())
    }
}

impl GenerationBackend for ScriptedBackend {
    fn generate_step(&self, request: &StepRequest) -> Result<StepRecord, BackendError> {
        request.validate()?;
        let index = {
            let mut cursor = self.cursor.lock().unwrap_or_else(|e| e.into_inner());
            *cursor += 1;
            *cursor - 1
        };
        let base = self
            .script
            .steps
            .get(index)
            .ok_or(BackendError::ScriptExhausted(self.script.steps.len()))?;
        let step = match &base.after_insertion {
            Some(alt) if crop_inserted_since_last_assistant(request) => alt,
            _ => base,
        };
        let generated = generate(step, request.max_step_tokens);
        let emitted = generated.positions.len() as u64;
        let split = split_at_stop(generated.positions, &request.stop_sequences);
        let stop_reason = if split.matched.is_some() {
            StopReason::StopSequence
        } else if generated.capped {
            StopReason::MaxTokens
        } else {
            step.stop_reason.unwrap_or(StopReason::EndOfAnswer)
        };
        let usage = match step.usage {
            Some(u) => StepUsage {
                source: UsageSource::Scripted,
                ..u
            },
            None => account_usage(request, None, emitted, &self.estimator),
        };
        Ok(StepRecord {
            step_index: request.step_index,
            text: split.text,
            position_logits: split.kept,
            excluded_tail: split.tail,
            matched_stop: split.matched,
            stop_reason,
            usage,
        })
    }
}

/// A fake chat-completions server driven by a [`BackendScript`].
///
/// It parses real request bodies and answers with the same JSON shape a
/// logprob-capable server returns, applying stop sequences server-side. A
/// user turn carrying an image after the first call counts as an insertion.
pub struct ScriptedChatEndpoint {
    script: BackendScript,
    state: Mutex<EndpointState>,
    pub tokens_per_image: u64,
}

#[derive(Default)]
struct EndpointState {
    served: usize,
    queued_failures: Vec<HttpResponse>,
    requests: Vec<Value>,
}

impl ScriptedChatEndpoint {
    pub fn new(script: BackendScript) -> Self {
        Self {
            script,
            state: Mutex::new(EndpointState::default()),
            tokens_per_image: 64,
        }
    }

    /// Responses returned (in order) before any scripted step is served.
    pub fn with_failures(self, failures: Vec<HttpResponse>) -> Self {
        {
            let mut state = self.state.lock().unwrap_or_else(|e| e.into_inner());
            state.queued_failures = failures;
            state.queued_failures.reverse();
        }
        self
    }

    /// Request bodies seen so far.
    pub fn requests(&self) -> Vec<Value> {
        self.state.lock().unwrap_or_else(|e| e.into_inner()).requests.clone()
    }

    fn prompt_tokens(&self, messages: &[Value]) -> u64 {
        let mut total = 0;
        for m in messages {
            match &m["content"] {
                Value::String(s) => total += crate::backend::estimate_text_tokens(s),
                Value::Array(parts) => {
                    for p in parts {
                        match p["type"].as_str() {
                            Some("text") => {
                                total += crate::backend::estimate_text_tokens(p["text"].as_str().unwrap_or(""))
                            }
                            Some("image_url") => total += self.tokens_per_image,
                            _ => {}
                        }
                    }
                }
                _ => {}
            }
        }
        total
    }
}

fn bad_request(message: &str) -> HttpResponse {
    HttpResponse {
        status: 400,
        body: json!({"error": {"message": message}}).to_string(),
    }
}

impl Transport for ScriptedChatEndpoint {
    fn post_json(
        &self,
        request: &HttpRequest,
        _headers: &[(String, String)],
        _timeout: Duration,
    ) -> Result<HttpResponse, TransportError> {
        let mut state = self.state.lock().unwrap_or_else(|e| e.into_inner());
        state.requests.push(request.body.clone());
        if let Some(failure) = state.queued_failures.pop() {
            return Ok(failure);
        }
        let body = &request.body;
        let Some(messages) = body["messages"].as_array() else {
            return Ok(bad_request("messages missing"));
        };
        let top_k = body["top_logprobs"].as_u64().unwrap_or(0) as usize;
        if body["logprobs"] != json!(true) || top_k < 2 {
            return Ok(bad_request("this endpoint requires logprobs with top_logprobs >= 2"));
        }
        let max_tokens = body["max_tokens"].as_u64().unwrap_or(u64::MAX) as usize;
        let stops: Vec<String> = body["stop"]
            .as_array()
            .map(|a| a.iter().filter_map(|s| s.as_str().map(str::to_string)).collect())
            .unwrap_or_default();
        let Some(base) = self.script.steps.get(state.served) else {
            return Ok(bad_request("script exhausted"));
        };
        let inserted = state.served > 0
            && messages.last().is_some_and(|m| {
                m["role"] == "user"
                    && m["content"]
                        .as_array()
                        .is_some_and(|parts| parts.iter().any(|p| p["type"] == "image_url"))
            });
        state.served += 1;
        let step = match &base.after_insertion {
            Some(alt) if inserted => alt,
            _ => base,
        };
        let generated = generate(step, max_tokens);
        let completion_tokens = generated.positions.len();
        let split = split_at_stop(generated.positions, &stops);
        let finish = if split.matched.is_some() || !generated.capped {
            "stop"
        } else {
            "length"
        };
        let content: Vec<Value> = split
            .kept
            .iter()
            .map(|p| {
                let mut alts: Vec<Value> = p
                    .top_entries
                    .iter()
                    .map(|a| json!({"token": a.token, "logprob": a.log_score}))
                    .collect();
                let floor = p.top_entries.last().map(|a| a.log_score).unwrap_or(0.0);
                for extra in alts.len()..top_k {
                    alts.push(json!({"token": format!("<alt{extra}>"), "logprob": floor - extra as f64}));
                }
                json!({"token": p.token, "logprob": p.top_entries[0].log_score, "top_logprobs": alts})
            })
            .collect();
        let response = json!({
            "object": "chat.completion",
            "choices": [{
                "index": 0,
                "message": {"role": "assistant", "content": split.text},
                "finish_reason": finish,
                "stop_reason": split.matched,
                "logprobs": {"content": content},
            }],
            "usage": {
                "prompt_tokens": self.prompt_tokens(messages),
                "completion_tokens": completion_tokens,
            },
        });
        Ok(HttpResponse::ok(response.to_string()))
    }
}

/// One row of a scripted relevance table. Step 0 matches any step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreEntry {
    pub step: usize,
    pub candidate_id: String,
    pub score: f64,
}

/// Relevance from a `(step, candidate) -> score` table; a missing entry is an
/// error rather than a default.
#[derive(Debug, Clone, Default)]
pub struct ScriptedScorer {
    table: HashMap<(usize, String), f64>,
}

impl ScriptedScorer {
    pub fn from_entries<S: Into<String>>(entries: impl IntoIterator<Item = (usize, S, f64)>) -> Self {
        Self {
            table: entries
                .into_iter()
                .map(|(step, id, score)| ((step, id.into()), score))
                .collect(),
        }
    }

    pub fn from_table(entries: &[ScoreEntry]) -> Self {
        Self::from_entries(entries.iter().map(|e| (e.step, e.candidate_id.clone(), e.score)))
    }
}

impl RelevanceProvider for ScriptedScorer {
    fn score(
        &self,
        step_index: usize,
        _rationale: &str,
        candidates: &[ObjectCandidate],
    ) -> Result<Vec<f64>, RelevanceError> {
        candidates
            .iter()
            .map(|c| {
                let id = c.candidate_id.clone();
                self.table
                    .get(&(step_index, id.clone()))
                    .or_else(|| self.table.get(&(0, id)))
                    .copied()
                    .ok_or_else(|| RelevanceError::ScriptMiss {
                        step_index,
                        candidate_id: c.candidate_id.clone(),
                    })
            })
            .collect()
    }
}

/// Returns the same regions for every image, or a fixed failure.
#[derive(Debug, Clone, Default)]
pub struct StubSegmenter {
    regions: Vec<SegmentedRegion>,
    failure: Option<String>,
}

impl StubSegmenter {
    pub fn new(regions: Vec<SegmentedRegion>) -> Self {
        Self { regions, failure: None }
    }

    pub fn unavailable(message: impl Into<String>) -> Self {
        Self {
            regions: Vec::new(),
            failure: Some(message.into()),
        }
    }
}

impl SegmentationProvider for StubSegmenter {
    fn segment(&self, _image_id: &str, _image_bytes: &[u8]) -> Result<Vec<SegmentedRegion>, PoolError> {
        match &self.failure {
            Some(m) => Err(PoolError::ProviderUnavailable(m.clone())),
            None => Ok(self.regions.clone()),
        }
    }
}
