//! Generation backends: one bounded, stop-sequence-terminated generation call
//! per reasoning step, with per-position top-k log-probabilities and token
//! usage.

mod chat;

use std::path::PathBuf;

use regex::Regex;
use serde::{Deserialize, Serialize};
use std::sync::LazyLock;
use thiserror::Error;

use crate::confidence::PositionLogits;
use crate::metrics::ImageTokenEstimator;
use crate::objectpool::CropRef;

pub use chat::{ChatCompletionsBackend, ChatEndpointConfig};

pub const DEFAULT_STOP_SEQUENCES: [&str; 2] = ["\n\nStep", "\n\nAnswer"];
pub const DEFAULT_MAX_STEP_TOKENS: usize = 256;
pub const DEFAULT_TOP_K: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    System,
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "type")]
pub enum ImageRef {
    /// The full input image.
    Source { image_id: String, path: PathBuf },
    /// An object crop inserted as a visual thought.
    Crop {
        candidate_id: String,
        crop: CropRef,
        area_fraction: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum ContextContent {
    Text { text: String },
    Image { image_ref: ImageRef },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContextItem {
    pub role: Role,
    #[serde(flatten)]
    pub content: ContextContent,
}

impl ContextItem {
    pub fn text(role: Role, text: impl Into<String>) -> Self {
        Self {
            role,
            content: ContextContent::Text { text: text.into() },
        }
    }

    pub fn image(role: Role, image_ref: ImageRef) -> Self {
        Self {
            role,
            content: ContextContent::Image { image_ref },
        }
    }

    pub fn as_text(&self) -> Option<&str> {
        match &self.content {
            ContextContent::Text { text } => Some(text),
            ContextContent::Image { .. } => None,
        }
    }

    pub fn as_image(&self) -> Option<&ImageRef> {
        match &self.content {
            ContextContent::Image { image_ref } => Some(image_ref),
            ContextContent::Text { .. } => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    StopSequence,
    MaxTokens,
    EndOfAnswer,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UsageSource {
    /// Prompt and completion counts came from the endpoint.
    Reported,
    /// Counts were estimated locally.
    #[default]
    Estimated,
    /// Counts were fixed by a test script.
    Scripted,
}

/// Tokens a step added to the running context.
///
/// Prompt counts are incremental: only context items appended since the
/// previous step are charged, so summing over steps never double-counts the
/// shared prefix. `prompt_image_tokens` covers inserted crops;
/// `source_image_tokens` covers the full input image (first step only).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct StepUsage {
    pub prompt_text_tokens: u64,
    pub prompt_image_tokens: u64,
    pub completion_tokens: u64,
    #[serde(default)]
    pub source_image_tokens: u64,
    #[serde(default)]
    pub source: UsageSource,
}

impl StepUsage {
    pub fn scripted(prompt_text_tokens: u64, prompt_image_tokens: u64, completion_tokens: u64) -> Self {
        Self {
            prompt_text_tokens,
            prompt_image_tokens,
            completion_tokens,
            source_image_tokens: 0,
            source: UsageSource::Scripted,
        }
    }

    /// Everything this step put into the context, source image included.
    pub fn context_growth(&self) -> u64 {
        self.prompt_text_tokens + self.prompt_image_tokens + self.completion_tokens + self.source_image_tokens
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step_index: usize,
    /// Rationale text: the concatenated emitted tokens of `position_logits`.
    pub text: String,
    pub position_logits: Vec<PositionLogits>,
    /// Generated text from the matched stop sequence on; never scored.
    #[serde(default)]
    pub excluded_tail: String,
    #[serde(default)]
    pub matched_stop: Option<String>,
    pub stop_reason: StopReason,
    pub usage: StepUsage,
}

/// Context size already charged to earlier steps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct PriorUsage {
    pub context_items: usize,
    pub context_tokens: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRequest {
    pub step_index: usize,
    pub context: Vec<ContextItem>,
    pub stop_sequences: Vec<String>,
    pub max_step_tokens: usize,
    pub top_k: usize,
    pub seed: Option<u64>,
    pub prior: PriorUsage,
}

impl StepRequest {
    pub fn validate(&self) -> Result<(), BackendError> {
        if self.context.is_empty() {
            return Err(BackendError::InvalidRequest("context is empty".into()));
        }
        if self.top_k < 2 {
            return Err(BackendError::InvalidRequest(format!(
                "top_k must be at least 2 to compute margins, got {}",
                self.top_k
            )));
        }
        if self.max_step_tokens == 0 {
            return Err(BackendError::InvalidRequest("max_step_tokens must be positive".into()));
        }
        Ok(())
    }

    /// Items appended since the previous step.
    pub fn new_items(&self) -> &[ContextItem] {
        &self.context[self.prior.context_items.min(self.context.len())..]
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum BackendError {
    #[error("endpoint unavailable: {0}")]
    EndpointUnavailable(String),
    #[error(
        "endpoint did not return top-k >= 2 log-probabilities ({0}); enable logprobs with \
         top_logprobs >= 2 on the serving endpoint or pick a backend that supports them"
    )]
    LogprobsUnsupported(String),
    #[error("context too long: {0}")]
    ContextTooLong(String),
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("malformed endpoint response: {0}")]
    Protocol(String),
    #[error("image attachment: {0}")]
    Image(String),
    #[error("backend script exhausted after {0} step(s)")]
    ScriptExhausted(usize),
}

pub trait GenerationBackend: Send + Sync {
    fn generate_step(&self, request: &StepRequest) -> Result<StepRecord, BackendError>;
}

impl<B: GenerationBackend + ?Sized> GenerationBackend for Box<B> {
    fn generate_step(&self, request: &StepRequest) -> Result<StepRecord, BackendError> {
        (**self).generate_step(request)
    }
}

/// Result of cutting generated tokens at the first stop sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct StopSplit {
    pub kept: Vec<PositionLogits>,
    pub text: String,
    pub tail: String,
    pub matched: Option<String>,
}

/// Cuts at the earliest stop-sequence occurrence in the emitted text.
///
/// The token in which the match begins and every later token are excluded,
/// so `text` is always the exact concatenation of the kept tokens.
pub fn split_at_stop(positions: Vec<PositionLogits>, stop_sequences: &[String]) -> StopSplit {
    let full: String = positions.iter().map(|p| p.token.as_str()).collect();
    let hit = stop_sequences
        .iter()
        .filter(|s| !s.is_empty())
        .filter_map(|s| full.find(s.as_str()).map(|at| (at, s)))
        .min_by_key(|(at, s)| (*at, std::cmp::Reverse(s.len())));
    let Some((at, matched)) = hit else {
        return StopSplit {
            kept: positions,
            text: full,
            tail: String::new(),
            matched: None,
        };
    };
    let mut end = 0;
    let mut kept = Vec::new();
    for p in positions {
        if end + p.token.len() > at {
            break;
        }
        end += p.token.len();
        kept.push(p);
    }
    StopSplit {
        kept,
        text: full[..end].to_string(),
        tail: full[end..].to_string(),
        matched: Some(matched.clone()),
    }
}

/// Rough text token count used when the endpoint reports nothing: one token
/// per four characters, rounded up.
pub fn estimate_text_tokens(text: &str) -> u64 {
    (text.chars().count() as u64).div_ceil(4)
}

/// Endpoint-reported counts for one call.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReportedUsage {
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
}

/// Splits one call's usage into the incremental text/image components.
///
/// Image costs always come from `estimator` (endpoints do not break them out).
/// With reported counts, text is the reported prompt growth minus the image
/// estimate; otherwise text is estimated from the new items.
pub fn account_usage(
    request: &StepRequest,
    reported: Option<ReportedUsage>,
    generated_tokens: u64,
    estimator: &ImageTokenEstimator,
) -> StepUsage {
    let mut crop_tokens = 0;
    let mut source_tokens = 0;
    let mut text_estimate = 0;
    for item in request.new_items() {
        match &item.content {
            ContextContent::Text { text } => text_estimate += estimate_text_tokens(text),
            ContextContent::Image {
                image_ref: ImageRef::Source { .. },
            } => source_tokens += estimator.source_cost(),
            ContextContent::Image {
                image_ref: ImageRef::Crop { area_fraction, .. },
            } => crop_tokens += estimator.crop_cost(*area_fraction),
        }
    }
    match reported {
        Some(r) => StepUsage {
            prompt_text_tokens: r
                .prompt_tokens
                .saturating_sub(request.prior.context_tokens)
                .saturating_sub(crop_tokens + source_tokens),
            prompt_image_tokens: crop_tokens,
            completion_tokens: r.completion_tokens,
            source_image_tokens: source_tokens,
            source: UsageSource::Reported,
        },
        None => StepUsage {
            prompt_text_tokens: text_estimate,
            prompt_image_tokens: crop_tokens,
            completion_tokens: generated_tokens,
            source_image_tokens: source_tokens,
            source: UsageSource::Estimated,
        },
    }
}

static TOKEN_PATTERN: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"\s*\S+|\s+$").expect("valid regex"));

/// Whitespace-attached word tokens: each token carries its leading
/// whitespace, so concatenation reproduces the input exactly.
pub fn word_tokens(text: &str) -> Vec<String> {
    TOKEN_PATTERN.find_iter(text).map(|m| m.as_str().to_string()).collect()
}
