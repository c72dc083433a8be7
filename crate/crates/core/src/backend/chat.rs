//! OpenAI-compatible chat-completions backend with top-k log-probabilities.

use base64::Engine as _;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::{
    account_usage, split_at_stop, BackendError, ContextContent, GenerationBackend, ImageRef, ReportedUsage, Role,
    StepRecord, StepRequest, StopReason,
};
use crate::confidence::{PositionLogits, TokenAlternative};
use crate::metrics::ImageTokenEstimator;
use crate::objectpool::{load_image, EncodedImage};
use crate::transport::{HttpRequest, RetryPolicy, Transport, TransportError};

/// Endpoint settings that end up in the request body or headers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatEndpointConfig {
    pub url: String,
    pub model: String,
    #[serde(default)]
    pub temperature: Option<f64>,
}

pub struct ChatCompletionsBackend<T> {
    pub config: ChatEndpointConfig,
    pub transport: T,
    pub retry: RetryPolicy,
    pub estimator: ImageTokenEstimator,
    headers: Vec<(String, String)>,
}

impl<T: Transport> ChatCompletionsBackend<T> {
    pub fn new(config: ChatEndpointConfig, transport: T, retry: RetryPolicy) -> Self {
        Self {
            config,
            transport,
            retry,
            estimator: ImageTokenEstimator::default(),
            headers: Vec::new(),
        }
    }

    pub fn with_api_key(mut self, key: Option<String>) -> Self {
        self.headers.retain(|(name, _)| name != "authorization");
        if let Some(key) = key.filter(|k| !k.is_empty()) {
            self.headers.push(("authorization".into(), format!("Bearer {key}")));
        }
        self
    }

    pub fn with_estimator(mut self, estimator: ImageTokenEstimator) -> Self {
        self.estimator = estimator;
        self
    }

    fn request_body(&self, request: &StepRequest) -> Result<Value, BackendError> {
        let mut body = json!({
            "model": self.config.model,
            "messages": render_messages(request)?,
            "max_tokens": request.max_step_tokens,
            "logprobs": true,
            "top_logprobs": request.top_k,
        });
        if !request.stop_sequences.is_empty() {
            body["stop"] = json!(request.stop_sequences);
        }
        if let Some(seed) = request.seed {
            body["seed"] = json!(seed);
        }
        if let Some(t) = self.config.temperature {
            body["temperature"] = json!(t);
        }
        Ok(body)
    }
}

fn data_url(image: &EncodedImage) -> String {
    format!(
        "data:{};base64,{}",
        image.mime,
        base64::engine::general_purpose::STANDARD.encode(&image.bytes)
    )
}

fn load_ref(image_ref: &ImageRef) -> Result<EncodedImage, BackendError> {
    let loaded = match image_ref {
        ImageRef::Source { path, .. } => load_image(path),
        ImageRef::Crop { crop, .. } => crop.load(),
    };
    loaded.map_err(|e| BackendError::Image(e.to_string()))
}

/// Groups consecutive same-role items into chat messages. User messages use
/// content parts so images can ride along; other roles get plain strings.
pub(crate) fn render_messages(request: &StepRequest) -> Result<Vec<Value>, BackendError> {
    let mut messages: Vec<(Role, Vec<Value>)> = Vec::new();
    for item in &request.context {
        let part = match &item.content {
            ContextContent::Text { text } => json!({"type": "text", "text": text}),
            ContextContent::Image { image_ref } => {
                if item.role != Role::User {
                    return Err(BackendError::InvalidRequest(
                        "images are only allowed in user turns".into(),
                    ));
                }
                json!({"type": "image_url", "image_url": {"url": data_url(&load_ref(image_ref)?)}})
            }
        };
        match messages.last_mut() {
            Some((role, parts)) if *role == item.role => parts.push(part),
            _ => messages.push((item.role, vec![part])),
        }
    }
    Ok(messages
        .into_iter()
        .map(|(role, parts)| match role {
            Role::User => json!({"role": "user", "content": parts}),
            Role::System | Role::Assistant => {
                let text: String = parts.iter().filter_map(|p| p["text"].as_str()).collect();
                json!({"role": role, "content": text})
            }
        })
        .collect())
}

#[derive(Deserialize)]
struct ChatResponse {
    choices: Vec<Choice>,
    #[serde(default)]
    usage: Option<Usage>,
}

#[derive(Deserialize)]
struct Choice {
    #[serde(default)]
    message: Option<Message>,
    #[serde(default)]
    finish_reason: Option<String>,
    /// Matched stop string, reported by some servers (e.g. vLLM).
    #[serde(default)]
    stop_reason: Option<Value>,
    #[serde(default)]
    logprobs: Option<Logprobs>,
}

#[derive(Deserialize)]
struct Message {
    #[serde(default)]
    content: Option<String>,
}

#[derive(Deserialize)]
struct Logprobs {
    #[serde(default)]
    content: Option<Vec<TokenLogprob>>,
}

#[derive(Deserialize)]
struct TokenLogprob {
    token: String,
    logprob: f64,
    #[serde(default)]
    top_logprobs: Vec<TopLogprob>,
}

#[derive(Deserialize)]
struct TopLogprob {
    token: String,
    logprob: f64,
}

#[derive(Deserialize)]
struct Usage {
    prompt_tokens: u64,
    completion_tokens: u64,
}

enum Attempt {
    Transient(String),
    Fatal(BackendError),
}

fn classify_failure(status: u16, body: &str) -> BackendError {
    let lower = body.to_ascii_lowercase();
    if lower.contains("context_length_exceeded") || lower.contains("maximum context length") {
        BackendError::ContextTooLong(body.to_string())
    } else if lower.contains("logprobs") {
        BackendError::LogprobsUnsupported(format!("HTTP {status}: {body}"))
    } else {
        BackendError::InvalidRequest(format!("HTTP {status}: {body}"))
    }
}

fn parse_step(request: &StepRequest, body: &str) -> Result<(StepRecord, Option<ReportedUsage>), BackendError> {
    let parsed: ChatResponse = serde_json::from_str(body).map_err(|e| BackendError::Protocol(e.to_string()))?;
    let choice = parsed
        .choices
        .into_iter()
        .next()
        .ok_or_else(|| BackendError::Protocol("no choices".into()))?;
    let Some(tokens) = choice.logprobs.and_then(|l| l.content) else {
        return Err(BackendError::LogprobsUnsupported("response carries no logprobs".into()));
    };
    let mut positions = Vec::with_capacity(tokens.len());
    for (i, t) in tokens.into_iter().enumerate() {
        if t.top_logprobs.len() < 2 {
            return Err(BackendError::LogprobsUnsupported(format!(
                "position {i} has {} alternative(s)",
                t.top_logprobs.len()
            )));
        }
        if !t.logprob.is_finite() && t.logprob != f64::NEG_INFINITY {
            return Err(BackendError::Protocol(format!(
                "position {i} has a NaN log-probability"
            )));
        }
        let entries = t
            .top_logprobs
            .into_iter()
            .map(|a| TokenAlternative::new(a.token, a.logprob))
            .collect();
        positions.push(PositionLogits::new(i, t.token, entries));
    }
    let content = choice.message.and_then(|m| m.content).unwrap_or_default();
    let emitted: String = positions.iter().map(|p| p.token.as_str()).collect();
    if emitted != content {
        log::debug!(
            "step {}: message content differs from concatenated tokens",
            request.step_index
        );
    }
    let split = split_at_stop(positions, &request.stop_sequences);
    let server_stop = choice.stop_reason.as_ref().and_then(Value::as_str).map(str::to_string);
    let (matched, stop_reason) = match (split.matched.clone(), server_stop) {
        (Some(m), _) => (Some(m), StopReason::StopSequence),
        (None, Some(m)) if request.stop_sequences.contains(&m) => (Some(m), StopReason::StopSequence),
        _ if choice.finish_reason.as_deref() == Some("length") => (None, StopReason::MaxTokens),
        _ => (None, StopReason::EndOfAnswer),
    };
    let reported = parsed.usage.map(|u| ReportedUsage {
        prompt_tokens: u.prompt_tokens,
        completion_tokens: u.completion_tokens,
    });
    let record = StepRecord {
        step_index: request.step_index,
        text: split.text,
        position_logits: split.kept,
        excluded_tail: split.tail,
        matched_stop: matched,
        stop_reason,
        usage: Default::default(),
    };
    Ok((record, reported))
}

impl<T: Transport> GenerationBackend for ChatCompletionsBackend<T> {
    fn generate_step(&self, request: &StepRequest) -> Result<StepRecord, BackendError> {
        request.validate()?;
        let http = HttpRequest {
            url: self.config.url.clone(),
            body: self.request_body(request)?,
        };
        let body = self
            .retry
            .run(
                || match self.transport.post_json(&http, &self.headers, self.retry.timeout) {
                    Err(TransportError::Cassette(m)) => Err(Attempt::Fatal(BackendError::EndpointUnavailable(m))),
                    Err(e) => Err(Attempt::Transient(e.to_string())),
                    Ok(r) if r.is_transient() || r.status >= 500 => {
                        Err(Attempt::Transient(format!("HTTP {}: {}", r.status, r.body)))
                    }
                    Ok(r) if !r.is_success() => Err(Attempt::Fatal(classify_failure(r.status, &r.body))),
                    Ok(r) => Ok(r.body),
                },
                |e| matches!(e, Attempt::Transient(_)),
            )
            .map_err(|e| match e {
                Attempt::Transient(m) => {
                    BackendError::EndpointUnavailable(format!("{m} (after {} retries)", self.retry.max_retries))
                }
                Attempt::Fatal(e) => e,
            })?;
        let (mut record, reported) = parse_step(request, &body)?;
        let generated = (record.position_logits.len() + usize::from(!record.excluded_tail.is_empty())) as u64;
        record.usage = account_usage(request, reported, generated, &self.estimator);
        Ok(record)
    }
}
