//! The reasoning loop: generate a step, measure its confidence, gate, and if
//! the gate fires pick the most relevant object crop and place it in the
//! context ahead of the next step.

use std::path::PathBuf;
use std::sync::LazyLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backend::{
    BackendError, ContextItem, GenerationBackend, ImageRef, PriorUsage, Role, StepRecord, StepRequest,
    DEFAULT_MAX_STEP_TOKENS, DEFAULT_STOP_SEQUENCES, DEFAULT_TOP_K,
};
use crate::confidence::{confidence_from_step, ConfidenceError, ConfidenceReport};
use crate::gating::{decide_insertion, GatingConfig, GatingDecision};
use crate::objectpool::{ObjectPool, SourceImage};
use crate::relevance::{score_candidates, select_object, RelevanceProvider, RelevanceScore, SelectedObject};

pub const TRACE_SCHEMA_VERSION: &str = "icot-trace/1";
pub const DEFAULT_MAX_STEPS: usize = 8;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnswerOption {
    pub label: String,
    pub text: String,
}

/// A worked example shown before the question in one-shot mode.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Exemplar {
    pub question: String,
    pub options: Vec<AnswerOption>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_path: Option<PathBuf>,
    pub rationale: String,
}

/// Prompt text. `{question}`, `{options}` and `{step_index}` (the step about to be
/// generated) are substituted. History and inserted crops are carried as
/// structured context items, not spliced into text.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct PromptTemplate {
    pub system: String,
    pub question: String,
    pub continue_prompt: String,
    pub answer_prompt: String,
}

impl Default for PromptTemplate {
    fn default() -> Self {
        Self {
            system: "You are a careful visual reasoner. Reason one step at a time about the image. \
                     Begin each step with \"Step N:\". When you are certain, finish with \"Answer: (X)\"."
                .into(),
            question: "Question: {question}\nOptions:\n{options}\n\nStep 1:".into(),
            continue_prompt: "Step {step_index}:".into(),
            answer_prompt: "State the final answer in the form \"Answer: (X)\".".into(),
        }
    }
}

impl PromptTemplate {
    pub fn render_question(&self, question: &str, options: &[AnswerOption]) -> String {
        let options = options
            .iter()
            .map(|o| format!("({}) {}", o.label, o.text))
            .collect::<Vec<_>>()
            .join("\n");
        self.question
            .replace("{question}", question)
            .replace("{options}", &options)
    }

    pub fn render_continue(&self, next_step: usize) -> String {
        self.continue_prompt.replace("{step_index}", &next_step.to_string())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OrchestratorConfig {
    pub gating: GatingConfig,
    pub max_steps: usize,
    pub max_step_tokens: usize,
    pub top_k: usize,
    pub stop_sequences: Vec<String>,
    /// Stop sequence announcing the answer. If a step halts on it without an
    /// extractable answer, the next turn asks for the answer explicitly.
    pub answer_marker: Option<String>,
    pub seed: Option<u64>,
    /// Fallback answer labels for questions without options.
    pub labels: Vec<String>,
    pub template: PromptTemplate,
    /// Present in one-shot mode.
    pub exemplar: Option<Exemplar>,
}

impl Default for OrchestratorConfig {
    fn default() -> Self {
        Self {
            gating: GatingConfig::default(),
            max_steps: DEFAULT_MAX_STEPS,
            max_step_tokens: DEFAULT_MAX_STEP_TOKENS,
            top_k: DEFAULT_TOP_K,
            stop_sequences: DEFAULT_STOP_SEQUENCES.iter().map(|s| s.to_string()).collect(),
            answer_marker: Some(DEFAULT_STOP_SEQUENCES[1].to_string()),
            seed: None,
            labels: ["A", "B", "C", "D", "E"].map(String::from).to_vec(),
            template: PromptTemplate::default(),
            exemplar: None,
        }
    }
}

/// What a trace is asked about.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceQuestion {
    pub question_id: String,
    pub question: String,
    pub options: Vec<AnswerOption>,
    pub image: SourceImage,
}

pub struct Providers<'a> {
    pub backend: &'a dyn GenerationBackend,
    pub relevance: &'a dyn RelevanceProvider,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Answered,
    MaxStepsReached,
    Truncated,
    BackendFault,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceStep {
    pub step: StepRecord,
    pub confidence: ConfidenceReport,
    pub gating: GatingDecision,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub relevance: Option<Vec<RelevanceScore>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub selected: Option<SelectedObject>,
    /// Context index at which the selected crop was placed.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub insertion_position: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fault: Option<String>,
}

impl TraceStep {
    pub fn inserted(&self) -> bool {
        self.selected.is_some()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReasoningTrace {
    pub schema_version: String,
    pub trace_id: String,
    pub question_id: String,
    pub question: String,
    pub source_image_id: String,
    pub pool_size: usize,
    pub steps: Vec<TraceStep>,
    pub final_answer: Option<String>,
    pub verdict: Verdict,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fault: Option<String>,
    pub config_snapshot: OrchestratorConfig,
}

impl ReasoningTrace {
    pub fn insertion_count(&self) -> usize {
        self.steps.iter().filter(|s| s.inserted()).count()
    }

    /// Checks the structural invariants; returns the first violation.
    pub fn check_invariants(&self) -> Result<(), String> {
        for (i, s) in self.steps.iter().enumerate() {
            if s.step.step_index != i + 1 {
                return Err(format!("step {} has index {}", i + 1, s.step.step_index));
            }
            if s.selected.is_some() != (s.gating.insert && self.pool_size > 0) {
                return Err(format!("step {}: selection does not match the gate", i + 1));
            }
        }
        if (self.verdict == Verdict::Answered) != self.final_answer.is_some() {
            return Err("verdict and final answer disagree".into());
        }
        Ok(())
    }
}

fn trace_id(question: &TraceQuestion, cfg: &OrchestratorConfig) -> String {
    let mut hasher = Sha256::new();
    hasher.update(serde_json::to_vec(question).unwrap_or_default());
    hasher.update(serde_json::to_vec(cfg).unwrap_or_default());
    hex::encode(&hasher.finalize()[..8])
}

/// The opening turns: system prompt, optional exemplar, question and image.
pub fn initial_context(question: &TraceQuestion, cfg: &OrchestratorConfig) -> Vec<ContextItem> {
    let mut context = vec![ContextItem::text(Role::System, &cfg.template.system)];
    if let Some(ex) = &cfg.exemplar {
        context.push(ContextItem::text(
            Role::User,
            cfg.template.render_question(&ex.question, &ex.options),
        ));
        if let Some(path) = &ex.image_path {
            context.push(ContextItem::image(
                Role::User,
                ImageRef::Source {
                    image_id: "exemplar".into(),
                    path: path.clone(),
                },
            ));
        }
        context.push(ContextItem::text(Role::Assistant, &ex.rationale));
    }
    context.push(ContextItem::text(
        Role::User,
        cfg.template.render_question(&question.question, &question.options),
    ));
    context.push(ContextItem::image(
        Role::User,
        ImageRef::Source {
            image_id: question.image.image_id.clone(),
            path: question.image.path.clone(),
        },
    ));
    context
}

/// Appends the selected crop right after the latest rationale and returns
/// where it landed. The next-step prompt is appended after it.
pub fn interleave(context: &mut Vec<ContextItem>, selected: &SelectedObject) -> usize {
    let position = context.len();
    context.push(ContextItem::image(
        Role::User,
        ImageRef::Crop {
            candidate_id: selected.candidate.candidate_id.clone(),
            crop: selected.candidate.crop_ref.clone(),
            area_fraction: selected.candidate.area_fraction,
        },
    ));
    position
}

struct Selection {
    gating: GatingDecision,
    relevance: Option<Vec<RelevanceScore>>,
    selected: Option<SelectedObject>,
    fault: Option<String>,
}

fn gate_and_select(
    step: &StepRecord,
    confidence: &ConfidenceReport,
    pool: &ObjectPool,
    cfg: &OrchestratorConfig,
    insertions: usize,
    relevance: &dyn RelevanceProvider,
) -> Selection {
    let gating = decide_insertion(confidence.aggregate, &cfg.gating, insertions);
    if !gating.insert {
        return Selection {
            gating,
            relevance: None,
            selected: None,
            fault: None,
        };
    }
    if pool.is_empty() {
        return Selection {
            gating: gating.without_candidates(),
            relevance: None,
            selected: None,
            fault: None,
        };
    }
    let scored = score_candidates(&step.text, step.step_index, pool, relevance)
        .and_then(|scores| select_object(&scores, pool).map(|sel| (scores, sel)));
    match scored {
        Ok((scores, selected)) => Selection {
            gating,
            relevance: Some(scores),
            selected: Some(selected),
            fault: None,
        },
        Err(e) => {
            log::warn!(
                "step {}: relevance scoring failed, continuing without insertion: {e}",
                step.step_index
            );
            Selection {
                gating: GatingDecision {
                    insert: false,
                    ..gating
                },
                relevance: None,
                selected: None,
                fault: Some(e.to_string()),
            }
        }
    }
}

/// A finished trace plus the context that the next step would have seen.
pub struct TraceRun {
    pub trace: ReasoningTrace,
    pub final_context: Vec<ContextItem>,
}

pub fn run_trace(
    question: &TraceQuestion,
    pool: &ObjectPool,
    cfg: &OrchestratorConfig,
    providers: &Providers<'_>,
) -> ReasoningTrace {
    run_trace_detailed(question, pool, cfg, providers).trace
}

pub fn run_trace_detailed(
    question: &TraceQuestion,
    pool: &ObjectPool,
    cfg: &OrchestratorConfig,
    providers: &Providers<'_>,
) -> TraceRun {
    let mut context = initial_context(question, cfg);
    let labels: Vec<String> = if question.options.is_empty() {
        cfg.labels.clone()
    } else {
        question.options.iter().map(|o| o.label.clone()).collect()
    };
    let mut prior = PriorUsage::default();
    let mut steps: Vec<TraceStep> = Vec::new();
    let mut insertions = 0;
    let mut final_answer = None;
    let mut fault = None;
    let mut verdict = Verdict::MaxStepsReached;

    for t in 1..=cfg.max_steps {
        let request = StepRequest {
            step_index: t,
            context: context.clone(),
            stop_sequences: cfg.stop_sequences.clone(),
            max_step_tokens: cfg.max_step_tokens,
            top_k: cfg.top_k,
            seed: cfg.seed,
            prior,
        };
        let step = match providers.backend.generate_step(&request) {
            Ok(step) => step,
            Err(e) => {
                verdict = match e {
                    BackendError::ContextTooLong(_) => Verdict::Truncated,
                    _ => Verdict::BackendFault,
                };
                fault = Some(e.to_string());
                break;
            }
        };
        let confidence = match confidence_from_step(&step, 2) {
            Ok(report) => report,
            Err(ConfidenceError::EmptyStep) => ConfidenceReport::empty(),
            Err(e) => {
                verdict = Verdict::BackendFault;
                fault = Some(format!("step {t}: {e}"));
                break;
            }
        };
        let selection = gate_and_select(&step, &confidence, pool, cfg, insertions, providers.relevance);

        context.push(ContextItem::text(Role::Assistant, &step.text));
        prior = PriorUsage {
            context_items: context.len(),
            context_tokens: prior.context_tokens + step.usage.context_growth(),
        };
        let insertion_position = selection.selected.as_ref().map(|sel| interleave(&mut context, sel));
        if insertion_position.is_some() {
            insertions += 1;
        }
        let answer = extract_answer(&format!("{}{}", step.text, step.excluded_tail), &labels);
        let asks_for_answer = answer.is_none()
            && cfg.answer_marker.is_some()
            && step.matched_stop.as_deref() == cfg.answer_marker.as_deref();
        steps.push(TraceStep {
            step,
            confidence,
            gating: selection.gating,
            relevance: selection.relevance,
            selected: selection.selected,
            insertion_position,
            fault: selection.fault,
        });
        if let Some(label) = answer {
            final_answer = Some(label);
            verdict = Verdict::Answered;
            break;
        }
        if t < cfg.max_steps {
            let prompt = if asks_for_answer {
                cfg.template.answer_prompt.clone()
            } else {
                cfg.template.render_continue(t + 1)
            };
            context.push(ContextItem::text(Role::User, prompt));
        }
    }

    let trace = ReasoningTrace {
        schema_version: TRACE_SCHEMA_VERSION.to_string(),
        trace_id: trace_id(question, cfg),
        question_id: question.question_id.clone(),
        question: question.question.clone(),
        source_image_id: question.image.image_id.clone(),
        pool_size: pool.len(),
        steps,
        final_answer,
        verdict,
        fault,
        config_snapshot: cfg.clone(),
    };
    TraceRun {
        trace,
        final_context: context,
    }
}

static LABEL_SAFE: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"^[^\s()]+$").expect("valid regex"));

/// Finds the answer label in generated text.
///
/// Recognises `Answer: (X)`, `Answer: X` and a trailing standalone `(X)`;
/// with several matches the last one wins.
pub fn extract_answer(text: &str, labels: &[String]) -> Option<String> {
    let mut sorted: Vec<&String> = labels.iter().filter(|l| LABEL_SAFE.is_match(l)).collect();
    if sorted.is_empty() {
        return None;
    }
    sorted.sort_by_key(|l| std::cmp::Reverse(l.len()));
    let alternatives = sorted.iter().map(|l| regex::escape(l)).collect::<Vec<_>>().join("|");
    let answer = Regex::new(&format!(
        r"(?i:answer)\s*:\s*(?:\(({alternatives})\)|({alternatives})\b)"
    ))
    .ok()?;
    let trailing = Regex::new(&format!(r"\(({alternatives})\)\s*[.!]?\s*$")).ok()?;
    let label_of = |c: regex::Captures<'_>| {
        let m = c.get(1).or_else(|| c.get(2))?;
        Some((c.get(0)?.start(), m.as_str().to_string()))
    };
    answer
        .captures_iter(text)
        .filter_map(label_of)
        .chain(trailing.captures(text).and_then(label_of))
        .max_by_key(|(start, _)| *start)
        .map(|(_, label)| label)
}

/// One line per context item with images described by reference, not bytes.
/// Used to compare contexts against golden files.
pub fn render_context_shape(context: &[ContextItem]) -> String {
    let mut out = String::new();
    for item in context {
        let role = match item.role {
            Role::System => "system",
            Role::User => "user",
            Role::Assistant => "assistant",
        };
        let body = match (item.as_text(), item.as_image()) {
            (Some(text), _) => format!("text {:?}", text),
            (_, Some(ImageRef::Source { image_id, .. })) => format!("image source:{image_id}"),
            (_, Some(ImageRef::Crop { candidate_id, .. })) => format!("image crop:{candidate_id}"),
            _ => String::new(),
        };
        out.push_str(&format!("{role}: {body}\n"));
    }
    out
}
