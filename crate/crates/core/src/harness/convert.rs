//! Adapters from public benchmark layouts to the normalized sample format.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::Deserialize;
use serde_json::Value;

use super::dataset::{DatasetError, Sample, Split};
use crate::orchestrator::AnswerOption;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SourceFormat {
    /// JSONL with `id`, `question`, `choices`, `answer` (letter) and
    /// `image`/`image_id`.
    M3Cot,
    /// `problems.json`: an object keyed by id with `question`, `choices`,
    /// `answer` (index), `image` and `split`. Images live at
    /// `<image_root>/<split>/<id>/<image>`; text-only items are skipped.
    ScienceQa,
    /// Tab-separated `image<TAB>question<TAB>Yes|No` lines, one category per
    /// file. Options are the labels `Yes` and `No`.
    Mme,
}

impl std::str::FromStr for SourceFormat {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "m3cot" => Ok(SourceFormat::M3Cot),
            "scienceqa" => Ok(SourceFormat::ScienceQa),
            "mme" => Ok(SourceFormat::Mme),
            other => Err(format!(
                "unknown dataset format {other:?} (expected m3cot, scienceqa or mme)"
            )),
        }
    }
}

#[derive(Debug, Clone)]
pub struct ConvertOptions {
    pub image_root: PathBuf,
    /// Used when the source carries no split of its own.
    pub default_split: Split,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ConvertSummary {
    pub converted: usize,
    pub skipped: usize,
}

fn letter(i: usize) -> String {
    char::from(b'A' + i as u8).to_string()
}

fn lettered(choices: &[String]) -> Vec<AnswerOption> {
    choices
        .iter()
        .enumerate()
        .map(|(i, text)| AnswerOption {
            label: letter(i),
            text: text.clone(),
        })
        .collect()
}

fn parse_split(s: Option<&str>, default: Split) -> Split {
    match s.map(str::to_ascii_lowercase).as_deref() {
        Some("train") => Split::Train,
        Some("val" | "dev" | "validation" | "minival") => Split::Val,
        Some("test" | "minitest") => Split::Test,
        _ => default,
    }
}

fn parse_error(path: &Path, line: usize, message: impl Into<String>) -> DatasetError {
    DatasetError::DatasetParseError {
        path: path.to_path_buf(),
        line,
        message: message.into(),
    }
}

#[derive(Deserialize)]
struct M3CotRecord {
    id: Value,
    question: String,
    choices: Vec<String>,
    answer: String,
    #[serde(default)]
    image: Option<String>,
    #[serde(default)]
    image_id: Option<String>,
    #[serde(default)]
    split: Option<String>,
}

fn id_string(v: &Value) -> String {
    match v {
        Value::String(s) => s.clone(),
        other => other.to_string(),
    }
}

fn convert_m3cot(
    path: &Path,
    text: &str,
    opts: &ConvertOptions,
) -> Result<(Vec<Sample>, ConvertSummary), DatasetError> {
    let mut out = Vec::new();
    let mut summary = ConvertSummary::default();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: M3CotRecord = serde_json::from_str(line).map_err(|e| parse_error(path, i + 1, e.to_string()))?;
        let Some(image) = rec.image.or(rec.image_id) else {
            summary.skipped += 1;
            continue;
        };
        let mut image_path = opts.image_root.join(&image);
        if image_path.extension().is_none() {
            image_path.set_extension("png");
        }
        let gold = rec.answer.trim().trim_matches(|c| c == '(' || c == ')').to_string();
        out.push(Sample {
            sample_id: id_string(&rec.id),
            question: rec.question,
            image_path,
            options: lettered(&rec.choices),
            gold_label: gold,
            split: parse_split(rec.split.as_deref(), opts.default_split),
        });
    }
    summary.converted = out.len();
    Ok((out, summary))
}

#[derive(Deserialize)]
struct ScienceQaRecord {
    question: String,
    choices: Vec<String>,
    answer: usize,
    #[serde(default)]
    image: Option<String>,
    #[serde(default)]
    split: Option<String>,
}

fn convert_scienceqa(
    path: &Path,
    text: &str,
    opts: &ConvertOptions,
) -> Result<(Vec<Sample>, ConvertSummary), DatasetError> {
    let records: BTreeMap<String, ScienceQaRecord> =
        serde_json::from_str(text).map_err(|e| parse_error(path, e.line(), e.to_string()))?;
    let mut out = Vec::new();
    let mut summary = ConvertSummary::default();
    for (id, rec) in records {
        let Some(image) = rec.image else {
            summary.skipped += 1;
            continue;
        };
        if rec.answer >= rec.choices.len() {
            return Err(parse_error(
                path,
                0,
                format!("{id}: answer index {} out of range", rec.answer),
            ));
        }
        let split_dir = rec.split.clone().unwrap_or_else(|| "test".into());
        out.push(Sample {
            image_path: opts.image_root.join(&split_dir).join(&id).join(image),
            question: rec.question,
            options: lettered(&rec.choices),
            gold_label: letter(rec.answer),
            split: parse_split(rec.split.as_deref(), opts.default_split),
            sample_id: id,
        });
    }
    summary.converted = out.len();
    Ok((out, summary))
}

fn convert_mme(path: &Path, text: &str, opts: &ConvertOptions) -> Result<(Vec<Sample>, ConvertSummary), DatasetError> {
    let category = path.file_stem().and_then(|s| s.to_str()).unwrap_or("mme").to_string();
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        let [image, question, answer] = cols.as_slice() else {
            return Err(parse_error(
                path,
                i + 1,
                format!("expected 3 tab-separated columns, found {}", cols.len()),
            ));
        };
        let gold = match answer.trim().to_ascii_lowercase().as_str() {
            "yes" => "Yes",
            "no" => "No",
            other => return Err(parse_error(path, i + 1, format!("answer {other:?} is not Yes/No"))),
        };
        out.push(Sample {
            sample_id: format!("{category}-{}", i + 1),
            question: question.trim().to_string(),
            image_path: opts.image_root.join(image.trim()),
            options: ["Yes", "No"]
                .iter()
                .map(|l| AnswerOption {
                    label: l.to_string(),
                    text: l.to_string(),
                })
                .collect(),
            gold_label: gold.to_string(),
            split: opts.default_split,
        });
    }
    let converted = out.len();
    Ok((out, ConvertSummary { converted, skipped: 0 }))
}

/// Converts and validates; every produced sample satisfies the dataset
/// invariants or the conversion fails.
pub fn convert_dataset(
    format: SourceFormat,
    input: &Path,
    opts: &ConvertOptions,
) -> Result<(Vec<Sample>, ConvertSummary), DatasetError> {
    let text = std::fs::read_to_string(input).map_err(|e| DatasetError::Io {
        path: input.to_path_buf(),
        message: e.to_string(),
    })?;
    let (samples, summary) = match format {
        SourceFormat::M3Cot => convert_m3cot(input, &text, opts)?,
        SourceFormat::ScienceQa => convert_scienceqa(input, &text, opts)?,
        SourceFormat::Mme => convert_mme(input, &text, opts)?,
    };
    let mut seen = std::collections::HashSet::new();
    for (i, s) in samples.iter().enumerate() {
        s.validate()
            .map_err(|m| parse_error(input, i + 1, format!("{}: {m}", s.sample_id)))?;
        if !seen.insert(s.sample_id.clone()) {
            return Err(DatasetError::DuplicateId {
                path: input.to_path_buf(),
                line: i + 1,
                sample_id: s.sample_id.clone(),
            });
        }
    }
    Ok((samples, summary))
}
