use std::collections::HashSet;
use std::io::BufRead;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::objectpool::SourceImage;
use crate::orchestrator::{AnswerOption, TraceQuestion};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

/// One multiple-choice item in the normalized dataset format.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Sample {
    pub sample_id: String,
    pub question: String,
    pub image_path: PathBuf,
    pub options: Vec<AnswerOption>,
    pub gold_label: String,
    pub split: Split,
}

impl Sample {
    pub fn validate(&self) -> Result<(), String> {
        if self.sample_id.trim().is_empty() {
            return Err("empty sample_id".into());
        }
        if self.options.is_empty() {
            return Err("no options".into());
        }
        let mut seen = HashSet::new();
        for o in &self.options {
            if o.label.trim().is_empty() {
                return Err("empty option label".into());
            }
            if !seen.insert(o.label.as_str()) {
                return Err(format!("duplicate option label {:?}", o.label));
            }
        }
        if !seen.contains(self.gold_label.as_str()) {
            return Err(format!(
                "gold_label {:?} is not one of the option labels {:?}",
                self.gold_label,
                self.options.iter().map(|o| o.label.as_str()).collect::<Vec<_>>()
            ));
        }
        Ok(())
    }

    pub fn labels(&self) -> Vec<String> {
        self.options.iter().map(|o| o.label.clone()).collect()
    }

    pub fn trace_question(&self) -> TraceQuestion {
        TraceQuestion {
            question_id: self.sample_id.clone(),
            question: self.question.clone(),
            options: self.options.clone(),
            image: SourceImage {
                image_id: self.sample_id.clone(),
                path: self.image_path.clone(),
            },
        }
    }
}

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("{path}: {message}")]
    Io { path: PathBuf, message: String },
    #[error("{path}:{line}: {message}")]
    DatasetParseError {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("{path}:{line}: duplicate sample_id {sample_id:?}")]
    DuplicateId {
        path: PathBuf,
        line: usize,
        sample_id: String,
    },
}

/// Reads newline-delimited samples in file order. Blank lines are skipped;
/// relative image paths resolve against the dataset file's directory.
pub fn load_dataset(path: &Path) -> Result<Vec<Sample>, DatasetError> {
    let file = std::fs::File::open(path).map_err(|e| DatasetError::Io {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    let base = path.parent().unwrap_or(Path::new("."));
    let mut samples = Vec::new();
    let mut ids = HashSet::new();
    for (i, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line_no = i + 1;
        let line = line.map_err(|e| DatasetError::Io {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let parse_error = |message: String| DatasetError::DatasetParseError {
            path: path.to_path_buf(),
            line: line_no,
            message,
        };
        let mut sample: Sample = serde_json::from_str(&line).map_err(|e| parse_error(e.to_string()))?;
        sample.validate().map_err(parse_error)?;
        if !ids.insert(sample.sample_id.clone()) {
            return Err(DatasetError::DuplicateId {
                path: path.to_path_buf(),
                line: line_no,
                sample_id: sample.sample_id,
            });
        }
        if sample.image_path.is_relative() {
            sample.image_path = base.join(&sample.image_path);
        }
        samples.push(sample);
    }
    Ok(samples)
}

/// Writes samples as newline-delimited JSON.
pub fn write_dataset(path: &Path, samples: &[Sample]) -> std::io::Result<()> {
    let mut out = String::new();
    for s in samples {
        out.push_str(&serde_json::to_string(s).map_err(std::io::Error::other)?);
        out.push('\n');
    }
    std::fs::write(path, out)
}
