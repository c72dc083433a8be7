//! Hermetic benchmark fixtures: images, dataset, scripts, score tables,
//! manifest and config written into a temp dir.
#![allow(dead_code)]

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use icot_core::harness::{load_dataset, RunConfig, Sample, ScoreBook, ScriptBook, Split};
use icot_core::mocks::{BackendScript, ScoreEntry, ScriptStep};
use icot_core::objectpool::{ManifestCandidate, ManifestFile, ManifestImage, MANIFEST_SCHEMA_VERSION};
use icot_core::orchestrator::AnswerOption;
use icot_core::tracestore::{self, DocumentKind, StoredDocument};

pub const IMAGE_W: u32 = 64;
pub const IMAGE_H: u32 = 48;

pub struct SampleSpec {
    pub id: String,
    pub gold: String,
    pub steps: Vec<ScriptStep>,
    pub scores: Vec<ScoreEntry>,
}

impl SampleSpec {
    pub fn new(id: impl Into<String>, gold: &str, steps: Vec<ScriptStep>) -> Self {
        Self {
            id: id.into(),
            gold: gold.into(),
            steps,
            scores: default_scores(),
        }
    }
}

/// `c2` wins at every step.
pub fn default_scores() -> Vec<ScoreEntry> {
    [("c1", 0.31), ("c2", 0.82), ("c3", 0.47)]
        .into_iter()
        .map(|(id, score)| ScoreEntry {
            step: 0,
            candidate_id: id.into(),
            score,
        })
        .collect()
}

pub struct Fixture {
    pub dir: tempfile::TempDir,
    pub dataset: PathBuf,
    pub config: PathBuf,
}

impl Fixture {
    pub fn samples(&self) -> Vec<Sample> {
        load_dataset(&self.dataset).expect("fixture dataset loads")
    }

    pub fn run_config(&self) -> RunConfig {
        RunConfig::load(&self.config).expect("fixture config loads")
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.dir.path().join(rel)
    }
}

fn write_png(path: &Path, seed: u8) {
    let img = image::RgbImage::from_fn(IMAGE_W, IMAGE_H, |x, y| {
        image::Rgb([(x as u8).wrapping_mul(3) ^ seed, (y as u8).wrapping_mul(5), seed])
    });
    img.save(path).expect("write png");
}

fn options() -> Vec<AnswerOption> {
    ["red", "green", "blue", "yellow"]
        .iter()
        .zip(["A", "B", "C", "D"])
        .map(|(text, label)| AnswerOption {
            label: label.into(),
            text: text.to_string(),
        })
        .collect()
}

/// Three 32x24 quadrant candidates per image (area fraction 0.25 each).
fn manifest_for(ids: &[&str]) -> ManifestFile {
    let boxes = [[0, 0, 32, 24], [32, 0, 32, 24], [0, 24, 32, 24]];
    ManifestFile {
        schema_version: MANIFEST_SCHEMA_VERSION.into(),
        images: ids
            .iter()
            .map(|id| ManifestImage {
                image_id: id.to_string(),
                width: IMAGE_W,
                height: IMAGE_H,
                image_path: Some(PathBuf::from(format!("images/{id}.png"))),
                candidates: boxes
                    .iter()
                    .enumerate()
                    .map(|(i, b)| ManifestCandidate {
                        candidate_id: format!("c{}", i + 1),
                        bbox: *b,
                        crop_path: None,
                        mask_ref: None,
                    })
                    .collect(),
            })
            .collect(),
    }
}

/// Writes the fixture. `root_toml` goes at the top of `config.toml` (root
/// keys such as `tau`); `wire` serves scripts through the fake chat endpoint.
pub fn build_fixture(samples: &[SampleSpec], root_toml: &str, wire: bool) -> Fixture {
    let dir = tempfile::tempdir().expect("tempdir");
    let root = dir.path();
    std::fs::create_dir_all(root.join("images")).unwrap();

    let mut dataset = Vec::new();
    let mut scripts = BTreeMap::new();
    let mut scores = BTreeMap::new();
    for (i, sample) in samples.iter().enumerate() {
        write_png(&root.join(format!("images/{}.png", sample.id)), i as u8);
        dataset.push(Sample {
            sample_id: sample.id.clone(),
            question: format!("What color is the marked object in picture {}?", sample.id),
            image_path: PathBuf::from(format!("images/{}.png", sample.id)),
            options: options(),
            gold_label: sample.gold.clone(),
            split: Split::Test,
        });
        scripts.insert(sample.id.clone(), BackendScript::new(sample.steps.clone()));
        scores.insert(sample.id.clone(), sample.scores.clone());
    }
    let lines: Vec<String> = dataset.iter().map(|s| serde_json::to_string(s).unwrap()).collect();
    std::fs::write(root.join("dataset.jsonl"), lines.join("\n") + "\n").unwrap();

    let book = ScriptBook { samples: scripts };
    let doc = StoredDocument::new(DocumentKind::Script, &book).unwrap();
    tracestore::write_document_to(&root.join("scripts.json"), &doc).unwrap();
    std::fs::write(
        root.join("scores.json"),
        serde_json::to_string_pretty(&ScoreBook { samples: scores }).unwrap(),
    )
    .unwrap();
    let ids: Vec<&str> = samples.iter().map(|s| s.id.as_str()).collect();
    std::fs::write(
        root.join("manifest.json"),
        serde_json::to_string_pretty(&manifest_for(&ids)).unwrap(),
    )
    .unwrap();

    let config = format!(
        "{root_toml}
workers = 2

[backend]
kind = \"scripted\"
scripts = \"scripts.json\"
wire = {wire}

[relevance]
kind = \"scripted\"
tables = \"scores.json\"

[pool]
kind = \"manifest\"
path = \"manifest.json\"
"
    );
    std::fs::write(root.join("config.toml"), config).unwrap();
    Fixture {
        dataset: root.join("dataset.jsonl"),
        config: root.join("config.toml"),
        dir,
    }
}

/// Low-confidence first step, one insertion, then the answer.
pub fn golden_steps() -> Vec<ScriptStep> {
    vec![
        ScriptStep::with_margins(
            "Step 1: The small sign near the door is hard to make out.",
            vec![
                0.05, 0.12, 0.08, 0.15, 0.11, 0.09, 0.14, 0.06, 0.1, 0.13, 0.07, 0.2, 0.04,
            ],
        ),
        ScriptStep::flat("Step 2: The crop shows the sign clearly; it is red. Answer: (A)", 0.64),
    ]
}
