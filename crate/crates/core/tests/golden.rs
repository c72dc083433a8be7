//! Interleaved contexts compared line by line against checked-in shapes.

use std::path::PathBuf;

use icot_core::mocks::{BackendScript, ScriptStep, ScriptedBackend, ScriptedScorer};
use icot_core::objectpool::{
    BoundingBox, CropRef, ImageDimensions, ObjectCandidate, ObjectPool, Provenance, SourceImage,
};
use icot_core::orchestrator::{
    render_context_shape, run_trace_detailed, AnswerOption, OrchestratorConfig, Providers, TraceQuestion, Verdict,
};

fn question() -> TraceQuestion {
    TraceQuestion {
        question_id: "street-1".into(),
        question: "What color is the sign?".into(),
        options: vec![
            AnswerOption {
                label: "A".into(),
                text: "red".into(),
            },
            AnswerOption {
                label: "B".into(),
                text: "blue".into(),
            },
        ],
        image: SourceImage {
            image_id: "street".into(),
            path: PathBuf::from("street.png"),
        },
    }
}

fn pool() -> ObjectPool {
    let dims = ImageDimensions {
        width: 200,
        height: 100,
    };
    let boxes = [
        BoundingBox::new(0, 0, 50, 50),
        BoundingBox::new(60, 10, 40, 40),
        BoundingBox::new(120, 20, 60, 60),
    ];
    ObjectPool {
        candidates: boxes
            .iter()
            .enumerate()
            .map(|(i, b)| {
                ObjectCandidate::new(
                    format!("c{}", i + 1),
                    "street",
                    *b,
                    dims,
                    CropRef::for_region(PathBuf::from("street.png"), b"street", *b),
                    Provenance::Manifest,
                )
                .unwrap()
            })
            .collect(),
        ..ObjectPool::empty("street", dims)
    }
}

fn run(steps: Vec<ScriptStep>, scorer: ScriptedScorer) -> (String, Verdict, usize) {
    let backend = ScriptedBackend::new(BackendScript::new(steps));
    let out = run_trace_detailed(
        &question(),
        &pool(),
        &OrchestratorConfig::default(),
        &Providers {
            backend: &backend,
            relevance: &scorer,
        },
    );
    out.trace.check_invariants().unwrap();
    (
        render_context_shape(&out.final_context),
        out.trace.verdict,
        out.trace.insertion_count(),
    )
}

fn assert_golden(actual: &str, expected: &str, name: &str) {
    assert!(
        actual == expected,
        "context differs from golden/{name}:\n--- actual ---\n{actual}--- expected ---\n{expected}"
    );
}

#[test]
fn single_insertion_lands_between_rationale_and_next_prompt() {
    let (shape, verdict, inserted) = run(
        vec![
            ScriptStep::flat(" The sign near the door is small and blurry.", 0.1),
            ScriptStep::flat(" The crop shows it clearly; it is red. Answer: (A)", 0.7),
        ],
        ScriptedScorer::from_entries([(0, "c1", 0.2), (0, "c2", 0.9), (0, "c3", 0.4)]),
    );
    assert_eq!((verdict, inserted), (Verdict::Answered, 1));
    assert_golden(
        &shape,
        include_str!("golden/single_insertion.txt"),
        "single_insertion.txt",
    );
}

#[test]
fn consecutive_insertions_each_follow_their_own_rationale() {
    let (shape, verdict, inserted) = run(
        vec![
            ScriptStep::flat(" The sign near the door is small and blurry.", 0.1),
            ScriptStep::flat(" unused without a crop", 0.9)
                .or_after_insertion(ScriptStep::flat(" That crop shows the door, not the sign.", 0.15)),
            ScriptStep::flat(" The second crop shows a red sign. Answer: (A)", 0.8),
        ],
        ScriptedScorer::from_entries([
            (1, "c1", 0.2),
            (1, "c2", 0.9),
            (1, "c3", 0.4),
            (2, "c1", 0.1),
            (2, "c2", 0.3),
            (2, "c3", 0.8),
        ]),
    );
    assert_eq!((verdict, inserted), (Verdict::Answered, 2));
    assert_golden(&shape, include_str!("golden/two_insertions.txt"), "two_insertions.txt");
}

#[test]
fn answer_marker_without_label_asks_for_the_answer() {
    let (shape, verdict, inserted) = run(
        vec![
            ScriptStep::flat(" The sign is plainly red.\n\nAnswer", 0.9),
            ScriptStep::flat("Answer: (A)", 0.9),
        ],
        ScriptedScorer::default(),
    );
    assert_eq!((verdict, inserted), (Verdict::Answered, 0));
    assert_golden(
        &shape,
        include_str!("golden/answer_elicitation.txt"),
        "answer_elicitation.txt",
    );
}
