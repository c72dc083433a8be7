use std::path::PathBuf;

use icot_core::backend::split_at_stop;
use icot_core::confidence::{aggregate_confidence, local_margin, PositionLogits, TokenAlternative};
use icot_core::gating::{decide_insertion, sweep_insertion_counts, GatingConfig, GatingReason, InsertionPolicy};
use icot_core::metrics::{
    confidence_delta_stats, insertion_stats, reduction_ratio, round_half_up_1, tally_tokens, ImageTokenEstimator,
};
use icot_core::mocks::{BackendScript, ScriptStep, ScriptedBackend, ScriptedScorer};
use icot_core::objectpool::{
    filter_candidates, BoundingBox, CropRef, FilterParams, ImageDimensions, ObjectCandidate, ObjectPool, Provenance,
    SourceImage,
};
use icot_core::orchestrator::{extract_answer, run_trace, AnswerOption, OrchestratorConfig, Providers, TraceQuestion};
use icot_core::relevance::{select_object, RelevanceScore};
use icot_core::tracestore::{self, read_document, DocumentKind, StoreError, StoredDocument};
use proptest::prelude::*;

const DIMS: ImageDimensions = ImageDimensions { width: 100, height: 80 };

fn candidate(i: usize, b: BoundingBox) -> ObjectCandidate {
    ObjectCandidate::new(
        format!("c{i}"),
        "img",
        b,
        DIMS,
        CropRef::for_region(PathBuf::from("img.png"), b"img", b),
        Provenance::Manifest,
    )
    .unwrap()
}

fn arb_box() -> impl Strategy<Value = BoundingBox> {
    (0u32..99, 0u32..79)
        .prop_flat_map(|(x, y)| (1..=(100 - x), 1..=(80 - y)).prop_map(move |(w, h)| BoundingBox::new(x, y, w, h)))
}

fn arb_pool(max: usize) -> impl Strategy<Value = ObjectPool> {
    prop::collection::vec(arb_box(), 0..max).prop_map(|boxes| ObjectPool {
        candidates: boxes.into_iter().enumerate().map(|(i, b)| candidate(i, b)).collect(),
        ..ObjectPool::empty("img", DIMS)
    })
}

proptest! {
    #[test]
    fn entries_sorted_and_margin_nonnegative(scores in prop::collection::vec(-20.0f64..5.0, 2..6)) {
        let entries: Vec<_> = scores.iter().enumerate().map(|(i, s)| TokenAlternative::new(format!("w{i}"), *s)).collect();
        let p = PositionLogits::greedy(0, entries);
        prop_assert!(p.top_entries.windows(2).all(|w| w[0].log_score >= w[1].log_score));
        prop_assert!(local_margin(&p).unwrap() >= 0.0);
    }

    #[test]
    fn aggregate_is_bounded_by_extremes(margins in prop::collection::vec(0.0f64..50.0, 1..64)) {
        let c = aggregate_confidence(&margins).unwrap();
        let lo = margins.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = margins.iter().cloned().fold(0.0, f64::max);
        prop_assert!(c >= lo - 1e-12 && c <= hi + 1e-12);
    }

    #[test]
    fn insert_implies_below_threshold(c in 0.0f64..2.0, tau in 0.0f64..2.0, cap in prop::option::of(0usize..4), so_far in 0usize..5) {
        let cfg = GatingConfig { policy: InsertionPolicy::Gated { tau }, max_insertions_per_trace: cap };
        let d = decide_insertion(c, &cfg, so_far);
        if d.insert {
            prop_assert_eq!(d.reason, GatingReason::BelowThreshold);
            prop_assert!(d.confidence < d.tau_used);
        }
        prop_assert_eq!(d.insert, c < tau && cap.is_none_or(|k| so_far < k));
    }

    #[test]
    fn insertion_counts_monotone_in_tau(seqs in prop::collection::vec(prop::collection::vec(0.0f64..1.5, 1..8), 1..10)) {
        let grid: Vec<f64> = (0..=15).map(|i| i as f64 / 10.0).collect();
        let counts = sweep_insertion_counts(&seqs, &grid);
        prop_assert!(counts.windows(2).all(|w| w[0].1 <= w[1].1));
        prop_assert_eq!(counts[0].1, 0);
    }

    #[test]
    fn filter_survivors_satisfy_constraints(
        pool in arb_pool(24),
        min_area in 0.0f64..0.2,
        max in 1usize..20,
        thr in 0.05f64..=1.0,
    ) {
        let params = FilterParams { min_area_fraction: min_area, max_candidates: max, overlap_threshold: thr };
        let out = filter_candidates(&pool, &params);
        prop_assert!(out.len() <= max);
        prop_assert!(out.candidates.iter().all(|c| c.area_fraction >= min_area));
        for (i, a) in out.candidates.iter().enumerate() {
            for b in &out.candidates[i + 1..] {
                prop_assert!(a.bounding_box.iou(&b.bounding_box) <= thr);
            }
        }
        // Survivors form a subsequence of the input.
        let mut it = pool.candidates.iter();
        for c in &out.candidates {
            prop_assert!(it.any(|p| p == c));
        }
        prop_assert_eq!(filter_candidates(&out, &params), out);
    }

    #[test]
    fn iou_symmetric_and_bounded(a in arb_box(), b in arb_box()) {
        let (x, y) = (a.iou(&b), b.iou(&a));
        prop_assert_eq!(x, y);
        prop_assert!((0.0..=1.0).contains(&x));
        prop_assert_eq!(a.iou(&a), 1.0);
    }

    #[test]
    fn area_fraction_matches_box(b in arb_box()) {
        let c = candidate(0, b);
        let expected = (b.width as f64 * b.height as f64) / 8000.0;
        prop_assert!((c.area_fraction - expected).abs() <= 1e-9);
    }

    #[test]
    fn selected_beats_every_candidate(scores in prop::collection::vec(-3i32..3, 1..9)) {
        let pool = ObjectPool {
            candidates: (0..scores.len()).map(|i| candidate(i, BoundingBox::new(0, 0, 10, 10))).collect(),
            ..ObjectPool::empty("img", DIMS)
        };
        let rs: Vec<RelevanceScore> = scores.iter().enumerate()
            .map(|(i, s)| RelevanceScore { candidate_id: format!("c{i}"), score: *s as f64 * 0.25 })
            .collect();
        let sel = select_object(&rs, &pool).unwrap();
        prop_assert!(rs.iter().all(|r| sel.score >= r.score));
        prop_assert!(rs[..sel.pool_index].iter().all(|r| r.score < sel.score));
        match sel.runner_up_score {
            Some(r) => prop_assert_eq!(sel.selection_margin, Some(sel.score - r)),
            None => prop_assert_eq!(rs.len(), 1),
        }
    }

    #[test]
    fn stop_split_keeps_a_prefix(words in prop::collection::vec("[a-z]{1,4}|\n\n|Step|Answer", 1..20)) {
        let pos: Vec<PositionLogits> = words.iter().enumerate()
            .map(|(i, w)| PositionLogits::new(i, w.clone(), vec![TokenAlternative::new(w.clone(), 0.0), TokenAlternative::new("x", -1.0)]))
            .collect();
        let full: String = words.concat();
        let stops = vec!["\n\nStep".to_string(), "\n\nAnswer".to_string()];
        let split = split_at_stop(pos, &stops);
        let kept: String = split.kept.iter().map(|p| p.token.as_str()).collect();
        prop_assert_eq!(&kept, &split.text);
        prop_assert_eq!(format!("{}{}", split.text, split.tail), full);
        prop_assert!(stops.iter().all(|s| !split.text.contains(s.as_str())));
        prop_assert_eq!(split.matched.is_some(), stops.iter().any(|s| words.concat().contains(s.as_str())));
    }

    #[test]
    fn reduction_of_baseline_against_itself_is_zero(x in 1.0f64..1e6) {
        prop_assert_eq!(reduction_ratio(x, x).unwrap(), 0.0);
        prop_assert!(reduction_ratio(0.0, x).unwrap() == 100.0);
    }

    #[test]
    fn rounding_is_half_up_at_one_decimal(k in -100_000i64..100_000) {
        // k/100 has at most two decimals; a trailing 5 rounds away from zero.
        let x = k as f64 / 100.0;
        let tenths = k.signum() * (k.abs() / 10 + i64::from(k.abs() % 10 >= 5));
        prop_assert_eq!(round_half_up_1(x), tenths as f64 / 10.0);
    }

    #[test]
    fn crop_cost_is_monotone(a in 0.0f64..=1.0, b in 0.0f64..=1.0, full in 1u64..2000) {
        let est = ImageTokenEstimator { full_image_tokens: full };
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        prop_assert!(est.crop_cost(lo) <= est.crop_cost(hi));
        prop_assert!(est.crop_cost(hi) <= full);
    }

    #[test]
    fn answer_is_recovered(prefix in "[a-z ,.]{0,40}", label in prop::sample::select(vec!["A", "B", "C", "D"])) {
        let labels: Vec<String> = ["A", "B", "C", "D"].map(String::from).to_vec();
        let text = format!("{prefix} Answer: ({label})");
        prop_assert_eq!(extract_answer(&text, &labels), Some(label.to_string()));
    }

    #[test]
    fn store_round_trip_and_flip(payload in arb_json(), at in any::<prop::sample::Index>(), bit in 0u8..8) {
        let dir = tempfile::tempdir().unwrap();
        let path = tracestore::write_document(dir.path(), DocumentKind::Report, &payload).unwrap();
        let doc = read_document(&path).unwrap();
        prop_assert_eq!(&doc.payload, &payload);
        prop_assert_eq!(&doc, &StoredDocument::new(DocumentKind::Report, &payload).unwrap());
        let mut bytes = std::fs::read(&path).unwrap();
        let i = at.index(bytes.len());
        bytes[i] ^= 1 << bit;
        std::fs::write(&path, &bytes).unwrap();
        let detected = matches!(
            read_document(&path),
            Err(StoreError::Malformed { .. }
                | StoreError::HashMismatch { .. }
                | StoreError::NonCanonical { .. }
                | StoreError::UnknownSchemaVersion { .. })
        );
        prop_assert!(detected);
    }
}

fn arb_json() -> impl Strategy<Value = serde_json::Value> {
    use serde_json::{json, Value};
    let leaf = prop_oneof![
        Just(Value::Null),
        any::<bool>().prop_map(Value::Bool),
        any::<i64>().prop_map(|i| json!(i)),
        (-1e6f64..1e6).prop_map(|f| json!(f)),
        "[ -~é✓]{0,12}".prop_map(Value::String),
    ];
    leaf.prop_recursive(3, 24, 5, |inner| {
        prop_oneof![
            prop::collection::vec(inner.clone(), 0..5).prop_map(Value::Array),
            prop::collection::btree_map("[a-z_]{1,6}", inner, 0..5)
                .prop_map(|m| Value::Object(m.into_iter().collect())),
        ]
    })
}

fn arb_script() -> impl Strategy<Value = Vec<ScriptStep>> {
    let step = (0.0f64..0.6, any::<bool>(), 0.0f64..0.6).prop_map(|(m, rebound, m2)| {
        let s = ScriptStep::flat("The region on the left looks relevant.", m);
        if rebound {
            s.or_after_insertion(ScriptStep::flat("The crop settles it somewhat.", m2))
        } else {
            s
        }
    });
    (
        prop::collection::vec(step, 0..6),
        0.0f64..0.6,
        prop::sample::select(vec!["A", "B", "C"]),
    )
        .prop_map(|(mut steps, m, label)| {
            steps.push(ScriptStep::flat(
                format!("So the answer is clear. Answer: ({label})"),
                m,
            ));
            steps
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn traces_satisfy_their_invariants(
        steps in arb_script(),
        tau in prop_oneof![Just(0.0), 0.0f64..0.7, Just(f64::INFINITY)],
        cap in prop::option::of(0usize..3),
        max_steps in 1usize..8,
        pool in arb_pool(5),
    ) {
        let backend = ScriptedBackend::new(BackendScript::new(steps));
        let scorer = ScriptedScorer::from_entries((0..pool.len()).map(|i| (0, format!("c{i}"), (i as f64 * 0.37).sin())));
        let policy = if tau.is_infinite() { InsertionPolicy::Always } else { InsertionPolicy::Gated { tau } };
        let cfg = OrchestratorConfig {
            gating: GatingConfig { policy, max_insertions_per_trace: cap },
            max_steps,
            ..OrchestratorConfig::default()
        };
        let question = TraceQuestion {
            question_id: "q".into(),
            question: "Which color?".into(),
            options: ["A", "B", "C"].iter().map(|l| AnswerOption { label: l.to_string(), text: l.to_lowercase() }).collect(),
            image: SourceImage { image_id: "img".into(), path: "img.png".into() },
        };
        let trace = run_trace(&question, &pool, &cfg, &Providers { backend: &backend, relevance: &scorer });
        prop_assert!(trace.check_invariants().is_ok(), "{:?}", trace.check_invariants());
        prop_assert!(trace.steps.len() <= max_steps);
        if let Some(k) = cap {
            prop_assert!(trace.insertion_count() <= k);
        }
        if tau == 0.0 || pool.is_empty() {
            prop_assert_eq!(trace.insertion_count(), 0);
        }
        let ledger = tally_tokens(&trace);
        prop_assert_eq!(ledger.total_tokens, ledger.text_tokens + ledger.image_tokens);
        prop_assert_eq!(ledger.insertions, trace.insertion_count());
    }

    #[test]
    fn stats_ignore_trace_order(seed in any::<u64>(), n in 1usize..8) {
        use rand::seq::SliceRandom;
        use rand::SeedableRng;
        let pool = ObjectPool {
            candidates: vec![candidate(0, BoundingBox::new(0, 0, 50, 40))],
            ..ObjectPool::empty("img", DIMS)
        };
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let traces: Vec<_> = (0..n).map(|i| {
            let lo = 0.05 * (i % 3) as f64;
            let steps = vec![
                ScriptStep::flat("Looking closer.", lo).or_after_insertion(ScriptStep::flat("Better now.", 0.3 + lo)),
                ScriptStep::flat("Answer: (A)", 0.5),
            ];
            let backend = ScriptedBackend::new(BackendScript::new(steps));
            let scorer = ScriptedScorer::from_entries([(0, "c0", 1.0)]);
            let question = TraceQuestion {
                question_id: format!("q{i}"),
                question: "Which?".into(),
                options: vec![AnswerOption { label: "A".into(), text: "a".into() }],
                image: SourceImage { image_id: "img".into(), path: "img.png".into() },
            };
            run_trace(&question, &pool, &OrchestratorConfig::default(), &Providers { backend: &backend, relevance: &scorer })
        }).collect();
        let mut shuffled = traces.clone();
        shuffled.shuffle(&mut rng);
        prop_assert_eq!(insertion_stats(&traces).unwrap(), insertion_stats(&shuffled).unwrap());
        prop_assert_eq!(confidence_delta_stats(&traces).ok(), confidence_delta_stats(&shuffled).ok());
    }
}
