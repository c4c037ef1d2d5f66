mod common;

use std::collections::BTreeSet;

use proptest::collection::vec;
use proptest::prelude::*;

use mckd::backends::{Query, StoppingRule, Student, TrainRecord};
use mckd::corpus::{Dataset, Example};
use mckd::parse_eval::{
    balance_brackets, is_balanced, is_laminar, parse_brackets, strip_punctuation, BracketTree, Metric, Span,
};
use mckd::pipeline::{Pipeline, RunConfig};

/// Laminar span sets over `n` words, with every word bracketed and a root.
fn tree(n: usize) -> impl Strategy<Value = BracketTree> {
    vec(any::<u32>(), 4 * n).prop_map(move |choices| {
        let mut spans = BTreeSet::new();
        let mut it = choices.into_iter().cycle();
        let mut stack = vec![(0usize, n)];
        while let Some((s, e)) = stack.pop() {
            spans.insert((s, e));
            if e - s < 2 {
                continue;
            }
            let cut = s + 1 + it.next().unwrap() as usize % (e - s - 1);
            stack.push((s, cut));
            stack.push((cut, e));
        }
        // thin out some internal brackets so arities vary
        let spans: BTreeSet<Span> = spans
            .into_iter()
            .filter(|&(s, e)| e - s == 1 || (s, e) == (0, n) || it.next().unwrap() % 4 != 0)
            .collect();
        let words = (0..n).map(|i| if i % 5 == 4 { ",".to_string() } else { format!("w{i}") }).collect();
        BracketTree { words, spans }
    })
}

fn tags(n: usize) -> impl Strategy<Value = String> {
    vec(prop_oneof!["O", "B-a", "I-a", "B-b", "I-b"], n).prop_map(|v| v.join(" "))
}

proptest! {
    #[test]
    fn balancing_is_total_and_idempotent(s in ".{0,80}") {
        let once = balance_brackets(&s);
        prop_assert!(is_balanced(&once));
        prop_assert_eq!(balance_brackets(&once), once);
    }

    #[test]
    fn render_then_parse_is_identity(t in (1usize..25).prop_flat_map(tree)) {
        let back = parse_brackets(&t.render(), &t.words);
        prop_assert_eq!(back, t);
    }

    #[test]
    fn tree_f1_is_symmetric((a, b) in (2usize..25).prop_flat_map(|n| (tree(n), tree(n)))) {
        let words = &a.words;
        let ab = Metric::BracketF1.score(&a.render(), &b.render(), words).f1;
        let ba = Metric::BracketF1.score(&b.render(), &a.render(), words).f1;
        prop_assert!((ab - ba).abs() < 1e-15);
        prop_assert_eq!(Metric::BracketF1.score(&a.render(), &a.render(), words).f1, 1.0);
    }

    #[test]
    fn slot_f1_is_symmetric((p, g, n) in (0usize..12).prop_flat_map(|n| (tags(n), tags(n), Just(n)))) {
        let words: Vec<String> = (0..n).map(|i| format!("w{i}")).collect();
        let pg = Metric::ChunkF1.score(&p, &g, &words).f1;
        let gp = Metric::ChunkF1.score(&g, &p, &words).f1;
        prop_assert!((pg - gp).abs() < 1e-15);
        prop_assert!((0.0..=1.0).contains(&pg));
    }

    #[test]
    fn stripping_never_adds_spans(t in (1usize..25).prop_flat_map(tree)) {
        let is_p = |w: &str| w == ",";
        let s = strip_punctuation(&t, is_p);
        prop_assert!(s.spans.len() <= t.spans.len());
        prop_assert!(is_laminar(&s.spans));
        prop_assert_eq!(s.words.len(), t.words.iter().filter(|w| !is_p(w)).count());
        prop_assert_eq!(strip_punctuation(&s, is_p), s);
    }

    #[test]
    fn stopping_rule_matches_definition(
        history in vec(0.0f64..1.0, 0..30),
        patience in 1usize..5,
        max in 5usize..25,
    ) {
        let rule = StoppingRule { fidelity_delta: 0.05, patience_epochs: patience, max_epochs: max };
        let n = history.len();
        let mut converged = n > patience;
        for k in 0..patience.min(n.saturating_sub(1)) {
            converged &= (history[n - 1 - k] - history[n - 2 - k]).abs() < 0.05;
        }
        prop_assert_eq!(rule.converged(&history), converged);
        prop_assert_eq!(rule.should_stop(&history), converged || n >= max);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn trained_tagger_predicts_deterministically(seed in 0u64..1000) {
        let s = common::setup(seed, 200, 50);
        let records = s.teacher_records(&s.pool);
        let train = |id: &str| common::student().train(id, &records, &StoppingRule::default(), Metric::TagAccuracy).unwrap();
        let (a, b) = (train("a"), train("b"));
        let qs: Vec<Query> = s.test.examples().iter().map(|e| Query::new(&e.id, &e.input)).collect();
        prop_assert_eq!(a.predict(&qs).unwrap(), b.predict(&qs).unwrap());
        prop_assert_eq!(&a.training_fidelity_history, &b.training_fidelity_history);
        prop_assert!(a.training_fidelity_history.iter().all(|f| (0.0..=1.0).contains(f)));
    }
}

#[test]
fn gold_never_reaches_training() {
    const SENTINEL: &str = "POISON";
    let s = common::setup(3, 300, 10);
    let poisoned: Vec<Example> = s
        .pool
        .examples()
        .iter()
        .map(|e| {
            let n = e.words().len();
            Example::new(&e.id, &e.input, Some(vec![SENTINEL; n].join(" ")))
        })
        .collect();
    let poisoned = Dataset::new("poisoned", poisoned).unwrap();
    let mut config = RunConfig::new(Metric::TagAccuracy);
    config.stages = 3;
    let tagger = common::student();
    let out = Pipeline::new(&config, &tagger)
        .with_teacher(&s.teacher)
        .run_mckd(&poisoned)
        .unwrap();
    assert!(!out.store.to_jsonl().contains(SENTINEL));
    let qs: Vec<Query> = poisoned.examples().iter().map(|e| Query::new(&e.id, &e.input)).collect();
    let preds = out.final_model.unwrap().predict(&qs).unwrap();
    assert!(preds.iter().all(|p| !p.output.contains(SENTINEL)));
}

#[test]
fn table_learner_records_are_memorized() {
    let records: Vec<TrainRecord> = (0..5)
        .map(|i| TrainRecord {
            id: format!("{i}"),
            input: format!("x{i} y"),
            target: "B-a O".into(),
        })
        .collect();
    let learner = mckd::backends::TableLearner::new(mckd::backends::BackendSpec::new(
        mckd::backends::BackendKind::TableLearner,
    ));
    let h = learner
        .train("t", &records, &StoppingRule::default(), Metric::ChunkF1)
        .unwrap();
    assert_eq!(h.training_fidelity_history, vec![1.0; 4]);
}
