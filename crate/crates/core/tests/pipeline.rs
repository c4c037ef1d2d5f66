mod common;

use std::sync::Arc;

use mckd::backends::{
    noisy_oracle, BackendKind, BackendSpec, Corruption, EpochObserver, ModelHandle, NoisyOracle, Prediction,
    Predictor, Query, StoppingRule, Student, TableLearner, TrainRecord,
};
use mckd::corpus::{Dataset, Example, PartitionPair, Side};
use mckd::parse_eval::Metric;
use mckd::pipeline::{
    audit_store, cross_partition_relabel, kept_count, stage_model_id, Pipeline, RunConfig, RunDir,
};
use mckd::Result;

fn table() -> TableLearner {
    TableLearner::new(BackendSpec::new(BackendKind::TableLearner))
}

fn clean_oracle(data: &Dataset) -> NoisyOracle {
    let gold: std::collections::BTreeMap<String, String> = data
        .examples()
        .iter()
        .map(|e| (e.input.clone(), e.gold.clone().unwrap()))
        .collect();
    let gold = Arc::new(move |q: &Query| gold.get(&q.input).cloned());
    NoisyOracle::new("teacher", gold, 0.0, 0, Corruption::Tags(vec!["O".into()])).unwrap()
}

/// Ten distinct sentences, each repeated under many ids so that both halves
/// of any partition contain every sentence.
fn repeated_corpus() -> Dataset {
    let examples = (0..200)
        .map(|i| {
            let k = i % 10;
            let input = format!("s{k} a b");
            let gold = format!("B-t{k} O I-x");
            Example::new(format!("e{i:03}"), input, Some(gold))
        })
        .collect();
    Dataset::new("u", examples).unwrap()
}

#[test]
fn memorizer_chain_on_clean_labels_reproduces_the_oracle() {
    let data = repeated_corpus();
    let oracle = clean_oracle(&data);
    let config = RunConfig::new(Metric::ChunkF1);
    let out = Pipeline::new(&config, &table())
        .with_teacher(&oracle)
        .run_mckd(&data.without_gold())
        .unwrap();
    let model = out.final_model.unwrap();
    let qs: Vec<Query> = data.examples().iter().map(|e| Query::new(&e.id, &e.input)).collect();
    let preds = model.predict(&qs).unwrap();
    for (e, p) in data.examples().iter().zip(preds) {
        assert_eq!(Some(p.output), e.gold);
    }
    assert_eq!(model.final_fidelity(), Some(1.0));
}

#[test]
fn reports_count_relabeled_partitions() {
    let data = repeated_corpus();
    let oracle = clean_oracle(&data);
    let mut config = RunConfig::new(Metric::ChunkF1);
    config.stages = 3;
    let out = Pipeline::new(&config, &table())
        .with_teacher(&oracle)
        .run_mckd(&data.without_gold())
        .unwrap();
    assert_eq!(out.reports.len(), 4);
    for r in &out.reports[1..3] {
        let by_side: Vec<(Option<Side>, usize)> = r.relabeled.iter().map(|x| (x.side, x.labeled)).collect();
        assert_eq!(
            by_side,
            vec![
                (Some(Side::B), out.partitions.ids_b.len()),
                (Some(Side::A), out.partitions.ids_a.len())
            ]
        );
    }
    for id in out.store.ids() {
        let stages: Vec<u32> = out.store.labels(id).iter().map(|l| l.stage).collect();
        assert_eq!(stages, vec![0, 1, 2]);
        let side = out.partitions.side_of(id).unwrap();
        assert_eq!(out.store.label_at(id, 1).unwrap().producer, stage_model_id(1, side.other()));
    }
}

fn handle(id: &str, manifest: &[&str]) -> ModelHandle {
    let data: Vec<TrainRecord> = manifest
        .iter()
        .map(|m| TrainRecord {
            id: m.to_string(),
            input: format!("x{m}"),
            target: "O".into(),
        })
        .collect();
    table()
        .train(id, &data, &StoppingRule::default(), Metric::ChunkF1)
        .unwrap()
}

#[test]
fn cross_labels_come_from_the_other_side() {
    let store = Dataset::new(
        "s",
        ["1", "2", "3", "4"].iter().map(|i| Example::new(*i, format!("x{i}"), None)).collect(),
    )
    .unwrap();
    let pair = PartitionPair {
        seed: 0,
        ids_a: ["1", "3"].iter().map(|s| s.to_string()).collect(),
        ids_b: ["2", "4"].iter().map(|s| s.to_string()).collect(),
    };
    let a = handle("stage1-A", &["1", "3"]);
    let b = handle("stage1-B", &["2", "4"]);
    let labels = cross_partition_relabel(&a, &b, &pair, &store, 1).unwrap();
    let producers: Vec<(&str, &str)> = labels.iter().map(|(id, l)| (id.as_str(), l.producer.as_str())).collect();
    assert_eq!(
        producers,
        vec![("1", "stage1-B"), ("2", "stage1-A"), ("3", "stage1-B"), ("4", "stage1-A")]
    );
    let leaky = handle("stage1-A", &["1", "2"]);
    assert!(cross_partition_relabel(&leaky, &b, &pair, &store, 1).is_err());
}

#[test]
fn vanilla_kd_is_deterministic_and_fits_clean_labels() {
    let s = common::setup(9, 300, 100);
    let mut config = RunConfig::new(Metric::TagAccuracy);
    config.seed = 9;
    let tagger = common::student();
    let run = || {
        Pipeline::new(&config, &tagger)
            .with_teacher(&s.teacher)
            .with_heldout(&s.test)
            .run_vanilla_kd(&s.pool.without_gold())
            .unwrap()
    };
    let (x, y) = (run(), run());
    let qs: Vec<Query> = s.test.examples().iter().map(|e| Query::new(&e.id, &e.input)).collect();
    assert_eq!(x.model.predict(&qs).unwrap(), y.model.predict(&qs).unwrap());
    assert_eq!(x.report, y.report);
    assert!(x.report.metrics.unwrap()["vanilla"] > 0.0);

    let data = repeated_corpus();
    let oracle = clean_oracle(&data);
    let clean = Pipeline::new(&config, &table())
        .with_teacher(&oracle)
        .run_vanilla_kd(&data.without_gold())
        .unwrap();
    assert_eq!(clean.model.final_fidelity(), Some(1.0));
}

#[test]
fn self_distillation_filters_by_confidence() {
    let s = common::setup(4, 101, 10);
    let config = RunConfig::new(Metric::TagAccuracy);
    let tagger = common::student();
    let p = Pipeline::new(&config, &tagger).with_teacher(&s.teacher);
    let unlabeled = s.pool.without_gold();
    let full = p.run_kd_sd(&unlabeled, None).unwrap();
    let self_labels = full.self_labels.unwrap();
    assert_eq!(self_labels.len(), 101);
    assert_eq!(full.model.manifest.len(), 101);
    for r in [0.25, 0.5, 0.75] {
        let out = p.run_kd_sd(&unlabeled, Some(r)).unwrap();
        assert_eq!(out.model.manifest.len(), kept_count(r, 101));
        assert_eq!(out.model.model_id, "kd-sd");
    }
    assert_eq!(kept_count(0.25, 101), 26);
}

/// A student whose predictions carry no confidence.
struct Blind(TableLearner);

struct NoConfidence(ModelHandle);

impl Predictor for NoConfidence {
    fn predict(&self, queries: &[Query]) -> Result<Vec<Prediction>> {
        Ok(self
            .0
            .predict(queries)?
            .into_iter()
            .map(|p| Prediction {
                confidence: None,
                ..p
            })
            .collect())
    }

    fn has_confidence(&self) -> bool {
        false
    }
}

impl Student for Blind {
    fn spec(&self) -> &BackendSpec {
        self.0.spec()
    }

    fn train_observed(
        &self,
        model_id: &str,
        data: &[TrainRecord],
        stopping: &StoppingRule,
        metric: Metric,
        observer: Option<&mut dyn EpochObserver>,
    ) -> Result<ModelHandle> {
        let inner = self.0.train_observed(model_id, data, stopping, metric, observer)?;
        Ok(ModelHandle::new(
            inner.backend.clone(),
            model_id,
            inner.training_fidelity_history.clone(),
            inner.manifest.clone(),
            Arc::new(NoConfidence(inner)),
        ))
    }

    fn supports_epoch_callbacks(&self) -> bool {
        true
    }
}

#[test]
fn filtering_needs_confidences() {
    let data = repeated_corpus();
    let oracle = clean_oracle(&data);
    let config = RunConfig::new(Metric::ChunkF1);
    let blind = Blind(table());
    let p = Pipeline::new(&config, &blind).with_teacher(&oracle);
    assert!(p.run_kd_sd(&data.without_gold(), None).is_ok());
    let Err(e) = p.run_kd_sd(&data.without_gold(), Some(0.5)) else {
        panic!("filtering without confidences succeeded");
    };
    assert!(e.to_string().contains("confidence"), "{e}");
}

#[test]
fn single_stage_is_rejected() {
    let data = repeated_corpus();
    let mut config = RunConfig::new(Metric::ChunkF1);
    config.stages = 1;
    assert!(Pipeline::new(&config, &table()).run_mckd(&data).is_err());
}

#[test]
fn resume_needs_no_teacher_once_stage_zero_exists() {
    let data = repeated_corpus();
    let oracle = clean_oracle(&data);
    let mut config = RunConfig::new(Metric::ChunkF1);
    config.stages = 3;
    let tmp = tempfile::tempdir().unwrap();
    let dir = RunDir::create(tmp.path()).unwrap();
    let unlabeled = data.without_gold();
    let first = Pipeline::new(&config, &table())
        .with_teacher(&oracle)
        .with_run_dir(&dir)
        .run_mckd_until(&unlabeled, Some(0))
        .unwrap();
    assert!(first.final_model.is_none());
    assert!(Pipeline::new(&config, &table()).run_mckd(&unlabeled).is_err());
    let resumed = Pipeline::new(&config, &table())
        .with_run_dir(&dir)
        .run_mckd(&unlabeled)
        .unwrap();
    assert!(resumed.final_model.is_some());
    assert_eq!(resumed.reports.len(), 3);
    assert!(audit_store(&resumed.store, &dir.manifests().unwrap()).is_clean());
    assert_eq!(dir.reports().unwrap().len(), 4);
}

#[test]
fn oracle_handle_predicts_gold_without_noise() {
    let s = common::setup(2, 20, 5);
    let h = noisy_oracle(s.rule.gold_fn(), 0.0, 1, Corruption::Tags(s.spec.tags())).unwrap();
    let qs: Vec<Query> = s.pool.examples().iter().map(|e| Query::new(&e.id, &e.input)).collect();
    for (p, e) in h.predict(&qs).unwrap().into_iter().zip(s.pool.examples()) {
        assert_eq!(Some(p.output), e.gold);
    }
}
