use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::sync::Arc;

use super::{
    run_epochs, BackendSpec, EpochObserver, ModelHandle, Prediction, Predictor, Query, StoppingRule, Student,
    TrainRecord, FALLBACK_CONFIDENCE,
};
use crate::error::{Error, Result};
use crate::parse_eval::{BracketTree, Metric, OUTSIDE};

/// Memorizes the majority target of every training input verbatim.
pub struct TableLearner {
    spec: BackendSpec,
}

impl TableLearner {
    pub fn new(spec: BackendSpec) -> Self {
        TableLearner { spec }
    }
}

pub(crate) fn normalize(input: &str) -> String {
    input.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// The defined output for inputs a memorizer has never seen: the flat tree
/// for parses, all-`O` tags otherwise.
pub(crate) fn fallback_output(input: &str, metric: Metric) -> String {
    let words: Vec<&str> = input.split_whitespace().collect();
    if metric.is_tree() {
        BracketTree::flat(&words).render()
    } else {
        vec![OUTSIDE; words.len()].join(" ")
    }
}

/// Majority output and its log relative frequency; ties go to the smallest
/// output string.
pub(crate) fn majority(counts: &BTreeMap<String, u32>) -> (String, f64) {
    let total: u32 = counts.values().sum();
    let (best, n) = counts
        .iter()
        .fold(None::<(&String, u32)>, |acc, (k, &v)| match acc {
            Some((_, bv)) if bv >= v => acc,
            _ => Some((k, v)),
        })
        .expect("non-empty counts");
    (best.clone(), (n as f64 / total as f64).ln())
}

struct Table {
    memory: HashMap<String, (String, f64)>,
    metric: Metric,
}

impl Predictor for Table {
    fn predict(&self, queries: &[Query]) -> Result<Vec<Prediction>> {
        Ok(queries
            .iter()
            .map(|q| match self.memory.get(&normalize(&q.input)) {
                Some((out, conf)) => Prediction {
                    output: out.clone(),
                    confidence: Some(*conf),
                },
                None => Prediction {
                    output: fallback_output(&q.input, self.metric),
                    confidence: Some(FALLBACK_CONFIDENCE),
                },
            })
            .collect())
    }

    fn has_confidence(&self) -> bool {
        true
    }
}

impl Student for TableLearner {
    fn spec(&self) -> &BackendSpec {
        &self.spec
    }

    fn train_observed(
        &self,
        model_id: &str,
        data: &[TrainRecord],
        stopping: &StoppingRule,
        metric: Metric,
        observer: Option<&mut dyn EpochObserver>,
    ) -> Result<ModelHandle> {
        if data.is_empty() {
            return Err(Error::validation("cannot train on zero examples"));
        }
        let mut counts: HashMap<String, BTreeMap<String, u32>> = HashMap::new();
        for r in data {
            *counts
                .entry(normalize(&r.input))
                .or_default()
                .entry(r.target.clone())
                .or_default() += 1;
        }
        let model = Arc::new(Table {
            memory: counts.iter().map(|(k, c)| (k.clone(), majority(c))).collect(),
            metric,
        });
        let (history, model) = run_epochs(data, stopping, metric, observer, |epoch| (model.clone(), epoch == 1))?;
        let manifest: BTreeSet<String> = data.iter().map(|r| r.id.clone()).collect();
        Ok(ModelHandle::new(self.spec.clone(), model_id, history, manifest, model))
    }

    fn supports_epoch_callbacks(&self) -> bool {
        true
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backends::BackendKind;

    fn rec(id: &str, input: &str, target: &str) -> TrainRecord {
        TrainRecord {
            id: id.into(),
            input: input.into(),
            target: target.into(),
        }
    }

    fn learner() -> TableLearner {
        TableLearner::new(BackendSpec::new(BackendKind::TableLearner))
    }

    #[test]
    fn memorizes_and_stops_after_patience() {
        let data = vec![rec("1", "a b", "B-x O"), rec("2", "c", "O")];
        let h = learner()
            .train("m", &data, &StoppingRule::default(), Metric::ChunkF1)
            .unwrap();
        assert_eq!(h.training_fidelity_history, vec![1.0; 4]);
        let p = h.predict(&[Query::new("q", "a  b")]).unwrap();
        assert_eq!(p[0].output, "B-x O");
        assert_eq!(p[0].confidence, Some(0.0));
    }

    #[test]
    fn unseen_input_falls_back() {
        let data = vec![rec("1", "a", "B-x")];
        let h = learner().train("m", &data, &StoppingRule::default(), Metric::ChunkF1).unwrap();
        let p = h.predict(&[Query::new("q", "u v w")]).unwrap();
        assert_eq!(p[0].output, "O O O");
        assert_eq!(p[0].confidence, Some(FALLBACK_CONFIDENCE));
        let h = learner().train("m", &data, &StoppingRule::default(), Metric::BracketF1).unwrap();
        let p = h.predict(&[Query::new("q", "u v")]).unwrap();
        assert_eq!(p[0].output, "( ( u ) ( v ) )");
    }

    #[test]
    fn conflicting_targets_plateau_below_one() {
        let data = vec![rec("1", "a", "X"), rec("2", "a", "Y"), rec("3", "a", "X")];
        let h = learner().train("m", &data, &StoppingRule::default(), Metric::TagAccuracy).unwrap();
        assert!((h.final_fidelity().unwrap() - 2.0 / 3.0).abs() < 1e-12);
        let p = h.predict(&[Query::new("q", "a")]).unwrap();
        assert_eq!(p[0].output, "X");
        assert!((p[0].confidence.unwrap() - (2.0f64 / 3.0).ln()).abs() < 1e-12);
    }

    #[test]
    fn zero_examples_rejected() {
        assert!(learner().train("m", &[], &StoppingRule::default(), Metric::Exact).is_err());
    }
}
