//! The synthetic setup shared by the integration suites.
#![allow(dead_code)]

use std::collections::BTreeMap;
use std::sync::Arc;

use mckd::backends::{
    BackendKind, BackendSpec, ContextTagger, Corruption, NoisyOracle, Query, TrainRecord,
};
use mckd::corpus::Dataset;
use mckd::synthetic::{generate_split, GoldRule, SyntheticTaskSpec};

pub const NOISE: f64 = 0.3;
pub const SEEDS: [u64; 5] = [1, 2, 3, 4, 5];

pub struct Setup {
    pub spec: SyntheticTaskSpec,
    pub rule: Arc<GoldRule>,
    /// Gold-labeled training pool; pipelines only see it without gold.
    pub pool: Dataset,
    pub test: Dataset,
    pub teacher: NoisyOracle,
}

/// Vocabulary 50, four tags, rule width 1, teacher noise 0.3.
pub fn setup(seed: u64, pool_size: usize, test_size: usize) -> Setup {
    let spec = SyntheticTaskSpec::new(seed, pool_size);
    let rule = Arc::new(spec.rule().unwrap());
    let pool = generate_split(&spec, "train", pool_size).unwrap();
    let test = generate_split(&spec, "test", test_size).unwrap();
    let teacher = NoisyOracle::new("teacher", rule.gold_fn(), NOISE, seed, Corruption::Tags(spec.tags())).unwrap();
    Setup {
        spec,
        rule,
        pool,
        test,
        teacher,
    }
}

pub fn student_spec() -> BackendSpec {
    BackendSpec::new(BackendKind::ContextTagger)
        .with_param("width", 2)
        .with_param("context_retention", 0.3)
        .with_param("memorize", true)
}

pub fn student() -> ContextTagger {
    ContextTagger::from_spec(&student_spec()).unwrap()
}

impl Setup {
    pub fn teacher_outputs(&self, data: &Dataset) -> BTreeMap<String, String> {
        data.examples()
            .iter()
            .map(|e| (e.id.clone(), self.teacher.output(&Query::new(&e.id, &e.input)).unwrap()))
            .collect()
    }

    pub fn teacher_records(&self, data: &Dataset) -> Vec<TrainRecord> {
        let out = self.teacher_outputs(data);
        data.examples()
            .iter()
            .map(|e| TrainRecord {
                id: e.id.clone(),
                input: e.input.clone(),
                target: out[&e.id].clone(),
            })
            .collect()
    }
}

pub fn median(mut v: Vec<f64>) -> f64 {
    assert!(!v.is_empty());
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}
