//! A stand-in teacher that knows the gold output and corrupts a fraction of
//! examples.

use std::collections::BTreeSet;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{BackendKind, BackendSpec, ModelHandle, Prediction, Predictor, Query, Teacher, TeacherOutput};
use crate::error::{Error, Result};
use crate::hashing::{stable_hash, unit_interval};
use crate::parse_eval::{BracketTree, Span};

pub type GoldFn = Arc<dyn Fn(&Query) -> Option<String> + Send + Sync>;

/// How a corrupted example is rewritten.
#[derive(Debug, Clone, PartialEq)]
pub enum Corruption {
    /// Every position is resampled uniformly from the alphabet.
    Tags(Vec<String>),
    /// The tree is replaced by a uniformly split random binary bracketing.
    Tree,
}

pub struct NoisyOracle {
    id: String,
    gold: GoldFn,
    noise_rate: f64,
    seed: u64,
    corruption: Corruption,
}

impl NoisyOracle {
    pub fn new(id: impl Into<String>, gold: GoldFn, noise_rate: f64, seed: u64, corruption: Corruption) -> Result<Self> {
        if !(0.0..=1.0).contains(&noise_rate) {
            return Err(Error::config(format!("noise rate {noise_rate} is outside [0, 1]")));
        }
        if let Corruption::Tags(a) = &corruption {
            if a.is_empty() {
                return Err(Error::config("tag corruption needs a non-empty alphabet"));
            }
        }
        Ok(NoisyOracle {
            id: id.into(),
            gold,
            noise_rate,
            seed,
            corruption,
        })
    }

    /// Reads `noise_rate` (default 0) and `seed` (default 0) from the backend parameters.
    pub fn from_spec(id: impl Into<String>, spec: &BackendSpec, gold: GoldFn, corruption: Corruption) -> Result<Self> {
        if spec.kind != BackendKind::NoisyOracle {
            return Err(Error::config(format!("expected a noisy-oracle spec, got {}", spec.kind)));
        }
        spec.validate()?;
        NoisyOracle::new(
            id,
            gold,
            spec.param_f64("noise_rate", 0.0)?,
            spec.param_u64("seed", 0)?,
            corruption,
        )
    }

    pub fn noise_rate(&self) -> f64 {
        self.noise_rate
    }

    /// Whether the example with this id receives a corrupted output.
    pub fn is_corrupted(&self, id: &str) -> bool {
        unit_interval(stable_hash(self.seed, &["corrupt", id])) < self.noise_rate
    }

    fn corrupt(&self, id: &str, input: &str, gold: String) -> String {
        let mut rng = ChaCha8Rng::seed_from_u64(stable_hash(self.seed, &["resample", id]));
        let words: Vec<&str> = input.split_whitespace().collect();
        match &self.corruption {
            Corruption::Tags(alphabet) => {
                let n = gold.split_whitespace().count();
                (0..n)
                    .map(|_| alphabet.choose(&mut rng).expect("non-empty alphabet").as_str())
                    .collect::<Vec<_>>()
                    .join(" ")
            }
            Corruption::Tree => random_binary_tree(&words, &mut rng).render(),
        }
    }

    pub fn output(&self, query: &Query) -> Option<String> {
        let gold = (self.gold)(query)?;
        Some(if self.is_corrupted(&query.id) {
            self.corrupt(&query.id, &query.input, gold)
        } else {
            gold
        })
    }
}

/// Bracket every word and recursively split each span at a uniform point.
pub fn random_binary_tree<S: AsRef<str>, R: Rng>(words: &[S], rng: &mut R) -> BracketTree {
    fn split<R: Rng>(s: usize, e: usize, rng: &mut R, out: &mut BTreeSet<Span>) {
        out.insert((s, e));
        if e - s > 1 {
            let k = rng.gen_range(s + 1..e);
            split(s, k, rng, out);
            split(k, e, rng, out);
        }
    }
    let mut spans = BTreeSet::new();
    if !words.is_empty() {
        split(0, words.len(), rng, &mut spans);
    }
    BracketTree {
        words: words.iter().map(|w| w.as_ref().to_string()).collect(),
        spans,
    }
}

impl Predictor for NoisyOracle {
    fn predict(&self, queries: &[Query]) -> Result<Vec<Prediction>> {
        queries
            .iter()
            .map(|q| {
                self.output(q)
                    .map(|output| Prediction {
                        output,
                        confidence: None,
                    })
                    .ok_or_else(|| Error::backend(format!("no gold output for `{}`", q.id)))
            })
            .collect()
    }

    fn has_confidence(&self) -> bool {
        false
    }
}

impl Teacher for NoisyOracle {
    fn id(&self) -> &str {
        &self.id
    }

    fn label(&self, queries: &[Query]) -> Result<Vec<TeacherOutput>> {
        Ok(queries
            .iter()
            .map(|q| match self.output(q) {
                Some(output) => TeacherOutput::Labeled {
                    raw: output.clone(),
                    output,
                    retries: 0,
                    repaired: false,
                },
                None => TeacherOutput::Failed {
                    reason: format!("no gold output for `{}`", q.id),
                    retries: 0,
                },
            })
            .collect())
    }
}

/// Wrap a noisy oracle as an (untrained-by-construction) model handle.
pub fn noisy_oracle(gold: GoldFn, noise_rate: f64, seed: u64, corruption: Corruption) -> Result<ModelHandle> {
    let spec = BackendSpec::new(BackendKind::NoisyOracle)
        .with_param("noise_rate", noise_rate)
        .with_param("seed", seed);
    let oracle = NoisyOracle::new("teacher", gold, noise_rate, seed, corruption)?;
    Ok(ModelHandle::new(spec, "teacher", Vec::new(), BTreeSet::new(), Arc::new(oracle)))
}
