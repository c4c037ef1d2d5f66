//! Synthetic sequence-labeling tasks with a known labeling rule.
//!
//! Words `w00..` are drawn uniformly; the tag of word `i` is a seeded hash
//! of the word and its `rule_width` predecessors (padded with `<s>`), so the
//! gold function is exact and cheap to evaluate anywhere.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use statrs::distribution::{Binomial, Discrete};

use crate::backends::{BackendKind, BackendSpec, ContextTaggerConfig, GoldFn, Query};
use crate::corpus::{Dataset, Example};
use crate::error::{Error, Result};
use crate::hashing::stable_hash;

pub const BOS: &str = "<s>";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticTaskSpec {
    pub seed: u64,
    #[serde(default = "default_vocab")]
    pub vocab_size: usize,
    #[serde(default = "default_tags")]
    pub tag_alphabet: usize,
    #[serde(default = "default_width")]
    pub rule_width: usize,
    #[serde(default = "default_lengths")]
    pub sentence_length_range: (usize, usize),
    #[serde(default)]
    pub corpus_size: usize,
}

fn default_vocab() -> usize {
    50
}
fn default_tags() -> usize {
    4
}
fn default_width() -> usize {
    1
}
fn default_lengths() -> (usize, usize) {
    (16, 24)
}

impl SyntheticTaskSpec {
    pub fn new(seed: u64, corpus_size: usize) -> Self {
        SyntheticTaskSpec {
            seed,
            vocab_size: default_vocab(),
            tag_alphabet: default_tags(),
            rule_width: default_width(),
            sentence_length_range: default_lengths(),
            corpus_size,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.sentence_length_range;
        if self.vocab_size == 0 || self.tag_alphabet == 0 {
            return Err(Error::config("vocab_size and tag_alphabet must be positive"));
        }
        if lo == 0 || lo > hi {
            return Err(Error::config(format!("invalid sentence length range ({lo}, {hi})")));
        }
        Ok(())
    }

    pub fn vocabulary(&self) -> Vec<String> {
        let digits = (self.vocab_size.saturating_sub(1)).to_string().len().max(2);
        (0..self.vocab_size).map(|i| format!("w{i:0digits$}")).collect()
    }

    pub fn tags(&self) -> Vec<String> {
        (0..self.tag_alphabet).map(|i| format!("T{i}")).collect()
    }

    pub fn rule(&self) -> Result<GoldRule> {
        self.validate()?;
        Ok(GoldRule {
            seed: self.seed,
            width: self.rule_width,
            tags: self.tags(),
        })
    }
}

/// The task's labeling function.
#[derive(Debug, Clone, PartialEq)]
pub struct GoldRule {
    seed: u64,
    width: usize,
    tags: Vec<String>,
}

impl GoldRule {
    pub fn width(&self) -> usize {
        self.width
    }

    pub fn tags(&self) -> &[String] {
        &self.tags
    }

    /// Tag of a center word given its predecessors, nearest first.
    pub fn tag_for<S: AsRef<str>>(&self, center: &str, preceding: &[S]) -> &str {
        let mut parts: Vec<&str> = Vec::with_capacity(self.width + 2);
        parts.push("rule");
        parts.push(center);
        parts.extend((0..self.width).map(|d| preceding.get(d).map_or(BOS, |w| w.as_ref())));
        let h = stable_hash(self.seed, &parts);
        &self.tags[(h % self.tags.len() as u64) as usize]
    }

    pub fn tag_at<S: AsRef<str>>(&self, words: &[S], i: usize) -> &str {
        let preceding: Vec<&str> = (1..=self.width.min(i)).map(|d| words[i - d].as_ref()).collect();
        self.tag_for(words[i].as_ref(), &preceding)
    }

    pub fn label(&self, input: &str) -> String {
        let words: Vec<&str> = input.split_whitespace().collect();
        (0..words.len())
            .map(|i| self.tag_at(&words, i))
            .collect::<Vec<_>>()
            .join(" ")
    }

    pub fn gold_fn(self: &Arc<Self>) -> GoldFn {
        let rule = Arc::clone(self);
        Arc::new(move |q: &Query| Some(rule.label(&q.input)))
    }
}

/// Draw `n` gold-labeled sentences for the named split.
///
/// Splits are independent streams of the same task; ids are
/// `<split>-<index>`.
pub fn generate_split(spec: &SyntheticTaskSpec, split: &str, n: usize) -> Result<Dataset> {
    let rule = spec.rule()?;
    let vocab = spec.vocabulary();
    let (lo, hi) = spec.sentence_length_range;
    let mut rng = ChaCha8Rng::seed_from_u64(stable_hash(spec.seed, &["sentences", split]));
    let examples = (0..n)
        .map(|i| {
            let len = rng.gen_range(lo..=hi);
            let words: Vec<&str> = (0..len).map(|_| vocab[rng.gen_range(0..vocab.len())].as_str()).collect();
            let input = words.join(" ");
            let gold = rule.label(&input);
            Example::new(format!("{split}-{i:06}"), input, Some(gold))
        })
        .collect();
    Dataset::new(split, examples)
}

/// The task's corpus of `corpus_size` sentences and its gold rule.
pub fn generate(spec: &SyntheticTaskSpec) -> Result<(Dataset, Arc<GoldRule>)> {
    Ok((generate_split(spec, "train", spec.corpus_size)?, Arc::new(spec.rule()?)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LearnabilityReport {
    /// Probability that a teacher tag is the gold tag.
    pub teacher_expected_accuracy: f64,
    /// Held-out accuracy of the learner's majority vote with unlimited data.
    pub ceiling: f64,
    /// Smallest number of observations of a context after which the clean
    /// tag is the strict plurality with probability at least `confidence`.
    pub recovery_bound: Option<usize>,
    pub confidence: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub warning: Option<String>,
}

/// Probability that the correct tag is the strict plurality among `m`
/// independent labels, each correct with probability `p` and otherwise
/// uniform over the `tags - 1` wrong tags.
pub fn plurality_probability(m: usize, p: f64, tags: usize) -> f64 {
    if m == 0 {
        return 0.0;
    }
    if tags == 1 {
        return 1.0;
    }
    let wrong = tags - 1;
    let mut total = 0.0;
    for c in 1..=m {
        let pc = binomial_pmf(m, c, p);
        if pc == 0.0 {
            continue;
        }
        total += pc * all_bins_below(m - c, wrong, c);
    }
    total
}

fn binomial_pmf(n: usize, k: usize, p: f64) -> f64 {
    match Binomial::new(p.clamp(0.0, 1.0), n as u64) {
        Ok(b) => b.pmf(k as u64),
        Err(_) => 0.0,
    }
}

/// P(every bin holds fewer than `cap` balls) when `balls` are thrown
/// uniformly into `bins` bins.
fn all_bins_below(balls: usize, bins: usize, cap: usize) -> f64 {
    let mut dist = vec![0.0; balls + 1];
    dist[balls] = 1.0;
    for b in 0..bins {
        let left = bins - b;
        let mut next = vec![0.0; balls + 1];
        for (r, &pr) in dist.iter().enumerate() {
            if pr == 0.0 {
                continue;
            }
            if left == 1 {
                if r < cap {
                    next[0] += pr;
                }
                continue;
            }
            for k in 0..cap.min(r + 1) {
                next[r - k] += pr * binomial_pmf(r, k, 1.0 / left as f64);
            }
        }
        dist = next;
    }
    dist[0]
}

/// Exact ceiling of a learner that sees `learner_width` predecessors on a
/// rule of `rule_width`, by enumerating every rule context (sentence-internal
/// positions).
pub fn context_ceiling(spec: &SyntheticTaskSpec, learner_width: usize) -> Result<f64> {
    let rule = spec.rule()?;
    if learner_width >= rule.width {
        return Ok(1.0);
    }
    let v = spec.vocab_size;
    let hidden = rule.width - learner_width;
    let n_keys = (v as f64).powi(learner_width as i32 + 1);
    if n_keys * (v as f64).powi(hidden as i32) > 2e7 {
        return Err(Error::config("rule context space is too large to enumerate"));
    }
    let vocab = spec.vocabulary();
    let index_words = |mut idx: usize, len: usize| -> Vec<&str> {
        (0..len)
            .map(|_| {
                let w = vocab[idx % v].as_str();
                idx /= v;
                w
            })
            .collect()
    };
    let mut correct = 0.0;
    for key in 0..n_keys as usize {
        let kw = index_words(key, learner_width + 1);
        let mut counts = vec![0usize; spec.tag_alphabet];
        for rest in 0..v.pow(hidden as u32) {
            let mut preceding: Vec<&str> = kw[1..].to_vec();
            preceding.extend(index_words(rest, hidden));
            let t = rule.tag_for(kw[0], &preceding);
            counts[t[1..].parse::<usize>().expect("synthetic tag")] += 1;
        }
        correct += *counts.iter().max().expect("tags") as f64 / v.pow(hidden as u32) as f64;
    }
    Ok(correct / n_keys)
}

/// What a built-in learner can achieve on the task under a per-example
/// uniform-resampling teacher with noise `noise_rate`.
pub fn learnability_report(spec: &SyntheticTaskSpec, learner: &BackendSpec, noise_rate: f64) -> Result<LearnabilityReport> {
    if !(0.0..=1.0).contains(&noise_rate) {
        return Err(Error::config(format!("noise rate {noise_rate} is outside [0, 1]")));
    }
    let t = spec.tag_alphabet;
    let p = (1.0 - noise_rate) + noise_rate / t as f64;
    let confidence = 0.99;
    let recovery_bound = (1..=500).find(|&m| plurality_probability(m, p, t) >= confidence);
    let (ceiling, warning) = match learner.kind {
        BackendKind::ContextTagger => {
            let w = ContextTaggerConfig::from_spec(learner)?.width;
            let warning = (w < spec.rule_width).then(|| {
                format!(
                    "learner width {w} is below rule width {}; the ceiling is degraded",
                    spec.rule_width
                )
            });
            let c = if noise_rate >= 1.0 { 1.0 / t as f64 } else { context_ceiling(spec, w)? };
            (c, warning)
        }
        // every held-out sentence is unseen, so the memorizer's all-O fallback never matches a tag
        BackendKind::TableLearner => (0.0, Some("a memorizer does not generalize to unseen inputs".into())),
        other => return Err(Error::config(format!("{other} is not a built-in learner"))),
    };
    Ok(LearnabilityReport {
        teacher_expected_accuracy: p,
        ceiling,
        recovery_bound,
        confidence,
        warning,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_generation() {
        let spec = SyntheticTaskSpec::new(3, 20);
        let (a, _) = generate(&spec).unwrap();
        let (b, _) = generate(&spec).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 20);
    }

    #[test]
    fn empty_corpus() {
        let (d, _) = generate(&SyntheticTaskSpec::new(3, 0)).unwrap();
        assert!(d.is_empty());
    }

    #[test]
    fn gold_matches_rule() {
        let spec = SyntheticTaskSpec::new(5, 50);
        let (d, rule) = generate(&spec).unwrap();
        for ex in d.examples() {
            assert_eq!(ex.gold.as_deref().unwrap(), rule.label(&ex.input));
            assert_eq!(ex.gold.as_ref().unwrap().split(' ').count(), ex.words().len());
        }
    }

    #[test]
    fn rule_width_zero_is_per_word() {
        let spec = SyntheticTaskSpec {
            rule_width: 0,
            ..SyntheticTaskSpec::new(1, 0)
        };
        let rule = spec.rule().unwrap();
        assert_eq!(rule.tag_at(&["w01", "w07"], 1), rule.tag_at(&["w09", "w07"], 1));
    }

    #[test]
    fn vocabulary_names() {
        let spec = SyntheticTaskSpec::new(1, 0);
        let v = spec.vocabulary();
        assert_eq!((v[0].as_str(), v[49].as_str()), ("w00", "w49"));
    }

    #[test]
    fn invalid_specs() {
        let mut s = SyntheticTaskSpec::new(1, 1);
        s.sentence_length_range = (0, 3);
        assert!(s.validate().is_err());
        s.sentence_length_range = (4, 3);
        assert!(s.validate().is_err());
    }

    #[test]
    fn plurality_edge_cases() {
        assert_eq!(plurality_probability(1, 0.7, 4), 0.7);
        assert!((plurality_probability(1, 1.0, 4) - 1.0).abs() < 1e-12);
        assert_eq!(plurality_probability(0, 0.9, 4), 0.0);
    }

    #[test]
    fn clean_teacher_matching_width_has_full_ceiling() {
        let spec = SyntheticTaskSpec::new(1, 0);
        let learner = BackendSpec::new(BackendKind::ContextTagger);
        let r = learnability_report(&spec, &learner, 0.0).unwrap();
        assert_eq!(r.ceiling, 1.0);
        assert_eq!(r.teacher_expected_accuracy, 1.0);
        assert_eq!(r.recovery_bound, Some(1));
        assert!(r.warning.is_none());
    }

    #[test]
    fn narrow_learner_is_warned() {
        let spec = SyntheticTaskSpec::new(1, 0);
        let learner = BackendSpec::new(BackendKind::ContextTagger).with_param("width", 0);
        let r = learnability_report(&spec, &learner, 0.3).unwrap();
        assert!(r.warning.is_some());
        assert!(r.ceiling < 1.0 && r.ceiling > 0.25);
        assert!((r.teacher_expected_accuracy - 0.775).abs() < 1e-12);
    }
}
