//! Evaluation: parse-tree and tag-sequence representations, generation
//! repair, and the per-example / corpus F1 metrics.

mod brackets;
mod metric;
mod slots;

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use brackets::{
    balance_brackets, is_balanced, is_laminar, parse_brackets, parse_brackets_with_repair,
    repair_parse, repair_segmentation, strip_punctuation, BracketTree, PunctuationSet,
    SegmentationRepair, Span,
};
pub use metric::Metric;
pub use slots::{
    align_tags, chunks, corpus_chunk_f1, deinterleave_tags, interleave_tags, slot_f1, tag_accuracy,
    Chunk, Deinterleaved, TagSequence, OUTSIDE,
};

/// A set of spans in a shared (punctuation-stripped) index space.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SpanSet(BTreeSet<Span>);

impl SpanSet {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn contains(&self, span: &Span) -> bool {
        self.0.contains(span)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Span> {
        self.0.iter()
    }

    pub fn into_inner(self) -> BTreeSet<Span> {
        self.0
    }

    pub fn intersection_len(&self, other: &SpanSet) -> usize {
        self.0.intersection(&other.0).count()
    }
}

impl FromIterator<Span> for SpanSet {
    fn from_iter<I: IntoIterator<Item = Span>>(iter: I) -> Self {
        SpanSet(iter.into_iter().collect())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct F1Score {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl F1Score {
    pub const PERFECT: F1Score = F1Score {
        precision: 1.0,
        recall: 1.0,
        f1: 1.0,
    };
    pub const ZERO: F1Score = F1Score {
        precision: 0.0,
        recall: 0.0,
        f1: 0.0,
    };

    pub fn from_pr(precision: f64, recall: f64) -> Self {
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        F1Score {
            precision,
            recall,
            f1,
        }
    }

    /// Score from match counts; `pred = gold = 0` counts as perfect.
    pub fn from_counts(matched: usize, n_pred: usize, n_gold: usize) -> Self {
        match (n_pred, n_gold) {
            (0, 0) => F1Score::PERFECT,
            (0, _) | (_, 0) => F1Score::ZERO,
            _ => F1Score::from_pr(matched as f64 / n_pred as f64, matched as f64 / n_gold as f64),
        }
    }

    /// Accuracy-style score where precision and recall coincide.
    pub fn uniform(value: f64) -> Self {
        F1Score {
            precision: value,
            recall: value,
            f1: value,
        }
    }
}

pub fn example_f1(pred: &SpanSet, gold: &SpanSet) -> F1Score {
    F1Score::from_counts(pred.intersection_len(gold), pred.len(), gold.len())
}

/// Macro average of per-example F1.
pub fn corpus_f1(per_example: &[F1Score]) -> Result<f64> {
    if per_example.is_empty() {
        return Err(Error::validation("corpus F1 over zero examples"));
    }
    Ok(per_example.iter().map(|s| s.f1).sum::<f64>() / per_example.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spans(v: &[Span]) -> SpanSet {
        v.iter().copied().collect()
    }

    #[test]
    fn f1_identity_and_disjoint() {
        let a = spans(&[(0, 2), (2, 4)]);
        assert_eq!(example_f1(&a, &a).f1, 1.0);
        assert_eq!(example_f1(&a, &spans(&[(1, 3)])).f1, 0.0);
    }

    #[test]
    fn f1_half_overlap() {
        let s = example_f1(&spans(&[(0, 2), (0, 4)]), &spans(&[(0, 2), (2, 4)]));
        assert_eq!((s.precision, s.recall, s.f1), (0.5, 0.5, 0.5));
    }

    #[test]
    fn f1_empty_conventions() {
        assert_eq!(example_f1(&SpanSet::default(), &SpanSet::default()), F1Score::PERFECT);
        assert_eq!(example_f1(&SpanSet::default(), &spans(&[(0, 2)])), F1Score::ZERO);
        assert_eq!(example_f1(&spans(&[(0, 2)]), &SpanSet::default()), F1Score::ZERO);
    }

    #[test]
    fn corpus_average() {
        assert_eq!(corpus_f1(&[F1Score::PERFECT, F1Score::ZERO]).unwrap(), 0.5);
        let v = vec![F1Score::uniform(0.7); 9];
        assert!((corpus_f1(&v).unwrap() - 0.7).abs() < 1e-12);
        assert!(corpus_f1(&[]).is_err());
    }
}
