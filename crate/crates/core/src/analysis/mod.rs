//! Evaluation against gold and the scripted analyses over runs: fidelity
//! curves, the memorization probe, the teacher-error split and size grids.
//!
//! Gold labels enter only through the arguments of these functions; nothing
//! here feeds them to a student.

mod experiments;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::backends::{Predictor, Query};
use crate::corpus::Dataset;
use crate::error::{Error, Result};
use crate::parse_eval::{align_tags, corpus_chunk_f1, corpus_f1, F1Score, Metric, TagSequence};

pub use experiments::{
    fidelity_experiment, high_low_compare, high_low_split, memorization_probe, size_grid, FidelityCurve,
    FidelityPoint, GridCell, GridReport, HighLowReport, HighLowSplit, ProbeConfig, ProbeReport,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExampleScore {
    pub id: String,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub metric: Metric,
    pub per_example: Vec<ExampleScore>,
    /// Macro average of per-example scores.
    pub corpus_f1: f64,
    /// Chunk F1 with counts pooled over the corpus (tag tasks only).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub micro_chunk_f1: Option<f64>,
    /// Fraction of correctly tagged words over the corpus (tag tasks only).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub token_accuracy: Option<f64>,
}

impl Evaluation {
    pub fn scores(&self) -> BTreeMap<&str, f64> {
        self.per_example.iter().map(|s| (s.id.as_str(), s.f1)).collect()
    }
}

/// Score outputs keyed by id against the gold labels of `gold`.
pub fn evaluate_outputs(outputs: &BTreeMap<String, String>, gold: &Dataset, metric: Metric) -> Result<Evaluation> {
    let mut per_example = Vec::with_capacity(gold.len());
    let mut pairs = Vec::new();
    let mut missing = Vec::new();
    for ex in gold.examples() {
        let g = ex
            .gold
            .as_deref()
            .ok_or_else(|| Error::validation(format!("example `{}` has no gold label", ex.id)))?;
        let Some(pred) = outputs.get(&ex.id) else {
            missing.push(ex.id.as_str());
            continue;
        };
        let words = ex.words();
        let s: F1Score = metric.score(pred, g, &words);
        per_example.push(ExampleScore {
            id: ex.id.clone(),
            precision: s.precision,
            recall: s.recall,
            f1: s.f1,
        });
        if !metric.is_tree() {
            let n = words.len();
            pairs.push((align_tags(TagSequence::parse(pred), n).0, align_tags(TagSequence::parse(g), n).0));
        }
    }
    if !missing.is_empty() {
        return Err(Error::validation(format!(
            "{} gold examples have no prediction, e.g. `{}`",
            missing.len(),
            missing[0]
        )));
    }
    let scores: Vec<F1Score> = per_example
        .iter()
        .map(|s| F1Score {
            precision: s.precision,
            recall: s.recall,
            f1: s.f1,
        })
        .collect();
    let corpus = corpus_f1(&scores)?;
    let (micro, acc) = if metric.is_tree() {
        (None, None)
    } else {
        let tokens: usize = pairs.iter().map(|(_, g)| g.len()).sum();
        let hits: usize = pairs
            .iter()
            .map(|(p, g)| p.0.iter().zip(&g.0).filter(|(a, b)| a == b).count())
            .sum();
        let acc = if tokens == 0 { 1.0 } else { hits as f64 / tokens as f64 };
        (Some(corpus_chunk_f1(&pairs)?.f1), Some(acc))
    };
    Ok(Evaluation {
        metric,
        per_example,
        corpus_f1: corpus,
        micro_chunk_f1: micro,
        token_accuracy: acc,
    })
}

/// Predict every example of `gold` and score the outputs.
pub fn evaluate_predictor(model: &dyn Predictor, gold: &Dataset, metric: Metric) -> Result<Evaluation> {
    let outputs = predict_outputs(model, gold)?;
    evaluate_outputs(&outputs, gold, metric)
}

/// Predictions keyed by id.
pub fn predict_outputs(model: &dyn Predictor, data: &Dataset) -> Result<BTreeMap<String, String>> {
    let qs: Vec<Query> = data.examples().iter().map(|e| Query::new(&e.id, &e.input)).collect();
    let preds = model.predict(&qs)?;
    Ok(qs.into_iter().zip(preds).map(|(q, p)| (q.id, p.output)).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TTest {
    pub t: f64,
    pub df: usize,
    pub p_value: f64,
    /// The differences have zero variance; `p_value` is 1 for a zero mean
    /// difference and 0 otherwise.
    pub degenerate: bool,
}

/// Two-sided paired t-test on per-example scores.
pub fn paired_t_test(a: &[f64], b: &[f64]) -> Result<TTest> {
    if a.len() != b.len() {
        return Err(Error::validation(format!(
            "paired samples differ in length: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    let n = a.len();
    if n < 2 {
        return Err(Error::validation("a paired t-test needs at least two pairs"));
    }
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let mean = d.iter().sum::<f64>() / n as f64;
    let var = d.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    let df = n - 1;
    // differences that agree up to rounding count as constant
    if var <= 1e-24 * mean.abs().max(1.0) {
        let zero = mean.abs() < 1e-15;
        return Ok(TTest {
            t: if zero { 0.0 } else { mean.signum() * f64::INFINITY },
            df,
            p_value: if zero { 1.0 } else { 0.0 },
            degenerate: true,
        });
    }
    let t = mean / (var / n as f64).sqrt();
    let dist = StudentsT::new(0.0, 1.0, df as f64).map_err(|e| Error::validation(e.to_string()))?;
    Ok(TTest {
        t,
        df,
        p_value: (2.0 * dist.sf(t.abs())).min(1.0),
        degenerate: false,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Example;

    #[test]
    fn t_test_degenerate_cases() {
        let a = vec![0.5; 10];
        let r = paired_t_test(&a, &a).unwrap();
        assert!(r.degenerate);
        assert_eq!(r.p_value, 1.0);
        let b: Vec<f64> = (0..100).map(|i| (i % 7) as f64 / 10.0).collect();
        let c: Vec<f64> = b.iter().map(|x| x + 0.1).collect();
        let r = paired_t_test(&c, &b).unwrap();
        assert!(r.p_value < 1e-10);
        assert!(paired_t_test(&[1.0], &[1.0]).is_err());
        assert!(paired_t_test(&[1.0, 2.0], &[1.0]).is_err());
    }

    #[test]
    fn t_test_matches_hand_computation() {
        // differences 1, 2, 3, 4: mean 2.5, sd sqrt(5/3), t = 2.5 / (sd / 2)
        let a = [1.0, 2.0, 3.0, 4.0];
        let b = [0.0; 4];
        let r = paired_t_test(&a, &b).unwrap();
        let t = 2.5 / ((5.0f64 / 3.0).sqrt() / 2.0);
        assert!((r.t - t).abs() < 1e-12);
        assert_eq!(r.df, 3);
        // two-sided tail of t = 3.873 on 3 df, from an independent statistics package
        assert!((r.p_value - 0.030_466_291_662_170_977).abs() < 1e-9, "{}", r.p_value);
    }

    #[test]
    fn evaluation_of_tag_outputs() {
        let gold = Dataset::new(
            "g",
            vec![
                Example::new("1", "a b", Some("B-x O".into())),
                Example::new("2", "c d", Some("O O".into())),
            ],
        )
        .unwrap();
        let out: BTreeMap<String, String> =
            [("1".to_string(), "O O".to_string()), ("2".to_string(), "O O".to_string())].into();
        let e = evaluate_outputs(&out, &gold, Metric::ChunkF1).unwrap();
        assert_eq!(e.corpus_f1, 0.5);
        assert_eq!(e.micro_chunk_f1, Some(0.0));
        assert_eq!(e.token_accuracy, Some(0.75));
        let partial: BTreeMap<String, String> = [("1".to_string(), "O O".to_string())].into();
        assert!(evaluate_outputs(&partial, &gold, Metric::ChunkF1).is_err());
    }
}
