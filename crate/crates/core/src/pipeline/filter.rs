use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A self-generated label with the producing model's confidence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredLabel {
    pub id: String,
    pub output: String,
    pub confidence: Option<f64>,
}

/// Number of items kept at ratio `r`: `ceil(r * n)`, with a small tolerance
/// so that ratios like 0.75 are not pushed up by float error.
pub fn kept_count(r: f64, n: usize) -> usize {
    ((r * n as f64 - 1e-9).ceil().max(0.0) as usize).min(n)
}

/// Keep the `ceil(r * n)` most confident labels.
///
/// Ranking is by descending confidence, ties by ascending id. The kept items
/// are returned in their input order.
pub fn confidence_filter(labels: &[ScoredLabel], r: f64) -> Result<Vec<ScoredLabel>> {
    if !(r > 0.0 && r <= 1.0) {
        return Err(Error::config(format!("filter ratio {r} is outside (0, 1]")));
    }
    let missing: Vec<&str> = labels
        .iter()
        .filter(|l| l.confidence.is_none_or(f64::is_nan))
        .map(|l| l.id.as_str())
        .collect();
    if !missing.is_empty() {
        let shown: Vec<&str> = missing.iter().take(10).copied().collect();
        return Err(Error::validation(format!(
            "{} labels have no confidence: {}{}",
            missing.len(),
            shown.join(", "),
            if missing.len() > shown.len() { ", ..." } else { "" }
        )));
    }
    let mut order: Vec<usize> = (0..labels.len()).collect();
    order.sort_by(|&a, &b| {
        let (la, lb) = (&labels[a], &labels[b]);
        lb.confidence
            .partial_cmp(&la.confidence)
            .expect("confidences are not NaN")
            .then_with(|| la.id.cmp(&lb.id))
    });
    let mut keep = vec![false; labels.len()];
    for &i in &order[..kept_count(r, labels.len())] {
        keep[i] = true;
    }
    Ok(labels
        .iter()
        .zip(keep)
        .filter(|(_, k)| *k)
        .map(|(l, _)| l.clone())
        .collect())
}
