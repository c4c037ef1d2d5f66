use std::collections::{BTreeMap, BTreeSet};

use log::warn;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{evaluate_outputs, evaluate_predictor, predict_outputs};
use crate::backends::{EpochObserver, Predictor, Query, StoppingRule, Student, Teacher, TeacherOutput, TrainRecord};
use crate::corpus::Dataset;
use crate::error::{Error, Result};
use crate::parse_eval::Metric;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FidelityPoint {
    pub epoch: usize,
    pub train_fidelity: f64,
    /// Absent for epochs the backend did not expose.
    pub heldout_f1: Option<f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub heldout_per_example: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FidelityCurve {
    pub points: Vec<FidelityPoint>,
    pub teacher_heldout_f1: f64,
    /// Only the final epoch was observable.
    pub coarse: bool,
}

struct CurveObserver<'a> {
    heldout: &'a Dataset,
    metric: Metric,
    points: Vec<FidelityPoint>,
}

impl EpochObserver for CurveObserver<'_> {
    fn on_epoch(&mut self, epoch: usize, fidelity: f64, model: &dyn Predictor) -> Result<()> {
        let e = evaluate_predictor(model, self.heldout, self.metric)?;
        self.points.push(FidelityPoint {
            epoch,
            train_fidelity: fidelity,
            heldout_f1: Some(e.corpus_f1),
            heldout_per_example: e.per_example.iter().map(|s| s.f1).collect(),
        });
        Ok(())
    }
}

/// Train a student on teacher labels and track, per epoch, its fidelity to
/// those labels and its score on gold held-out data.
pub fn fidelity_experiment(
    student: &dyn Student,
    train: &[TrainRecord],
    heldout: &Dataset,
    teacher_on_heldout: &BTreeMap<String, String>,
    stopping: &StoppingRule,
    metric: Metric,
) -> Result<FidelityCurve> {
    let teacher_heldout_f1 = evaluate_outputs(teacher_on_heldout, heldout, metric)?.corpus_f1;
    if student.supports_epoch_callbacks() {
        let mut obs = CurveObserver {
            heldout,
            metric,
            points: Vec::new(),
        };
        student.train_observed("fidelity", train, stopping, metric, Some(&mut obs))?;
        return Ok(FidelityCurve {
            points: obs.points,
            teacher_heldout_f1,
            coarse: false,
        });
    }
    warn!("{} exposes no per-epoch snapshots; the fidelity curve is coarse", student.spec().kind);
    let h = student.train("fidelity", train, stopping, metric)?;
    let e = evaluate_predictor(&h, heldout, metric)?;
    let last = h.training_fidelity_history.len();
    let points = h
        .training_fidelity_history
        .iter()
        .enumerate()
        .map(|(i, &f)| FidelityPoint {
            epoch: i + 1,
            train_fidelity: f,
            heldout_f1: (i + 1 == last).then_some(e.corpus_f1),
            heldout_per_example: if i + 1 == last {
                e.per_example.iter().map(|s| s.f1).collect()
            } else {
                Vec::new()
            },
        })
        .collect();
    Ok(FidelityCurve {
        points,
        teacher_heldout_f1,
        coarse: true,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProbeConfig {
    pub n_clean: usize,
    pub n_noisy: usize,
    /// Minimum per-example training fidelity for an example to count as
    /// fully fit.
    pub threshold: f64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            n_clean: 100,
            n_noisy: 100,
            threshold: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub fully_fit: usize,
    /// Teacher-vs-gold score on the clean probe set.
    pub clean_set_f1: f64,
    pub noisy_set_f1: Option<f64>,
    /// New-student-vs-teacher score on the clean probe set.
    pub probe_clean: f64,
    pub probe_noisy: Option<f64>,
    pub clean_ids: Vec<String>,
    pub noisy_ids: Vec<String>,
}

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

/// Hold out well-fit examples on which the teacher was most and least
/// accurate, retrain on the rest, and measure how far the new student
/// reproduces the teacher's labels on each group.
///
/// `train` holds teacher labels; `gold` must cover every training id.
pub fn memorization_probe(
    student: &dyn Student,
    train: &[TrainRecord],
    gold: &Dataset,
    config: &ProbeConfig,
    stopping: &StoppingRule,
    metric: Metric,
) -> Result<ProbeReport> {
    if config.n_clean == 0 {
        return Err(Error::config("the probe needs at least one clean example"));
    }
    let first = student.train("probe/s1", train, stopping, metric)?;
    let qs: Vec<Query> = train.iter().map(|r| Query::new(&r.id, &r.input)).collect();
    let preds = first.predict(&qs)?;
    let mut fit: Vec<(f64, &TrainRecord)> = Vec::new();
    for (r, p) in train.iter().zip(&preds) {
        let words: Vec<&str> = r.input.split_whitespace().collect();
        if metric.score(&p.output, &r.target, &words).f1 >= config.threshold {
            let ex = gold
                .get(&r.id)
                .ok_or_else(|| Error::validation(format!("no gold example for training id `{}`", r.id)))?;
            let g = ex
                .gold
                .as_deref()
                .ok_or_else(|| Error::validation(format!("example `{}` has no gold label", r.id)))?;
            fit.push((metric.score(&r.target, g, &words).f1, r));
        }
    }
    let needed = config.n_clean + config.n_noisy;
    if fit.len() < needed {
        return Err(Error::validation(format!(
            "only {} examples are fully fit but the probe needs {needed}",
            fit.len()
        )));
    }
    fit.sort_by(|a, b| b.0.partial_cmp(&a.0).expect("scores").then_with(|| a.1.id.cmp(&b.1.id)));
    let clean: Vec<(f64, &TrainRecord)> = fit[..config.n_clean].to_vec();
    let mut by_low = fit[config.n_clean..].to_vec();
    by_low.sort_by(|a, b| a.0.partial_cmp(&b.0).expect("scores").then_with(|| a.1.id.cmp(&b.1.id)));
    let noisy: Vec<(f64, &TrainRecord)> = by_low[..config.n_noisy].to_vec();
    let held: BTreeSet<&str> = clean.iter().chain(&noisy).map(|(_, r)| r.id.as_str()).collect();
    let rest: Vec<TrainRecord> = train.iter().filter(|r| !held.contains(r.id.as_str())).cloned().collect();
    let second = student.train("probe/s1-prime", &rest, stopping, metric)?;
    assert!(
        held.iter().all(|id| !second.manifest.contains(*id)),
        "probe sets must be disjoint from the probe student's training data"
    );
    let agreement = |group: &[(f64, &TrainRecord)]| -> Result<f64> {
        let qs: Vec<Query> = group.iter().map(|(_, r)| Query::new(&r.id, &r.input)).collect();
        let preds = second.predict(&qs)?;
        Ok(mean(group.iter().zip(&preds).map(|((_, r), p)| {
            let words: Vec<&str> = r.input.split_whitespace().collect();
            metric.score(&p.output, &r.target, &words).f1
        })))
    };
    let has_noisy = config.n_noisy > 0;
    Ok(ProbeReport {
        fully_fit: fit.len(),
        clean_set_f1: mean(clean.iter().map(|(s, _)| *s)),
        noisy_set_f1: has_noisy.then(|| mean(noisy.iter().map(|(s, _)| *s))),
        probe_clean: agreement(&clean)?,
        probe_noisy: if has_noisy { Some(agreement(&noisy)?) } else { None },
        clean_ids: clean.iter().map(|(_, r)| r.id.clone()).collect(),
        noisy_ids: noisy.iter().map(|(_, r)| r.id.clone()).collect(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HighLowSplit {
    /// The half where the teacher scores best.
    pub high: Vec<String>,
    pub low: Vec<String>,
}

/// Rank held-out examples by teacher score (ties by id) and cut in half;
/// the extra example of an odd count goes to the low half.
pub fn high_low_split(gold: &Dataset, teacher: &BTreeMap<String, String>, metric: Metric) -> Result<HighLowSplit> {
    let eval = evaluate_outputs(teacher, gold, metric)?;
    let mut ranked: Vec<(f64, String)> = eval.per_example.into_iter().map(|s| (s.f1, s.id)).collect();
    ranked.sort_by(|a, b| b.0.partial_cmp(&a.0).expect("scores").then_with(|| a.1.cmp(&b.1)));
    let half = ranked.len() / 2;
    let mut ids = ranked.into_iter().map(|(_, id)| id);
    let high = ids.by_ref().take(half).collect();
    Ok(HighLowSplit {
        high,
        low: ids.collect(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HighLowReport {
    pub teacher_high: f64,
    pub student_high: f64,
    pub teacher_low: f64,
    pub student_low: f64,
}

/// Teacher and student scores against gold on both halves.
pub fn high_low_compare(
    gold: &Dataset,
    split: &HighLowSplit,
    teacher: &BTreeMap<String, String>,
    student: &BTreeMap<String, String>,
    metric: Metric,
) -> Result<HighLowReport> {
    let half = |ids: &[String], outputs: &BTreeMap<String, String>| -> Result<f64> {
        let set: BTreeSet<String> = ids.iter().cloned().collect();
        let sub = gold.subset(&set);
        if sub.is_empty() {
            return Ok(1.0);
        }
        Ok(evaluate_outputs(outputs, &sub, metric)?.corpus_f1)
    };
    Ok(HighLowReport {
        teacher_high: half(&split.high, teacher)?,
        student_high: half(&split.high, student)?,
        teacher_low: half(&split.low, teacher)?,
        student_low: half(&split.low, student)?,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridCell {
    pub size_a: usize,
    pub size_b: usize,
    pub heldout_f1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridReport {
    pub sizes_a: Vec<usize>,
    pub sizes_b: Vec<usize>,
    /// Row-major over `sizes_a` x `sizes_b`, then any extra cells.
    pub cells: Vec<GridCell>,
}

impl GridReport {
    pub fn get(&self, size_a: usize, size_b: usize) -> Option<f64> {
        self.cells
            .iter()
            .find(|c| c.size_a == size_a && c.size_b == size_b)
            .map(|c| c.heldout_f1)
    }
}

/// Two-stage distillation with a single student per stage for every pair
/// of sizes: the first student learns the teacher's labels on `size_a`
/// examples and labels `size_b` further examples for the second student,
/// which is scored on `heldout`.
///
/// The pool is shuffled once by `seed`; the first `max(sizes_a)` examples
/// form the A region and the next `max(sizes_b)` the B region, and each cell
/// takes prefixes of both, so cells are nested and reproducible from the
/// seed and sizes. `extra` lists further (size_a, size_b) cells.
#[allow(clippy::too_many_arguments)]
pub fn size_grid(
    pool: &Dataset,
    teacher: &dyn Teacher,
    student: &dyn Student,
    sizes_a: &[usize],
    sizes_b: &[usize],
    extra: &[(usize, usize)],
    heldout: &Dataset,
    stopping: &StoppingRule,
    metric: Metric,
    seed: u64,
) -> Result<GridReport> {
    let mut cells: Vec<(usize, usize)> = sizes_a
        .iter()
        .flat_map(|&a| sizes_b.iter().map(move |&b| (a, b)))
        .collect();
    cells.extend(extra.iter().filter(|c| !cells.contains(c)).copied().collect::<Vec<_>>());
    let max_a = cells.iter().map(|c| c.0).max().unwrap_or(0);
    let max_b = cells.iter().map(|c| c.1).max().unwrap_or(0);
    if max_a + max_b > pool.len() {
        return Err(Error::validation(format!(
            "grid needs {max_a} + {max_b} examples but the pool has {}",
            pool.len()
        )));
    }
    if cells.iter().any(|&(a, b)| a == 0 || b == 0) {
        return Err(Error::config("grid sizes must be positive"));
    }
    let mut order: Vec<&str> = pool.ids().collect();
    order.sort();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let region_a: Vec<Query> = order[..max_a]
        .iter()
        .map(|id| Query::new(*id, &pool.get(id).expect("pool id").input))
        .collect();
    let region_b: Vec<&str> = order[max_a..max_a + max_b].to_vec();
    let teacher_out = teacher.label(&region_a)?;
    let labeled_a: Vec<Option<TrainRecord>> = region_a
        .iter()
        .zip(teacher_out)
        .map(|(q, o)| match o {
            TeacherOutput::Labeled { output, .. } => Some(TrainRecord {
                id: q.id.clone(),
                input: q.input.clone(),
                target: output,
            }),
            TeacherOutput::Failed { .. } => None,
        })
        .collect();
    let results: Vec<Result<GridCell>> = cells
        .par_iter()
        .map(|&(a, b)| {
            let train_a: Vec<TrainRecord> = labeled_a[..a].iter().flatten().cloned().collect();
            let first = student.train(&format!("grid/{a}x{b}/s1"), &train_a, stopping, metric)?;
            let set_b: BTreeSet<String> = region_b[..b].iter().map(|s| s.to_string()).collect();
            let sub_b = pool.subset(&set_b);
            let labels = predict_outputs(&first, &sub_b)?;
            let train_b: Vec<TrainRecord> = sub_b
                .examples()
                .iter()
                .map(|e| TrainRecord {
                    id: e.id.clone(),
                    input: e.input.clone(),
                    target: labels[&e.id].clone(),
                })
                .collect();
            let second = student.train(&format!("grid/{a}x{b}/s2"), &train_b, stopping, metric)?;
            Ok(GridCell {
                size_a: a,
                size_b: b,
                heldout_f1: evaluate_predictor(&second, heldout, metric)?.corpus_f1,
            })
        })
        .collect();
    Ok(GridReport {
        sizes_a: sizes_a.to_vec(),
        sizes_b: sizes_b.to_vec(),
        cells: results.into_iter().collect::<Result<_>>()?,
    })
}
