//! The multistage distillation schedule and its single-student baselines.

mod filter;
mod store;

use std::collections::{BTreeMap, BTreeSet};

use log::info;
use serde::{Deserialize, Serialize};

use crate::analysis::evaluate_predictor;
use crate::backends::{ModelHandle, Query, StoppingRule, Student, Teacher, TeacherOutput, TrainRecord};
use crate::corpus::{partition, Dataset, PartitionPair, Pseudolabel, Side};
use crate::error::{Error, Result};
use crate::parse_eval::Metric;

pub use filter::{confidence_filter, kept_count, ScoredLabel};
pub use store::{
    audit_store, is_append_only_extension, AuditReport, ManifestRecord, RunDir, CONFIG_SNAPSHOT, MANIFEST_FILE,
    REPORT_FILE, STORE_FILE,
};

pub const TEACHER_ID: &str = "teacher";
pub const FINAL_ID: &str = "final";

pub fn stage_model_id(stage: u32, side: Side) -> String {
    format!("stage{stage}-{side}")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Total number of stages: stage 0 is teacher labeling, stages
    /// `1..stages-1` are intermediate, stage `stages` trains the final student.
    pub stages: u32,
    pub seed: u64,
    #[serde(default)]
    pub stopping: StoppingRule,
    pub metric: Metric,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub filter_ratio: Option<f64>,
    #[serde(default = "default_failure_fraction")]
    pub max_failure_fraction: f64,
    /// Draw a fresh partition for every intermediate stage.
    #[serde(default)]
    pub resample_partitions: bool,
}

fn default_failure_fraction() -> f64 {
    0.1
}

impl RunConfig {
    pub fn new(metric: Metric) -> Self {
        RunConfig {
            stages: 2,
            seed: 0,
            stopping: StoppingRule::default(),
            metric,
            filter_ratio: None,
            max_failure_fraction: default_failure_fraction(),
            resample_partitions: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.stages < 2 {
            return Err(Error::config(format!(
                "stages must be at least 2 (teacher labeling, one intermediate stage and the final stage), got {}",
                self.stages
            )));
        }
        if let Some(r) = self.filter_ratio {
            if !(r > 0.0 && r <= 1.0) {
                return Err(Error::config(format!("filter_ratio {r} is outside (0, 1]")));
            }
        }
        if !(0.0..=1.0).contains(&self.max_failure_fraction) {
            return Err(Error::config("max_failure_fraction must be in [0, 1]"));
        }
        self.stopping.validate()
    }

    pub fn partition_seed(&self, stage: u32) -> u64 {
        if self.resample_partitions {
            self.seed.wrapping_add(stage as u64)
        } else {
            self.seed
        }
    }

    /// Human-readable schedule.
    pub fn plan(&self) -> Vec<String> {
        let n = self.stages;
        let mut out = vec!["stage 0: teacher labels the whole unlabeled pool".to_string()];
        for i in 1..n {
            out.push(format!(
                "stage {i}: train {} on A and {} on B with stage-{} labels; each relabels the other side",
                stage_model_id(i, Side::A),
                stage_model_id(i, Side::B),
                i - 1
            ));
        }
        out.push(format!("stage {n}: train {FINAL_ID} on A and B with stage-{} labels", n - 1));
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainedModel {
    pub model_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub side: Option<Side>,
    pub train_size: usize,
    pub fidelity_history: Vec<f64>,
}

impl TrainedModel {
    fn of(h: &ModelHandle, side: Option<Side>) -> Self {
        TrainedModel {
            model_id: h.model_id.clone(),
            side,
            train_size: h.manifest.len(),
            fidelity_history: h.training_fidelity_history.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Relabeling {
    pub producer: String,
    /// The side that received the labels; absent when the whole pool did.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub side: Option<Side>,
    pub labeled: usize,
    pub failures: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageReport {
    pub stage: u32,
    pub trained_models: Vec<TrainedModel>,
    pub relabeled: Vec<Relabeling>,
    /// Held-out score per model id, only when held-out gold was supplied.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub metrics: Option<BTreeMap<String, f64>>,
}

/// Everything a run produced in this invocation.
pub struct MckdOutcome {
    /// Absent when the run was stopped before the final stage.
    pub final_model: Option<ModelHandle>,
    pub reports: Vec<StageReport>,
    pub store: Dataset,
    pub partitions: PartitionPair,
    /// Intermediate student pairs trained in this invocation, by stage.
    pub stage_models: BTreeMap<u32, (ModelHandle, ModelHandle)>,
}

pub struct BaselineOutcome {
    pub model: ModelHandle,
    pub report: StageReport,
    pub store: Dataset,
    /// The first student's labels on the pool (self-distillation only).
    pub self_labels: Option<Vec<ScoredLabel>>,
}

/// Training pairs from the labels at `stage`, in store order. Failed and
/// missing labels are skipped.
pub fn training_records(store: &Dataset, ids: Option<&BTreeSet<String>>, stage: u32) -> Vec<TrainRecord> {
    store
        .examples()
        .iter()
        .filter(|e| ids.is_none_or(|s| s.contains(&e.id)))
        .filter_map(|e| {
            let l = store.label_at(&e.id, stage)?;
            (!l.is_failure()).then(|| TrainRecord {
                id: e.id.clone(),
                input: e.input.clone(),
                target: l.output.clone(),
            })
        })
        .collect()
}

fn queries(store: &Dataset, ids: &BTreeSet<String>) -> Vec<Query> {
    store
        .examples()
        .iter()
        .filter(|e| ids.contains(&e.id))
        .map(|e| Query::new(&e.id, &e.input))
        .collect()
}

fn label_with(model: &ModelHandle, store: &Dataset, ids: &BTreeSet<String>, stage: u32) -> Result<Vec<(String, Pseudolabel)>> {
    let qs = queries(store, ids);
    let preds = model.predict(&qs)?;
    Ok(qs
        .into_iter()
        .zip(preds)
        .map(|(q, p)| {
            (
                q.id,
                Pseudolabel::new(p.output, model.model_id.clone(), stage).with_confidence(p.confidence),
            )
        })
        .collect())
}

/// Labels for B from the A model and for A from the B model.
///
/// Fails if either model's training manifest touches the side it labels.
pub fn cross_partition_relabel(
    model_a: &ModelHandle,
    model_b: &ModelHandle,
    pair: &PartitionPair,
    store: &Dataset,
    stage: u32,
) -> Result<Vec<(String, Pseudolabel)>> {
    for (model, target) in [(model_a, &pair.ids_b), (model_b, &pair.ids_a)] {
        let overlap: Vec<&String> = model.manifest.intersection(target).take(5).collect();
        if !overlap.is_empty() {
            return Err(Error::validation(format!(
                "model `{}` was trained on ids it is about to label: {overlap:?}",
                model.model_id
            )));
        }
    }
    let (for_b, for_a) = rayon::join(
        || label_with(model_a, store, &pair.ids_b, stage),
        || label_with(model_b, store, &pair.ids_a, stage),
    );
    let mut labels = for_a?;
    labels.extend(for_b?);
    let order: BTreeMap<&str, usize> = store.ids().enumerate().map(|(i, id)| (id, i)).collect();
    labels.sort_by_key(|(id, _)| order[id.as_str()]);
    Ok(labels)
}

pub struct Pipeline<'a> {
    config: &'a RunConfig,
    student: &'a dyn Student,
    teacher: Option<&'a dyn Teacher>,
    run_dir: Option<&'a RunDir>,
    heldout: Option<&'a Dataset>,
}

impl<'a> Pipeline<'a> {
    pub fn new(config: &'a RunConfig, student: &'a dyn Student) -> Self {
        Pipeline {
            config,
            student,
            teacher: None,
            run_dir: None,
            heldout: None,
        }
    }

    pub fn with_teacher(mut self, teacher: &'a dyn Teacher) -> Self {
        self.teacher = Some(teacher);
        self
    }

    /// Persist the store, manifests and reports; existing stages are reused.
    pub fn with_run_dir(mut self, run_dir: &'a RunDir) -> Self {
        self.run_dir = Some(run_dir);
        self
    }

    /// Gold-labeled data scored after each stage. It is never used for
    /// training or labeling.
    pub fn with_heldout(mut self, heldout: &'a Dataset) -> Self {
        self.heldout = Some(heldout);
        self
    }

    fn score(&self, models: &[&ModelHandle]) -> Result<Option<BTreeMap<String, f64>>> {
        let Some(heldout) = self.heldout else {
            return Ok(None);
        };
        let mut out = BTreeMap::new();
        for m in models {
            out.insert(m.model_id.clone(), evaluate_predictor(*m, heldout, self.config.metric)?.corpus_f1);
        }
        Ok(Some(out))
    }

    fn train(&self, model_id: &str, data: &[TrainRecord]) -> Result<ModelHandle> {
        info!("training {model_id} on {} examples", data.len());
        self.student
            .train(model_id, data, &self.config.stopping, self.config.metric)
    }

    fn initial_store(&self, unlabeled: &Dataset) -> Result<Dataset> {
        let mut fresh = unlabeled.without_gold();
        fresh.name = "store".into();
        let Some(rd) = self.run_dir else {
            return Ok(fresh);
        };
        let format = if self.config.metric.is_tree() {
            crate::corpus::DataFormat::ParseJsonl
        } else {
            crate::corpus::DataFormat::SlotJsonl
        };
        match rd.load_store(format)? {
            Some(stored) => {
                if stored.examples() != fresh.examples() {
                    return Err(Error::validation(format!(
                        "the store in {} holds different examples than the unlabeled dataset",
                        rd.path().display()
                    )));
                }
                Ok(stored)
            }
            None => Ok(fresh),
        }
    }

    fn commit(&self, store: &Dataset, report: &StageReport, manifests: &[ManifestRecord]) -> Result<()> {
        if let Some(rd) = self.run_dir {
            for m in manifests {
                rd.append_manifest(m)?;
            }
            rd.save_store(store)?;
            rd.append_report(report)?;
        }
        Ok(())
    }

    /// Stage 0: the teacher labels every example not yet labeled at stage 0.
    pub fn teacher_stage(&self, store: Dataset) -> Result<(Dataset, Option<StageReport>)> {
        if store.has_stage(0) {
            return Ok((store, None));
        }
        let teacher = self
            .teacher
            .ok_or_else(|| Error::config("stage-0 labels are missing and no teacher is configured"))?;
        let qs: Vec<Query> = store
            .examples()
            .iter()
            .map(|e| Query::new(&e.id, &e.input))
            .collect();
        info!("teacher labeling {} examples", qs.len());
        let outputs = teacher.label(&qs)?;
        if outputs.len() != qs.len() {
            return Err(Error::protocol(format!(
                "teacher returned {} outputs for {} queries",
                outputs.len(),
                qs.len()
            )));
        }
        let mut failures = 0;
        let labels: Vec<(String, Pseudolabel)> = qs
            .into_iter()
            .zip(outputs)
            .map(|(q, out)| {
                let label = match out {
                    TeacherOutput::Labeled { output, raw, .. } => {
                        Pseudolabel::new(output, teacher.id(), 0).with_raw(raw)
                    }
                    TeacherOutput::Failed { reason, .. } => {
                        failures += 1;
                        Pseudolabel::failed(teacher.id(), 0, reason)
                    }
                };
                (q.id, label)
            })
            .collect();
        let total = labels.len();
        if failures as f64 > self.config.max_failure_fraction * total as f64 {
            return Err(Error::TooManyFailures {
                failed: failures,
                total,
                allowed: self.config.max_failure_fraction,
            });
        }
        let store = store.attach(labels)?;
        let report = StageReport {
            stage: 0,
            trained_models: Vec::new(),
            relabeled: vec![Relabeling {
                producer: teacher.id().to_string(),
                side: None,
                labeled: total - failures,
                failures,
            }],
            metrics: None,
        };
        self.commit(&store, &report, &[])?;
        Ok((store, Some(report)))
    }

    pub fn run_mckd(&self, unlabeled: &Dataset) -> Result<MckdOutcome> {
        self.run_mckd_until(unlabeled, None)
    }

    /// Run (or resume) the schedule, stopping after `until_stage` if given.
    pub fn run_mckd_until(&self, unlabeled: &Dataset, until_stage: Option<u32>) -> Result<MckdOutcome> {
        self.config.validate()?;
        let n = self.config.stages;
        let store = self.initial_store(unlabeled)?;
        let mut reports = Vec::new();
        let (mut store, r0) = self.teacher_stage(store)?;
        reports.extend(r0);
        let mut partitions = partition(&store, self.config.partition_seed(1))?;
        let mut stage_models = BTreeMap::new();
        let stop = |stage: u32| until_stage.is_some_and(|u| stage >= u);
        if stop(0) {
            return Ok(MckdOutcome {
                final_model: None,
                reports,
                store,
                partitions,
                stage_models,
            });
        }
        for i in 1..n {
            partitions = partition(&store, self.config.partition_seed(i))?;
            if store.has_stage(i) {
                info!("stage {i} already in the store, skipping");
            } else {
                let data_a = training_records(&store, Some(&partitions.ids_a), i - 1);
                let data_b = training_records(&store, Some(&partitions.ids_b), i - 1);
                let (a, b) = rayon::join(
                    || self.train(&stage_model_id(i, Side::A), &data_a),
                    || self.train(&stage_model_id(i, Side::B), &data_b),
                );
                let (a, b) = (a?, b?);
                let labels = cross_partition_relabel(&a, &b, &partitions, &store, i)?;
                store = store.attach(labels)?;
                let report = StageReport {
                    stage: i,
                    trained_models: vec![TrainedModel::of(&a, Some(Side::A)), TrainedModel::of(&b, Some(Side::B))],
                    relabeled: vec![
                        Relabeling {
                            producer: a.model_id.clone(),
                            side: Some(Side::B),
                            labeled: partitions.ids_b.len(),
                            failures: 0,
                        },
                        Relabeling {
                            producer: b.model_id.clone(),
                            side: Some(Side::A),
                            labeled: partitions.ids_a.len(),
                            failures: 0,
                        },
                    ],
                    metrics: self.score(&[&a, &b])?,
                };
                self.commit(
                    &store,
                    &report,
                    &[ManifestRecord::of(&a, i, Some(Side::A)), ManifestRecord::of(&b, i, Some(Side::B))],
                )?;
                reports.push(report);
                stage_models.insert(i, (a, b));
            }
            if stop(i) {
                return Ok(MckdOutcome {
                    final_model: None,
                    reports,
                    store,
                    partitions,
                    stage_models,
                });
            }
        }
        let data = training_records(&store, None, n - 1);
        let final_model = self.train(FINAL_ID, &data)?;
        let report = StageReport {
            stage: n,
            trained_models: vec![TrainedModel::of(&final_model, None)],
            relabeled: Vec::new(),
            metrics: self.score(&[&final_model])?,
        };
        if let Some(rd) = self.run_dir {
            rd.append_manifest(&ManifestRecord::of(&final_model, n, None))?;
            rd.append_report(&report)?;
        }
        reports.push(report);
        Ok(MckdOutcome {
            final_model: Some(final_model),
            reports,
            store,
            partitions,
            stage_models,
        })
    }

    fn stage0_store(&self, unlabeled: &Dataset) -> Result<Dataset> {
        self.config.validate()?;
        let store = self.initial_store(unlabeled)?;
        Ok(self.teacher_stage(store)?.0)
    }

    /// One student trained on all teacher labels.
    pub fn run_vanilla_kd(&self, unlabeled: &Dataset) -> Result<BaselineOutcome> {
        let store = self.stage0_store(unlabeled)?;
        let model = self.train("vanilla", &training_records(&store, None, 0))?;
        let report = StageReport {
            stage: 1,
            trained_models: vec![TrainedModel::of(&model, None)],
            relabeled: Vec::new(),
            metrics: self.score(&[&model])?,
        };
        Ok(BaselineOutcome {
            model,
            report,
            store,
            self_labels: None,
        })
    }

    /// Vanilla KD, then a fresh student trained on the first student's own
    /// labels, optionally keeping only the top `r` fraction by confidence.
    pub fn run_kd_sd(&self, unlabeled: &Dataset, r: Option<f64>) -> Result<BaselineOutcome> {
        let first = self.run_vanilla_kd(unlabeled)?;
        let store = first.store;
        if r.is_some() && !first.model.has_confidence() {
            return Err(Error::config(format!(
                "confidence filtering needs a student that reports confidences; {} does not",
                first.model.backend.kind
            )));
        }
        let all: BTreeSet<String> = store.ids().map(str::to_string).collect();
        let self_labels: Vec<ScoredLabel> = label_with(&first.model, &store, &all, 1)?
            .into_iter()
            .map(|(id, l)| ScoredLabel {
                id,
                output: l.output,
                confidence: l.confidence,
            })
            .collect();
        let kept = match r {
            Some(r) => confidence_filter(&self_labels, r)?,
            None => self_labels.clone(),
        };
        let data: Vec<TrainRecord> = kept
            .iter()
            .map(|l| TrainRecord {
                id: l.id.clone(),
                input: store.get(&l.id).expect("store id").input.clone(),
                target: l.output.clone(),
            })
            .collect();
        let model = self.train("kd-sd", &data)?;
        let report = StageReport {
            stage: 2,
            trained_models: vec![TrainedModel::of(&first.model, None), TrainedModel::of(&model, None)],
            relabeled: vec![Relabeling {
                producer: first.model.model_id.clone(),
                side: None,
                labeled: self_labels.len(),
                failures: 0,
            }],
            metrics: self.score(&[&first.model, &model])?,
        };
        Ok(BaselineOutcome {
            model,
            report,
            store,
            self_labels: Some(self_labels),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_validation() {
        let mut c = RunConfig::new(Metric::ChunkF1);
        assert!(c.validate().is_ok());
        c.stages = 1;
        assert!(c.validate().is_err());
        c.stages = 3;
        c.filter_ratio = Some(0.0);
        assert!(c.validate().is_err());
    }

    #[test]
    fn plan_lists_every_stage() {
        let mut c = RunConfig::new(Metric::ChunkF1);
        c.stages = 3;
        let p = c.plan();
        assert_eq!(p.len(), 4);
        assert!(p[1].contains("stage1-A") && p[2].contains("stage2-B"));
        assert!(p[3].starts_with("stage 3: train final"));
    }
}
