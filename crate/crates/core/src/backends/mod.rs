//! Uniform model contract over the LLM teacher, remote trainable students and
//! the built-in desk-scale learners.

mod context;
mod llm;
mod oracle;
pub mod prompt;
pub mod protocol;
mod remote;
mod table;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::parse_eval::Metric;

pub use context::{ContextTagger, ContextTaggerConfig};
pub use llm::{postprocess_generation, ChatClient, ChatClientConfig, Completion, LlmTeacher};
pub use oracle::{noisy_oracle, Corruption, GoldFn, NoisyOracle};
pub use remote::{RemotePredictor, RemoteStudent};
pub use table::TableLearner;

/// Confidence reported for inputs a learner has no evidence for.
pub const FALLBACK_CONFIDENCE: f64 = f64::MIN;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BackendKind {
    LlmTeacher,
    RemoteStudent,
    TableLearner,
    ContextTagger,
    NoisyOracle,
}

impl BackendKind {
    pub fn is_remote(self) -> bool {
        matches!(self, BackendKind::LlmTeacher | BackendKind::RemoteStudent)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            BackendKind::LlmTeacher => "llm-teacher",
            BackendKind::RemoteStudent => "remote-student",
            BackendKind::TableLearner => "table-learner",
            BackendKind::ContextTagger => "context-tagger",
            BackendKind::NoisyOracle => "noisy-oracle",
        }
    }
}

impl fmt::Display for BackendKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for BackendKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        serde_json::from_value(Value::String(s.to_string()))
            .map_err(|_| Error::config(format!("unknown backend kind `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackendSpec {
    pub kind: BackendKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub endpoint: Option<String>,
    #[serde(default)]
    pub parameters: BTreeMap<String, Value>,
}

impl BackendSpec {
    pub fn new(kind: BackendKind) -> Self {
        BackendSpec {
            kind,
            endpoint: None,
            parameters: BTreeMap::new(),
        }
    }

    pub fn with_endpoint(mut self, endpoint: impl Into<String>) -> Self {
        self.endpoint = Some(endpoint.into());
        self
    }

    pub fn with_param(mut self, key: &str, value: impl Into<Value>) -> Self {
        self.parameters.insert(key.to_string(), value.into());
        self
    }

    pub fn validate(&self) -> Result<()> {
        match (self.kind.is_remote(), self.endpoint.is_some()) {
            (true, false) => Err(Error::config(format!("{} requires an endpoint", self.kind))),
            (false, true) => Err(Error::config(format!("{} does not take an endpoint", self.kind))),
            _ => Ok(()),
        }
    }

    pub fn param_f64(&self, key: &str, default: f64) -> Result<f64> {
        match self.parameters.get(key) {
            None => Ok(default),
            Some(v) => v
                .as_f64()
                .ok_or_else(|| Error::config(format!("parameter `{key}` must be a number"))),
        }
    }

    pub fn param_u64(&self, key: &str, default: u64) -> Result<u64> {
        match self.parameters.get(key) {
            None => Ok(default),
            Some(v) => v
                .as_u64()
                .ok_or_else(|| Error::config(format!("parameter `{key}` must be a non-negative integer"))),
        }
    }

    pub fn param_usize(&self, key: &str, default: usize) -> Result<usize> {
        self.param_u64(key, default as u64).map(|v| v as usize)
    }

    pub fn param_bool(&self, key: &str, default: bool) -> Result<bool> {
        match self.parameters.get(key) {
            None => Ok(default),
            Some(v) => v
                .as_bool()
                .ok_or_else(|| Error::config(format!("parameter `{key}` must be a boolean"))),
        }
    }

    pub fn param_str(&self, key: &str) -> Result<Option<&str>> {
        match self.parameters.get(key) {
            None => Ok(None),
            Some(v) => v
                .as_str()
                .map(Some)
                .ok_or_else(|| Error::config(format!("parameter `{key}` must be a string"))),
        }
    }
}

/// When to stop training a student.
///
/// Training stops once the training fidelity changed by less than
/// `fidelity_delta` for `patience_epochs` consecutive epochs, or after
/// `max_epochs`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StoppingRule {
    pub fidelity_delta: f64,
    pub patience_epochs: usize,
    pub max_epochs: usize,
}

impl Default for StoppingRule {
    fn default() -> Self {
        StoppingRule {
            fidelity_delta: 0.001,
            patience_epochs: 3,
            max_epochs: 21,
        }
    }
}

impl StoppingRule {
    pub fn validate(&self) -> Result<()> {
        if !(self.fidelity_delta > 0.0) || self.patience_epochs == 0 || self.max_epochs == 0 {
            return Err(Error::config("stopping rule values must all be positive"));
        }
        if self.patience_epochs > self.max_epochs {
            return Err(Error::config("patience_epochs cannot exceed max_epochs"));
        }
        Ok(())
    }

    /// The last `patience_epochs` epoch-to-epoch changes are all below the delta.
    pub fn converged(&self, history: &[f64]) -> bool {
        history.len() > self.patience_epochs
            && history
                .windows(2)
                .rev()
                .take(self.patience_epochs)
                .all(|w| (w[1] - w[0]).abs() < self.fidelity_delta)
    }

    pub fn should_stop(&self, history: &[f64]) -> bool {
        history.len() >= self.max_epochs || self.converged(history)
    }
}

/// An input to label, identified so that per-example randomness and
/// provenance can be keyed on it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Query {
    pub id: String,
    pub input: String,
}

impl Query {
    pub fn new(id: impl Into<String>, input: impl Into<String>) -> Self {
        Query {
            id: id.into(),
            input: input.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub output: String,
    /// Mean per-token log-probability, when the backend exposes one.
    pub confidence: Option<f64>,
}

pub trait Predictor: Send + Sync {
    fn predict(&self, queries: &[Query]) -> Result<Vec<Prediction>>;

    fn has_confidence(&self) -> bool;
}

/// A pseudolabeled training pair. Gold labels have no field here.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainRecord {
    pub id: String,
    pub input: String,
    pub target: String,
}

/// A trained (or oracle) model plus its training record.
#[derive(Clone)]
pub struct ModelHandle {
    pub backend: BackendSpec,
    pub model_id: String,
    pub training_fidelity_history: Vec<f64>,
    /// Ids of the examples the model was trained on.
    pub manifest: BTreeSet<String>,
    model: Option<Arc<dyn Predictor>>,
}

impl fmt::Debug for ModelHandle {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ModelHandle")
            .field("backend", &self.backend.kind)
            .field("model_id", &self.model_id)
            .field("epochs", &self.training_fidelity_history.len())
            .field("manifest", &self.manifest.len())
            .field("trained", &self.model.is_some())
            .finish()
    }
}

impl ModelHandle {
    pub fn new(
        backend: BackendSpec,
        model_id: impl Into<String>,
        history: Vec<f64>,
        manifest: BTreeSet<String>,
        model: Arc<dyn Predictor>,
    ) -> Self {
        ModelHandle {
            backend,
            model_id: model_id.into(),
            training_fidelity_history: history,
            manifest,
            model: Some(model),
        }
    }

    /// A handle that has not been trained yet; predicting with it fails.
    pub fn untrained(backend: BackendSpec, model_id: impl Into<String>) -> Self {
        ModelHandle {
            backend,
            model_id: model_id.into(),
            training_fidelity_history: Vec::new(),
            manifest: BTreeSet::new(),
            model: None,
        }
    }

    pub fn predict(&self, queries: &[Query]) -> Result<Vec<Prediction>> {
        let model = self
            .model
            .as_ref()
            .ok_or_else(|| Error::backend(format!("model `{}` has not been trained", self.model_id)))?;
        let out = model.predict(queries)?;
        if out.len() != queries.len() {
            return Err(Error::protocol(format!(
                "model `{}` returned {} predictions for {} inputs",
                self.model_id,
                out.len(),
                queries.len()
            )));
        }
        Ok(out)
    }

    pub fn has_confidence(&self) -> bool {
        self.model.as_ref().is_some_and(|m| m.has_confidence())
    }

    pub fn predictor(&self) -> Option<&Arc<dyn Predictor>> {
        self.model.as_ref()
    }

    pub fn final_fidelity(&self) -> Option<f64> {
        self.training_fidelity_history.last().copied()
    }
}

impl Predictor for ModelHandle {
    fn predict(&self, queries: &[Query]) -> Result<Vec<Prediction>> {
        ModelHandle::predict(self, queries)
    }

    fn has_confidence(&self) -> bool {
        ModelHandle::has_confidence(self)
    }
}

/// Called after every training epoch with a snapshot of the model.
pub trait EpochObserver {
    fn on_epoch(&mut self, epoch: usize, fidelity: f64, model: &dyn Predictor) -> Result<()>;
}

pub trait Student: Send + Sync {
    fn spec(&self) -> &BackendSpec;

    fn train_observed(
        &self,
        model_id: &str,
        data: &[TrainRecord],
        stopping: &StoppingRule,
        metric: Metric,
        observer: Option<&mut dyn EpochObserver>,
    ) -> Result<ModelHandle>;

    fn train(
        &self,
        model_id: &str,
        data: &[TrainRecord],
        stopping: &StoppingRule,
        metric: Metric,
    ) -> Result<ModelHandle> {
        self.train_observed(model_id, data, stopping, metric, None)
    }

    /// Whether `train_observed` reports per-epoch snapshots.
    fn supports_epoch_callbacks(&self) -> bool;
}

/// What the teacher produced for one query.
#[derive(Debug, Clone, PartialEq)]
pub enum TeacherOutput {
    Labeled {
        output: String,
        raw: String,
        retries: usize,
        repaired: bool,
    },
    Failed {
        reason: String,
        retries: usize,
    },
}

impl TeacherOutput {
    pub fn retries(&self) -> usize {
        match self {
            TeacherOutput::Labeled { retries, .. } | TeacherOutput::Failed { retries, .. } => *retries,
        }
    }
}

pub trait Teacher: Send + Sync {
    fn id(&self) -> &str;

    /// One output per query, in query order. Permanent per-item failures are
    /// reported as [`TeacherOutput::Failed`], never dropped.
    fn label(&self, queries: &[Query]) -> Result<Vec<TeacherOutput>>;
}

/// Mean task score of `model`'s predictions against the training targets.
pub fn training_fidelity(model: &dyn Predictor, data: &[TrainRecord], metric: Metric) -> Result<f64> {
    if data.is_empty() {
        return Ok(0.0);
    }
    let queries: Vec<Query> = data.iter().map(|r| Query::new(&r.id, &r.input)).collect();
    let preds = model.predict(&queries)?;
    let total: f64 = preds
        .iter()
        .zip(data)
        .map(|(p, r)| {
            let words: Vec<&str> = r.input.split_whitespace().collect();
            metric.score(&p.output, &r.target, &words).f1
        })
        .sum();
    Ok(total / data.len() as f64)
}

/// Epoch loop shared by the built-in learners.
///
/// `fit_epoch(e)` returns the model after epoch `e` (1-based) and whether it
/// changed since the previous epoch; unchanged models reuse the previous
/// fidelity.
pub(crate) fn run_epochs<M, F>(
    data: &[TrainRecord],
    stopping: &StoppingRule,
    metric: Metric,
    mut observer: Option<&mut dyn EpochObserver>,
    mut fit_epoch: F,
) -> Result<(Vec<f64>, Arc<M>)>
where
    M: Predictor + 'static,
    F: FnMut(usize) -> (Arc<M>, bool),
{
    stopping.validate()?;
    let mut history: Vec<f64> = Vec::new();
    let mut last: Option<Arc<M>> = None;
    for epoch in 1..=stopping.max_epochs {
        let (model, changed) = fit_epoch(epoch);
        let fidelity = match (changed, history.last()) {
            (false, Some(&f)) => f,
            _ => training_fidelity(model.as_ref(), data, metric)?,
        };
        history.push(fidelity);
        if let Some(obs) = observer.as_deref_mut() {
            obs.on_epoch(epoch, fidelity, model.as_ref())?;
        }
        last = Some(model);
        if stopping.should_stop(&history) {
            break;
        }
    }
    Ok((history, last.expect("max_epochs >= 1")))
}

/// Construct a trainable student from its spec.
pub fn build_student(spec: &BackendSpec) -> Result<Box<dyn Student>> {
    spec.validate()?;
    match spec.kind {
        BackendKind::TableLearner => Ok(Box::new(TableLearner::new(spec.clone()))),
        BackendKind::ContextTagger => Ok(Box::new(ContextTagger::from_spec(spec)?)),
        BackendKind::RemoteStudent => Ok(Box::new(RemoteStudent::from_spec(spec)?)),
        other => Err(Error::config(format!("{other} cannot be used as a student"))),
    }
}
