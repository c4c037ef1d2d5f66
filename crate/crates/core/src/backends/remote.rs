//! Client for students trained and served by a remote trainer.

use std::collections::BTreeSet;
use std::sync::Arc;
use std::thread;
use std::time::{Duration, Instant};

use log::warn;
use reqwest::blocking::{Client, Response};
use reqwest::StatusCode;
use serde::de::DeserializeOwned;

use super::protocol::{
    ErrorBody, Hyperparameters, JobAccepted, JobState, JobStatus, PredictRequest, PredictResponse, TrainPair,
    TrainRequest, TrainResponse,
};
use super::{BackendKind, BackendSpec, EpochObserver, ModelHandle, Prediction, Predictor, Query, StoppingRule, Student, TrainRecord};
use crate::error::{Error, Result};
use crate::parse_eval::Metric;

fn join(endpoint: &str, path: &str) -> String {
    format!("{}/{}", endpoint.trim_end_matches('/'), path)
}

fn error_text(resp: Response) -> String {
    let status = resp.status();
    let body = resp.text().unwrap_or_default();
    match serde_json::from_str::<ErrorBody>(&body) {
        Ok(ErrorBody {
            error,
            trace_id: Some(t),
        }) => format!("HTTP {status}: {error} (trace {t})"),
        Ok(ErrorBody { error, .. }) => format!("HTTP {status}: {error}"),
        Err(_) => format!("HTTP {status}: {}", body.chars().take(200).collect::<String>()),
    }
}

fn decode<T: DeserializeOwned>(resp: Response, what: &str) -> Result<T> {
    let text = resp
        .text()
        .map_err(|e| Error::backend(format!("reading {what} response: {e}")))?;
    serde_json::from_str(&text).map_err(|e| Error::protocol(format!("malformed {what} response: {e}")))
}

pub struct RemoteStudent {
    spec: BackendSpec,
    endpoint: String,
    http: Client,
    learning_rate: f64,
    batch_size: usize,
    model_prefix: String,
    poll_interval: Duration,
    poll_timeout: Duration,
    predict_batch: usize,
}

impl RemoteStudent {
    pub fn from_spec(spec: &BackendSpec) -> Result<Self> {
        if spec.kind != BackendKind::RemoteStudent {
            return Err(Error::config(format!("expected a remote-student spec, got {}", spec.kind)));
        }
        spec.validate()?;
        let d = Hyperparameters::default();
        let http = Client::builder()
            .timeout(Duration::from_millis(spec.param_u64("timeout_ms", 600_000)?))
            .build()
            .map_err(|e| Error::backend(format!("cannot build HTTP client: {e}")))?;
        Ok(RemoteStudent {
            spec: spec.clone(),
            endpoint: spec.endpoint.clone().expect("validated endpoint"),
            http,
            learning_rate: spec.param_f64("learning_rate", d.learning_rate)?,
            batch_size: spec.param_usize("batch_size", d.batch_size)?,
            model_prefix: spec.param_str("model_prefix")?.unwrap_or("").to_string(),
            poll_interval: Duration::from_millis(spec.param_u64("poll_interval_ms", 1000)?),
            poll_timeout: Duration::from_millis(spec.param_u64("poll_timeout_ms", 86_400_000)?),
            predict_batch: spec.param_usize("predict_batch", 256)?.max(1),
        })
    }

    fn poll(&self, job: &str) -> Result<TrainResponse> {
        let started = Instant::now();
        loop {
            let resp = self
                .http
                .get(join(&self.endpoint, &format!("status/{job}")))
                .send()
                .map_err(|e| Error::backend(format!("polling job `{job}`: {e}")))?;
            if !resp.status().is_success() {
                return Err(Error::backend(format!("polling job `{job}`: {}", error_text(resp))));
            }
            let status: JobStatus = decode(resp, "status")?;
            match status.state {
                JobState::Done => {
                    return status
                        .result
                        .ok_or_else(|| Error::protocol(format!("job `{job}` finished without a result")))
                }
                JobState::Failed => {
                    return Err(Error::backend(format!(
                        "training job `{job}` failed: {}",
                        status.error.unwrap_or_else(|| "no reason given".into())
                    )))
                }
                JobState::Queued | JobState::Running => {
                    if started.elapsed() > self.poll_timeout {
                        return Err(Error::backend(format!("training job `{job}` timed out")));
                    }
                    thread::sleep(self.poll_interval);
                }
            }
        }
    }
}

impl Student for RemoteStudent {
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
        stopping.validate()?;
        if data.is_empty() {
            return Err(Error::validation("cannot train on zero examples"));
        }
        if observer.is_some() {
            warn!("remote students report no per-epoch snapshots; only the final model is observable");
        }
        let remote_id = format!("{}{model_id}", self.model_prefix);
        let body = TrainRequest {
            model_id: remote_id.clone(),
            records: data
                .iter()
                .map(|r| TrainPair {
                    input: r.input.clone(),
                    target: r.target.clone(),
                })
                .collect(),
            hyperparameters: Hyperparameters {
                learning_rate: self.learning_rate,
                batch_size: self.batch_size,
                ..Hyperparameters::from_stopping(stopping)
            },
            fidelity_metric: metric,
        };
        let resp = self
            .http
            .post(join(&self.endpoint, "train"))
            .json(&body)
            .send()
            .map_err(|e| Error::backend(format!("train request for `{remote_id}`: {e}")))?;
        let result = match resp.status() {
            StatusCode::OK => decode::<TrainResponse>(resp, "train")?,
            StatusCode::ACCEPTED => {
                let job: JobAccepted = decode(resp, "train")?;
                self.poll(&job.job)?
            }
            StatusCode::CONFLICT => {
                return Err(Error::backend(format!(
                    "model id `{remote_id}` already exists on the trainer: {}",
                    error_text(resp)
                )))
            }
            _ => return Err(Error::backend(format!("training `{remote_id}` failed: {}", error_text(resp)))),
        };
        result.validate(&remote_id, stopping.max_epochs)?;
        let predictor = RemotePredictor {
            endpoint: self.endpoint.clone(),
            model_id: remote_id,
            http: self.http.clone(),
            batch: self.predict_batch,
        };
        let manifest: BTreeSet<String> = data.iter().map(|r| r.id.clone()).collect();
        Ok(ModelHandle::new(
            self.spec.clone(),
            model_id,
            result.fidelity_history,
            manifest,
            Arc::new(predictor),
        ))
    }

    fn supports_epoch_callbacks(&self) -> bool {
        false
    }
}

/// Predictions from a model that lives on the trainer.
pub struct RemotePredictor {
    endpoint: String,
    model_id: String,
    http: Client,
    batch: usize,
}

impl RemotePredictor {
    pub fn new(endpoint: impl Into<String>, model_id: impl Into<String>) -> Result<Self> {
        let http = Client::builder()
            .build()
            .map_err(|e| Error::backend(format!("cannot build HTTP client: {e}")))?;
        Ok(RemotePredictor {
            endpoint: endpoint.into(),
            model_id: model_id.into(),
            http,
            batch: 256,
        })
    }

    fn predict_chunk(&self, queries: &[Query]) -> Result<Vec<Prediction>> {
        let body = PredictRequest {
            model_id: self.model_id.clone(),
            inputs: queries.iter().map(|q| q.input.clone()).collect(),
        };
        let resp = self
            .http
            .post(join(&self.endpoint, "predict"))
            .json(&body)
            .send()
            .map_err(|e| Error::backend(format!("predict request for `{}`: {e}", self.model_id)))?;
        match resp.status() {
            StatusCode::OK => {}
            StatusCode::NOT_FOUND => {
                return Err(Error::backend(format!(
                    "trainer does not know model `{}`: {}",
                    self.model_id,
                    error_text(resp)
                )))
            }
            _ => return Err(Error::backend(format!("predict for `{}` failed: {}", self.model_id, error_text(resp)))),
        }
        let out: PredictResponse = decode(resp, "predict")?;
        out.validate(queries.len())?;
        Ok(out
            .outputs
            .into_iter()
            .zip(out.logprobs)
            .map(|(output, lp)| Prediction {
                output,
                confidence: Some(lp),
            })
            .collect())
    }
}

impl Predictor for RemotePredictor {
    fn predict(&self, queries: &[Query]) -> Result<Vec<Prediction>> {
        let mut out = Vec::with_capacity(queries.len());
        for chunk in queries.chunks(self.batch) {
            out.extend(self.predict_chunk(chunk)?);
        }
        Ok(out)
    }

    fn has_confidence(&self) -> bool {
        true
    }
}
