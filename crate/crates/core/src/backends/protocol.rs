//! JSON bodies for the chat-completions teacher endpoint and the
//! remote-student trainer.

use serde::{Deserialize, Serialize};

use super::StoppingRule;
use crate::error::{Error, Result};
use crate::parse_eval::Metric;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: String,
    pub content: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub model: String,
    pub messages: Vec<ChatMessage>,
    pub temperature: f64,
    pub max_tokens: usize,
}

impl ChatRequest {
    pub fn user(model: &str, prompt: &str, temperature: f64, max_tokens: usize) -> Self {
        ChatRequest {
            model: model.to_string(),
            messages: vec![ChatMessage {
                role: "user".into(),
                content: prompt.to_string(),
            }],
            temperature,
            max_tokens,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChoiceMessage {
    pub content: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatChoice {
    pub message: ChoiceMessage,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatResponse {
    pub choices: Vec<ChatChoice>,
}

impl ChatResponse {
    pub fn first_content(self) -> Result<String> {
        self.choices
            .into_iter()
            .next()
            .map(|c| c.message.content)
            .ok_or_else(|| Error::protocol("chat response has no choices"))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainPair {
    pub input: String,
    pub target: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hyperparameters {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub fidelity_delta: f64,
    pub patience: usize,
}

impl Default for Hyperparameters {
    fn default() -> Self {
        Hyperparameters::from_stopping(&StoppingRule::default())
    }
}

impl Hyperparameters {
    pub fn from_stopping(rule: &StoppingRule) -> Self {
        Hyperparameters {
            learning_rate: 3e-4,
            batch_size: 32,
            max_epochs: rule.max_epochs,
            fidelity_delta: rule.fidelity_delta,
            patience: rule.patience_epochs,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainRequest {
    pub model_id: String,
    pub records: Vec<TrainPair>,
    pub hyperparameters: Hyperparameters,
    pub fidelity_metric: Metric,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainResponse {
    pub model_id: String,
    pub fidelity_history: Vec<f64>,
}

impl TrainResponse {
    pub fn validate(&self, requested_id: &str, max_epochs: usize) -> Result<()> {
        if self.model_id != requested_id {
            return Err(Error::protocol(format!(
                "trainer answered for model `{}` instead of `{requested_id}`",
                self.model_id
            )));
        }
        if self.fidelity_history.is_empty() || self.fidelity_history.len() > max_epochs {
            return Err(Error::protocol(format!(
                "fidelity history has {} epochs, expected 1..={max_epochs}",
                self.fidelity_history.len()
            )));
        }
        if let Some(v) = self.fidelity_history.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::protocol(format!("fidelity value {v} is outside [0, 1]")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct JobAccepted {
    pub job: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum JobState {
    Queued,
    Running,
    Done,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JobStatus {
    pub state: JobState,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub result: Option<TrainResponse>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PredictRequest {
    pub model_id: String,
    pub inputs: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictResponse {
    pub model_id: String,
    pub outputs: Vec<String>,
    pub logprobs: Vec<f64>,
}

impl PredictResponse {
    pub fn validate(&self, n_inputs: usize) -> Result<()> {
        if self.outputs.len() != n_inputs || self.logprobs.len() != n_inputs {
            return Err(Error::protocol(format!(
                "predict returned {} outputs and {} log-probabilities for {n_inputs} inputs",
                self.outputs.len(),
                self.logprobs.len()
            )));
        }
        if let Some(lp) = self.logprobs.iter().find(|lp| !(**lp <= 0.0)) {
            return Err(Error::protocol(format!("log-probability {lp} is not <= 0")));
        }
        Ok(())
    }
}

/// Error body returned with 4xx/5xx statuses.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub error: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trace_id: Option<String>,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_hyperparameters() {
        let h = Hyperparameters::default();
        assert_eq!((h.learning_rate, h.batch_size, h.max_epochs, h.patience), (3e-4, 32, 21, 3));
    }

    #[test]
    fn predict_validation() {
        let ok = PredictResponse {
            model_id: "m".into(),
            outputs: vec!["a".into()],
            logprobs: vec![-0.5],
        };
        assert!(ok.validate(1).is_ok());
        assert!(ok.validate(2).is_err());
        let bad = PredictResponse {
            logprobs: vec![0.1],
            ..ok.clone()
        };
        assert!(bad.validate(1).is_err());
        let nan = PredictResponse {
            logprobs: vec![f64::NAN],
            ..ok
        };
        assert!(nan.validate(1).is_err());
    }

    #[test]
    fn train_validation() {
        let r = TrainResponse {
            model_id: "m".into(),
            fidelity_history: vec![0.5, 0.9],
        };
        assert!(r.validate("m", 21).is_ok());
        assert!(r.validate("other", 21).is_err());
        assert!(r.validate("m", 1).is_err());
        let empty = TrainResponse {
            fidelity_history: vec![],
            ..r
        };
        assert!(empty.validate("m", 21).is_err());
    }
}
