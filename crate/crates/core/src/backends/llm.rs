//! Chat-completions client and the prompted LLM teacher.

use std::thread;
use std::time::Duration;

use log::{debug, warn};
use rayon::prelude::*;
use reqwest::blocking::Client;
use reqwest::StatusCode;

use super::prompt::{build_prompt, demo_pairs, resolve_instruction};
use super::protocol::{ChatRequest, ChatResponse};
use super::{BackendKind, BackendSpec, Query, Teacher, TeacherOutput};
use crate::corpus::Example;
use crate::error::{Error, Result};
use crate::parse_eval::{deinterleave_tags, is_balanced, repair_parse, Metric};

#[derive(Debug, Clone, PartialEq)]
pub struct ChatClientConfig {
    pub endpoint: String,
    pub model: String,
    pub api_key: Option<String>,
    pub temperature: f64,
    /// Generation budget per input word.
    pub max_tokens_per_word: usize,
    pub max_retries: usize,
    pub backoff_base: Duration,
    pub backoff_cap: Duration,
    pub timeout: Duration,
    pub max_in_flight: usize,
}

impl ChatClientConfig {
    pub fn new(endpoint: impl Into<String>) -> Self {
        ChatClientConfig {
            endpoint: endpoint.into(),
            model: "gpt-3.5-turbo".into(),
            api_key: None,
            temperature: 0.0,
            max_tokens_per_word: 4,
            max_retries: 5,
            backoff_base: Duration::from_secs(1),
            backoff_cap: Duration::from_secs(60),
            timeout: Duration::from_secs(60),
            max_in_flight: 4,
        }
    }

    /// The API key is read from the environment variable named by
    /// `api_key_env` (default `OPENAI_API_KEY`); the key itself never appears in the `BackendSpec`.
    pub fn from_spec(spec: &BackendSpec) -> Result<Self> {
        spec.validate()?;
        let endpoint = spec.endpoint.clone().expect("validated endpoint");
        let d = ChatClientConfig::new(endpoint);
        let key_var = spec.param_str("api_key_env")?.unwrap_or("OPENAI_API_KEY");
        let ms = |key: &str, default: Duration| -> Result<Duration> {
            Ok(Duration::from_millis(spec.param_u64(key, default.as_millis() as u64)?))
        };
        let cfg = ChatClientConfig {
            model: spec.param_str("model")?.unwrap_or(&d.model).to_string(),
            api_key: std::env::var(key_var).ok().filter(|k| !k.is_empty()),
            temperature: spec.param_f64("temperature", d.temperature)?,
            max_tokens_per_word: spec.param_usize("max_tokens_per_word", d.max_tokens_per_word)?,
            max_retries: spec.param_usize("max_retries", d.max_retries)?,
            backoff_base: ms("backoff_base_ms", d.backoff_base)?,
            backoff_cap: ms("backoff_cap_ms", d.backoff_cap)?,
            timeout: ms("timeout_ms", d.timeout)?,
            max_in_flight: spec.param_usize("max_in_flight", d.max_in_flight)?,
            endpoint: d.endpoint,
        };
        if cfg.max_in_flight == 0 {
            return Err(Error::config("max_in_flight must be at least 1"));
        }
        Ok(cfg)
    }

    fn delay(&self, attempt: usize) -> Duration {
        let factor = 1u32.checked_shl(attempt.min(31) as u32).unwrap_or(u32::MAX);
        self.backoff_base.saturating_mul(factor).min(self.backoff_cap)
    }
}

/// One completion attempt sequence.
#[derive(Debug, Clone, PartialEq)]
pub enum Completion {
    Text { content: String, retries: usize },
    Failed { reason: String, retries: usize },
}

pub struct ChatClient {
    config: ChatClientConfig,
    http: Client,
}

enum Attempt {
    Done(String),
    Transient(String),
    Permanent(String),
}

impl ChatClient {
    pub fn new(config: ChatClientConfig) -> Result<Self> {
        let http = Client::builder()
            .timeout(config.timeout)
            .build()
            .map_err(|e| Error::backend(format!("cannot build HTTP client: {e}")))?;
        Ok(ChatClient { config, http })
    }

    pub fn config(&self) -> &ChatClientConfig {
        &self.config
    }

    fn attempt(&self, body: &ChatRequest) -> Result<Attempt> {
        let mut req = self.http.post(&self.config.endpoint).json(body);
        if let Some(key) = &self.config.api_key {
            req = req.bearer_auth(key);
        }
        let resp = match req.send() {
            Ok(r) => r,
            Err(e) => return Ok(Attempt::Transient(format!("request failed: {e}"))),
        };
        let status = resp.status();
        let text = match resp.text() {
            Ok(t) => t,
            Err(e) => return Ok(Attempt::Transient(format!("reading response failed: {e}"))),
        };
        if status.is_success() {
            let parsed: ChatResponse = serde_json::from_str(&text)
                .map_err(|e| Error::protocol(format!("malformed chat response: {e}")))?;
            return Ok(Attempt::Done(parsed.first_content()?));
        }
        let reason = format!("HTTP {status}: {}", text.chars().take(200).collect::<String>());
        if status == StatusCode::TOO_MANY_REQUESTS || status.is_server_error() {
            Ok(Attempt::Transient(reason))
        } else {
            Ok(Attempt::Permanent(reason))
        }
    }

    /// Request one completion, retrying transient failures with capped
    /// exponential backoff. Only malformed successful responses are errors.
    pub fn complete(&self, prompt: &str, max_tokens: usize) -> Result<Completion> {
        let body = ChatRequest::user(&self.config.model, prompt, self.config.temperature, max_tokens);
        let mut retries = 0;
        loop {
            match self.attempt(&body)? {
                Attempt::Done(content) => return Ok(Completion::Text { content, retries }),
                Attempt::Permanent(reason) => return Ok(Completion::Failed { reason, retries }),
                Attempt::Transient(reason) => {
                    if retries >= self.config.max_retries {
                        warn!("giving up after {retries} retries: {reason}");
                        return Ok(Completion::Failed { reason, retries });
                    }
                    let wait = self.config.delay(retries);
                    debug!("transient failure ({reason}), retrying in {wait:?}");
                    thread::sleep(wait);
                    retries += 1;
                }
            }
        }
    }

    /// Complete every prompt with at most `max_in_flight` concurrent
    /// requests. Results are in prompt order.
    pub fn complete_all(&self, prompts: &[(String, usize)]) -> Result<Vec<Completion>> {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(self.config.max_in_flight)
            .build()
            .map_err(|e| Error::backend(format!("cannot start request pool: {e}")))?;
        pool.install(|| {
            prompts
                .par_iter()
                .map(|(p, max_tokens)| self.complete(p, *max_tokens))
                .collect()
        })
    }
}

/// Turn a raw generation into a task output.
///
/// Text after a hallucinated follow-up `Input:` is dropped. Trees are
/// balanced and re-aligned with the input words; interleaved slot outputs
/// are de-interleaved. Returns the output and whether any repair happened,
/// or `None` for an empty generation.
pub fn postprocess_generation<W: AsRef<str>>(raw: &str, words: &[W], metric: Metric) -> Option<(String, bool)> {
    let text = raw.split("\nInput:").next().unwrap_or("").trim();
    let text = text.strip_prefix("Output:").unwrap_or(text).trim();
    if text.is_empty() {
        return None;
    }
    Some(match metric {
        Metric::BracketF1 => {
            let (tree, seg) = repair_parse(text, words);
            (tree.render(), !is_balanced(text) || !seg.is_clean())
        }
        Metric::ChunkF1 | Metric::TagAccuracy => {
            let d = deinterleave_tags(text, words);
            let clean = d.is_clean();
            (d.tags.render(), !clean)
        }
        Metric::Exact => (text.to_string(), false),
    })
}

pub struct LlmTeacher {
    id: String,
    client: ChatClient,
    instruction: Option<String>,
    demos: Vec<(String, String)>,
    metric: Metric,
}

impl LlmTeacher {
    pub fn new(
        id: impl Into<String>,
        client: ChatClient,
        instruction: Option<String>,
        demos: Vec<(String, String)>,
        metric: Metric,
    ) -> Result<Self> {
        if demos.is_empty() {
            return Err(Error::config("the LLM teacher needs at least one demonstration"));
        }
        Ok(LlmTeacher {
            id: id.into(),
            client,
            instruction,
            demos,
            metric,
        })
    }

    /// `instruction` may be `atis`, `snips` or literal text.
    pub fn from_spec(id: impl Into<String>, spec: &BackendSpec, metric: Metric, demos: &[Example]) -> Result<Self> {
        if spec.kind != BackendKind::LlmTeacher {
            return Err(Error::config(format!("expected an llm-teacher spec, got {}", spec.kind)));
        }
        let client = ChatClient::new(ChatClientConfig::from_spec(spec)?)?;
        let instruction = spec.param_str("instruction")?.map(|s| resolve_instruction(s).to_string());
        LlmTeacher::new(id, client, instruction, demo_pairs(demos, metric)?, metric)
    }

    pub fn prompt_for(&self, input: &str) -> Result<String> {
        build_prompt(self.instruction.as_deref(), &self.demos, input)
    }
}

impl Teacher for LlmTeacher {
    fn id(&self) -> &str {
        &self.id
    }

    fn label(&self, queries: &[Query]) -> Result<Vec<TeacherOutput>> {
        let per_word = self.client.config().max_tokens_per_word;
        let prompts = queries
            .iter()
            .map(|q| {
                let n = q.input.split_whitespace().count().max(1);
                Ok((self.prompt_for(&q.input)?, per_word * n))
            })
            .collect::<Result<Vec<_>>>()?;
        let completions = self.client.complete_all(&prompts)?;
        Ok(queries
            .iter()
            .zip(completions)
            .map(|(q, c)| match c {
                Completion::Text { content, retries } => {
                    let words: Vec<&str> = q.input.split_whitespace().collect();
                    match postprocess_generation(&content, &words, self.metric) {
                        Some((output, repaired)) => TeacherOutput::Labeled {
                            output,
                            raw: content,
                            retries,
                            repaired,
                        },
                        None => TeacherOutput::Failed {
                            reason: "empty generation".into(),
                            retries,
                        },
                    }
                }
                Completion::Failed { reason, retries } => TeacherOutput::Failed { reason, retries },
            })
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn backoff_is_capped() {
        let mut c = ChatClientConfig::new("http://x");
        c.backoff_base = Duration::from_millis(500);
        assert_eq!(c.delay(0), Duration::from_millis(500));
        assert_eq!(c.delay(3), Duration::from_millis(4000));
        assert_eq!(c.delay(40), Duration::from_secs(60));
    }

    #[test]
    fn postprocess_slots() {
        let words = ["list", "the", "fares"];
        let (out, repaired) = postprocess_generation(" list O the O fares O\nInput:more", &words, Metric::ChunkF1).unwrap();
        assert_eq!(out, "O O O");
        assert!(!repaired);
        let (out, repaired) = postprocess_generation("list O fares B-x", &words, Metric::ChunkF1).unwrap();
        assert_eq!(out, "O O B-x");
        assert!(repaired);
    }

    #[test]
    fn postprocess_trees() {
        let words = ["a", "b"];
        let (out, repaired) = postprocess_generation("( ( a ) ( b )", &words, Metric::BracketF1).unwrap();
        assert_eq!(out, "( ( a ) ( b ) )");
        assert!(repaired);
        assert!(postprocess_generation("  \n", &words, Metric::BracketF1).is_none());
    }

    #[test]
    fn spec_reads_parameters() {
        let spec = BackendSpec::new(BackendKind::LlmTeacher)
            .with_endpoint("http://localhost:1/v1/chat/completions")
            .with_param("max_retries", 2)
            .with_param("api_key_env", "MCKD_TEST_UNSET_KEY_VAR");
        let c = ChatClientConfig::from_spec(&spec).unwrap();
        assert_eq!(c.max_retries, 2);
        assert_eq!(c.api_key, None);
        assert_eq!(c.temperature, 0.0);
    }
}
