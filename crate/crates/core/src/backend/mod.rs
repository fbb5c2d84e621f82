//! Generation backends.
//!
//! A backend turns a context into sampled continuations carrying per-token
//! log-probabilities and, on request, the hidden vector at the sequence-final
//! position of a chosen layer. Two implementations ship with the crate: an
//! HTTP client for any server speaking the JSON protocol below, and a
//! deterministic scripted mock.
//!
//! Wire protocol (JSON over HTTP):
//!
//! * `POST /generate` with a [`GenerationRequest`] body, answered by
//!   `{"samples": [GenerationSample, ...]}`.
//! * `GET /health` answered by a [`BackendHealth`] object.

mod http;
mod mock;

pub use http::HttpBackend;
pub use mock::{synthesize_hidden_set, MatchRule, MockBackend, MockResponse, MockSample, MockScript};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::{EngineConfig, LayerSelector};

/// Temperature sent for greedy decoding. The protocol requires `temperature > 0`.
pub const GREEDY_TEMPERATURE: f64 = 1e-5;

/// Positive log-probabilities up to this magnitude are rounding noise and are
/// clamped to zero during validation.
const LOGPROB_SLACK: f64 = 1e-6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BackendError {
    #[error("transport failure: {0}")]
    Transport(String),
    #[error("backend returned HTTP {status}: {body}")]
    Http { status: u16, body: String },
    #[error("backend protocol violation: {0}")]
    Contract(String),
    #[error("invalid generation request: {0}")]
    InvalidRequest(String),
    #[error("mock script: {0}")]
    Script(String),
}

impl BackendError {
    pub fn is_retryable(&self) -> bool {
        match self {
            BackendError::Transport(_) => true,
            BackendError::Http { status, .. } => *status >= 500 || *status == 429,
            _ => false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenInfo {
    pub text: String,
    /// Natural log of the chosen token's probability.
    pub logprob: f64,
    /// Log-sum-exp of the full logit vector at this position.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lse: Option<f64>,
}

impl TokenInfo {
    pub fn new(text: impl Into<String>, logprob: f64) -> Self {
        TokenInfo {
            text: text.into(),
            logprob,
            lse: None,
        }
    }

    pub fn with_lse(mut self, lse: f64) -> Self {
        self.lse = Some(lse);
        self
    }

    pub fn prob(&self) -> f64 {
        self.logprob.exp()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationSample {
    pub text: String,
    pub tokens: Vec<TokenInfo>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eos_hidden: Option<Vec<f64>>,
}

impl GenerationSample {
    pub fn from_tokens(tokens: Vec<TokenInfo>, eos_hidden: Option<Vec<f64>>) -> Self {
        let text = tokens.iter().map(|t| t.text.as_str()).collect();
        GenerationSample {
            text,
            tokens,
            eos_hidden,
        }
    }

    /// Splits `text` into word tokens, each carrying its leading whitespace,
    /// all with the same log-probability.
    pub fn from_text(text: &str, logprob: f64) -> Self {
        let tokens = split_words(text)
            .into_iter()
            .map(|w| TokenInfo::new(w, logprob))
            .collect();
        GenerationSample::from_tokens(tokens, None)
    }

    /// Cuts the sample right after the earliest occurrence of any stop
    /// sequence. The stop sequence itself is kept.
    pub fn truncate_at_stop(&self, stops: &[String]) -> GenerationSample {
        let cut = stops
            .iter()
            .filter(|s| !s.is_empty())
            .filter_map(|s| self.text.find(s.as_str()).map(|i| i + s.len()))
            .min();
        let Some(cut) = cut else {
            return self.clone();
        };
        let mut tokens = Vec::new();
        let mut pos = 0;
        for t in &self.tokens {
            if pos >= cut {
                break;
            }
            let end = pos + t.text.len();
            if end <= cut {
                tokens.push(t.clone());
            } else {
                let mut partial = t.clone();
                partial.text.truncate(cut - pos);
                tokens.push(partial);
            }
            pos = end;
        }
        GenerationSample {
            text: self.text[..cut].to_string(),
            tokens,
            eos_hidden: self.eos_hidden.clone(),
        }
    }
}

/// Word-level split that keeps whitespace attached to the following word, so
/// concatenating the pieces restores the input.
pub fn split_words(text: &str) -> Vec<String> {
    let mut out: Vec<String> = Vec::new();
    let mut cur = String::new();
    let mut in_word = false;
    for ch in text.chars() {
        if ch.is_whitespace() {
            if in_word {
                out.push(std::mem::take(&mut cur));
                in_word = false;
            }
            cur.push(ch);
        } else {
            in_word = true;
            cur.push(ch);
        }
    }
    if !cur.is_empty() {
        out.push(cur);
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationRequest {
    pub context: String,
    pub num_samples: usize,
    pub max_new_tokens: usize,
    #[serde(default)]
    pub stop_sequences: Vec<String>,
    pub temperature: f64,
    #[serde(default)]
    pub layer_selector: LayerSelector,
    #[serde(default)]
    pub return_hidden: bool,
    #[serde(default)]
    pub return_lse: bool,
}

impl GenerationRequest {
    /// `k`-sample request for uncertainty estimation at the configured settings.
    pub fn sampling(context: impl Into<String>, stop: &[&str], config: &EngineConfig) -> Self {
        GenerationRequest {
            context: context.into(),
            num_samples: config.num_samples,
            max_new_tokens: config.max_new_tokens,
            stop_sequences: stop.iter().map(|s| s.to_string()).collect(),
            temperature: config.sampling_temperature,
            layer_selector: config.layer_selector,
            return_hidden: config.estimator == crate::config::EstimatorKind::GramLogdet,
            return_lse: config.estimator == crate::config::EstimatorKind::Energy,
        }
    }

    pub fn greedy(context: impl Into<String>, stop: &[String], max_new_tokens: usize) -> Self {
        GenerationRequest {
            context: context.into(),
            num_samples: 1,
            max_new_tokens,
            stop_sequences: stop.to_vec(),
            temperature: GREEDY_TEMPERATURE,
            layer_selector: LayerSelector::Middle,
            return_hidden: false,
            return_lse: false,
        }
    }

    pub fn is_greedy(&self) -> bool {
        self.num_samples == 1 && self.temperature <= GREEDY_TEMPERATURE
    }

    pub fn validate(&self) -> Result<(), BackendError> {
        if self.context.is_empty() {
            return Err(BackendError::InvalidRequest("context is empty".into()));
        }
        if self.num_samples < 1 {
            return Err(BackendError::InvalidRequest("num_samples must be at least 1".into()));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(BackendError::InvalidRequest(format!(
                "temperature must be positive, got {}",
                self.temperature
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerateResponse {
    pub samples: Vec<GenerationSample>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackendHealth {
    pub model_id: String,
    pub hidden_dim: usize,
    pub num_layers: usize,
}

pub trait Backend: Send + Sync {
    /// Returns exactly `request.num_samples` samples.
    fn generate(&self, request: &GenerationRequest) -> Result<Vec<GenerationSample>, BackendError>;

    fn health(&self) -> Result<BackendHealth, BackendError>;

    /// Single near-greedy continuation.
    fn greedy_generate(
        &self,
        context: &str,
        stop: &[String],
        max_new_tokens: usize,
    ) -> Result<GenerationSample, BackendError> {
        let request = GenerationRequest::greedy(context, stop, max_new_tokens);
        let mut samples = self.generate(&request)?;
        samples
            .pop()
            .ok_or_else(|| BackendError::Contract("greedy request returned no sample".into()))
    }
}

impl<B: Backend + ?Sized> Backend for &B {
    fn generate(&self, request: &GenerationRequest) -> Result<Vec<GenerationSample>, BackendError> {
        (**self).generate(request)
    }

    fn health(&self) -> Result<BackendHealth, BackendError> {
        (**self).health()
    }
}

impl<B: Backend + ?Sized> Backend for std::sync::Arc<B> {
    fn generate(&self, request: &GenerationRequest) -> Result<Vec<GenerationSample>, BackendError> {
        (**self).generate(request)
    }

    fn health(&self) -> Result<BackendHealth, BackendError> {
        (**self).health()
    }
}

/// Checks a backend answer against the request: sample count, token text
/// consistency, log-probability range and hidden-vector shape.
pub fn validate_samples(
    request: &GenerationRequest,
    mut samples: Vec<GenerationSample>,
) -> Result<Vec<GenerationSample>, BackendError> {
    if samples.len() != request.num_samples {
        return Err(BackendError::Contract(format!(
            "requested {} samples, received {}",
            request.num_samples,
            samples.len()
        )));
    }
    let mut dim = None;
    for (i, s) in samples.iter_mut().enumerate() {
        let joined: String = s.tokens.iter().map(|t| t.text.as_str()).collect();
        if joined != s.text {
            return Err(BackendError::Contract(format!(
                "sample {i}: text does not equal the concatenated token texts"
            )));
        }
        for (pos, t) in s.tokens.iter_mut().enumerate() {
            if !t.logprob.is_finite() || t.logprob > LOGPROB_SLACK {
                return Err(BackendError::Contract(format!(
                    "sample {i} token {pos}: logprob {} outside (-inf, 0]",
                    t.logprob
                )));
            }
            t.logprob = t.logprob.min(0.0);
            if t.lse.is_some_and(|l| !l.is_finite()) {
                return Err(BackendError::Contract(format!(
                    "sample {i} token {pos}: non-finite lse"
                )));
            }
        }
        if request.return_hidden {
            let h = s.eos_hidden.as_ref().ok_or_else(|| {
                BackendError::Contract(format!("sample {i}: hidden vector requested but missing"))
            })?;
            if h.is_empty() || h.iter().any(|x| !x.is_finite()) {
                return Err(BackendError::Contract(format!(
                    "sample {i}: hidden vector is empty or non-finite"
                )));
            }
            match dim {
                None => dim = Some(h.len()),
                Some(d) if d != h.len() => {
                    return Err(BackendError::Contract(format!(
                        "sample {i}: hidden dimension {} differs from {d}",
                        h.len()
                    )))
                }
                _ => {}
            }
        }
    }
    Ok(samples)
}
