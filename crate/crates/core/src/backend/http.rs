use std::thread;
use std::time::Duration;

use log::warn;
use reqwest::blocking::Client;

use super::{
    validate_samples, Backend, BackendError, BackendHealth, GenerateResponse, GenerationRequest,
    GenerationSample,
};

const BACKOFF_BASE_MS: u64 = 200;

/// Blocking JSON client for a generation server. Cheap to share across
/// threads; requests from concurrent question runs proceed in parallel.
#[derive(Debug, Clone)]
pub struct HttpBackend {
    client: Client,
    base_url: String,
    retries: usize,
}

impl HttpBackend {
    pub fn new(base_url: impl Into<String>, timeout: Duration, retries: usize) -> Result<Self, BackendError> {
        let client = Client::builder()
            .timeout(timeout)
            .build()
            .map_err(|e| BackendError::Transport(e.to_string()))?;
        Ok(HttpBackend {
            client,
            base_url: base_url.into().trim_end_matches('/').to_string(),
            retries,
        })
    }

    pub fn base_url(&self) -> &str {
        &self.base_url
    }

    fn with_retries<T>(&self, mut call: impl FnMut() -> Result<T, BackendError>) -> Result<T, BackendError> {
        let mut attempt = 0;
        loop {
            match call() {
                Err(e) if e.is_retryable() && attempt < self.retries => {
                    let wait = BACKOFF_BASE_MS << attempt.min(6);
                    warn!("backend call failed ({e}); retry {} in {wait} ms", attempt + 1);
                    thread::sleep(Duration::from_millis(wait));
                    attempt += 1;
                }
                other => return other,
            }
        }
    }

    fn check_status(resp: reqwest::blocking::Response) -> Result<reqwest::blocking::Response, BackendError> {
        let status = resp.status();
        if status.is_success() {
            return Ok(resp);
        }
        let body = resp.text().unwrap_or_default();
        Err(BackendError::Http {
            status: status.as_u16(),
            body,
        })
    }
}

fn transport(e: reqwest::Error) -> BackendError {
    BackendError::Transport(e.to_string())
}

impl Backend for HttpBackend {
    fn generate(&self, request: &GenerationRequest) -> Result<Vec<GenerationSample>, BackendError> {
        request.validate()?;
        let url = format!("{}/generate", self.base_url);
        let body: GenerateResponse = self.with_retries(|| {
            let resp = self.client.post(&url).json(request).send().map_err(transport)?;
            let text = Self::check_status(resp)?.text().map_err(transport)?;
            serde_json::from_str(&text)
                .map_err(|e| BackendError::Contract(format!("malformed /generate response: {e}")))
        })?;
        validate_samples(request, body.samples)
    }

    fn health(&self) -> Result<BackendHealth, BackendError> {
        let url = format!("{}/health", self.base_url);
        self.with_retries(|| {
            let resp = self.client.get(&url).send().map_err(transport)?;
            let text = Self::check_status(resp)?.text().map_err(transport)?;
            serde_json::from_str(&text)
                .map_err(|e| BackendError::Contract(format!("malformed /health response: {e}")))
        })
    }
}
