//! Deterministic scripted backend.
//!
//! A script is an ordered list of responses. Each request is answered by the
//! first unconsumed response whose match rule accepts it; non-persistent
//! responses are consumed on use. A response may pin a target Gram score, in
//! which case hidden vectors reaching that score are synthesized on demand.

use std::collections::HashMap;
use std::path::Path;
use std::sync::{Mutex, OnceLock};

use serde::{Deserialize, Serialize};

use super::{
    split_words, validate_samples, Backend, BackendError, BackendHealth, GenerationRequest,
    GenerationSample, TokenInfo,
};
use crate::trace::TraceEvent;
use crate::uncertainty::{gram_logdet, HiddenSampleSet};

const DEFAULT_HIDDEN_DIM: usize = 64;
const DEFAULT_NUM_LAYERS: usize = 32;
const DEFAULT_ALPHA: f64 = 1e-3;
const SYNTH_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MatchRule {
    /// Every listed substring must occur in the context.
    pub contains: Vec<String>,
    /// No listed substring may occur in the context.
    pub not_contains: Vec<String>,
    /// Context must equal this string.
    pub exact: Option<String>,
    /// Restrict to greedy (`true`) or sampling (`false`) requests.
    pub greedy: Option<bool>,
}

impl MatchRule {
    pub fn contains(s: impl Into<String>) -> Self {
        MatchRule {
            contains: vec![s.into()],
            ..MatchRule::default()
        }
    }

    pub fn and_contains(mut self, s: impl Into<String>) -> Self {
        self.contains.push(s.into());
        self
    }

    pub fn and_not(mut self, s: impl Into<String>) -> Self {
        self.not_contains.push(s.into());
        self
    }

    pub fn greedy(mut self, greedy: bool) -> Self {
        self.greedy = Some(greedy);
        self
    }

    pub fn matches(&self, request: &GenerationRequest) -> bool {
        let ctx = request.context.as_str();
        self.exact.as_deref().is_none_or(|e| e == ctx)
            && self.greedy.is_none_or(|g| g == request.is_greedy())
            && self.contains.iter().all(|s| ctx.contains(s.as_str()))
            && !self.not_contains.iter().any(|s| ctx.contains(s.as_str()))
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MockSample {
    pub text: String,
    /// Explicit tokens. Takes precedence over `text`.
    pub tokens: Option<Vec<TokenInfo>>,
    /// Log-probability applied to every word token when `tokens` is absent.
    pub logprob: Option<f64>,
    /// Per-word log-probabilities aligned with the whitespace split of `text`.
    pub logprobs: Option<Vec<f64>>,
    pub eos_hidden: Option<Vec<f64>>,
}

impl MockSample {
    pub fn text(text: impl Into<String>) -> Self {
        MockSample {
            text: text.into(),
            ..MockSample::default()
        }
    }

    pub fn with_logprobs(mut self, logprobs: Vec<f64>) -> Self {
        self.logprobs = Some(logprobs);
        self
    }

    fn to_sample(&self) -> Result<GenerationSample, BackendError> {
        let mut sample = match &self.tokens {
            Some(tokens) => GenerationSample::from_tokens(tokens.clone(), None),
            None => {
                let words = split_words(&self.text);
                let lps = match &self.logprobs {
                    Some(lps) if lps.len() != words.len() => {
                        return Err(BackendError::Script(format!(
                            "{} logprobs for {} words in {:?}",
                            lps.len(),
                            words.len(),
                            self.text
                        )))
                    }
                    Some(lps) => lps.clone(),
                    None => vec![self.logprob.unwrap_or(0.0); words.len()],
                };
                let tokens = words
                    .into_iter()
                    .zip(lps)
                    .map(|(w, lp)| TokenInfo::new(w, lp))
                    .collect();
                GenerationSample::from_tokens(tokens, None)
            }
        };
        sample.eos_hidden = self.eos_hidden.clone();
        Ok(sample)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MockResponse {
    pub when: MatchRule,
    /// Persistent responses are never consumed.
    pub persistent: bool,
    /// Cycled when the request asks for more samples than listed.
    pub samples: Vec<MockSample>,
    /// Target Gram score for synthesized hidden vectors.
    pub score: Option<f64>,
    /// Replay recorded samples untouched: no stop truncation, no cycling.
    pub verbatim: bool,
}

impl MockResponse {
    pub fn new(when: MatchRule, samples: Vec<MockSample>) -> Self {
        MockResponse {
            when,
            samples,
            ..MockResponse::default()
        }
    }

    /// One sample text repeated for every requested sample.
    pub fn reply(when: MatchRule, text: impl Into<String>) -> Self {
        MockResponse::new(when, vec![MockSample::text(text)])
    }

    pub fn with_score(mut self, score: f64) -> Self {
        self.score = Some(score);
        self
    }

    pub fn persistent(mut self) -> Self {
        self.persistent = true;
        self
    }
}

/// On-disk script: JSON object with optional `hidden_dim`, `alpha` and
/// `model_id`, plus the ordered `responses`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MockScript {
    pub hidden_dim: usize,
    pub alpha: f64,
    pub model_id: String,
    pub responses: Vec<MockResponse>,
}

impl Default for MockScript {
    fn default() -> Self {
        MockScript {
            hidden_dim: DEFAULT_HIDDEN_DIM,
            alpha: DEFAULT_ALPHA,
            model_id: "mock".into(),
            responses: Vec::new(),
        }
    }
}

struct Slot {
    response: MockResponse,
    consumed: bool,
}

pub struct MockBackend {
    hidden_dim: usize,
    alpha: f64,
    model_id: String,
    slots: Mutex<Vec<Slot>>,
    requests: Mutex<Vec<GenerationRequest>>,
}

impl MockBackend {
    pub fn new(responses: Vec<MockResponse>) -> Self {
        MockBackend::from_script(MockScript {
            responses,
            ..MockScript::default()
        })
    }

    pub fn from_script(script: MockScript) -> Self {
        MockBackend {
            hidden_dim: script.hidden_dim,
            alpha: script.alpha,
            model_id: script.model_id,
            slots: Mutex::new(
                script
                    .responses
                    .into_iter()
                    .map(|response| Slot {
                        response,
                        consumed: false,
                    })
                    .collect(),
            ),
            requests: Mutex::new(Vec::new()),
        }
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, BackendError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| BackendError::Script(format!("{}: {e}", path.display())))?;
        let script: MockScript = serde_json::from_str(&text)
            .map_err(|e| BackendError::Script(format!("{}: {e}", path.display())))?;
        Ok(MockBackend::from_script(script))
    }

    /// Script that answers every backend call recorded in `trace` with the
    /// recorded samples, keyed on the exact context.
    pub fn from_trace(trace: &[TraceEvent]) -> Self {
        let responses = trace
            .iter()
            .filter_map(|event| match event {
                TraceEvent::BackendCall { request, samples, .. } => Some(MockResponse {
                    when: MatchRule {
                        exact: Some(request.context.clone()),
                        greedy: Some(request.is_greedy()),
                        ..MatchRule::default()
                    },
                    persistent: false,
                    samples: samples
                        .iter()
                        .map(|s| MockSample {
                            text: s.text.clone(),
                            tokens: Some(s.tokens.clone()),
                            eos_hidden: s.eos_hidden.clone(),
                            ..MockSample::default()
                        })
                        .collect(),
                    score: None,
                    verbatim: true,
                }),
                _ => None,
            })
            .collect();
        MockBackend::new(responses)
    }

    pub fn with_hidden_dim(mut self, dim: usize) -> Self {
        self.hidden_dim = dim;
        self
    }

    pub fn with_alpha(mut self, alpha: f64) -> Self {
        self.alpha = alpha;
        self
    }

    /// Every request received so far, in arrival order.
    pub fn requests(&self) -> Vec<GenerationRequest> {
        self.requests.lock().expect("mock request log poisoned").clone()
    }

    /// Non-persistent responses not yet consumed.
    pub fn remaining(&self) -> usize {
        self.slots
            .lock()
            .expect("mock script poisoned")
            .iter()
            .filter(|s| !s.consumed && !s.response.persistent)
            .count()
    }

    fn take(&self, request: &GenerationRequest) -> Result<MockResponse, BackendError> {
        let mut slots = self.slots.lock().expect("mock script poisoned");
        let slot = slots
            .iter_mut()
            .find(|s| !s.consumed && s.response.when.matches(request))
            .ok_or_else(|| {
                let tail: String = {
                    let chars: Vec<char> = request.context.chars().collect();
                    chars[chars.len().saturating_sub(120)..].iter().collect()
                };
                BackendError::Script(format!(
                    "no scripted response for {} request ending {tail:?}",
                    if request.is_greedy() { "greedy" } else { "sampling" }
                ))
            })?;
        if !slot.response.persistent {
            slot.consumed = true;
        }
        Ok(slot.response.clone())
    }

    fn answer(&self, request: &GenerationRequest, response: MockResponse) -> Result<Vec<GenerationSample>, BackendError> {
        if response.samples.is_empty() {
            return Err(BackendError::Script("response lists no samples".into()));
        }
        if response.verbatim {
            return response.samples.iter().map(MockSample::to_sample).collect();
        }
        let k = request.num_samples;
        let mut samples = Vec::with_capacity(k);
        for i in 0..k {
            let s = response.samples[i % response.samples.len()].to_sample()?;
            samples.push(s.truncate_at_stop(&request.stop_sequences));
        }
        if request.return_hidden {
            if let Some(target) = response.score {
                let vectors = synthesize_hidden_set(k, self.hidden_dim, target, self.alpha)
                    .map_err(BackendError::Script)?;
                for (s, v) in samples.iter_mut().zip(vectors) {
                    s.eos_hidden = Some(v);
                }
            }
            if let Some(h) = samples.iter().filter_map(|s| s.eos_hidden.as_ref()).find(|h| h.len() != self.hidden_dim) {
                return Err(BackendError::Script(format!(
                    "scripted hidden vector has dimension {}, backend dimension is {}",
                    h.len(),
                    self.hidden_dim
                )));
            }
        } else {
            samples.iter_mut().for_each(|s| s.eos_hidden = None);
        }
        if !request.return_lse {
            for s in &mut samples {
                s.tokens.iter_mut().for_each(|t| t.lse = None);
            }
        }
        Ok(samples)
    }
}

impl Backend for MockBackend {
    fn generate(&self, request: &GenerationRequest) -> Result<Vec<GenerationSample>, BackendError> {
        request.validate()?;
        self.requests
            .lock()
            .expect("mock request log poisoned")
            .push(request.clone());
        let response = self.take(request)?;
        let samples = self.answer(request, response)?;
        validate_samples(request, samples)
    }

    fn health(&self) -> Result<BackendHealth, BackendError> {
        Ok(BackendHealth {
            model_id: self.model_id.clone(),
            hidden_dim: self.hidden_dim,
            num_layers: DEFAULT_NUM_LAYERS,
        })
    }
}

/// `m` spread vectors `±e_0 + t·e_(i+1)` plus `k - m` copies of their mean.
/// The copies centre to zero rows, so only `m` rows enter the Gram matrix.
fn family(k: usize, m: usize, dim: usize, t: f64) -> Vec<Vec<f64>> {
    let mut out: Vec<Vec<f64>> = (0..m)
        .map(|i| {
            let mut v = vec![0.0; dim];
            v[0] = if i % 2 == 0 { 1.0 } else { -1.0 };
            v[i + 1] = t;
            v
        })
        .collect();
    let mut mean = vec![0.0; dim];
    for v in &out {
        for (a, x) in mean.iter_mut().zip(v) {
            *a += x / m as f64;
        }
    }
    out.resize(k, mean);
    out
}

fn family_score(k: usize, m: usize, dim: usize, log_t: f64, alpha: f64) -> Result<f64, String> {
    let set = HiddenSampleSet::new(family(k, m, dim, log_t.exp())).map_err(|e| e.to_string())?;
    gram_logdet(&set, alpha).map(|s| s.value).map_err(|e| e.to_string())
}

/// Builds `k` hidden vectors of dimension `dim` whose Gram score with
/// regularizer `alpha` equals `target` within 1e-9.
///
/// With `m` spread samples the score rises monotonically in `t` from the
/// rank-one value `(log(m + alpha) + (k - 1) log alpha) / k`; the smallest
/// `m` whose range covers the target is used. The floor `log(alpha)` comes
/// from identical vectors. Scores strictly between the floor and the
/// two-sample rank-one value cannot be produced by any hidden vectors, since
/// every non-zero centred row has unit norm.
pub fn synthesize_hidden_set(k: usize, dim: usize, target: f64, alpha: f64) -> Result<Vec<Vec<f64>>, String> {
    type Key = (usize, usize, u64, u64);
    static CACHE: OnceLock<Mutex<HashMap<Key, Vec<Vec<f64>>>>> = OnceLock::new();
    let key = (k, dim, target.to_bits(), alpha.to_bits());
    let cache = CACHE.get_or_init(Default::default);
    if let Some(hit) = cache.lock().expect("synthesis cache poisoned").get(&key) {
        return Ok(hit.clone());
    }
    let vectors = synthesize_uncached(k, dim, target, alpha)?;
    cache
        .lock()
        .expect("synthesis cache poisoned")
        .insert(key, vectors.clone());
    Ok(vectors)
}

fn synthesize_uncached(k: usize, dim: usize, target: f64, alpha: f64) -> Result<Vec<Vec<f64>>, String> {
    if k < 2 {
        return Err(format!("need at least 2 samples to synthesize a score, got {k}"));
    }
    if !target.is_finite() {
        return Err(format!("target score {target} is not finite"));
    }
    if (target - alpha.ln()).abs() <= SYNTH_TOLERANCE {
        let mut v = vec![0.0; dim];
        if let Some(first) = v.first_mut() {
            *first = 1.0;
        }
        return Ok(vec![v; k]);
    }
    let max_m = k.min(dim.saturating_sub(1));
    if max_m < 2 {
        return Err(format!("hidden dimension {dim} too small to synthesize a spread"));
    }
    let (lo_bound, hi_bound) = (-30.0f64, 30.0f64);
    let mut range_hi = f64::NEG_INFINITY;
    for m in 2..=max_m {
        let f_lo = family_score(k, m, dim, lo_bound, alpha)?;
        let f_hi = family_score(k, m, dim, hi_bound, alpha)?;
        range_hi = range_hi.max(f_hi);
        if target < f_lo - SYNTH_TOLERANCE || target > f_hi + SYNTH_TOLERANCE {
            continue;
        }
        let (mut lo, mut hi) = (lo_bound, hi_bound);
        for _ in 0..100 {
            let mid = 0.5 * (lo + hi);
            if family_score(k, m, dim, mid, alpha)? < target {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        let (s_lo, s_hi) = (
            family_score(k, m, dim, lo, alpha)?,
            family_score(k, m, dim, hi, alpha)?,
        );
        let best = if (s_lo - target).abs() <= (s_hi - target).abs() { lo } else { hi };
        if (family_score(k, m, dim, best, alpha)? - target).abs() <= SYNTH_TOLERANCE {
            return Ok(family(k, m, dim, best.exp()));
        }
    }
    let rank_one_pair = ((2.0 + alpha).ln() + (k as f64 - 1.0) * alpha.ln()) / k as f64;
    Err(format!(
        "score {target} unreachable with {k} samples in dimension {dim}; attainable: {} or [{rank_one_pair}, {range_hi}] up to small gaps",
        alpha.ln()
    ))
}
