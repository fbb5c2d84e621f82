//! Uncertainty estimators over sampled generations.
//!
//! Every estimator maps the samples drawn for one context to a scalar where
//! larger means more uncertain. Scores are only comparable when produced by
//! the same estimator.

mod gram;

pub use gram::{
    cholesky_log_det, gram_logdet, gram_matrix, mean_log_det_regularized, score_ceiling,
    score_floor, HiddenSampleSet, NORM_FLOOR,
};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::GenerationSample;
use crate::config::{EngineConfig, EstimatorKind};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum UncertaintyError {
    #[error("estimator contract violated: {0}")]
    Contract(String),
    #[error("need at least {needed} samples, got {got}")]
    TooFewSamples { needed: usize, got: usize },
    #[error("hidden vector {index} has dimension {found}, expected {expected}")]
    DimensionMismatch {
        index: usize,
        expected: usize,
        found: usize,
    },
    #[error("sample {index} carries non-finite values")]
    NonFinite { index: usize },
    #[error("sample {index} has no hidden vector")]
    MissingHidden { index: usize },
    #[error("sample {index} has no tokens")]
    EmptySample { index: usize },
    #[error("estimator unsupported by this backend: {0}")]
    Unsupported(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UncertaintyScore {
    pub value: f64,
    pub estimator: EstimatorKind,
    pub num_samples_used: usize,
}

impl UncertaintyScore {
    pub fn new(value: f64, estimator: EstimatorKind, num_samples_used: usize) -> Self {
        debug_assert!(value.is_finite(), "uncertainty score must be finite");
        UncertaintyScore {
            value,
            estimator,
            num_samples_used,
        }
    }

    /// Arithmetic mean of scores from a single estimator.
    pub fn mean(scores: &[UncertaintyScore]) -> Result<UncertaintyScore, UncertaintyError> {
        let first = scores
            .first()
            .ok_or_else(|| UncertaintyError::Contract("mean of zero scores".into()))?;
        if scores.iter().any(|s| s.estimator != first.estimator) {
            return Err(UncertaintyError::Contract(
                "cannot average scores from different estimators".into(),
            ));
        }
        let value = scores.iter().map(|s| s.value).sum::<f64>() / scores.len() as f64;
        let used = scores.iter().map(|s| s.num_samples_used).sum();
        Ok(UncertaintyScore::new(value, first.estimator, used))
    }
}

fn token_logprobs(sample: &GenerationSample, index: usize) -> Result<Vec<f64>, UncertaintyError> {
    if sample.tokens.is_empty() {
        return Err(UncertaintyError::EmptySample { index });
    }
    let lps: Vec<f64> = sample.tokens.iter().map(|t| t.logprob).collect();
    if lps.iter().any(|lp| !lp.is_finite()) {
        return Err(UncertaintyError::NonFinite { index });
    }
    Ok(lps)
}

fn mean_nll(sample: &GenerationSample, index: usize) -> Result<f64, UncertaintyError> {
    let lps = token_logprobs(sample, index)?;
    Ok(-lps.iter().sum::<f64>() / lps.len() as f64)
}

/// Mean negative log-likelihood per token (log perplexity).
pub fn perplexity_score(sample: &GenerationSample) -> Result<UncertaintyScore, UncertaintyError> {
    Ok(UncertaintyScore::new(
        mean_nll(sample, 0)?,
        EstimatorKind::Perplexity,
        1,
    ))
}

/// Mean of [`perplexity_score`] over all samples.
pub fn multi_perplexity_score(samples: &[GenerationSample]) -> Result<UncertaintyScore, UncertaintyError> {
    if samples.is_empty() {
        return Err(UncertaintyError::TooFewSamples { needed: 1, got: 0 });
    }
    let total = samples
        .iter()
        .enumerate()
        .map(|(i, s)| mean_nll(s, i))
        .sum::<Result<f64, _>>()?;
    Ok(UncertaintyScore::new(
        total / samples.len() as f64,
        EstimatorKind::MultiPerplexity,
        samples.len(),
    ))
}

/// Monte-Carlo length-normalized predictive entropy: the negated mean over
/// samples of the per-token average log-likelihood.
pub fn ln_entropy_score(samples: &[GenerationSample]) -> Result<UncertaintyScore, UncertaintyError> {
    if samples.len() < 2 {
        return Err(UncertaintyError::TooFewSamples {
            needed: 2,
            got: samples.len(),
        });
    }
    let mut acc = 0.0;
    for (i, s) in samples.iter().enumerate() {
        let lps = token_logprobs(s, i)?;
        acc += lps.iter().sum::<f64>() / lps.len() as f64;
    }
    Ok(UncertaintyScore::new(
        -acc / samples.len() as f64,
        EstimatorKind::LnEntropy,
        samples.len(),
    ))
}

/// Mean per-token free energy `-lse_t`. Only `temperature == 1` is supported;
/// the backend reports log-sum-exp at unit temperature.
pub fn energy_score(sample: &GenerationSample, temperature: f64) -> Result<UncertaintyScore, UncertaintyError> {
    if temperature != 1.0 {
        return Err(UncertaintyError::Contract(format!(
            "energy temperature must be 1, got {temperature}"
        )));
    }
    if sample.tokens.is_empty() {
        return Err(UncertaintyError::EmptySample { index: 0 });
    }
    let mut acc = 0.0;
    for (pos, t) in sample.tokens.iter().enumerate() {
        let lse = t.lse.ok_or_else(|| {
            UncertaintyError::Unsupported(format!("token {pos} carries no log-sum-exp"))
        })?;
        if !lse.is_finite() {
            return Err(UncertaintyError::NonFinite { index: 0 });
        }
        acc -= lse;
    }
    Ok(UncertaintyScore::new(
        acc / sample.tokens.len() as f64,
        EstimatorKind::Energy,
        1,
    ))
}

/// Scores the samples drawn for one context with the configured estimator.
/// Single-sequence estimators (perplexity, energy) read the first sample.
pub fn estimate(samples: &[GenerationSample], config: &EngineConfig) -> Result<UncertaintyScore, UncertaintyError> {
    estimate_with(config.estimator, samples, config.gram_alpha)
}

pub fn estimate_with(
    estimator: EstimatorKind,
    samples: &[GenerationSample],
    gram_alpha: f64,
) -> Result<UncertaintyScore, UncertaintyError> {
    let first = samples
        .first()
        .ok_or(UncertaintyError::TooFewSamples { needed: 1, got: 0 });
    match estimator {
        EstimatorKind::GramLogdet => gram_logdet(&HiddenSampleSet::from_samples(samples)?, gram_alpha),
        EstimatorKind::Perplexity => perplexity_score(first?),
        EstimatorKind::MultiPerplexity => multi_perplexity_score(samples),
        EstimatorKind::LnEntropy => ln_entropy_score(samples),
        EstimatorKind::Energy => energy_score(first?, 1.0),
    }
}
