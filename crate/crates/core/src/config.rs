//! Engine configuration.
//!
//! The on-disk form is a flat TOML document whose keys are exactly the field
//! names of [`EngineConfig`]. Missing keys take their defaults.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("invalid config value for `{field}`: {reason}")]
    Invalid { field: &'static str, reason: String },
    #[error("failed to parse config: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("failed to read config file: {0}")]
    Io(#[from] std::io::Error),
}

/// Which transformer layer the backend reads hidden states from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum LayerSelector {
    /// `floor(L / 2)` for a model with `L` layers.
    #[default]
    Middle,
    Index(usize),
}

impl LayerSelector {
    /// Resolves the selector against a concrete layer count.
    pub fn resolve(self, num_layers: usize) -> usize {
        match self {
            LayerSelector::Middle => num_layers / 2,
            LayerSelector::Index(i) => i,
        }
    }
}

impl fmt::Display for LayerSelector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LayerSelector::Middle => f.write_str("middle"),
            LayerSelector::Index(i) => write!(f, "{i}"),
        }
    }
}

impl FromStr for LayerSelector {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.trim();
        if s.eq_ignore_ascii_case("middle") {
            return Ok(LayerSelector::Middle);
        }
        s.parse::<usize>()
            .map(LayerSelector::Index)
            .map_err(|_| format!("expected \"middle\" or a layer index, got {s:?}"))
    }
}

impl Serialize for LayerSelector {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        match self {
            LayerSelector::Middle => serializer.serialize_str("middle"),
            LayerSelector::Index(i) => serializer.serialize_u64(*i as u64),
        }
    }
}

impl<'de> Deserialize<'de> for LayerSelector {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Index(u64),
            Name(String),
        }
        match Raw::deserialize(deserializer)? {
            Raw::Index(i) => Ok(LayerSelector::Index(i as usize)),
            Raw::Name(s) => s.parse().map_err(serde::de::Error::custom),
        }
    }
}

/// Uncertainty estimator used for every retrieval, re-rank and strategy decision.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EstimatorKind {
    #[default]
    GramLogdet,
    Perplexity,
    MultiPerplexity,
    LnEntropy,
    Energy,
}

impl EstimatorKind {
    pub const ALL: [EstimatorKind; 5] = [
        EstimatorKind::GramLogdet,
        EstimatorKind::Perplexity,
        EstimatorKind::MultiPerplexity,
        EstimatorKind::LnEntropy,
        EstimatorKind::Energy,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            EstimatorKind::GramLogdet => "gram_logdet",
            EstimatorKind::Perplexity => "perplexity",
            EstimatorKind::MultiPerplexity => "multi_perplexity",
            EstimatorKind::LnEntropy => "ln_entropy",
            EstimatorKind::Energy => "energy",
        }
    }

    /// Minimum number of sampled generations the estimator needs.
    pub fn min_samples(self) -> usize {
        match self {
            EstimatorKind::GramLogdet | EstimatorKind::LnEntropy => 2,
            _ => 1,
        }
    }
}

impl fmt::Display for EstimatorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for EstimatorKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        EstimatorKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s.trim())
            .ok_or_else(|| format!("unknown estimator {s:?}"))
    }
}

/// In-context example set, one per benchmark family.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IclFamily {
    SimpleQa,
    TwoWiki,
    #[default]
    Hotpotqa,
    Iirc,
}

impl IclFamily {
    pub const ALL: [IclFamily; 4] = [
        IclFamily::SimpleQa,
        IclFamily::TwoWiki,
        IclFamily::Hotpotqa,
        IclFamily::Iirc,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            IclFamily::SimpleQa => "simple_qa",
            IclFamily::TwoWiki => "two_wiki",
            IclFamily::Hotpotqa => "hotpotqa",
            IclFamily::Iirc => "iirc",
        }
    }
}

impl fmt::Display for IclFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for IclFamily {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        IclFamily::ALL
            .into_iter()
            .find(|k| k.as_str() == s.trim())
            .ok_or_else(|| format!("unknown ICL family {s:?}"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EngineConfig {
    /// Snippets recalled from the search engine per retrieval.
    pub top_n: usize,
    /// Sampled generations per uncertainty estimate.
    pub num_samples: usize,
    pub layer_selector: LayerSelector,
    /// Retrieval fires when the uncertainty score is strictly above this.
    pub delta: f64,
    pub estimator: EstimatorKind,
    pub max_retrievals: usize,
    pub max_iterations: usize,
    /// Pseudo-generation tokens with probability below this are dropped from the query.
    pub query_token_drop_prob: f64,
    pub sampling_temperature: f64,
    pub gram_alpha: f64,
    pub icl_example_count: usize,
    pub icl_family: IclFamily,
    /// Token budget for one reasoning step.
    pub max_new_tokens: usize,
    /// Token budget for a final-answer generation.
    pub max_answer_tokens: usize,
    pub backend_timeout_secs: f64,
    pub backend_retries: u32,
    pub workers: usize,
    pub seed: u64,
}

impl Default for EngineConfig {
    fn default() -> Self {
        EngineConfig {
            top_n: 3,
            num_samples: 20,
            layer_selector: LayerSelector::Middle,
            delta: -6.0,
            estimator: EstimatorKind::GramLogdet,
            max_retrievals: 5,
            max_iterations: 8,
            query_token_drop_prob: 0.2,
            sampling_temperature: 1.0,
            gram_alpha: 1e-3,
            icl_example_count: 10,
            icl_family: IclFamily::Hotpotqa,
            max_new_tokens: 64,
            max_answer_tokens: 256,
            backend_timeout_secs: 120.0,
            backend_retries: 2,
            workers: 1,
            seed: 0,
        }
    }
}

impl EngineConfig {
    /// Single-hop preset: one search per question at most.
    pub fn simple_qa() -> Self {
        EngineConfig {
            max_retrievals: 1,
            icl_family: IclFamily::SimpleQa,
            ..EngineConfig::default()
        }
    }

    pub fn from_toml_str(text: &str) -> Result<Self, ConfigError> {
        let config: EngineConfig = toml::from_str(text)?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ConfigError> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("flat config always serializes")
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        fn bad(field: &'static str, reason: impl Into<String>) -> Result<(), ConfigError> {
            Err(ConfigError::Invalid {
                field,
                reason: reason.into(),
            })
        }
        if self.top_n < 1 {
            return bad("top_n", "must be at least 1");
        }
        let min = self.estimator.min_samples();
        if self.num_samples < min {
            return bad(
                "num_samples",
                format!("estimator {} needs at least {min} samples", self.estimator),
            );
        }
        if !self.delta.is_finite() {
            return bad("delta", "must be finite");
        }
        if !(self.query_token_drop_prob > 0.0 && self.query_token_drop_prob < 1.0) {
            return bad("query_token_drop_prob", "must lie in (0, 1)");
        }
        if !(self.sampling_temperature > 0.0 && self.sampling_temperature.is_finite()) {
            return bad("sampling_temperature", "must be positive");
        }
        if !(self.gram_alpha > 0.0 && self.gram_alpha.is_finite()) {
            return bad("gram_alpha", "must be positive");
        }
        if self.max_iterations < 1 {
            return bad("max_iterations", "must be at least 1");
        }
        if self.max_new_tokens < 1 || self.max_answer_tokens < 1 {
            return bad("max_new_tokens", "token budgets must be at least 1");
        }
        if self.backend_timeout_secs.is_nan() || self.backend_timeout_secs <= 0.0 {
            return bad("backend_timeout_secs", "must be positive");
        }
        if self.workers < 1 {
            return bad("workers", "must be at least 1");
        }
        Ok(())
    }
}
