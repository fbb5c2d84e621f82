//! Adaptive retrieval-augmented generation driven by the generator's own
//! uncertainty.
//!
//! The engine samples a tentative next reasoning step several times, scores
//! how inconsistent the samples' final hidden states are, and only searches
//! when that score is high. Retrieved passages are re-ranked by how much they
//! lower the score, and the final answer comes from whichever reasoning
//! strategy leaves the model least uncertain.

pub mod backend;
pub mod config;
pub mod eval;
pub mod pipeline;
pub mod retrieval;
pub mod template;
pub mod trace;
pub mod types;
pub mod uncertainty;

pub use backend::{Backend, BackendError, GenerationRequest, GenerationSample, HttpBackend, MockBackend, TokenInfo};
pub use config::{EngineConfig, EstimatorKind, IclFamily, LayerSelector};
pub use pipeline::{run_question, Deps, FinalAnswer, PipelineError, StrategyKind};
pub use retrieval::{Bm25Params, Document, SearchIndex};
pub use template::TemplateSet;
pub use types::{KnowledgeSnippet, PipelineState, Question, Rationale};
pub use uncertainty::UncertaintyScore;

/// Environment variable naming the generation server's base URL.
pub const BACKEND_URL_ENV: &str = "GRAMRAG_BACKEND_URL";
