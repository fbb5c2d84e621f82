//! Run trace: one record per decision or backend call, written as JSON lines.
//!
//! The trace carries every backend request with its raw samples, so a run can
//! be replayed offline through [`MockBackend::from_trace`](crate::backend::MockBackend::from_trace).
//! Uncertainty scores appear only in [`TraceEvent::Score`] records.

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::backend::{GenerationRequest, GenerationSample};
use crate::uncertainty::UncertaintyScore;

/// Why a backend call was made.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "step", rename_all = "snake_case")]
pub enum CallPurpose {
    /// Pseudo-generation sampling for the retrieval decision.
    RetrievalDecision,
    /// Sampling with one candidate snippet in context.
    Rerank { search_rank: usize },
    /// Greedy rationale step.
    Rationale,
    /// Greedy completion of the rationale chain after the answer marker.
    ForcedAnswer,
    /// Sampling over all buffered knowledge, for the strategy score.
    KnowledgeScore,
    /// Greedy answer over all buffered knowledge.
    KnowledgeAnswer,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HaltReason {
    AnswerMarker,
    MaxIterations,
    RetrievalBudget,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchHit {
    pub doc_id: String,
    pub rank: usize,
    pub bm25: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TraceEvent {
    IterationStart {
        iteration: usize,
    },
    BackendCall {
        iteration: usize,
        purpose: CallPurpose,
        request: GenerationRequest,
        samples: Vec<GenerationSample>,
    },
    Score {
        iteration: usize,
        purpose: CallPurpose,
        score: UncertaintyScore,
    },
    RetrievalDecision {
        iteration: usize,
        delta: f64,
        retrievals_used: usize,
        retrieve: bool,
    },
    Search {
        iteration: usize,
        query: String,
        hits: Vec<SearchHit>,
        /// Hits dropped because their document is already buffered.
        skipped_duplicates: Vec<String>,
    },
    Rerank {
        iteration: usize,
        candidate_ranks: Vec<usize>,
        chosen_rank: usize,
        chosen_doc_id: String,
    },
    Rationale {
        iteration: usize,
        text: String,
        used_retrieval: bool,
    },
    Halt {
        iteration: usize,
        reason: HaltReason,
    },
    Strategy {
        chosen: crate::pipeline::StrategyKind,
        answer: String,
        rationale_generation: String,
        knowledge_generation: Option<String>,
    },
}

impl TraceEvent {
    pub fn kind(&self) -> &'static str {
        match self {
            TraceEvent::IterationStart { .. } => "iteration_start",
            TraceEvent::BackendCall { .. } => "backend_call",
            TraceEvent::Score { .. } => "score",
            TraceEvent::RetrievalDecision { .. } => "retrieval_decision",
            TraceEvent::Search { .. } => "search",
            TraceEvent::Rerank { .. } => "rerank",
            TraceEvent::Rationale { .. } => "rationale",
            TraceEvent::Halt { .. } => "halt",
            TraceEvent::Strategy { .. } => "strategy",
        }
    }
}

pub fn write_jsonl<W: Write>(mut out: W, events: &[TraceEvent]) -> std::io::Result<()> {
    for e in events {
        serde_json::to_writer(&mut out, e)?;
        out.write_all(b"\n")?;
    }
    out.flush()
}

pub fn read_jsonl<R: BufRead>(input: R) -> std::io::Result<Vec<TraceEvent>> {
    let mut events = Vec::new();
    for (n, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let e = serde_json::from_str(&line).map_err(|err| {
            std::io::Error::new(std::io::ErrorKind::InvalidData, format!("trace line {}: {err}", n + 1))
        })?;
        events.push(e);
    }
    Ok(events)
}
