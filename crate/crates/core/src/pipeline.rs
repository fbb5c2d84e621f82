//! The adaptive retrieval loop.
//!
//! Each iteration samples a tentative next step, scores the samples, and
//! retrieves only when the score is above `delta` and the search budget
//! allows. Retrieved candidates are re-ranked by the uncertainty they leave
//! the model with; the least uncertain one grounds the next rationale. When
//! the loop halts, two answering strategies are scored and the less
//! uncertain one supplies the final answer.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{Backend, BackendError, GenerationRequest, GenerationSample};
use crate::config::{ConfigError, EngineConfig};
use crate::retrieval::{RetrievalError, SearchIndex};
use crate::template::{
    contains_answer_marker, extract_final_answer, render_context, TemplateError, TemplateSet,
    ANSWER_MARKER,
};
use crate::trace::{CallPurpose, HaltReason, SearchHit, TraceEvent};
use crate::types::{KnowledgeSnippet, PipelineState, Question, Rationale, ValueError};
use crate::uncertainty::{estimate, UncertaintyError, UncertaintyScore};

/// One reasoning step ends at a period or a line break.
pub const STEP_STOPS: [&str; 2] = [".", "\n"];
/// Final-answer generations run to the end of the line.
pub const ANSWER_STOPS: [&str; 1] = ["\n"];

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Uncertainty(#[from] UncertaintyError),
    #[error(transparent)]
    Template(#[from] TemplateError),
    #[error(transparent)]
    Retrieval(#[from] RetrievalError),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("malformed generation: {0}")]
    MalformedGeneration(#[from] ValueError),
    #[error("pipeline contract violated: {0}")]
    Contract(String),
    #[error("no answer could be extracted (rationale chain: {rationale_generation:?}, knowledge pass: {knowledge_generation:?})")]
    Unanswerable {
        rationale_generation: String,
        knowledge_generation: Option<String>,
    },
}

/// A failed run together with the state reached before the failure.
#[derive(Debug, Error)]
#[error("question {question_id:?} failed at iteration {}: {error}", state.iteration)]
pub struct RunFailure {
    pub question_id: String,
    pub error: PipelineError,
    pub state: Box<PipelineState>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StrategyKind {
    FromRationales,
    FromKnowledge,
}

impl StrategyKind {
    pub fn as_str(self) -> &'static str {
        match self {
            StrategyKind::FromRationales => "from_rationales",
            StrategyKind::FromKnowledge => "from_knowledge",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinalAnswer {
    pub text: String,
    pub strategy: StrategyKind,
    pub rationale_strategy_score: UncertaintyScore,
    /// Absent when the knowledge buffer was empty.
    pub knowledge_strategy_score: Option<UncertaintyScore>,
    /// Set when the lower-scoring strategy produced no extractable answer and
    /// the other strategy's answer was used instead.
    pub fallback: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RetrievalDecision {
    pub pseudo: GenerationSample,
    pub score: UncertaintyScore,
    pub retrieve: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct IterationOutcome {
    pub pseudo_generation: GenerationSample,
    pub uncertainty: UncertaintyScore,
    pub retrieved: bool,
    pub chosen_snippet: Option<KnowledgeSnippet>,
    pub candidate_scores: Option<Vec<(usize, UncertaintyScore)>>,
    pub rationale: Rationale,
    pub halted: Option<HaltReason>,
}

/// Shared, read-only collaborators of a run.
#[derive(Clone, Copy)]
pub struct Deps<'a> {
    pub backend: &'a dyn Backend,
    pub index: &'a SearchIndex,
    pub templates: &'a TemplateSet,
}

fn stops(list: &[&str]) -> Vec<String> {
    list.iter().map(|s| s.to_string()).collect()
}

fn sample_and_score(
    state: &mut PipelineState,
    deps: Deps<'_>,
    config: &EngineConfig,
    context: String,
    stop: &[&str],
    purpose: CallPurpose,
) -> Result<(Vec<GenerationSample>, UncertaintyScore), PipelineError> {
    let request = GenerationRequest::sampling(context, stop, config);
    let samples = deps.backend.generate(&request)?;
    state.trace.push(TraceEvent::BackendCall {
        iteration: state.iteration,
        purpose: purpose.clone(),
        request,
        samples: samples.clone(),
    });
    let score = estimate(&samples, config)?;
    state.trace.push(TraceEvent::Score {
        iteration: state.iteration,
        purpose,
        score,
    });
    Ok((samples, score))
}

fn greedy(
    state: &mut PipelineState,
    deps: Deps<'_>,
    context: String,
    stop: &[&str],
    max_new_tokens: usize,
    purpose: CallPurpose,
) -> Result<GenerationSample, PipelineError> {
    let request = GenerationRequest::greedy(context, &stops(stop), max_new_tokens);
    let sample = deps
        .backend
        .generate(&request)?
        .pop()
        .ok_or_else(|| BackendError::Contract("greedy request returned no sample".into()))?;
    state.trace.push(TraceEvent::BackendCall {
        iteration: state.iteration,
        purpose,
        request,
        samples: vec![sample.clone()],
    });
    Ok(sample)
}

/// Samples the next step for the current buffers, scores it, and decides
/// whether to retrieve.
pub fn decide_retrieval(
    state: &mut PipelineState,
    deps: Deps<'_>,
    config: &EngineConfig,
) -> Result<RetrievalDecision, PipelineError> {
    let context = render_context(
        &deps.templates.retrieval,
        &state.question,
        &state.rationale_buffer,
        None,
    )?;
    let (mut samples, score) = sample_and_score(
        state,
        deps,
        config,
        context,
        &STEP_STOPS,
        CallPurpose::RetrievalDecision,
    )?;
    let retrieve = score.value > config.delta && state.retrievals_used < config.max_retrievals;
    state.trace.push(TraceEvent::RetrievalDecision {
        iteration: state.iteration,
        delta: config.delta,
        retrievals_used: state.retrievals_used,
        retrieve,
    });
    let pseudo = samples.swap_remove(0);
    Ok(RetrievalDecision {
        pseudo,
        score,
        retrieve,
    })
}

/// Search query from the confidently generated part of a pseudo-generation:
/// tokens with probability below `drop_prob` are removed, the remaining
/// token texts are concatenated and whitespace is collapsed. Falls back to
/// the whole text when nothing survives.
pub fn formulate_query(pseudo: &GenerationSample, drop_prob: f64) -> String {
    let kept: String = pseudo
        .tokens
        .iter()
        .filter(|t| t.prob() >= drop_prob)
        .map(|t| t.text.as_str())
        .collect();
    let query = collapse_whitespace(&kept);
    if query.is_empty() {
        collapse_whitespace(&pseudo.text)
    } else {
        query
    }
}

fn collapse_whitespace(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Index of the minimum score; ties go to the earlier entry.
pub fn argmin_score(scores: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, &s) in scores.iter().enumerate() {
        if best.is_none_or(|b| s < scores[b]) {
            best = Some(i);
        }
    }
    best
}

/// Scores every candidate in context and keeps the one leaving the lowest
/// uncertainty. Candidates must be ordered by search rank.
pub fn rerank_snippets(
    state: &mut PipelineState,
    candidates: &[crate::retrieval::SearchHit],
    deps: Deps<'_>,
    config: &EngineConfig,
) -> Result<(KnowledgeSnippet, Vec<(usize, UncertaintyScore)>), PipelineError> {
    if candidates.is_empty() {
        return Err(PipelineError::Contract("re-ranking needs at least one candidate".into()));
    }
    let placeholder = UncertaintyScore::new(0.0, config.estimator, 0);
    let mut snippets = Vec::with_capacity(candidates.len());
    let mut scores = Vec::with_capacity(candidates.len());
    for hit in candidates {
        let snippet = KnowledgeSnippet::new(
            hit.document.doc_id.clone(),
            hit.document.title.clone(),
            hit.document.text.clone(),
            hit.rank,
            placeholder,
        )?;
        let context = render_context(
            &deps.templates.rerank,
            &state.question,
            &state.rationale_buffer,
            Some(std::slice::from_ref(&snippet)),
        )?;
        let (_, score) = sample_and_score(
            state,
            deps,
            config,
            context,
            &STEP_STOPS,
            CallPurpose::Rerank {
                search_rank: hit.rank,
            },
        )?;
        scores.push((hit.rank, score));
        snippets.push(snippet);
    }
    let values: Vec<f64> = scores.iter().map(|(_, s)| s.value).collect();
    let best = argmin_score(&values).expect("non-empty candidate list");
    let mut chosen = snippets.swap_remove(best);
    chosen.uncertainty_when_used = scores[best].1;
    state.trace.push(TraceEvent::Rerank {
        iteration: state.iteration,
        candidate_ranks: scores.iter().map(|(r, _)| *r).collect(),
        chosen_rank: chosen.search_rank,
        chosen_doc_id: chosen.doc_id.clone(),
    });
    Ok((chosen, scores))
}

/// Produces the next rationale and appends it to the buffer. With a chosen
/// snippet the step is generated greedily in its presence; otherwise the
/// pseudo-generation becomes the step.
pub fn generate_rationale(
    state: &mut PipelineState,
    chosen: Option<&KnowledgeSnippet>,
    decision: &RetrievalDecision,
    deps: Deps<'_>,
    config: &EngineConfig,
) -> Result<Rationale, PipelineError> {
    let rationale = match chosen {
        Some(snippet) => {
            let context = render_context(
                &deps.templates.rerank,
                &state.question,
                &state.rationale_buffer,
                Some(std::slice::from_ref(snippet)),
            )?;
            let sample = greedy(
                state,
                deps,
                context,
                &STEP_STOPS,
                config.max_new_tokens,
                CallPurpose::Rationale,
            )?;
            Rationale::new(sample.text.trim(), snippet.uncertainty_when_used, true)?
        }
        None => Rationale::new(decision.pseudo.text.trim(), decision.score, false)?,
    };
    state.trace.push(TraceEvent::Rationale {
        iteration: state.iteration,
        text: rationale.text.clone(),
        used_retrieval: rationale.used_retrieval,
    });
    state.rationale_buffer.push(rationale.clone());
    Ok(rationale)
}

/// Runs one full iteration on `state`.
pub fn run_iteration(
    state: &mut PipelineState,
    deps: Deps<'_>,
    config: &EngineConfig,
) -> Result<IterationOutcome, PipelineError> {
    state.iteration += 1;
    state.trace.push(TraceEvent::IterationStart {
        iteration: state.iteration,
    });
    let decision = decide_retrieval(state, deps, config)?;

    let mut chosen = None;
    let mut candidate_scores = None;
    if decision.retrieve {
        let query = formulate_query(&decision.pseudo, config.query_token_drop_prob);
        let hits = deps
            .index
            .search(&query, config.top_n + state.knowledge_buffer.len())?;
        state.retrievals_used += 1;
        let (fresh, dup): (Vec<_>, Vec<_>) = hits
            .into_iter()
            .partition(|h| !state.has_snippet(&h.document.doc_id));
        let candidates: Vec<_> = fresh.into_iter().take(config.top_n).collect();
        state.trace.push(TraceEvent::Search {
            iteration: state.iteration,
            query,
            hits: candidates
                .iter()
                .map(|h| SearchHit {
                    doc_id: h.document.doc_id.clone(),
                    rank: h.rank,
                    bm25: h.score,
                })
                .collect(),
            skipped_duplicates: dup.into_iter().map(|h| h.document.doc_id).collect(),
        });
        if !candidates.is_empty() {
            let (snippet, scores) = rerank_snippets(state, &candidates, deps, config)?;
            chosen = Some(snippet);
            candidate_scores = Some(scores);
        }
    }

    let rationale = generate_rationale(state, chosen.as_ref(), &decision, deps, config)?;
    if let Some(snippet) = &chosen {
        state.knowledge_buffer.push(snippet.clone());
    }

    let halted = if contains_answer_marker(&rationale.text) {
        Some(HaltReason::AnswerMarker)
    } else if state.iteration >= config.max_iterations {
        Some(HaltReason::MaxIterations)
    } else if state.retrievals_used >= config.max_retrievals && chosen.is_some() {
        Some(HaltReason::RetrievalBudget)
    } else {
        None
    };
    if let Some(reason) = halted {
        state.trace.push(TraceEvent::Halt {
            iteration: state.iteration,
            reason,
        });
    }
    Ok(IterationOutcome {
        pseudo_generation: decision.pseudo,
        uncertainty: decision.score,
        retrieved: chosen.is_some(),
        chosen_snippet: chosen,
        candidate_scores,
        rationale,
        halted,
    })
}

/// Scores both answering strategies and returns the answer of the less
/// uncertain one.
pub fn select_strategy(
    state: &mut PipelineState,
    deps: Deps<'_>,
    config: &EngineConfig,
) -> Result<FinalAnswer, PipelineError> {
    let last = state
        .rationale_buffer
        .last()
        .ok_or_else(|| PipelineError::Contract("strategy selection needs at least one rationale".into()))?
        .clone();

    let rationale_generation = if contains_answer_marker(&last.text) {
        last.text.clone()
    } else {
        let context = render_context(
            &deps.templates.from_rationales,
            &state.question,
            &state.rationale_buffer,
            None,
        )?;
        let sample = greedy(
            state,
            deps,
            context,
            &ANSWER_STOPS,
            config.max_answer_tokens,
            CallPurpose::ForcedAnswer,
        )?;
        format!("{ANSWER_MARKER}{}", sample.text)
    };
    let rationale_answer = extract_final_answer(&rationale_generation);
    let scores: Vec<_> = state.rationale_buffer.iter().map(|r| r.uncertainty).collect();
    let rationale_score = UncertaintyScore::mean(&scores)?;

    let mut knowledge_generation = None;
    let mut knowledge_answer = None;
    let mut knowledge_score = None;
    if !state.knowledge_buffer.is_empty() {
        let context = render_context(
            &deps.templates.from_knowledge,
            &state.question,
            &[],
            Some(&state.knowledge_buffer),
        )?;
        let (_, score) = sample_and_score(
            state,
            deps,
            config,
            context.clone(),
            &ANSWER_STOPS,
            CallPurpose::KnowledgeScore,
        )?;
        let sample = greedy(
            state,
            deps,
            context,
            &ANSWER_STOPS,
            config.max_answer_tokens,
            CallPurpose::KnowledgeAnswer,
        )?;
        knowledge_answer = extract_final_answer(&sample.text);
        knowledge_generation = Some(sample.text);
        knowledge_score = Some(score);
    }

    let prefer_knowledge = knowledge_score.is_some_and(|k| k.value < rationale_score.value);
    let (preferred, other) = if prefer_knowledge {
        (
            (StrategyKind::FromKnowledge, knowledge_answer),
            (StrategyKind::FromRationales, rationale_answer),
        )
    } else {
        (
            (StrategyKind::FromRationales, rationale_answer),
            (StrategyKind::FromKnowledge, knowledge_answer),
        )
    };
    let (strategy, text, fallback) = match (preferred, other) {
        ((kind, Some(text)), _) => (kind, text, false),
        (_, (kind, Some(text))) => (kind, text, true),
        _ => {
            return Err(PipelineError::Unanswerable {
                rationale_generation,
                knowledge_generation,
            })
        }
    };
    state.trace.push(TraceEvent::Strategy {
        chosen: strategy,
        answer: text.clone(),
        rationale_generation,
        knowledge_generation,
    });
    Ok(FinalAnswer {
        text,
        strategy,
        rationale_strategy_score: rationale_score,
        knowledge_strategy_score: knowledge_score,
        fallback,
    })
}

/// Answers one question. On failure the partial state, trace included, is
/// returned inside the error.
pub fn run_question(
    question: Question,
    deps: Deps<'_>,
    config: &EngineConfig,
) -> Result<(FinalAnswer, PipelineState), RunFailure> {
    let mut state = PipelineState::new(question);
    match drive(&mut state, deps, config) {
        Ok(answer) => Ok((answer, state)),
        Err(error) => Err(RunFailure {
            question_id: state.question.id.clone(),
            error,
            state: Box::new(state),
        }),
    }
}

fn drive(state: &mut PipelineState, deps: Deps<'_>, config: &EngineConfig) -> Result<FinalAnswer, PipelineError> {
    config.validate()?;
    loop {
        if run_iteration(state, deps, config)?.halted.is_some() {
            break;
        }
    }
    select_strategy(state, deps, config)
}
