//! Domain values shared by the pipeline, the evaluator and the CLI.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::trace::TraceEvent;
use crate::uncertainty::UncertaintyScore;

#[derive(Debug, Error, PartialEq)]
pub enum ValueError {
    #[error("question text is empty")]
    EmptyQuestion,
    #[error("rationale text is empty")]
    EmptyRationale,
    #[error("rationale spans more than one line: {0:?}")]
    MultilineRationale(String),
    #[error("knowledge snippet {0} has empty text")]
    EmptySnippet(String),
    #[error("search rank must be 1-based, got 0")]
    ZeroRank,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Question {
    pub id: String,
    pub text: String,
    #[serde(default)]
    pub gold_answers: Vec<String>,
}

impl Question {
    pub fn new(
        id: impl Into<String>,
        text: impl Into<String>,
        gold_answers: Vec<String>,
    ) -> Result<Self, ValueError> {
        let text = text.into();
        if text.trim().is_empty() {
            return Err(ValueError::EmptyQuestion);
        }
        Ok(Question {
            id: id.into(),
            text,
            gold_answers,
        })
    }
}

/// One chain-of-thought step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Rationale {
    pub text: String,
    pub uncertainty: UncertaintyScore,
    pub used_retrieval: bool,
}

impl Rationale {
    pub fn new(
        text: impl Into<String>,
        uncertainty: UncertaintyScore,
        used_retrieval: bool,
    ) -> Result<Self, ValueError> {
        let text = text.into();
        if text.trim().is_empty() {
            return Err(ValueError::EmptyRationale);
        }
        if text.contains('\n') || text.contains('\r') {
            return Err(ValueError::MultilineRationale(text));
        }
        Ok(Rationale {
            text,
            uncertainty,
            used_retrieval,
        })
    }
}

/// A retrieved passage that made it into the knowledge buffer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KnowledgeSnippet {
    pub doc_id: String,
    pub title: String,
    pub text: String,
    pub search_rank: usize,
    pub uncertainty_when_used: UncertaintyScore,
}

impl KnowledgeSnippet {
    pub fn new(
        doc_id: impl Into<String>,
        title: impl Into<String>,
        text: impl Into<String>,
        search_rank: usize,
        uncertainty_when_used: UncertaintyScore,
    ) -> Result<Self, ValueError> {
        let doc_id = doc_id.into();
        let text = text.into();
        if search_rank == 0 {
            return Err(ValueError::ZeroRank);
        }
        if text.trim().is_empty() {
            return Err(ValueError::EmptySnippet(doc_id));
        }
        Ok(KnowledgeSnippet {
            doc_id,
            title: title.into(),
            text,
            search_rank,
            uncertainty_when_used,
        })
    }

    /// Passage text as shown to the model: title followed by body.
    pub fn display_text(&self) -> String {
        if self.title.trim().is_empty() {
            self.text.trim().to_string()
        } else {
            format!("{} {}", self.title.trim(), self.text.trim())
        }
    }
}

/// Mutable state of one in-flight question run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineState {
    pub question: Question,
    pub knowledge_buffer: Vec<KnowledgeSnippet>,
    pub rationale_buffer: Vec<Rationale>,
    pub iteration: usize,
    pub retrievals_used: usize,
    pub trace: Vec<TraceEvent>,
}

impl PipelineState {
    pub fn new(question: Question) -> Self {
        PipelineState {
            question,
            knowledge_buffer: Vec::new(),
            rationale_buffer: Vec::new(),
            iteration: 0,
            retrievals_used: 0,
            trace: Vec::new(),
        }
    }

    pub fn has_snippet(&self, doc_id: &str) -> bool {
        self.knowledge_buffer.iter().any(|k| k.doc_id == doc_id)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::EstimatorKind;

    fn score() -> UncertaintyScore {
        UncertaintyScore::new(-5.0, EstimatorKind::GramLogdet, 20)
    }

    #[test]
    fn rationale_rejects_empty_and_multiline() {
        assert_eq!(
            Rationale::new("  ", score(), false).unwrap_err(),
            ValueError::EmptyRationale
        );
        assert!(matches!(
            Rationale::new("a.\nb.", score(), false),
            Err(ValueError::MultilineRationale(_))
        ));
        assert!(Rationale::new("One step.", score(), true).is_ok());
    }

    #[test]
    fn snippet_invariants() {
        assert_eq!(
            KnowledgeSnippet::new("d", "", "text", 0, score()).unwrap_err(),
            ValueError::ZeroRank
        );
        assert!(KnowledgeSnippet::new("d", "", " ", 1, score()).is_err());
        let k = KnowledgeSnippet::new("d", "Fly540", "An airline.", 2, score()).unwrap();
        assert_eq!(k.display_text(), "Fly540 An airline.");
    }

    #[test]
    fn question_requires_text() {
        assert_eq!(
            Question::new("q1", "", vec![]).unwrap_err(),
            ValueError::EmptyQuestion
        );
    }
}
