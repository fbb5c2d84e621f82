//! Prompt templates and final-answer extraction.
//!
//! Every context the engine sends to the model is rendered here. The four
//! layouts share the same skeleton: an in-context example block, an optional
//! numbered `Context:` block of passages, the reasoning so far, and a closing
//! `Question:` / `Answer:` pair. The rationale-chain layout instead lists the
//! steps after `Answer:` and ends with the answer marker so the model only
//! has to continue with the answer itself.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::IclFamily;
use crate::types::{KnowledgeSnippet, Question, Rationale};

/// Marker that introduces the final answer in a reasoning chain.
pub const ANSWER_MARKER: &str = "So the answer is";
/// Longer form of the marker, also accepted on extraction.
pub const FINAL_ANSWER_MARKER: &str = "So the final answer is";

pub const QUESTION_LABEL: &str = "Question:";
pub const ANSWER_LABEL: &str = "Answer:";
pub const CONTEXT_LABEL: &str = "Context:";
pub const REASONING_LABEL: &str = "Reasoning so far:";
pub const FORMAT_INSTRUCTION: &str = "Answer in the same format as before.";

const SIMPLE_QA_V1: &str = include_str!("../assets/icl/simple_qa.v1.txt");
const TWO_WIKI_V1: &str = include_str!("../assets/icl/two_wiki.v1.txt");
const HOTPOTQA_V1: &str = include_str!("../assets/icl/hotpotqa.v1.txt");
const IIRC_V1: &str = include_str!("../assets/icl/iirc.v1.txt");

#[derive(Debug, Error, PartialEq, Eq)]
pub enum TemplateError {
    #[error("template {kind:?} requires knowledge snippets")]
    MissingKnowledge { kind: TemplateKind },
    #[error("template {kind:?} does not take knowledge snippets")]
    UnexpectedKnowledge { kind: TemplateKind },
    #[error("template {kind:?} requires at least one knowledge snippet")]
    EmptyKnowledge { kind: TemplateKind },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TemplateKind {
    /// Next-step prompt from the question and the rationale buffer.
    RetrievalContext,
    /// Next-step prompt with one candidate passage added.
    RerankContext,
    /// Rationale chain followed by the answer marker.
    ReasonFromRationales,
    /// Fresh chain-of-thought over every buffered passage.
    ReasonFromKnowledge,
}

impl TemplateKind {
    pub fn takes_knowledge(self) -> bool {
        matches!(
            self,
            TemplateKind::RerankContext | TemplateKind::ReasonFromKnowledge
        )
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptTemplate {
    pub kind: TemplateKind,
    pub icl_examples: Vec<String>,
}

impl PromptTemplate {
    pub fn new(kind: TemplateKind, icl_examples: Vec<String>) -> Self {
        PromptTemplate { kind, icl_examples }
    }

    /// Template with the first `count` examples of a bundled example set.
    pub fn with_family(kind: TemplateKind, family: IclFamily, count: usize) -> Self {
        let examples = icl_examples(family)
            .into_iter()
            .take(count)
            .map(str::to_string)
            .collect();
        PromptTemplate::new(kind, examples)
    }
}

/// The four templates used by one engine instance.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TemplateSet {
    pub retrieval: PromptTemplate,
    pub rerank: PromptTemplate,
    pub from_rationales: PromptTemplate,
    pub from_knowledge: PromptTemplate,
}

impl TemplateSet {
    pub fn for_family(family: IclFamily, count: usize) -> Self {
        TemplateSet {
            retrieval: PromptTemplate::with_family(TemplateKind::RetrievalContext, family, count),
            rerank: PromptTemplate::with_family(TemplateKind::RerankContext, family, count),
            from_rationales: PromptTemplate::with_family(
                TemplateKind::ReasonFromRationales,
                family,
                count,
            ),
            from_knowledge: PromptTemplate::with_family(
                TemplateKind::ReasonFromKnowledge,
                family,
                count,
            ),
        }
    }

    /// Templates without in-context examples; handy for scripted runs.
    pub fn bare() -> Self {
        TemplateSet::for_family(IclFamily::default(), 0)
    }
}

/// Bundled in-context examples, split on blank lines.
pub fn icl_examples(family: IclFamily) -> Vec<&'static str> {
    let raw = match family {
        IclFamily::SimpleQa => SIMPLE_QA_V1,
        IclFamily::TwoWiki => TWO_WIKI_V1,
        IclFamily::Hotpotqa => HOTPOTQA_V1,
        IclFamily::Iirc => IIRC_V1,
    };
    raw.split("\n\n")
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .collect()
}

pub fn render_context(
    template: &PromptTemplate,
    question: &Question,
    rationales: &[Rationale],
    knowledge: Option<&[KnowledgeSnippet]>,
) -> Result<String, TemplateError> {
    let kind = template.kind;
    let knowledge = match (kind.takes_knowledge(), knowledge) {
        (true, None) => return Err(TemplateError::MissingKnowledge { kind }),
        (true, Some([])) => return Err(TemplateError::EmptyKnowledge { kind }),
        (false, Some(_)) => return Err(TemplateError::UnexpectedKnowledge { kind }),
        (_, k) => k.unwrap_or(&[]),
    };

    let mut out = String::new();
    for example in &template.icl_examples {
        out.push_str(example.trim_end());
        out.push_str("\n\n");
    }

    if !knowledge.is_empty() {
        out.push_str(CONTEXT_LABEL);
        out.push('\n');
        for (i, snippet) in knowledge.iter().enumerate() {
            let _ = writeln!(out, "[{}]. {}", i + 1, snippet.display_text());
        }
        out.push_str(FORMAT_INSTRUCTION);
        out.push('\n');
    }

    match kind {
        TemplateKind::ReasonFromRationales => {
            let _ = write!(out, "{QUESTION_LABEL} {}\n{ANSWER_LABEL}", question.text.trim());
            for (i, r) in rationales.iter().enumerate() {
                out.push(if i == 0 { ' ' } else { '\n' });
                out.push_str(r.text.trim());
            }
            out.push(if rationales.is_empty() { ' ' } else { '\n' });
            out.push_str(ANSWER_MARKER);
        }
        TemplateKind::ReasonFromKnowledge => {
            let _ = write!(out, "{QUESTION_LABEL} {}\n{ANSWER_LABEL}", question.text.trim());
        }
        TemplateKind::RetrievalContext | TemplateKind::RerankContext => {
            if !rationales.is_empty() {
                out.push_str(REASONING_LABEL);
                out.push('\n');
                for r in rationales {
                    out.push_str(r.text.trim());
                    out.push('\n');
                }
            }
            let _ = write!(out, "{QUESTION_LABEL} {}\n{ANSWER_LABEL}", question.text.trim());
        }
    }
    Ok(out)
}

/// Recovers the question from a rendered context (the text after the last
/// `Question:` label, up to the end of that line).
pub fn question_from_context(context: &str) -> Option<&str> {
    let start = context.rfind(QUESTION_LABEL)? + QUESTION_LABEL.len();
    let rest = &context[start..];
    let line = rest.split('\n').next().unwrap_or(rest);
    Some(line.trim())
}

/// Returns the text after the last answer marker, trimmed, with one terminal
/// period removed. Only the first line after the marker is considered.
pub fn extract_final_answer(generation: &str) -> Option<String> {
    let short = generation
        .rfind(ANSWER_MARKER)
        .map(|i| i + ANSWER_MARKER.len());
    let long = generation
        .rfind(FINAL_ANSWER_MARKER)
        .map(|i| i + FINAL_ANSWER_MARKER.len());
    let start = match (short, long) {
        (Some(a), Some(b)) => a.max(b),
        (a, b) => a.or(b)?,
    };
    let tail = generation[start..].trim_start();
    let line = tail.lines().next().unwrap_or("").trim();
    let answer = line.strip_suffix('.').unwrap_or(line).trim_end();
    if answer.is_empty() {
        None
    } else {
        Some(answer.to_string())
    }
}

pub fn contains_answer_marker(text: &str) -> bool {
    text.contains(ANSWER_MARKER) || text.contains(FINAL_ANSWER_MARKER)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::EstimatorKind;
    use crate::uncertainty::UncertaintyScore;
    use proptest::prelude::*;

    fn q(text: &str) -> Question {
        Question::new("q", text, vec![]).unwrap()
    }

    fn r(text: &str) -> Rationale {
        Rationale::new(
            text,
            UncertaintyScore::new(-5.0, EstimatorKind::GramLogdet, 20),
            false,
        )
        .unwrap()
    }

    fn k(title: &str, text: &str) -> KnowledgeSnippet {
        KnowledgeSnippet::new(
            "d1",
            title,
            text,
            1,
            UncertaintyScore::new(-5.0, EstimatorKind::GramLogdet, 20),
        )
        .unwrap()
    }

    const JODOROWSKY: &str = "Who lived longer, Alejandro Jodorowsky or Philip Saville?";

    #[test]
    fn retrieval_context_with_empty_buffers_ends_with_answer_label() {
        let t = PromptTemplate::with_family(TemplateKind::RetrievalContext, IclFamily::Hotpotqa, 2);
        let s = render_context(&t, &q(JODOROWSKY), &[], None).unwrap();
        assert!(s.ends_with("Answer:"));
        assert!(!s.contains(CONTEXT_LABEL));
        assert!(s.starts_with("Question: Jeremy Theobald"));
        assert_eq!(question_from_context(&s), Some(JODOROWSKY));
    }

    #[test]
    fn rerank_context_orders_context_then_rationales_then_answer() {
        let t = PromptTemplate::new(TemplateKind::RerankContext, vec![]);
        let r1 = "Philip Saville was born on 28 October 1930 and passed away on 22 December 2016.";
        let s = render_context(
            &t,
            &q(JODOROWSKY),
            &[r(r1)],
            Some(&[k("Alejandro Jodorowsky", "Chilean-French filmmaker.")]),
        )
        .unwrap();
        let ctx = s.find(CONTEXT_LABEL).unwrap();
        let rat = s.find(r1).unwrap();
        let ans = s.rfind(ANSWER_LABEL).unwrap();
        assert!(ctx < rat && rat < ans, "{s}");
        assert!(s.contains("[1]. Alejandro Jodorowsky Chilean-French filmmaker.\n"));
        assert!(s.contains(FORMAT_INSTRUCTION));
        assert!(s.ends_with("Answer:"));
    }

    #[test]
    fn rationale_chain_ends_with_marker() {
        let t = PromptTemplate::with_family(TemplateKind::ReasonFromRationales, IclFamily::SimpleQa, 3);
        let s = render_context(&t, &q(JODOROWSKY), &[r("a."), r("b."), r("c.")], None).unwrap();
        assert!(s.trim_end().ends_with("So the answer is"));
        assert!(s.ends_with("Answer: a.\nb.\nc.\nSo the answer is"));
    }

    #[test]
    fn knowledge_is_numbered_in_order() {
        let t = PromptTemplate::new(TemplateKind::ReasonFromKnowledge, vec![]);
        let ks = [k("", "first."), k("", "second."), k("", "third.")];
        let s = render_context(&t, &q(JODOROWSKY), &[], Some(&ks)).unwrap();
        assert!(s.starts_with("Context:\n[1]. first.\n[2]. second.\n[3]. third.\n"));
        assert!(s.ends_with("Answer:"));
    }

    #[test]
    fn slot_mismatches_are_errors() {
        let q = q(JODOROWSKY);
        let rr = PromptTemplate::new(TemplateKind::RerankContext, vec![]);
        assert_eq!(
            render_context(&rr, &q, &[], None),
            Err(TemplateError::MissingKnowledge {
                kind: TemplateKind::RerankContext
            })
        );
        assert_eq!(
            render_context(&rr, &q, &[], Some(&[])),
            Err(TemplateError::EmptyKnowledge {
                kind: TemplateKind::RerankContext
            })
        );
        let rc = PromptTemplate::new(TemplateKind::RetrievalContext, vec![]);
        assert_eq!(
            render_context(&rc, &q, &[], Some(&[k("", "x")])),
            Err(TemplateError::UnexpectedKnowledge {
                kind: TemplateKind::RetrievalContext
            })
        );
    }

    #[test]
    fn bundled_example_sets() {
        assert_eq!(icl_examples(IclFamily::SimpleQa).len(), 9);
        assert_eq!(icl_examples(IclFamily::TwoWiki).len(), 10);
        assert_eq!(icl_examples(IclFamily::Hotpotqa).len(), 11);
        assert_eq!(icl_examples(IclFamily::Iirc).len(), 10);
        for family in IclFamily::ALL {
            for ex in icl_examples(family) {
                assert!(ex.starts_with("Question: "), "{ex}");
                assert!(ex.contains("\nAnswer: "), "{ex}");
                assert!(extract_final_answer(ex).is_some(), "{ex}");
            }
        }
        let first = icl_examples(IclFamily::SimpleQa)[0];
        assert_eq!(extract_final_answer(first).as_deref(), Some("Walls and Bridges"));
    }

    #[test]
    fn extraction_examples() {
        assert_eq!(
            extract_final_answer("So the answer is Walls and Bridges.").as_deref(),
            Some("Walls and Bridges")
        );
        assert_eq!(
            extract_final_answer("Philip Saville was born on 28 October 1930."),
            None
        );
        assert_eq!(
            extract_final_answer(
                "The debut album of the band 'The Operation M.D.' was 'We Have an Emergency'. So the answer is The Operation M.D.."
            )
            .as_deref(),
            Some("The Operation M.D.")
        );
        assert_eq!(
            extract_final_answer("So the final answer is May Revolution.").as_deref(),
            Some("May Revolution")
        );
        // last marker wins
        assert_eq!(
            extract_final_answer("So the final answer is A. So the answer is B.").as_deref(),
            Some("B")
        );
        assert_eq!(extract_final_answer("So the answer is   "), None);
        assert_eq!(
            extract_final_answer("So the answer is Rome.\nQuestion: next").as_deref(),
            Some("Rome")
        );
    }

    fn plain_text() -> impl Strategy<Value = String> {
        "[A-Za-z0-9][A-Za-z0-9 ,']{0,30}[A-Za-z0-9]"
    }

    proptest! {
        #[test]
        fn rendering_is_pure_and_question_recoverable(
            qtext in plain_text(),
            steps in prop::collection::vec(plain_text(), 0..4),
            passages in prop::collection::vec(plain_text(), 1..4),
            kind_idx in 0usize..4,
        ) {
            let kind = [
                TemplateKind::RetrievalContext,
                TemplateKind::RerankContext,
                TemplateKind::ReasonFromRationales,
                TemplateKind::ReasonFromKnowledge,
            ][kind_idx];
            let question = q(&format!("zq {qtext}?"));
            let rationales: Vec<_> = steps.iter().map(|s| r(&format!("{s}."))).collect();
            let ks: Vec<_> = passages.iter().map(|p| k("", p)).collect();
            let knowledge = kind.takes_knowledge().then_some(ks.as_slice());
            let t = PromptTemplate::with_family(kind, IclFamily::Iirc, 3);
            let a = render_context(&t, &question, &rationales, knowledge).unwrap();
            let b = render_context(&t, &question, &rationales, knowledge).unwrap();
            prop_assert_eq!(&a, &b);
            prop_assert_eq!(a.matches(question.text.as_str()).count(), 1);
            prop_assert_eq!(question_from_context(&a), Some(question.text.as_str()));
        }

        #[test]
        fn marker_round_trip(answer in plain_text(), steps in prop::collection::vec(plain_text(), 1..4)) {
            let t = PromptTemplate::with_family(TemplateKind::ReasonFromRationales, IclFamily::Hotpotqa, 2);
            let rationales: Vec<_> = steps.iter().map(|s| r(&format!("{s}."))).collect();
            let rendered = render_context(&t, &q("zq?"), &rationales, None).unwrap();
            let generation = format!("{rendered} {answer}");
            prop_assert_eq!(extract_final_answer(&generation), Some(answer.clone()));
            let generation = format!("{rendered}{ANSWER_MARKER} {answer}");
            prop_assert_eq!(extract_final_answer(&generation), Some(answer));
        }
    }
}
