//! Fixtures and independent oracles shared by the integration suites.
#![allow(dead_code)]

use std::collections::HashMap;

use gramrag::backend::{MatchRule, MockBackend, MockResponse, MockSample};
use gramrag::retrieval::{idf, tokenize};
use gramrag::template::ANSWER_MARKER;
use gramrag::config::EstimatorKind;
use gramrag::{
    Bm25Params, Document, EngineConfig, KnowledgeSnippet, PipelineState, Question, Rationale,
    SearchIndex, TemplateSet, UncertaintyScore,
};
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const ALPHA: f64 = 1e-3;

// ---------------------------------------------------------------- oracles

/// Gram score through a full symmetric eigendecomposition.
pub fn gram_eigen_oracle(vectors: &[Vec<f64>], alpha: f64) -> f64 {
    let k = vectors.len();
    let d = vectors[0].len();
    let mut m = DMatrix::<f64>::zeros(k, d);
    for (i, v) in vectors.iter().enumerate() {
        for (j, x) in v.iter().enumerate() {
            m[(i, j)] = *x;
        }
    }
    let mean = m.row_mean();
    let scale = vectors
        .iter()
        .flatten()
        .fold(1.0f64, |acc, x| acc.max(x.abs()));
    for i in 0..k {
        let mut row = m.row(i) - &mean;
        let norm = row.norm();
        if norm > 1e-12 * scale {
            row /= norm;
        } else {
            row.fill(0.0);
        }
        m.set_row(i, &row);
    }
    let g = &m * m.transpose();
    let eig = g.symmetric_eigen();
    eig.eigenvalues.iter().map(|l| (l.max(0.0) + alpha).ln()).sum::<f64>() / k as f64
}

pub fn random_vectors(rng: &mut ChaCha8Rng, k: usize, d: usize) -> Vec<Vec<f64>> {
    (0..k)
        .map(|_| (0..d).map(|_| rng.random_range(-3.0..3.0)).collect())
        .collect()
}

/// Random orthogonal matrix from the QR factorization of a Gaussian-like one.
pub fn random_orthogonal(rng: &mut ChaCha8Rng, d: usize) -> DMatrix<f64> {
    let a = DMatrix::<f64>::from_fn(d, d, |_, _| rng.random_range(-1.0..1.0));
    a.qr().q()
}

pub fn rotate(vectors: &[Vec<f64>], q: &DMatrix<f64>) -> Vec<Vec<f64>> {
    vectors
        .iter()
        .map(|v| {
            (0..q.ncols())
                .map(|j| v.iter().enumerate().map(|(i, x)| x * q[(i, j)]).sum())
                .collect()
        })
        .collect()
}

/// BM25 evaluated directly from raw documents for every document.
pub fn bm25_brute_force(docs: &[Document], query: &str, params: Bm25Params) -> Vec<(String, f64)> {
    let terms: Vec<Vec<String>> = docs
        .iter()
        .map(|d| {
            let mut t = tokenize(&d.title);
            t.extend(tokenize(&d.text));
            t
        })
        .collect();
    let n = docs.len();
    let avg = terms.iter().map(Vec::len).sum::<usize>() as f64 / n as f64;
    let mut out = Vec::new();
    for (doc, toks) in docs.iter().zip(&terms) {
        let mut score = 0.0;
        let mut matched = false;
        for q in tokenize(query) {
            let tf = toks.iter().filter(|t| **t == q).count();
            if tf == 0 {
                continue;
            }
            matched = true;
            let df = terms.iter().filter(|ts| ts.contains(&q)).count();
            let tf = tf as f64;
            let norm = 1.0 - params.b + params.b * toks.len() as f64 / avg;
            score += idf(n, df) * tf * (params.k1 + 1.0) / (tf + params.k1 * norm);
        }
        if matched {
            out.push((doc.doc_id.clone(), score));
        }
    }
    out.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    out
}

const VOCAB: [&str; 24] = [
    "river", "airline", "film", "director", "born", "city", "kenya", "tanzania", "anthem", "opera",
    "novel", "series", "actress", "company", "founded", "capital", "boxing", "network", "album",
    "band", "island", "bridge", "museum", "castle",
];

pub fn synthetic_corpus(rng: &mut ChaCha8Rng, n: usize) -> Vec<Document> {
    (0..n)
        .map(|i| {
            let len = rng.random_range(5..40);
            let words: Vec<&str> = (0..len).map(|_| VOCAB[rng.random_range(0..VOCAB.len())]).collect();
            let title = VOCAB[rng.random_range(0..VOCAB.len())];
            Document::new(format!("doc{i:04}"), title, words.join(" "))
        })
        .collect()
}

pub fn synthetic_query(rng: &mut ChaCha8Rng) -> String {
    let len = rng.random_range(1..5);
    let mut words: Vec<&str> = (0..len).map(|_| VOCAB[rng.random_range(0..VOCAB.len())]).collect();
    if rng.random_bool(0.2) {
        words.push("unindexedterm");
    }
    words.join(" ")
}

pub fn brute_postings(docs: &[Document]) -> HashMap<String, HashMap<String, u32>> {
    let mut out: HashMap<String, HashMap<String, u32>> = HashMap::new();
    for d in docs {
        for t in tokenize(&d.title).into_iter().chain(tokenize(&d.text)) {
            *out.entry(t).or_default().entry(d.doc_id.clone()).or_default() += 1;
        }
    }
    out
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

// ----------------------------------------------------- two-hop biography run

pub const BIO_QUESTION: &str = "Who lived longer, Alejandro Jodorowsky or Philip Saville?";
pub const BIO_ANSWER: &str = "Alejandro Jodorowsky";
pub const BIO_FIRST_STEP: &str = "Philip Saville was born on 28 October 1930 and died on 22 December 2016.";
pub const BIO_PSEUDO: &str = "Alejandro Jodorowsky was born on 7 July 1929.";
pub const BIO_GROUNDED_STEP: &str = "Alejandro Jodorowsky was born on 17 February 1929.";
pub const BIO_RERANK_SCORES: [f64; 3] = [-4.37, -4.91, -4.88];

/// Small corpus in which the query mined from the uncertain step ranks an
/// interview passage first and two overlapping biographies second and third.
pub fn bio_corpus() -> Vec<Document> {
    vec![
        Document::new(
            "jodorowsky-projects",
            "Alejandro Jodorowsky",
            "Alejandro Jodorowsky was asked about King Shot in a newspaper interview in November 2009. \
             Jodorowsky said he was unable to raise the money, so Jodorowsky was moving on to Sons of El Topo instead.",
        ),
        Document::new(
            "jodorowsky-bio",
            "Alejandro Jodorowsky",
            "Alejandro Jodorowsky Prullansky (born 17 February 1929) is a Chilean-French filmmaker and author.",
        ),
        Document::new(
            "jodorowsky-bio-long",
            "Jodorowsky career",
            "Known for surreal cinema, Alejandro Jodorowsky Prullansky (born 17 February 1929) is a Chilean-French filmmaker. \
             Since the late 1940s he has worked as a playwright, a comics writer, a tarot scholar, a mime and a novelist, \
             and his films have become cult classics across Europe and the Americas.",
        ),
        Document::new(
            "saville",
            "Philip Saville",
            "Philip Saville (28 October 1930 to 22 December 2016) was a British television and film director and screenwriter.",
        ),
        Document::new("santiago", "Santiago", "Santiago is the capital and largest city of Chile."),
        Document::new("el-topo", "El Topo", "El Topo is a 1970 western film with surreal imagery."),
        Document::new("guardian", "The Guardian", "The Guardian is a British daily newspaper founded in 1821."),
    ]
}

pub fn bio_index() -> SearchIndex {
    SearchIndex::build(bio_corpus(), Bm25Params::default()).unwrap()
}

pub fn bio_question() -> Question {
    Question::new("hpqa-jodorowsky", BIO_QUESTION, vec![BIO_ANSWER.to_string()]).unwrap()
}

/// Per-word log-probabilities of the uncertain pseudo-generation: the
/// invented birthday is the low-probability part.
fn bio_pseudo_sample() -> MockSample {
    // Alejandro Jodorowsky was born on 7 July 1929.
    MockSample::text(BIO_PSEUDO).with_logprobs(vec![-0.05, -0.02, -0.1, -0.2, -0.3, -2.4, -2.9, -0.4])
}

pub fn bio_script() -> Vec<MockResponse> {
    let step = MatchRule::contains(BIO_QUESTION).and_not("Context:").greedy(false);
    let rerank = |marker: &str| {
        MatchRule::contains("Context:")
            .and_contains("Reasoning so far:")
            .and_contains(marker)
            .greedy(false)
    };
    vec![
        // iteration 1: confident, no retrieval
        MockResponse::reply(step.clone().and_not("Reasoning so far:"), BIO_FIRST_STEP).with_score(-6.3),
        // iteration 2: uncertain birthday
        MockResponse::new(
            step.clone().and_contains("Reasoning so far:").and_not("17 February"),
            vec![bio_pseudo_sample()],
        )
        .with_score(-4.4),
        MockResponse::reply(rerank("King Shot"), "Alejandro Jodorowsky was born in 1930.").with_score(BIO_RERANK_SCORES[0]),
        MockResponse::reply(rerank("is a Chilean-French filmmaker and author"), BIO_GROUNDED_STEP)
            .with_score(BIO_RERANK_SCORES[1]),
        MockResponse::reply(rerank("surreal cinema"), BIO_GROUNDED_STEP).with_score(BIO_RERANK_SCORES[2]),
        MockResponse::reply(
            MatchRule::contains("Context:")
                .and_contains("Reasoning so far:")
                .and_contains("is a Chilean-French filmmaker and author")
                .greedy(true),
            format!("{BIO_GROUNDED_STEP} He is still alive."),
        ),
        // iteration 3: answer
        MockResponse::reply(
            step.and_contains(BIO_GROUNDED_STEP),
            format!("{ANSWER_MARKER} {BIO_ANSWER}."),
        )
        .with_score(-6.4),
        // knowledge-only strategy
        MockResponse::reply(
            MatchRule::contains("Context:").and_not("Reasoning so far:").greedy(false),
            "Alejandro Jodorowsky was born in 1929.",
        )
        .with_score(-5.0),
        MockResponse::reply(
            MatchRule::contains("Context:").and_not("Reasoning so far:").greedy(true),
            format!("Jodorowsky was born in 1929 and is alive. {ANSWER_MARKER} {BIO_ANSWER}."),
        ),
    ]
}

pub fn bio_backend() -> MockBackend {
    MockBackend::new(bio_script())
}

// ------------------------------------------------- scripted question suites

pub fn suite_question(i: usize) -> Question {
    Question::new(
        format!("s{i:02}"),
        format!("Which answer belongs to puzzle {i:02} of the suite?"),
        vec![format!("Answer{i:02}")],
    )
    .unwrap()
}

/// Two-step script for one suite question. The first step is scored `s1`,
/// the answering step `s2`. Every context gets a response, so the run path
/// is identical whatever the retrieval decisions are.
pub fn suite_script(i: usize, s1: f64, s2: f64, answer: &str) -> Vec<MockResponse> {
    let q = suite_question(i).text;
    let fact = format!("Topic{i:02} is the subject of puzzle {i:02}.");
    let final_step = format!("{ANSWER_MARKER} {answer}.");
    vec![
        MockResponse::reply(
            MatchRule::contains(&q).and_not("Reasoning so far:").and_not("Context:").greedy(false),
            &fact,
        )
        .with_score(s1)
        .persistent(),
        MockResponse::reply(
            MatchRule::contains(&q).and_contains("Reasoning so far:").and_not("Context:").greedy(false),
            &final_step,
        )
        .with_score(s2)
        .persistent(),
        // candidate scoring, first step and knowledge-only strategy
        MockResponse::reply(
            MatchRule::contains(&q).and_contains("Context:").and_not("Reasoning so far:").greedy(false),
            &fact,
        )
        .with_score(-5.2)
        .persistent(),
        MockResponse::reply(
            MatchRule::contains(&q).and_contains("Context:").and_contains("Reasoning so far:").greedy(false),
            &final_step,
        )
        .with_score(-5.6)
        .persistent(),
        // grounded first step; the line continues into the knowledge-only answer
        MockResponse::reply(
            MatchRule::contains(&q).and_contains("Context:").and_not("Reasoning so far:").greedy(true),
            format!("{fact} {final_step}"),
        )
        .persistent(),
        MockResponse::reply(
            MatchRule::contains(&q).and_contains("Context:").and_contains("Reasoning so far:").greedy(true),
            &final_step,
        )
        .persistent(),
        // forced answer after the chain
        MockResponse::reply(
            MatchRule::contains(&q).and_contains(ANSWER_MARKER).and_not("Context:").greedy(true),
            format!(" {answer}."),
        )
        .persistent(),
    ]
}

pub fn suite_corpus(n: usize) -> Vec<Document> {
    (0..n)
        .flat_map(|i| {
            [
                Document::new(
                    format!("s{i:02}-a"),
                    format!("Topic{i:02}"),
                    format!("Topic{i:02} is the subject of puzzle {i:02} and its answer is Answer{i:02}."),
                ),
                Document::new(
                    format!("s{i:02}-b"),
                    format!("Puzzle {i:02}"),
                    format!("Puzzle {i:02} appears in the suite next to Topic{i:02}."),
                ),
            ]
        })
        .collect()
}

/// First- and second-step scores for the 20-question suite, spread over the
/// working range of the estimator.
pub fn suite_scores() -> Vec<(f64, f64)> {
    let mut r = rng(20);
    (0..20)
        .map(|_| (r.random_range(-6.4..-3.9), r.random_range(-6.4..-3.9)))
        .collect()
}

pub fn suite_backend(scores: &[(f64, f64)]) -> MockBackend {
    MockBackend::new(
        scores
            .iter()
            .enumerate()
            .flat_map(|(i, &(a, b))| suite_script(i, a, b, &format!("Answer{i:02}")))
            .collect(),
    )
}

pub fn bare_templates() -> TemplateSet {
    TemplateSet::bare()
}

pub fn default_config() -> EngineConfig {
    EngineConfig::default()
}

// ------------------------------------------------ airline and film fixtures

pub const FJ_QUESTION: &str =
    "In what city is the company that Fastjet Tanzania was originally founded as a part of prior to rebranding based?";
pub const FJ_PSEUDO: &str = "FastJet Tanzania was originally founded as a part of the company Fastjet plc, which was based in London, United Kingdom.";
pub const FJ_STEP: &str = "Fastjet Tanzania was originally founded as a part of Fly540, which is based in Nairobi, Kenya.";

pub fn fj_corpus() -> Vec<Document> {
    vec![
        Document::new(
            "fastjet-office",
            "Fastjet Tanzania",
            "Fastjet Tanzania keeps a head office on Samora Avenue in Dar es Salaam. Fastjet Tanzania flies Airbus A319s \
             and carries cargo for a partner on its Tanzania routes. Fastjet Tanzania was founded as an airline.",
        ),
        Document::new(
            "fastjet-history",
            "Fastjet Tanzania",
            "Fastjet Tanzania is a low-cost airline based in Dar es Salaam. It was founded in 2011 as Fly540 Tanzania, \
             a subsidiary of the Kenya-based Fly540, and was rebranded after Fly540 was acquired in 2012.",
        ),
        Document::new(
            "fastjet-ownership",
            "Fastjet ownership",
            "Fastjet Plc owns 49 percent of Fastjet Tanzania, which flies domestic routes from Dar es Salaam to Mwanza, \
             Kilimanjaro and Mbeya, and plans to sell more shares to Tanzanian investors.",
        ),
        Document::new("fly540", "Fly540", "Fly540 is a low-cost airline that began operations in 2006 in Nairobi, Kenya."),
        Document::new("nairobi", "Nairobi", "Nairobi is the capital city of Kenya."),
    ]
}

pub fn fj_pseudo() -> MockSample {
    let mut lps = vec![-2.5; 20];
    for (i, lp) in [(0, -0.05), (1, -0.02), (3, -0.3), (4, -0.2), (5, -0.4), (7, -0.6)] {
        lps[i] = lp;
    }
    MockSample::text(FJ_PSEUDO).with_logprobs(lps)
}

pub fn gram_score(v: f64) -> UncertaintyScore {
    UncertaintyScore::new(v, EstimatorKind::GramLogdet, 20)
}

pub fn spiderwick_state() -> PipelineState {
    let mut state = PipelineState::new(
        Question::new(
            "spiderwick",
            "What's the name of the fantasy film starring Sarah Bolger, featuring a New England family who discover magical creatures around their estate?",
            vec!["The Spiderwick Chronicles".into()],
        )
        .unwrap(),
    );
    for (text, v) in [
        ("The fantasy film starring Sarah Bolger is Stormbreaker.", -5.25),
        ("It features a New England family who discover magical creatures around their estate.", -5.38),
        ("So the answer is Stormbreaker.", -3.56),
    ] {
        state.rationale_buffer.push(Rationale::new(text, gram_score(v), true).unwrap());
    }
    for (id, text) in [
        ("bolger", "Sarah Bolger is an Irish actress who starred in Stormbreaker and The Spiderwick Chronicles."),
        ("spiderwick", "The Spiderwick Chronicles is a 2008 fantasy film set on the Spiderwick Estate in New England."),
    ] {
        state
            .knowledge_buffer
            .push(KnowledgeSnippet::new(id, "", text, 1, gram_score(-5.0)).unwrap());
    }
    state
}

pub fn spiderwick_backend(knowledge_score: f64) -> MockBackend {
    MockBackend::new(vec![
        MockResponse::reply(MatchRule::contains("Context:").greedy(false), "The fantasy film is The Spiderwick Chronicles.")
            .with_score(knowledge_score),
        MockResponse::reply(
            MatchRule::contains("Context:").greedy(true),
            "The fantasy film starring Sarah Bolger is The Spiderwick Chronicles. So the answer is The Spiderwick Chronicles.",
        ),
    ])
}

pub fn fj_state() -> PipelineState {
    PipelineState::new(Question::new("fj", FJ_QUESTION, vec!["Nairobi, Kenya".into()]).unwrap())
}

/// Rerank candidates score -5.10, -5.828 and -5.302 in search order.
pub fn fj_backend() -> MockBackend {
    let wrong = "Fastjet Tanzania was originally founded as a part of prior to rebranding based in Dar es Salaam, Tanzania.";
    let rerank = |marker: &str| MatchRule::contains("Context:").and_contains(marker).greedy(false);
    MockBackend::new(vec![
        MockResponse::new(
            MatchRule::contains(FJ_QUESTION).and_not("Context:").greedy(false),
            vec![fj_pseudo()],
        )
        .with_score(-4.84),
        MockResponse::reply(rerank("Samora Avenue"), wrong).with_score(-5.10),
        MockResponse::reply(rerank("Kenya-based Fly540"), FJ_STEP).with_score(-5.828),
        MockResponse::reply(rerank("49 percent"), wrong).with_score(-5.302),
        MockResponse::reply(
            MatchRule::contains("Context:").and_contains("Kenya-based Fly540").greedy(true),
            FJ_STEP,
        ),
    ])
}
