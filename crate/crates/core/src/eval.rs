//! Answer metrics, dataset loading, benchmark runs and hyperparameter sweeps.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::mpsc;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{Backend, BackendError};
use crate::config::{EngineConfig, LayerSelector};
use crate::pipeline::{run_question, Deps, StrategyKind};
use crate::retrieval::SearchIndex;
use crate::template::TemplateSet;
use crate::types::Question;

/// Sample-count interval reported as best in the reference hyperparameter
/// study.
pub const REFERENCE_BEST_K: (usize, usize) = (10, 25);

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("gold answer list is empty")]
    EmptyGold,
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("question {0:?} has no gold answers")]
    MissingGold(String),
    #[error("duplicate question id {0:?}")]
    DuplicateId(String),
    #[error("{path} line {line}: {reason}")]
    Parse {
        path: String,
        line: usize,
        reason: String,
    },
    #[error("sweep grid: {0}")]
    Grid(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Lowercase, drop ASCII punctuation, drop the articles a/an/the, collapse
/// whitespace.
pub fn normalize_answer(text: &str) -> String {
    let lowered = text.to_lowercase();
    let no_punct: String = lowered.chars().filter(|c| !c.is_ascii_punctuation()).collect();
    no_punct
        .split_whitespace()
        .filter(|w| !matches!(*w, "a" | "an" | "the"))
        .collect::<Vec<_>>()
        .join(" ")
}

pub fn exact_match(pred: &str, golds: &[String]) -> Result<u8, EvalError> {
    if golds.is_empty() {
        return Err(EvalError::EmptyGold);
    }
    let p = normalize_answer(pred);
    Ok(golds.iter().any(|g| normalize_answer(g) == p) as u8)
}

fn f1_single(pred: &str, gold: &str) -> f64 {
    let p = normalize_answer(pred);
    let g = normalize_answer(gold);
    let pt: Vec<&str> = p.split_whitespace().collect();
    let gt: Vec<&str> = g.split_whitespace().collect();
    match (pt.is_empty(), gt.is_empty()) {
        (true, true) => return 1.0,
        (true, false) | (false, true) => return 0.0,
        _ => {}
    }
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for t in &gt {
        *counts.entry(t).or_default() += 1;
    }
    let mut overlap = 0usize;
    for t in &pt {
        if let Some(c) = counts.get_mut(t) {
            if *c > 0 {
                *c -= 1;
                overlap += 1;
            }
        }
    }
    if overlap == 0 {
        return 0.0;
    }
    let precision = overlap as f64 / pt.len() as f64;
    let recall = overlap as f64 / gt.len() as f64;
    2.0 * precision * recall / (precision + recall)
}

/// Token-multiset F1, maximized over gold aliases.
pub fn token_f1(pred: &str, golds: &[String]) -> Result<f64, EvalError> {
    if golds.is_empty() {
        return Err(EvalError::EmptyGold);
    }
    Ok(golds.iter().map(|g| f1_single(pred, g)).fold(0.0, f64::max))
}

#[derive(Deserialize)]
struct DatasetRow {
    #[serde(alias = "_id", alias = "qid")]
    id: String,
    #[serde(alias = "text")]
    question: String,
    #[serde(default, alias = "answer", alias = "gold_answers")]
    answers: Answers,
}

#[derive(Deserialize, Default)]
#[serde(untagged)]
enum Answers {
    #[default]
    None,
    One(String),
    Many(Vec<String>),
}

/// Reads line-delimited `{id, question, answers}` records.
pub fn load_dataset(path: impl AsRef<Path>) -> Result<Vec<Question>, EvalError> {
    let path = path.as_ref();
    let reader = BufReader::new(std::fs::File::open(path)?);
    let mut out = Vec::new();
    let mut seen = std::collections::HashSet::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |reason: String| EvalError::Parse {
            path: path.display().to_string(),
            line: i + 1,
            reason,
        };
        let row: DatasetRow = serde_json::from_str(&line).map_err(|e| parse_err(e.to_string()))?;
        let answers = match row.answers {
            Answers::None => Vec::new(),
            Answers::One(a) => vec![a],
            Answers::Many(v) => v,
        };
        if !seen.insert(row.id.clone()) {
            return Err(EvalError::DuplicateId(row.id));
        }
        out.push(Question::new(row.id, row.question, answers).map_err(|e| parse_err(e.to_string()))?);
    }
    Ok(out)
}

/// Seeded subset of at most `limit` questions, kept in dataset order.
pub fn sample_questions(questions: &[Question], limit: Option<usize>, seed: u64) -> Vec<Question> {
    match limit {
        Some(n) if n < questions.len() => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut picked = rand::seq::index::sample(&mut rng, questions.len(), n).into_vec();
            picked.sort_unstable();
            picked.into_iter().map(|i| questions[i].clone()).collect()
        }
        _ => questions.to_vec(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkRecord {
    pub question_id: String,
    pub predicted: String,
    pub gold: Vec<String>,
    pub em: u8,
    pub f1: f64,
    pub retrievals: usize,
    pub iterations: usize,
    pub strategy: Option<StrategyKind>,
    pub wall_time_ms: f64,
    /// Present when the run failed; the item then scores zero.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub count: usize,
    pub failed: usize,
    pub em_pct: f64,
    pub f1_pct: f64,
    pub mean_retrievals: f64,
    pub mean_iterations: f64,
    pub strategy_mix: BTreeMap<String, usize>,
}

pub fn aggregate(records: &[BenchmarkRecord]) -> Aggregate {
    let n = records.len().max(1) as f64;
    let mut strategy_mix = BTreeMap::new();
    for r in records {
        let key = r.strategy.map(StrategyKind::as_str).unwrap_or("failed");
        *strategy_mix.entry(key.to_string()).or_default() += 1;
    }
    Aggregate {
        count: records.len(),
        failed: records.iter().filter(|r| r.error.is_some()).count(),
        em_pct: 100.0 * records.iter().map(|r| r.em as f64).sum::<f64>() / n,
        f1_pct: 100.0 * records.iter().map(|r| r.f1).sum::<f64>() / n,
        mean_retrievals: records.iter().map(|r| r.retrievals as f64).sum::<f64>() / n,
        mean_iterations: records.iter().map(|r| r.iterations as f64).sum::<f64>() / n,
        strategy_mix,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkReport {
    pub records: Vec<BenchmarkRecord>,
    pub aggregate: Aggregate,
}

fn evaluate_one(question: &Question, deps: Deps<'_>, config: &EngineConfig) -> BenchmarkRecord {
    let start = Instant::now();
    let result = run_question(question.clone(), deps, config);
    let wall_time_ms = start.elapsed().as_secs_f64() * 1e3;
    let gold = question.gold_answers.clone();
    match result {
        Ok((answer, state)) => BenchmarkRecord {
            question_id: question.id.clone(),
            em: exact_match(&answer.text, &gold).unwrap_or(0),
            f1: token_f1(&answer.text, &gold).unwrap_or(0.0),
            predicted: answer.text,
            gold,
            retrievals: state.retrievals_used,
            iterations: state.iteration,
            strategy: Some(answer.strategy),
            wall_time_ms,
            error: None,
        },
        Err(failure) => BenchmarkRecord {
            question_id: question.id.clone(),
            predicted: String::new(),
            gold,
            em: 0,
            f1: 0.0,
            retrievals: failure.state.retrievals_used,
            iterations: failure.state.iteration,
            strategy: None,
            wall_time_ms,
            error: Some(failure.error.to_string()),
        },
    }
}

/// Runs every question with up to `config.workers` concurrent runs. Records
/// are appended to `sink` as JSON lines in completion order; the returned
/// records follow dataset order. Failed runs are recorded, not fatal.
pub fn run_benchmark(
    questions: &[Question],
    deps: Deps<'_>,
    config: &EngineConfig,
    sink: Option<&mut dyn Write>,
) -> Result<BenchmarkReport, EvalError> {
    if questions.is_empty() {
        return Err(EvalError::EmptyDataset);
    }
    if let Some(q) = questions.iter().find(|q| q.gold_answers.is_empty()) {
        return Err(EvalError::MissingGold(q.id.clone()));
    }
    let workers = config.workers.clamp(1, questions.len());
    let next = AtomicUsize::new(0);
    let (tx, rx) = mpsc::channel::<(usize, BenchmarkRecord)>();
    let mut slots: Vec<Option<BenchmarkRecord>> = vec![None; questions.len()];
    let mut sink = sink;

    let io_result = std::thread::scope(|scope| -> std::io::Result<()> {
        for _ in 0..workers {
            let tx = tx.clone();
            let next = &next;
            scope.spawn(move || loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= questions.len() {
                    break;
                }
                let record = evaluate_one(&questions[i], deps, config);
                if tx.send((i, record)).is_err() {
                    break;
                }
            });
        }
        drop(tx);
        let mut result = Ok(());
        for (i, record) in rx {
            if let (Some(out), Ok(())) = (sink.as_deref_mut(), &result) {
                result = serde_json::to_writer(&mut *out, &record)
                    .map_err(std::io::Error::other)
                    .and_then(|_| out.write_all(b"\n"));
            }
            slots[i] = Some(record);
        }
        result
    });
    io_result?;
    if let Some(out) = sink {
        out.flush()?;
    }

    let records: Vec<BenchmarkRecord> = slots
        .into_iter()
        .map(|r| r.expect("every question produces a record"))
        .collect();
    let aggregate = aggregate(&records);
    Ok(BenchmarkReport { records, aggregate })
}

/// Axes of a sweep. An empty axis keeps the base configuration's value.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SweepGrid {
    pub delta: Vec<f64>,
    pub num_samples: Vec<usize>,
    pub layer_selector: Vec<LayerSelector>,
    pub top_n: Vec<usize>,
}

impl SweepGrid {
    /// Parses `axis=v1,v2;axis=v3`, e.g. `delta=-7,-6,-5;num_samples=10,20`.
    pub fn parse(text: &str) -> Result<Self, EvalError> {
        fn values<T: std::str::FromStr>(axis: &str, raw: &str) -> Result<Vec<T>, EvalError>
        where
            T::Err: std::fmt::Display,
        {
            raw.split(',')
                .map(|v| {
                    v.trim()
                        .parse()
                        .map_err(|e| EvalError::Grid(format!("{axis}: bad value {v:?}: {e}")))
                })
                .collect()
        }
        let mut grid = SweepGrid::default();
        for part in text.split(';').map(str::trim).filter(|p| !p.is_empty()) {
            let (axis, raw) = part
                .split_once('=')
                .ok_or_else(|| EvalError::Grid(format!("expected axis=values, got {part:?}")))?;
            match axis.trim().replace('-', "_").as_str() {
                "delta" => grid.delta = values("delta", raw)?,
                "num_samples" | "k" => grid.num_samples = values("num_samples", raw)?,
                "layer_selector" | "layer" => grid.layer_selector = values("layer_selector", raw)?,
                "top_n" | "n" => grid.top_n = values("top_n", raw)?,
                other => return Err(EvalError::Grid(format!("unknown axis {other:?}"))),
            }
        }
        Ok(grid)
    }

    /// Every grid point as a full configuration, in axis-major order.
    pub fn points(&self, base: &EngineConfig) -> Vec<EngineConfig> {
        fn or_base<T: Clone>(axis: &[T], base: T) -> Vec<T> {
            if axis.is_empty() {
                vec![base]
            } else {
                axis.to_vec()
            }
        }
        let mut out = Vec::new();
        for &delta in &or_base(&self.delta, base.delta) {
            for &num_samples in &or_base(&self.num_samples, base.num_samples) {
                for &layer_selector in &or_base(&self.layer_selector, base.layer_selector) {
                    for &top_n in &or_base(&self.top_n, base.top_n) {
                        out.push(EngineConfig {
                            delta,
                            num_samples,
                            layer_selector,
                            top_n,
                            ..base.clone()
                        });
                    }
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub delta: f64,
    pub num_samples: usize,
    pub layer_selector: LayerSelector,
    pub top_n: usize,
    pub aggregate: Option<Aggregate>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    /// Sorted by F1, best first; failed points last.
    pub rows: Vec<SweepRow>,
    /// Smallest and largest sample count among the best-F1 rows.
    pub best_k: Option<(usize, usize)>,
    pub reference_best_k: (usize, usize),
    pub best_k_within_reference: Option<bool>,
}

impl SweepReport {
    pub fn render_table(&self) -> String {
        let mut out = String::from("delta\tk\tlayer\ttop_n\tEM%\tF1%\tretrievals\titerations\tfailed\n");
        for r in &self.rows {
            let _ = write!(out, "{}\t{}\t{}\t{}\t", r.delta, r.num_samples, r.layer_selector, r.top_n);
            match (&r.aggregate, &r.error) {
                (Some(a), _) => {
                    let _ = writeln!(
                        out,
                        "{:.2}\t{:.2}\t{:.3}\t{:.3}\t{}",
                        a.em_pct, a.f1_pct, a.mean_retrievals, a.mean_iterations, a.failed
                    );
                }
                (None, e) => {
                    let _ = writeln!(out, "error: {}", e.as_deref().unwrap_or("unknown"));
                }
            }
        }
        if let Some((lo, hi)) = self.best_k {
            let (rlo, rhi) = self.reference_best_k;
            let _ = writeln!(
                out,
                "best k: {lo}..={hi} (reference interval {rlo}..={rhi}, {})",
                if self.best_k_within_reference == Some(true) { "inside" } else { "outside" }
            );
        }
        out
    }
}

/// One benchmark per grid point. `make_backend` supplies a fresh backend per
/// point so scripted backends start from a full script.
pub fn sweep(
    questions: &[Question],
    index: &SearchIndex,
    templates: &TemplateSet,
    base: &EngineConfig,
    grid: &SweepGrid,
    make_backend: &dyn Fn() -> Result<Box<dyn Backend>, BackendError>,
) -> Result<SweepReport, EvalError> {
    if questions.is_empty() {
        return Err(EvalError::EmptyDataset);
    }
    let mut rows = Vec::new();
    for point in grid.points(base) {
        let result = match point.validate() {
            Err(e) => Err(e.to_string()),
            Ok(()) => make_backend().map_err(|e| e.to_string()).and_then(|backend| {
                let deps = Deps {
                    backend: backend.as_ref(),
                    index,
                    templates,
                };
                run_benchmark(questions, deps, &point, None).map_err(|e| e.to_string())
            }),
        };
        let (aggregate, error) = match result {
            Ok(report) => (Some(report.aggregate), None),
            Err(e) => (None, Some(e)),
        };
        rows.push(SweepRow {
            delta: point.delta,
            num_samples: point.num_samples,
            layer_selector: point.layer_selector,
            top_n: point.top_n,
            aggregate,
            error,
        });
    }
    let f1 = |r: &SweepRow| r.aggregate.as_ref().map(|a| a.f1_pct);
    // stable sort keeps grid order among equal F1
    rows.sort_by(|a, b| match (f1(a), f1(b)) {
        (Some(x), Some(y)) => y.total_cmp(&x),
        (Some(_), None) => std::cmp::Ordering::Less,
        (None, Some(_)) => std::cmp::Ordering::Greater,
        (None, None) => std::cmp::Ordering::Equal,
    });
    // points where every question failed say nothing about k
    let usable = |r: &&SweepRow| r.aggregate.as_ref().is_some_and(|a| a.failed < a.count);
    let best_k = rows.iter().find(usable).and_then(f1).map(|best| {
        let ks: Vec<usize> = rows
            .iter()
            .filter(usable)
            .filter(|r| f1(r) == Some(best))
            .map(|r| r.num_samples)
            .collect();
        (*ks.iter().min().unwrap(), *ks.iter().max().unwrap())
    });
    let best_k_within_reference =
        best_k.map(|(lo, hi)| lo >= REFERENCE_BEST_K.0 && hi <= REFERENCE_BEST_K.1);
    Ok(SweepReport {
        rows,
        best_k,
        reference_best_k: REFERENCE_BEST_K,
        best_k_within_reference,
    })
}
