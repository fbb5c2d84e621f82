//! BM25 search over a passage corpus.
//!
//! Documents are indexed on their title followed by their body text. The
//! index is immutable once built and can be shared across threads.
//!
//! On-disk layout of an index directory:
//!
//! * `meta.json`: `{"format": 1, "k1": .., "b": .., "doc_count": ..}`
//! * `docs.jsonl`: one `{"doc_id","title","text","length"}` per line, in
//!   ascending `doc_id` order; line number is the internal ordinal.
//! * `postings.jsonl`: one `{"term": .., "postings": [[ordinal, tf], ..]}`
//!   per line, terms in lexicographic order, postings ascending by ordinal.
//!
//! Only integers and strings are stored; the average document length is
//! recomputed on load, so a loaded index scores byte-identically.

use std::collections::{BTreeMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum RetrievalError {
    #[error("duplicate doc_id {0:?}")]
    DuplicateDocId(String),
    #[error("document {0:?} has empty text")]
    EmptyText(String),
    #[error("cannot build an index from an empty corpus")]
    EmptyCorpus,
    #[error("top_n must be at least 1")]
    ZeroTopN,
    #[error("{path} line {line}: {reason}")]
    Parse {
        path: String,
        line: usize,
        reason: String,
    },
    #[error("corrupt index: {0}")]
    Corrupt(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Document {
    #[serde(alias = "id")]
    pub doc_id: String,
    #[serde(default)]
    pub title: String,
    pub text: String,
}

impl Document {
    pub fn new(doc_id: impl Into<String>, title: impl Into<String>, text: impl Into<String>) -> Self {
        Document {
            doc_id: doc_id.into(),
            title: title.into(),
            text: text.into(),
        }
    }

    fn indexed_terms(&self) -> Vec<String> {
        let mut terms = tokenize(&self.title);
        terms.extend(tokenize(&self.text));
        terms
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bm25Params {
    pub k1: f64,
    pub b: f64,
}

impl Default for Bm25Params {
    fn default() -> Self {
        Bm25Params { k1: 1.2, b: 0.75 }
    }
}

/// Lowercases and splits on every non-alphanumeric character.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect()
}

/// BM25 inverse document frequency with the +1 inside the logarithm.
pub fn idf(doc_count: usize, df: usize) -> f64 {
    let (n, df) = (doc_count as f64, df as f64);
    (1.0 + (n - df + 0.5) / (df + 0.5)).ln()
}

#[derive(Debug, Clone, PartialEq)]
pub struct SearchHit {
    pub document: Document,
    pub score: f64,
    /// 1-based position in the result list.
    pub rank: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SearchIndex {
    docs: Vec<Document>,
    doc_lengths: Vec<usize>,
    postings: BTreeMap<String, Vec<(u32, u32)>>,
    avg_doc_length: f64,
    params: Bm25Params,
}

impl SearchIndex {
    pub fn build(corpus: impl IntoIterator<Item = Document>, params: Bm25Params) -> Result<Self, RetrievalError> {
        let mut docs: Vec<Document> = Vec::new();
        let mut seen = HashSet::new();
        for d in corpus {
            if !seen.insert(d.doc_id.clone()) {
                return Err(RetrievalError::DuplicateDocId(d.doc_id));
            }
            if d.text.trim().is_empty() {
                return Err(RetrievalError::EmptyText(d.doc_id));
            }
            docs.push(d);
        }
        if docs.is_empty() {
            return Err(RetrievalError::EmptyCorpus);
        }
        docs.sort_by(|a, b| a.doc_id.cmp(&b.doc_id));

        let mut postings: BTreeMap<String, Vec<(u32, u32)>> = BTreeMap::new();
        let mut doc_lengths = Vec::with_capacity(docs.len());
        for (ord, d) in docs.iter().enumerate() {
            let terms = d.indexed_terms();
            doc_lengths.push(terms.len());
            let mut tf: BTreeMap<String, u32> = BTreeMap::new();
            for t in terms {
                *tf.entry(t).or_default() += 1;
            }
            for (t, c) in tf {
                postings.entry(t).or_default().push((ord as u32, c));
            }
        }
        Ok(SearchIndex::assemble(docs, doc_lengths, postings, params))
    }

    fn assemble(
        docs: Vec<Document>,
        doc_lengths: Vec<usize>,
        postings: BTreeMap<String, Vec<(u32, u32)>>,
        params: Bm25Params,
    ) -> Self {
        let avg_doc_length = doc_lengths.iter().sum::<usize>() as f64 / doc_lengths.len() as f64;
        SearchIndex {
            docs,
            doc_lengths,
            postings,
            avg_doc_length,
            params,
        }
    }

    pub fn doc_count(&self) -> usize {
        self.docs.len()
    }

    pub fn avg_doc_length(&self) -> f64 {
        self.avg_doc_length
    }

    pub fn params(&self) -> Bm25Params {
        self.params
    }

    pub fn documents(&self) -> &[Document] {
        &self.docs
    }

    pub fn doc_length(&self, doc_id: &str) -> Option<usize> {
        self.ordinal(doc_id).map(|o| self.doc_lengths[o])
    }

    /// `(doc_id, term frequency)` pairs for `term`, ascending by doc_id.
    pub fn postings(&self, term: &str) -> Vec<(&str, u32)> {
        self.postings
            .get(term)
            .map(|p| {
                p.iter()
                    .map(|&(o, tf)| (self.docs[o as usize].doc_id.as_str(), tf))
                    .collect()
            })
            .unwrap_or_default()
    }

    pub fn terms(&self) -> impl Iterator<Item = &str> {
        self.postings.keys().map(String::as_str)
    }

    fn ordinal(&self, doc_id: &str) -> Option<usize> {
        self.docs
            .binary_search_by(|d| d.doc_id.as_str().cmp(doc_id))
            .ok()
    }

    /// Top `top_n` documents by BM25 score, descending, ties by ascending
    /// doc_id. Documents sharing no term with the query are never returned.
    pub fn search(&self, query: &str, top_n: usize) -> Result<Vec<SearchHit>, RetrievalError> {
        if top_n == 0 {
            return Err(RetrievalError::ZeroTopN);
        }
        let Bm25Params { k1, b } = self.params;
        let n = self.docs.len();
        let mut scores = vec![0.0f64; n];
        let mut touched = vec![false; n];
        for term in tokenize(query) {
            let Some(list) = self.postings.get(&term) else {
                continue;
            };
            let w = idf(n, list.len());
            for &(ord, tf) in list {
                let ord = ord as usize;
                let tf = tf as f64;
                let norm = 1.0 - b + b * self.doc_lengths[ord] as f64 / self.avg_doc_length;
                scores[ord] += w * tf * (k1 + 1.0) / (tf + k1 * norm);
                touched[ord] = true;
            }
        }
        let mut ranked: Vec<usize> = (0..n).filter(|&o| touched[o]).collect();
        // ordinals follow doc_id order, so comparing them breaks ties by doc_id
        ranked.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
        Ok(ranked
            .into_iter()
            .take(top_n)
            .enumerate()
            .map(|(i, o)| SearchHit {
                document: self.docs[o].clone(),
                score: scores[o],
                rank: i + 1,
            })
            .collect())
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<(), RetrievalError> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        let meta = Meta {
            format: FORMAT_VERSION,
            k1: self.params.k1,
            b: self.params.b,
            doc_count: self.docs.len(),
        };
        std::fs::write(dir.join("meta.json"), serde_json::to_string_pretty(&meta).map_err(io_err)?)?;

        let mut out = BufWriter::new(File::create(dir.join("docs.jsonl"))?);
        for (d, &length) in self.docs.iter().zip(&self.doc_lengths) {
            let row = DocRow {
                doc_id: d.doc_id.clone(),
                title: d.title.clone(),
                text: d.text.clone(),
                length,
            };
            serde_json::to_writer(&mut out, &row).map_err(io_err)?;
            out.write_all(b"\n")?;
        }
        out.flush()?;

        let mut out = BufWriter::new(File::create(dir.join("postings.jsonl"))?);
        for (term, postings) in &self.postings {
            let row = PostingRow {
                term: term.clone(),
                postings: postings.clone(),
            };
            serde_json::to_writer(&mut out, &row).map_err(io_err)?;
            out.write_all(b"\n")?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self, RetrievalError> {
        let dir = dir.as_ref();
        let meta_path = dir.join("meta.json");
        let meta: Meta = serde_json::from_str(&std::fs::read_to_string(&meta_path)?).map_err(|e| {
            RetrievalError::Parse {
                path: meta_path.display().to_string(),
                line: 1,
                reason: e.to_string(),
            }
        })?;
        if meta.format != FORMAT_VERSION {
            return Err(RetrievalError::Corrupt(format!(
                "unsupported index format {}",
                meta.format
            )));
        }

        let rows: Vec<DocRow> = read_jsonl(&dir.join("docs.jsonl"))?;
        if rows.len() != meta.doc_count || rows.is_empty() {
            return Err(RetrievalError::Corrupt(format!(
                "meta lists {} documents, docs.jsonl has {}",
                meta.doc_count,
                rows.len()
            )));
        }
        if rows.windows(2).any(|w| w[0].doc_id >= w[1].doc_id) {
            return Err(RetrievalError::Corrupt("documents not in ascending doc_id order".into()));
        }
        let (docs, doc_lengths) = rows
            .into_iter()
            .map(|r| (Document::new(r.doc_id, r.title, r.text), r.length))
            .unzip();

        let mut postings = BTreeMap::new();
        for row in read_jsonl::<PostingRow>(&dir.join("postings.jsonl"))? {
            if row.postings.iter().any(|&(o, _)| o as usize >= meta.doc_count) {
                return Err(RetrievalError::Corrupt(format!(
                    "posting for {:?} points past the last document",
                    row.term
                )));
            }
            postings.insert(row.term, row.postings);
        }
        Ok(SearchIndex::assemble(
            docs,
            doc_lengths,
            postings,
            Bm25Params { k1: meta.k1, b: meta.b },
        ))
    }
}

#[derive(Serialize, Deserialize)]
struct Meta {
    format: u32,
    k1: f64,
    b: f64,
    doc_count: usize,
}

#[derive(Serialize, Deserialize)]
struct DocRow {
    doc_id: String,
    title: String,
    text: String,
    length: usize,
}

#[derive(Serialize, Deserialize)]
struct PostingRow {
    term: String,
    postings: Vec<(u32, u32)>,
}

fn io_err(e: serde_json::Error) -> std::io::Error {
    std::io::Error::other(e)
}

fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>, RetrievalError> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| RetrievalError::Parse {
            path: path.display().to_string(),
            line: i + 1,
            reason: e.to_string(),
        })?);
    }
    Ok(out)
}

/// Reads a line-delimited corpus of `{doc_id, title, text}` records.
pub fn read_corpus(path: impl AsRef<Path>) -> Result<Vec<Document>, RetrievalError> {
    read_jsonl(path.as_ref())
}
