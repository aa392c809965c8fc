//! Okapi BM25 over an in-memory inverted index.
//!
//! Scoring uses the non-negative IDF variant
//! `ln(1 + (N - n + 0.5) / (n + 0.5))` and the usual saturating term weight
//! `tf * (k1 + 1) / (tf + k1 * (1 - b + b * len / avglen))`.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::Corpus;

pub const INDEX_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Bm25Params {
    pub k1: f64,
    pub b: f64,
}

impl Default for Bm25Params {
    fn default() -> Self {
        Self { k1: 0.9, b: 0.4 }
    }
}

#[derive(Debug, Error)]
pub enum IndexError {
    #[error("cannot index an empty corpus")]
    EmptyCorpus,
    #[error("invalid BM25 parameters k1={k1}, b={b}")]
    BadParams { k1: f64, b: f64 },
    #[error("index format version {found} is not supported (expected {INDEX_FORMAT_VERSION})")]
    Version { found: u32 },
    #[error("index I/O: {0}")]
    Io(#[from] std::io::Error),
    #[error("index encoding: {0}")]
    Encoding(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Posting {
    pub doc: u32,
    pub tf: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredDoc {
    pub doc_id: String,
    pub title: String,
    pub score: f64,
    pub rank: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Bm25Index {
    format_version: u32,
    params: Bm25Params,
    doc_ids: Vec<String>,
    titles: Vec<String>,
    doc_lengths: Vec<u32>,
    avg_doc_length: f64,
    // BTreeMap keeps the serialized form stable across runs.
    postings: BTreeMap<String, Vec<Posting>>,
}

/// Lowercases and splits on every non-alphanumeric character.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect()
}

impl Bm25Index {
    pub fn build(corpus: &Corpus, params: Bm25Params) -> Result<Self, IndexError> {
        if corpus.is_empty() {
            return Err(IndexError::EmptyCorpus);
        }
        if !(params.k1 >= 0.0 && (0.0..=1.0).contains(&params.b)) {
            return Err(IndexError::BadParams {
                k1: params.k1,
                b: params.b,
            });
        }
        let mut postings: BTreeMap<String, Vec<Posting>> = BTreeMap::new();
        let mut doc_lengths = Vec::with_capacity(corpus.len());
        for (ordinal, doc) in corpus.documents().iter().enumerate() {
            let terms = tokenize(&doc.text);
            doc_lengths.push(terms.len() as u32);
            let mut tf: HashMap<String, u32> = HashMap::new();
            for t in terms {
                *tf.entry(t).or_default() += 1;
            }
            for (term, count) in tf {
                postings.entry(term).or_default().push(Posting {
                    doc: ordinal as u32,
                    tf: count,
                });
            }
        }
        for list in postings.values_mut() {
            list.sort_by_key(|p| p.doc);
        }
        let total: u64 = doc_lengths.iter().map(|&l| u64::from(l)).sum();
        Ok(Self {
            format_version: INDEX_FORMAT_VERSION,
            params,
            doc_ids: corpus.documents().iter().map(|d| d.doc_id.clone()).collect(),
            titles: corpus.documents().iter().map(|d| d.title.clone()).collect(),
            avg_doc_length: total as f64 / doc_lengths.len() as f64,
            doc_lengths,
            postings,
        })
    }

    pub fn doc_count(&self) -> usize {
        self.doc_lengths.len()
    }

    pub fn params(&self) -> Bm25Params {
        self.params
    }

    pub fn avg_doc_length(&self) -> f64 {
        self.avg_doc_length
    }

    pub fn doc_lengths(&self) -> &[u32] {
        &self.doc_lengths
    }

    pub fn postings(&self, term: &str) -> &[Posting] {
        self.postings.get(term).map_or(&[], Vec::as_slice)
    }

    pub fn title(&self, ordinal: usize) -> &str {
        &self.titles[ordinal]
    }

    pub fn doc_id(&self, ordinal: usize) -> &str {
        &self.doc_ids[ordinal]
    }

    pub fn idf(&self, term: &str) -> f64 {
        let n = self.postings(term).len() as f64;
        let big_n = self.doc_count() as f64;
        (1.0 + (big_n - n + 0.5) / (n + 0.5)).ln()
    }

    fn term_weight(&self, idf: f64, tf: u32, ordinal: usize) -> f64 {
        let Bm25Params { k1, b } = self.params;
        let tf = f64::from(tf);
        let len = f64::from(self.doc_lengths[ordinal]);
        let norm = 1.0 - b + b * len / self.avg_doc_length;
        idf * tf * (k1 + 1.0) / (tf + k1 * norm)
    }

    /// BM25 score of one document. Repeated query terms contribute once per
    /// occurrence.
    pub fn score(&self, query_terms: &[String], ordinal: usize) -> f64 {
        assert!(ordinal < self.doc_count(), "doc ordinal out of range");
        query_terms
            .iter()
            .map(|term| {
                let list = self.postings(term);
                match list.binary_search_by_key(&(ordinal as u32), |p| p.doc) {
                    Ok(pos) => self.term_weight(self.idf(term), list[pos].tf, ordinal),
                    Err(_) => 0.0,
                }
            })
            .sum()
    }

    /// Scores every document sharing a term with the query. Documents with
    /// no overlap are absent.
    fn accumulate(&self, query_terms: &[String]) -> HashMap<usize, f64> {
        let mut acc: HashMap<usize, f64> = HashMap::new();
        for term in query_terms {
            let list = self.postings(term);
            if list.is_empty() {
                continue;
            }
            let idf = self.idf(term);
            for p in list {
                let d = p.doc as usize;
                *acc.entry(d).or_default() += self.term_weight(idf, p.tf, d);
            }
        }
        acc
    }

    /// Top-`k` documents by score, skipping excluded titles. Ties go to the
    /// earlier-ingested document.
    pub fn search(&self, query: &str, k: usize, exclude_titles: &HashSet<String>) -> Vec<ScoredDoc> {
        assert!(k >= 1, "k must be at least 1");
        let terms = tokenize(query);
        if terms.is_empty() {
            return Vec::new();
        }
        let mut scored: Vec<(usize, f64)> = self
            .accumulate(&terms)
            .into_iter()
            .filter(|&(d, s)| s > 0.0 && !exclude_titles.contains(&self.titles[d]))
            .collect();
        scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        scored
            .into_iter()
            .take(k)
            .enumerate()
            .map(|(i, (d, score))| ScoredDoc {
                doc_id: self.doc_ids[d].clone(),
                title: self.titles[d].clone(),
                score,
                rank: i + 1,
            })
            .collect()
    }

    /// Controller-side retrieval: over-fetches `min(N, 5k)` candidates, then
    /// drops excluded titles and keeps the first `k` survivors.
    pub fn search_dedup(&self, query: &str, k: usize, exclude_titles: &HashSet<String>) -> Vec<ScoredDoc> {
        let fetch = self.doc_count().min(5 * k).max(k);
        let mut hits = self.search(query, fetch, &HashSet::new());
        let mut out: Vec<ScoredDoc> = Vec::with_capacity(k);
        let mut seen: HashSet<String> = HashSet::new();
        for hit in hits.drain(..) {
            if exclude_titles.contains(&hit.title) || !seen.insert(hit.title.clone()) {
                continue;
            }
            out.push(hit);
            if out.len() == k {
                break;
            }
        }
        if out.len() < k && fetch < self.doc_count() {
            // Over-fetch window exhausted by exclusions; fall back to a full scan.
            return self.search(query, k, exclude_titles);
        }
        for (i, d) in out.iter_mut().enumerate() {
            d.rank = i + 1;
        }
        out
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), IndexError> {
        let bytes = serde_json::to_vec(self)?;
        fs::write(path, bytes)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, IndexError> {
        let bytes = fs::read(path)?;
        let value: serde_json::Value = serde_json::from_slice(&bytes)?;
        let found = value
            .get("format_version")
            .and_then(serde_json::Value::as_u64)
            .unwrap_or(0) as u32;
        if found != INDEX_FORMAT_VERSION {
            return Err(IndexError::Version { found });
        }
        Ok(serde_json::from_value(value)?)
    }
}
