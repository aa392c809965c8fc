//! Document corpus: JSONL ingestion, title lookup and sentence segmentation.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;
use tracing::warn;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Document {
    pub doc_id: String,
    pub title: String,
    pub text: String,
}

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("cannot read corpus {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: {message}")]
    Record { line: usize, message: String },
}

/// A problem with one corpus line. Ingestion keeps going past these.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RecordIssue {
    pub line: usize,
    pub message: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct IngestReport {
    pub accepted: usize,
    pub errors: Vec<RecordIssue>,
    pub duplicates: Vec<RecordIssue>,
}

/// Immutable, ingestion-ordered document collection.
#[derive(Debug, Clone, Default)]
pub struct Corpus {
    documents: Vec<Document>,
    by_title: HashMap<String, usize>,
    by_id: HashMap<String, usize>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawRecord {
    doc_id: Option<String>,
    title: Option<String>,
    text: Option<String>,
}

impl Corpus {
    /// Builds a corpus from in-memory documents, applying the same validation
    /// rules as [`ingest_corpus`]. Record numbers in the report are 1-based
    /// positions in `docs`.
    pub fn from_documents(docs: impl IntoIterator<Item = Document>) -> (Self, IngestReport) {
        let mut corpus = Corpus::default();
        let mut report = IngestReport::default();
        for (i, doc) in docs.into_iter().enumerate() {
            corpus.push_checked(doc, i + 1, &mut report);
        }
        (corpus, report)
    }

    fn push_checked(&mut self, doc: Document, line: usize, report: &mut IngestReport) {
        if let Err(message) = check_fields(&doc) {
            report.errors.push(RecordIssue { line, message });
            return;
        }
        if self.by_id.contains_key(&doc.doc_id) {
            warn!(line, doc_id = %doc.doc_id, "duplicate doc_id, record rejected");
            report.duplicates.push(RecordIssue {
                line,
                message: format!("duplicate doc_id {:?}", doc.doc_id),
            });
            return;
        }
        let ordinal = self.documents.len();
        self.by_id.insert(doc.doc_id.clone(), ordinal);
        // First document wins a title; later ones stay reachable by id.
        self.by_title.entry(doc.title.clone()).or_insert(ordinal);
        self.documents.push(doc);
        report.accepted += 1;
    }

    pub fn len(&self) -> usize {
        self.documents.len()
    }

    pub fn is_empty(&self) -> bool {
        self.documents.is_empty()
    }

    pub fn documents(&self) -> &[Document] {
        &self.documents
    }

    pub fn get(&self, ordinal: usize) -> Option<&Document> {
        self.documents.get(ordinal)
    }

    /// Case-sensitive exact title lookup.
    pub fn get_document(&self, title: &str) -> Option<&Document> {
        self.by_title.get(title).map(|&i| &self.documents[i])
    }

    pub fn get_by_id(&self, doc_id: &str) -> Option<&Document> {
        self.by_id.get(doc_id).map(|&i| &self.documents[i])
    }
}

fn check_fields(doc: &Document) -> Result<(), String> {
    if doc.doc_id.is_empty() {
        return Err("empty doc_id".into());
    }
    if doc.title.trim().is_empty() {
        return Err("empty title".into());
    }
    if doc.text.trim().is_empty() {
        return Err("empty text".into());
    }
    Ok(())
}

/// Reads a JSONL corpus with keys exactly `doc_id`, `title`, `text`.
///
/// Malformed lines and duplicate ids are reported and skipped; only I/O
/// failures abort ingestion.
pub fn ingest_corpus(path: impl AsRef<Path>) -> Result<(Corpus, IngestReport), CorpusError> {
    let path = path.as_ref();
    let io_err = |source| CorpusError::Io {
        path: path.display().to_string(),
        source,
    };
    let reader = BufReader::new(File::open(path).map_err(io_err)?);
    let mut corpus = Corpus::default();
    let mut report = IngestReport::default();
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = line.map_err(io_err)?;
        if line.trim().is_empty() {
            continue;
        }
        match parse_record(&line) {
            Ok(doc) => corpus.push_checked(doc, line_no, &mut report),
            Err(message) => {
                warn!(line = line_no, %message, "malformed corpus record");
                report.errors.push(RecordIssue {
                    line: line_no,
                    message,
                });
            }
        }
    }
    Ok((corpus, report))
}

fn parse_record(line: &str) -> Result<Document, String> {
    let raw: RawRecord = serde_json::from_str(line).map_err(|e| e.to_string())?;
    let missing = |k: &str| format!("missing field {k:?}");
    Ok(Document {
        doc_id: raw.doc_id.ok_or_else(|| missing("doc_id"))?,
        title: raw.title.ok_or_else(|| missing("title"))?,
        text: raw.text.ok_or_else(|| missing("text"))?,
    })
}

const ABBREVIATIONS: &[&str] = &["Dr.", "Mr.", "Mrs.", "St.", "U.S.", "e.g.", "i.e.", "etc."];

fn is_closing(c: char) -> bool {
    matches!(c, '"' | '\'' | ')' | ']' | '\u{201D}' | '\u{2019}')
}

fn is_opening_quote(c: char) -> bool {
    matches!(c, '"' | '\'' | '\u{201C}' | '\u{2018}')
}

/// Splits text into sentences at `.`, `!` or `?` (plus any closing quotes or
/// brackets) followed by whitespace and an uppercase letter or opening quote.
/// A period ending one of the fixed abbreviations never splits.
pub fn segment_sentences(text: &str) -> Vec<String> {
    let chars: Vec<(usize, char)> = text.char_indices().collect();
    let mut sentences = Vec::new();
    let mut start = 0usize;
    let mut i = 0usize;
    while i < chars.len() {
        let (_, c) = chars[i];
        if !matches!(c, '.' | '!' | '?') {
            i += 1;
            continue;
        }
        let mut end = i + 1;
        while end < chars.len() && is_closing(chars[end].1) {
            end += 1;
        }
        let mut next = end;
        while next < chars.len() && chars[next].1.is_whitespace() {
            next += 1;
        }
        let boundary = next > end
            && next < chars.len()
            && (chars[next].1.is_uppercase() || is_opening_quote(chars[next].1))
            && !(c == '.' && ends_with_abbreviation(text, chars[i].0));
        if boundary {
            let cut = chars.get(end).map_or(text.len(), |&(b, _)| b);
            push_trimmed(&mut sentences, &text[start..cut]);
            start = chars[next].0;
            i = next;
        } else {
            i = end.max(i + 1);
        }
    }
    push_trimmed(&mut sentences, &text[start..]);
    sentences
}

fn push_trimmed(out: &mut Vec<String>, s: &str) {
    let s = s.trim();
    if !s.is_empty() {
        out.push(s.to_string());
    }
}

/// `period_at` is the byte offset of a `.`; checks the whitespace-delimited
/// token ending there, ignoring leading quotes/brackets.
fn ends_with_abbreviation(text: &str, period_at: usize) -> bool {
    let upto = &text[..=period_at];
    let token_start = upto
        .char_indices()
        .rev()
        .find(|(_, c)| c.is_whitespace())
        .map_or(0, |(b, c)| b + c.len_utf8());
    let token = upto[token_start..].trim_start_matches(|c: char| {
        is_opening_quote(c) || matches!(c, '(' | '[')
    });
    ABBREVIATIONS.contains(&token)
}

/// Whitespace-separated word count.
pub fn word_count(text: &str) -> usize {
    text.split_whitespace().count()
}
