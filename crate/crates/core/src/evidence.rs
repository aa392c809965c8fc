//! Pointer-based sentence extraction and the append-only evidence context.
//!
//! Retrieved documents are split into a globally numbered candidate pool;
//! the selector answers with ids only, and ids are mapped back to the
//! original sentences. Evidence text is therefore always a verbatim copy of
//! corpus sentences.

use std::collections::HashSet;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;
use tracing::{debug, warn};

use crate::corpus::{segment_sentences, word_count, Document};
use crate::gap::{GapItem, ParseError};
use crate::json_extract::first_json_object;
use crate::llm::{render_prompt, BackendError, ChatBackend, PromptKind, PromptPayload, RenderError};
use crate::query::QueryString;

const SELECTION_KEYS: [&str; 2] = ["evidence global ids", "evidence_global_ids"];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SentenceCandidate {
    pub global_id: usize,
    pub doc_title: String,
    pub text: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionSource {
    Selector,
    /// Selector output was unparsable twice; first sentence of each document.
    Fallback,
    /// Raw-document mode: every sentence of every retrieved document.
    RawDocuments,
    EmptyPool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvidenceBlock {
    pub turn: usize,
    pub selected: Vec<SentenceCandidate>,
    pub query_used: QueryString,
    pub retrieved_titles: Vec<String>,
    pub source: SelectionSource,
}

impl EvidenceBlock {
    pub fn render(&self) -> String {
        let mut out = format!("Turn {} evidence:", self.turn);
        for s in &self.selected {
            let _ = write!(out, "\n[{}] {}", s.doc_title, s.text);
        }
        out
    }

    /// Words in the selected sentences (headers and title tags excluded).
    pub fn word_count(&self) -> usize {
        self.selected.iter().map(|s| word_count(&s.text)).sum()
    }
}

/// Accumulated evidence memory. Blocks are only ever appended.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvidenceContext {
    blocks: Vec<EvidenceBlock>,
}

impl EvidenceContext {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn append(&mut self, block: EvidenceBlock) {
        self.blocks.push(block);
    }

    pub fn blocks(&self) -> &[EvidenceBlock] {
        &self.blocks
    }

    pub fn is_empty(&self) -> bool {
        self.blocks.is_empty()
    }

    /// Blocks separated by blank lines; empty string for an empty context.
    pub fn render(&self) -> String {
        self.blocks
            .iter()
            .map(EvidenceBlock::render)
            .collect::<Vec<_>>()
            .join("\n\n")
    }

    pub fn word_count(&self) -> usize {
        self.blocks.iter().map(EvidenceBlock::word_count).sum()
    }
}

/// Numbers every sentence of `docs` from 1, in document then sentence order.
pub fn build_candidate_pool(docs: &[&Document]) -> Vec<SentenceCandidate> {
    docs.iter()
        .flat_map(|d| {
            segment_sentences(&d.text)
                .into_iter()
                .map(move |s| (d.title.clone(), s))
        })
        .enumerate()
        .map(|(i, (doc_title, text))| SentenceCandidate {
            global_id: i + 1,
            doc_title,
            text,
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SelectionWarning {
    Duplicate(i64),
    OutOfRange(i64),
    NotAnInteger(String),
    OverCap(usize),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Selection {
    pub ids: Vec<usize>,
    pub warnings: Vec<SelectionWarning>,
}

/// Validates a selector completion: keeps in-range integer ids in order,
/// drops repeats, then truncates to `cap`.
pub fn parse_selection(raw: &str, pool_size: usize, cap: usize) -> Result<Selection, ParseError> {
    let map = first_json_object(raw).ok_or(ParseError::NoObject)?;
    let list = SELECTION_KEYS
        .iter()
        .find_map(|k| map.get(*k))
        .ok_or(ParseError::MissingKey("evidence global ids"))?
        .as_array()
        .ok_or(ParseError::BadType("evidence global ids"))?;
    let mut ids = Vec::new();
    let mut warnings = Vec::new();
    let mut seen = HashSet::new();
    for v in list {
        let id = match v {
            Value::Number(n) if n.as_i64().is_some() => n.as_i64().unwrap_or_default(),
            other => {
                warnings.push(SelectionWarning::NotAnInteger(other.to_string()));
                continue;
            }
        };
        if id < 1 || id as u64 > pool_size as u64 {
            warnings.push(SelectionWarning::OutOfRange(id));
        } else if !seen.insert(id) {
            warnings.push(SelectionWarning::Duplicate(id));
        } else {
            ids.push(id as usize);
        }
    }
    if ids.len() > cap {
        warnings.push(SelectionWarning::OverCap(ids.len() - cap));
        ids.truncate(cap);
    }
    Ok(Selection { ids, warnings })
}

#[derive(Debug, Error)]
pub enum ExtractError {
    #[error("turn {turn}: extractor backend failed: {source}")]
    Backend {
        turn: usize,
        #[source]
        source: BackendError,
    },
    #[error("turn {turn}: {source}")]
    Render {
        turn: usize,
        #[source]
        source: RenderError,
    },
}

/// Inputs to one extraction call.
#[derive(Debug, Clone, Copy)]
pub struct ExtractRequest<'a> {
    pub turn: usize,
    pub question: &'a str,
    pub gaps: &'a [GapItem],
    pub docs: &'a [&'a Document],
    pub query: &'a QueryString,
    pub cap: usize,
}

impl ExtractRequest<'_> {
    fn block(&self, selected: Vec<SentenceCandidate>, source: SelectionSource) -> EvidenceBlock {
        EvidenceBlock {
            turn: self.turn,
            selected,
            query_used: self.query.clone(),
            retrieved_titles: self.docs.iter().map(|d| d.title.clone()).collect(),
            source,
        }
    }
}

/// Runs the selector over this turn's documents and materializes the block.
///
/// An unparsable selector reply is retried once; a second failure falls back
/// to the first sentence of each document, up to `cap`.
pub fn extract(req: &ExtractRequest<'_>, backend: &dyn ChatBackend) -> Result<EvidenceBlock, ExtractError> {
    assert!(req.cap >= 1, "evidence cap must be at least 1");
    let pool = build_candidate_pool(req.docs);
    if pool.is_empty() {
        return Ok(req.block(Vec::new(), SelectionSource::EmptyPool));
    }
    let messages = render_prompt(
        PromptKind::Extractor,
        &PromptPayload::Extractor {
            question: req.question,
            gaps: req.gaps,
            candidates: &pool,
            cap: req.cap,
        },
    )
    .map_err(|source| ExtractError::Render { turn: req.turn, source })?;
    for attempt in 1..=2 {
        let raw = backend
            .complete(PromptKind::Extractor, &messages)
            .map_err(|source| ExtractError::Backend { turn: req.turn, source })?;
        match parse_selection(&raw, pool.len(), req.cap) {
            Ok(sel) => {
                if !sel.warnings.is_empty() {
                    debug!(turn = req.turn, warnings = ?sel.warnings, "selector output adjusted");
                }
                let selected = sel.ids.iter().map(|&id| pool[id - 1].clone()).collect();
                return Ok(req.block(selected, SelectionSource::Selector));
            }
            Err(e) => warn!(turn = req.turn, attempt, error = %e, "unparsable selector output"),
        }
    }
    Ok(req.block(fallback_selection(req.docs, req.cap), SelectionSource::Fallback))
}

fn fallback_selection(docs: &[&Document], cap: usize) -> Vec<SentenceCandidate> {
    let mut next_id = 1;
    let mut out = Vec::new();
    for d in docs {
        let sentences = segment_sentences(&d.text);
        if let Some(first) = sentences.first() {
            if out.len() < cap {
                out.push(SentenceCandidate {
                    global_id: next_id,
                    doc_title: d.title.clone(),
                    text: first.clone(),
                });
            }
        }
        next_id += sentences.len();
    }
    out
}

/// Block holding every sentence of every retrieved document, for runs that
/// bypass the selector.
pub fn raw_block(req: &ExtractRequest<'_>) -> EvidenceBlock {
    let pool = build_candidate_pool(req.docs);
    let source = if pool.is_empty() {
        SelectionSource::EmptyPool
    } else {
        SelectionSource::RawDocuments
    };
    req.block(pool, source)
}
