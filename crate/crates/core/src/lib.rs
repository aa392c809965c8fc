//! Gap-guided iterative retrieval: a sufficiency judge that names missing
//! facts, queries built from those gaps, sentence-level evidence selection,
//! and the supervision and evaluation tooling around them.

pub mod bm25;
pub mod controller;
pub mod corpus;
pub mod eval;
pub mod evidence;
pub mod fixtures;
pub mod gap;
pub mod jsonl;
mod json_extract;
pub mod llm;
pub mod query;
pub mod supervision;

pub use bm25::{Bm25Index, Bm25Params, IndexError, ScoredDoc};
pub use controller::{
    answer, cumulative_excluded_titles, Pipeline, PipelineConfig, QuestionRecord, RunMode, StopReason,
    Timing, Trajectory, TurnTrace, Variant,
};
pub use corpus::{ingest_corpus, segment_sentences, word_count, Corpus, CorpusError, Document};
pub use evidence::{EvidenceBlock, EvidenceContext, SentenceCandidate};
pub use gap::{parse_verdict, GapCategory, GapItem, JudgeVerdict, ParseError};
pub use llm::{BackendError, ChatBackend, ChatMessage, PromptKind, RemoteBackend, ScriptedBackend};
pub use query::{build_query, QueryString, QueryStyle};
pub use eval::{exact_match, f1, normalize_answer, ConfusionMatrix, QaMetrics, RunReport};
pub use supervision::{FilterStatus, SupervisionSnapshot};
