//! Shared inputs for the benchmarks.

use gaprag_core::fixtures::SyntheticSet;
use gaprag_core::{Bm25Index, Bm25Params, Corpus, GapCategory, GapItem, JudgeVerdict};

/// Synthetic corpus with nine documents per question.
pub fn synthetic_corpus(questions: usize) -> Corpus {
    SyntheticSet::generate(questions).corpus()
}

pub fn synthetic_index(questions: usize) -> (Corpus, Bm25Index) {
    let corpus = synthetic_corpus(questions);
    let index = Bm25Index::build(&corpus, Bm25Params::default()).expect("non-empty corpus");
    (corpus, index)
}

/// A judge completion wrapped in prose, as remote models tend to emit.
pub fn verbose_verdict() -> String {
    let verdict = JudgeVerdict::insufficient(vec![
        GapItem::new(GapCategory::Relation, "Fredric Rieders", "testified_against", "The person he testified against."),
        GapItem::new(GapCategory::Attribute, "Michael Swango", "prison", ""),
    ]);
    format!("Let me check the evidence first.\n```json\n{}\n```\nDone.", verdict.to_wire())
}
