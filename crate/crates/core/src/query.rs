//! Maps a question and the judge's gap items to the next retrieval query.

use serde::{Deserialize, Serialize};

use crate::gap::GapItem;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PhraseOrigin {
    TargetSlot,
    Description,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SourcePhrase {
    pub gap_index: usize,
    pub phrase: String,
    pub origin: PhraseOrigin,
}

/// A constructed query. `source_phrases` is empty when the query fell back
/// to the bare question.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QueryString {
    pub text: String,
    pub source_phrases: Vec<SourcePhrase>,
}

impl QueryString {
    pub fn is_fallback(&self) -> bool {
        self.source_phrases.is_empty()
    }
}

/// Query phrase style. `FreeText` appends descriptions only and exists for
/// comparison runs.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QueryStyle {
    #[default]
    Structured,
    FreeText,
}

/// `"target slot"` (slot underscores become spaces) when both are present,
/// else the trimmed description.
pub fn phrase_of(gap: &GapItem) -> Option<(String, PhraseOrigin)> {
    let target = gap.target.trim();
    let slot = gap.slot.trim();
    if !target.is_empty() && !slot.is_empty() {
        let slot = slot.replace('_', " ");
        return Some((format!("{target} {slot}"), PhraseOrigin::TargetSlot));
    }
    description_phrase(gap)
}

fn description_phrase(gap: &GapItem) -> Option<(String, PhraseOrigin)> {
    let d = gap.description.trim();
    (!d.is_empty()).then(|| (d.to_string(), PhraseOrigin::Description))
}

pub fn build_query(question: &str, gaps: &[GapItem], max_phrases: usize) -> QueryString {
    build_query_styled(question, gaps, max_phrases, QueryStyle::Structured)
}

pub fn build_query_styled(
    question: &str,
    gaps: &[GapItem],
    max_phrases: usize,
    style: QueryStyle,
) -> QueryString {
    assert!(max_phrases >= 1, "at least one gap phrase must be allowed");
    let source_phrases: Vec<SourcePhrase> = gaps
        .iter()
        .enumerate()
        .filter_map(|(i, g)| {
            let found = match style {
                QueryStyle::Structured => phrase_of(g),
                QueryStyle::FreeText => description_phrase(g),
            };
            found.map(|(phrase, origin)| SourcePhrase {
                gap_index: i,
                phrase,
                origin,
            })
        })
        .take(max_phrases)
        .collect();
    let mut text = question.to_string();
    for p in &source_phrases {
        text.push(' ');
        text.push_str(&p.phrase);
    }
    QueryString {
        text,
        source_phrases,
    }
}
