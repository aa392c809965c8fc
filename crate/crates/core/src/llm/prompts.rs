//! Prompt rendering. System prompts are the stored v1 templates verbatim;
//! user messages interpolate the role payload.

use thiserror::Error;

use super::{ChatMessage, PromptKind};
use crate::evidence::SentenceCandidate;
use crate::gap::GapItem;

pub const EMPTY_CONTEXT_MARKER: &str = "(no evidence collected yet)";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TemplateSet {
    pub version: &'static str,
    pub judge: &'static str,
    pub teacher: &'static str,
    pub extractor: &'static str,
    pub reasoner: &'static str,
}

impl TemplateSet {
    pub const V1: TemplateSet = TemplateSet {
        version: "v1",
        judge: include_str!("../../prompts/v1/judge.txt"),
        teacher: include_str!("../../prompts/v1/teacher.txt"),
        extractor: include_str!("../../prompts/v1/extractor.txt"),
        reasoner: include_str!("../../prompts/v1/reasoner.txt"),
    };

    pub fn system(&self, kind: PromptKind) -> &'static str {
        match kind {
            PromptKind::Judge => self.judge,
            PromptKind::Teacher => self.teacher,
            PromptKind::Extractor => self.extractor,
            PromptKind::Reasoner => self.reasoner,
        }
    }
}

/// Role-specific prompt inputs. None of these carry gold answers or gold
/// titles, so the context-only rule holds at the type level.
#[derive(Debug, Clone, Copy)]
pub enum PromptPayload<'a> {
    Judge {
        question: &'a str,
        context: &'a str,
    },
    Teacher {
        question: &'a str,
        context: &'a str,
    },
    Extractor {
        question: &'a str,
        gaps: &'a [GapItem],
        candidates: &'a [SentenceCandidate],
        cap: usize,
    },
    Reasoner {
        question: &'a str,
        context: &'a str,
    },
}

impl PromptPayload<'_> {
    pub fn kind(&self) -> PromptKind {
        match self {
            PromptPayload::Judge { .. } => PromptKind::Judge,
            PromptPayload::Teacher { .. } => PromptKind::Teacher,
            PromptPayload::Extractor { .. } => PromptKind::Extractor,
            PromptPayload::Reasoner { .. } => PromptKind::Reasoner,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum RenderError {
    #[error("{kind} prompt requires a non-empty {field}")]
    MissingField { kind: PromptKind, field: &'static str },
    #[error("payload for {payload} given to a {kind} prompt")]
    KindMismatch { kind: PromptKind, payload: PromptKind },
}

fn context_or_marker(context: &str) -> &str {
    if context.trim().is_empty() {
        EMPTY_CONTEXT_MARKER
    } else {
        context
    }
}

fn require(kind: PromptKind, field: &'static str, value: &str) -> Result<(), RenderError> {
    if value.trim().is_empty() {
        Err(RenderError::MissingField { kind, field })
    } else {
        Ok(())
    }
}

pub fn render_prompt(kind: PromptKind, payload: &PromptPayload<'_>) -> Result<Vec<ChatMessage>, RenderError> {
    if payload.kind() != kind {
        return Err(RenderError::KindMismatch {
            kind,
            payload: payload.kind(),
        });
    }
    let templates = TemplateSet::V1;
    let user = match *payload {
        PromptPayload::Judge { question, context } => {
            require(kind, "question", question)?;
            format!("QUESTION\n\n{question}\n\nCONTEXT\n\n{}", context_or_marker(context))
        }
        PromptPayload::Teacher { question, context } => {
            require(kind, "question", question)?;
            format!(
                "QUESTION\n\n{question}\n\nCONTEXT (this is the ONLY evidence you may use)\n\n{}\n\nNow output ONLY the JSON object:",
                context_or_marker(context)
            )
        }
        PromptPayload::Reasoner { question, context } => {
            require(kind, "question", question)?;
            format!(
                "QUESTION\n\n{question}\n\nCONTEXT\n\n{}\n\nAnswer:",
                context_or_marker(context)
            )
        }
        PromptPayload::Extractor {
            question,
            gaps,
            candidates,
            cap,
        } => {
            require(kind, "question", question)?;
            if candidates.is_empty() {
                return Err(RenderError::MissingField { kind, field: "candidates" });
            }
            if cap == 0 {
                return Err(RenderError::MissingField { kind, field: "cap" });
            }
            render_extractor_user(question, gaps, candidates, cap)
        }
    };
    Ok(vec![ChatMessage::system(templates.system(kind)), ChatMessage::user(user)])
}

fn render_extractor_user(
    question: &str,
    gaps: &[GapItem],
    candidates: &[SentenceCandidate],
    cap: usize,
) -> String {
    let mut out = format!("ORIGINAL QUESTION:\n{question}\n\nMISSING FACTS:\n");
    if gaps.is_empty() {
        out.push_str("(none)\n");
    }
    for (i, g) in gaps.iter().enumerate() {
        out.push_str(&format!(
            "{}. [{}] target: {}; slot: {}; description: {}\n",
            i + 1,
            g.category.surface(),
            g.target.trim(),
            g.slot.trim(),
            g.description.trim()
        ));
    }
    out.push_str("\nSENTENCES:\n");
    for c in candidates {
        out.push_str(&format!("{}. [{}] {}\n", c.global_id, c.doc_title, c.text));
    }
    out.push_str(&format!("\nSelect at most K={cap} sentences."));
    out
}
