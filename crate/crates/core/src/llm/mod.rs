//! Chat-completion contract shared by the judge, teacher, extractor and
//! reasoner roles.

mod prompts;
mod remote;
mod scripted;

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use prompts::{render_prompt, PromptPayload, RenderError, TemplateSet, EMPTY_CONTEXT_MARKER};
pub use remote::RemoteBackend;
pub use scripted::{MatchMode, RuleKind, ScriptError, ScriptRule, ScriptedBackend};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PromptKind {
    Judge,
    Teacher,
    Extractor,
    Reasoner,
}

impl PromptKind {
    pub fn name(self) -> &'static str {
        match self {
            PromptKind::Judge => "judge",
            PromptKind::Teacher => "teacher",
            PromptKind::Extractor => "extractor",
            PromptKind::Reasoner => "reasoner",
        }
    }
}

impl fmt::Display for PromptKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ChatRole {
    System,
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: ChatRole,
    pub content: String,
}

impl ChatMessage {
    pub fn system(content: impl Into<String>) -> Self {
        Self {
            role: ChatRole::System,
            content: content.into(),
        }
    }

    pub fn user(content: impl Into<String>) -> Self {
        Self {
            role: ChatRole::User,
            content: content.into(),
        }
    }

    pub fn assistant(content: impl Into<String>) -> Self {
        Self {
            role: ChatRole::Assistant,
            content: content.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum BackendError {
    #[error("transport failure: {0}")]
    Transport(String),
    #[error("no script rule matched a {kind} prompt")]
    NoScript { kind: PromptKind },
    #[error("remote returned status {status}: {body}")]
    Remote { status: u16, body: String },
    #[error("malformed response: {0}")]
    Response(String),
    #[error("invalid request: {0}")]
    Request(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Decoding {
    pub temperature: f64,
    pub max_tokens: u32,
}

impl Default for Decoding {
    fn default() -> Self {
        Self {
            temperature: 0.0,
            max_tokens: 512,
        }
    }
}

/// Anything that can turn a message list into completion text.
pub trait ChatBackend: Send + Sync {
    fn complete(&self, kind: PromptKind, messages: &[ChatMessage]) -> Result<String, BackendError>;
}

impl<T: ChatBackend + ?Sized> ChatBackend for &T {
    fn complete(&self, kind: PromptKind, messages: &[ChatMessage]) -> Result<String, BackendError> {
        (**self).complete(kind, messages)
    }
}

impl<T: ChatBackend + ?Sized> ChatBackend for Box<T> {
    fn complete(&self, kind: PromptKind, messages: &[ChatMessage]) -> Result<String, BackendError> {
        (**self).complete(kind, messages)
    }
}

impl<T: ChatBackend + ?Sized> ChatBackend for std::sync::Arc<T> {
    fn complete(&self, kind: PromptKind, messages: &[ChatMessage]) -> Result<String, BackendError> {
        (**self).complete(kind, messages)
    }
}

pub(crate) fn check_messages(messages: &[ChatMessage]) -> Result<(), BackendError> {
    match messages.first() {
        None => return Err(BackendError::Request("empty message list".into())),
        Some(m) if m.role == ChatRole::Assistant => {
            return Err(BackendError::Request("first message must be system or user".into()))
        }
        _ => {}
    }
    if let Some(m) = messages
        .iter()
        .find(|m| m.role != ChatRole::Assistant && m.content.is_empty())
    {
        return Err(BackendError::Request(format!("empty {:?} message", m.role)));
    }
    Ok(())
}

/// Concatenated user-message text; scripted rules match against this.
pub(crate) fn user_text(messages: &[ChatMessage]) -> String {
    messages
        .iter()
        .filter(|m| m.role == ChatRole::User)
        .map(|m| m.content.as_str())
        .collect::<Vec<_>>()
        .join("\n")
}
