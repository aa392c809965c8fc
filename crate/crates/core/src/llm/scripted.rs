use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{check_messages, user_text, BackendError, ChatBackend, ChatMessage, PromptKind};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RuleKind {
    Judge,
    Teacher,
    Extractor,
    Reasoner,
    Any,
}

impl RuleKind {
    fn accepts(self, kind: PromptKind) -> bool {
        matches!(
            (self, kind),
            (RuleKind::Any, _)
                | (RuleKind::Judge, PromptKind::Judge)
                | (RuleKind::Teacher, PromptKind::Teacher)
                | (RuleKind::Extractor, PromptKind::Extractor)
                | (RuleKind::Reasoner, PromptKind::Reasoner)
        )
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MatchMode {
    #[default]
    Substring,
    Regex,
    Always,
}

/// One line of a script file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScriptRule {
    pub kind: RuleKind,
    #[serde(rename = "match", default)]
    pub pattern: String,
    #[serde(default)]
    pub match_mode: MatchMode,
    pub response: String,
}

#[derive(Debug, Error)]
pub enum ScriptError {
    #[error("cannot read script {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("script line {line}: {message}")]
    Rule { line: usize, message: String },
}

#[derive(Debug)]
struct CompiledRule {
    rule: ScriptRule,
    regex: Option<Regex>,
}

impl CompiledRule {
    fn matches(&self, kind: PromptKind, text: &str) -> bool {
        if !self.rule.kind.accepts(kind) {
            return false;
        }
        match self.rule.match_mode {
            MatchMode::Always => true,
            MatchMode::Substring => text.contains(&self.rule.pattern),
            MatchMode::Regex => self.regex.as_ref().is_some_and(|r| r.is_match(text)),
        }
    }
}

/// Replays canned completions. Rules are tried in order against the user
/// message text; the first match wins.
#[derive(Debug, Default)]
pub struct ScriptedBackend {
    rules: Vec<CompiledRule>,
}

impl ScriptedBackend {
    pub fn new(rules: impl IntoIterator<Item = ScriptRule>) -> Result<Self, ScriptError> {
        let mut backend = Self::default();
        for (i, rule) in rules.into_iter().enumerate() {
            backend.push(rule).map_err(|message| ScriptError::Rule { line: i + 1, message })?;
        }
        Ok(backend)
    }

    pub fn push(&mut self, rule: ScriptRule) -> Result<(), String> {
        let regex = match rule.match_mode {
            MatchMode::Regex => Some(Regex::new(&rule.pattern).map_err(|e| e.to_string())?),
            _ => None,
        };
        self.rules.push(CompiledRule { rule, regex });
        Ok(())
    }

    pub fn from_jsonl_str(text: &str) -> Result<Self, ScriptError> {
        let mut backend = Self::default();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let rule: ScriptRule = serde_json::from_str(line).map_err(|e| ScriptError::Rule {
                line: i + 1,
                message: e.to_string(),
            })?;
            backend
                .push(rule)
                .map_err(|message| ScriptError::Rule { line: i + 1, message })?;
        }
        Ok(backend)
    }

    pub fn from_jsonl_file(path: impl AsRef<Path>) -> Result<Self, ScriptError> {
        let path = path.as_ref();
        let io = |source| ScriptError::Io {
            path: path.display().to_string(),
            source,
        };
        let mut text = String::new();
        for line in BufReader::new(File::open(path).map_err(io)?).lines() {
            text.push_str(&line.map_err(io)?);
            text.push('\n');
        }
        Self::from_jsonl_str(&text)
    }

    pub fn rules(&self) -> impl Iterator<Item = &ScriptRule> {
        self.rules.iter().map(|r| &r.rule)
    }

    pub fn len(&self) -> usize {
        self.rules.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rules.is_empty()
    }
}

impl ChatBackend for ScriptedBackend {
    fn complete(&self, kind: PromptKind, messages: &[ChatMessage]) -> Result<String, BackendError> {
        check_messages(messages)?;
        let text = user_text(messages);
        self.rules
            .iter()
            .find(|r| r.matches(kind, &text))
            .map(|r| r.rule.response.clone())
            .ok_or(BackendError::NoScript { kind })
    }
}
