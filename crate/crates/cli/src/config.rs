//! TOML run configuration. Relative paths resolve against the config file's
//! directory; command-line flags override file values.

use std::path::{Path, PathBuf};
use std::time::Duration;

use gaprag_core::llm::Decoding;
use gaprag_core::supervision::DEFAULT_SPLIT_SEED;
use gaprag_core::{Bm25Params, ChatBackend, PipelineConfig, RemoteBackend, ScriptedBackend, Timing};
use serde::{Deserialize, Serialize};

use crate::error::{Code, Fail};

pub const DEFAULT_API_KEY_ENV: &str = "GAPRAG_API_KEY";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub corpus: PathBuf,
    pub index: PathBuf,
    #[serde(default)]
    pub bm25: Bm25Params,
    #[serde(default)]
    pub pipeline: PipelineConfig,
    #[serde(default)]
    pub timing: Timing,
    #[serde(default = "one")]
    pub workers: usize,
    #[serde(default)]
    pub split: SplitConfig,
    #[serde(default)]
    pub backends: Backends,
    #[serde(default)]
    pub paths: Paths,
}

fn one() -> usize {
    1
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitConfig {
    pub seed: u64,
    pub train_fraction: f64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self {
            seed: DEFAULT_SPLIT_SEED,
            train_fraction: 0.9,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Backends {
    pub judge: Option<BackendSpec>,
    pub teacher: Option<BackendSpec>,
    pub extractor: Option<BackendSpec>,
    pub reasoner: Option<BackendSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum BackendSpec {
    Scripted {
        script: PathBuf,
    },
    Remote {
        endpoint: String,
        model: String,
        #[serde(default)]
        temperature: f64,
        #[serde(default = "default_max_tokens")]
        max_tokens: u32,
        #[serde(default = "default_in_flight")]
        max_in_flight: usize,
        #[serde(default = "default_timeout")]
        timeout_secs: u64,
        /// Environment variable holding the bearer token.
        #[serde(default)]
        api_key_env: Option<String>,
    },
}

fn default_max_tokens() -> u32 {
    512
}

fn default_in_flight() -> usize {
    8
}

fn default_timeout() -> u64 {
    120
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub questions: Option<PathBuf>,
    pub traces: Option<PathBuf>,
    pub snapshots: Option<PathBuf>,
    pub labeled: Option<PathBuf>,
    pub train: Option<PathBuf>,
    pub val: Option<PathBuf>,
    pub report: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    Judge,
    Teacher,
    Extractor,
    Reasoner,
}

impl Role {
    fn name(self) -> &'static str {
        match self {
            Role::Judge => "judge",
            Role::Teacher => "teacher",
            Role::Extractor => "extractor",
            Role::Reasoner => "reasoner",
        }
    }
}

/// Stands in for a role the current command never calls.
struct Unconfigured(&'static str);

impl ChatBackend for Unconfigured {
    fn complete(
        &self,
        _kind: gaprag_core::PromptKind,
        _messages: &[gaprag_core::ChatMessage],
    ) -> Result<String, gaprag_core::BackendError> {
        Err(gaprag_core::BackendError::Request(format!("backends.{} is not configured", self.0)))
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, Fail> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Fail::new(Code::MissingInput, format!("config {}: {e}", path.display())))?;
        let mut cfg: RunConfig =
            toml::from_str(&text).map_err(|e| Fail::new(Code::Config, format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.resolve(base);
        cfg.validate()?;
        Ok(cfg)
    }

    fn resolve(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.corpus);
        fix(&mut self.index);
        for spec in [
            &mut self.backends.judge,
            &mut self.backends.teacher,
            &mut self.backends.extractor,
            &mut self.backends.reasoner,
        ]
        .into_iter()
        .flatten()
        {
            if let BackendSpec::Scripted { script } = spec {
                fix(script);
            }
        }
        let p = &mut self.paths;
        for slot in [
            &mut p.questions,
            &mut p.traces,
            &mut p.snapshots,
            &mut p.labeled,
            &mut p.train,
            &mut p.val,
            &mut p.report,
        ]
        .into_iter()
        .flatten()
        {
            fix(slot);
        }
    }

    pub fn validate(&self) -> Result<(), Fail> {
        self.pipeline
            .validate()
            .map_err(|e| Fail::new(Code::Config, e.to_string()))?;
        if self.workers == 0 {
            return Err(Fail::new(Code::Config, "workers must be at least 1"));
        }
        if !(self.split.train_fraction > 0.0 && self.split.train_fraction < 1.0) {
            return Err(Fail::new(Code::Config, "split.train_fraction must lie strictly between 0 and 1"));
        }
        for (role, spec) in self.roles() {
            match spec {
                Some(BackendSpec::Scripted { script }) if !script.is_file() => {
                    return Err(Fail::new(
                        Code::MissingInput,
                        format!("backends.{} script {} not found", role.name(), script.display()),
                    ))
                }
                Some(BackendSpec::Remote { max_tokens: 0, .. }) => {
                    return Err(Fail::new(Code::Config, format!("backends.{}.max_tokens must be positive", role.name())))
                }
                _ => {}
            }
        }
        Ok(())
    }

    fn roles(&self) -> [(Role, &Option<BackendSpec>); 4] {
        [
            (Role::Judge, &self.backends.judge),
            (Role::Teacher, &self.backends.teacher),
            (Role::Extractor, &self.backends.extractor),
            (Role::Reasoner, &self.backends.reasoner),
        ]
    }

    /// Builds the backend for `role`. A missing spec is an error when
    /// `required`, otherwise a stub that fails if ever called.
    pub fn backend(&self, role: Role, required: bool) -> Result<Box<dyn ChatBackend>, Fail> {
        let spec = self.roles().into_iter().find(|(r, _)| *r == role).and_then(|(_, s)| s.as_ref());
        let Some(spec) = spec else {
            if required {
                return Err(Fail::new(Code::Config, format!("backends.{} is required for this command", role.name())));
            }
            return Ok(Box::new(Unconfigured(role.name())));
        };
        Ok(match spec {
            BackendSpec::Scripted { script } => Box::new(
                ScriptedBackend::from_jsonl_file(script).map_err(|e| Fail::new(Code::Input, e.to_string()))?,
            ),
            BackendSpec::Remote {
                endpoint,
                model,
                temperature,
                max_tokens,
                max_in_flight,
                timeout_secs,
                api_key_env,
            } => {
                let var = api_key_env.as_deref().unwrap_or(DEFAULT_API_KEY_ENV);
                Box::new(RemoteBackend::new(
                    endpoint.clone(),
                    model.clone(),
                    Decoding {
                        temperature: *temperature,
                        max_tokens: *max_tokens,
                    },
                    std::env::var(var).ok(),
                    *max_in_flight,
                    Duration::from_secs(*timeout_secs),
                ))
            }
        })
    }
}
