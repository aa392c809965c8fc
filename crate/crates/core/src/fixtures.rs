//! Desk-scale fixtures: a small hand-written corpus with scripted judge,
//! extractor, reasoner and teacher backends, plus a generated corpus for
//! large supervision rollouts.

use std::collections::{BTreeSet, HashSet};
use std::fs;
use std::path::Path;
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bm25::{Bm25Index, Bm25Params};
use crate::controller::{Pipeline, PipelineConfig, QuestionRecord, RunMode, StopReason, Timing, Trajectory};
use crate::corpus::{segment_sentences, Corpus, Document};
use crate::evidence::parse_selection;
use crate::gap::{parse_verdict_detailed, GapCategory, GapItem, JudgeVerdict};
use crate::jsonl::{parse_jsonl_str, JsonlError};
use crate::llm::{user_text, BackendError, ChatBackend, ChatMessage, MatchMode, PromptKind, RuleKind, ScriptError, ScriptRule, ScriptedBackend};
use crate::supervision::{label_snapshots, snapshots_from_trajectory};

pub const FIXTURE_VERSION: &str = "v1";

/// `(file name, contents)` of the shipped fixture set.
pub const EMBEDDED_FILES: &[(&str, &str)] = &[
    ("corpus.jsonl", include_str!("../fixtures/v1/corpus.jsonl")),
    ("questions.jsonl", include_str!("../fixtures/v1/questions.jsonl")),
    ("judge.jsonl", include_str!("../fixtures/v1/judge.jsonl")),
    ("extractor.jsonl", include_str!("../fixtures/v1/extractor.jsonl")),
    ("reasoner.jsonl", include_str!("../fixtures/v1/reasoner.jsonl")),
    ("teacher.jsonl", include_str!("../fixtures/v1/teacher.jsonl")),
    ("expected_evidence.jsonl", include_str!("../fixtures/v1/expected_evidence.jsonl")),
];

pub const SUCCESS_QUESTION: &str = "swango";
pub const FAILURE_QUESTION: &str = "philipstown";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExpectedSentence {
    pub title: String,
    pub sentence: String,
}

#[derive(Debug, Error)]
pub enum FixtureError {
    #[error("fixture file {0} is missing")]
    Missing(String),
    #[error("cannot read fixture file {name}: {source}")]
    Io {
        name: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Jsonl(#[from] JsonlError),
    #[error(transparent)]
    Script(#[from] ScriptError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct FixtureSet {
    pub documents: Vec<Document>,
    pub questions: Vec<QuestionRecord>,
    pub judge: Vec<ScriptRule>,
    pub extractor: Vec<ScriptRule>,
    pub reasoner: Vec<ScriptRule>,
    pub teacher: Vec<ScriptRule>,
    pub expected_evidence: Vec<ExpectedSentence>,
}

pub struct FixtureBackends {
    pub judge: ScriptedBackend,
    pub extractor: ScriptedBackend,
    pub reasoner: ScriptedBackend,
    pub teacher: ScriptedBackend,
}

impl FixtureSet {
    pub fn embedded() -> Self {
        Self::from_files(|name| {
            EMBEDDED_FILES
                .iter()
                .find(|(n, _)| *n == name)
                .map(|(_, c)| c.to_string())
                .ok_or_else(|| FixtureError::Missing(name.to_string()))
        })
        .expect("embedded fixtures parse")
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self, FixtureError> {
        let dir = dir.as_ref();
        Self::from_files(|name| {
            fs::read_to_string(dir.join(name)).map_err(|source| FixtureError::Io {
                name: name.to_string(),
                source,
            })
        })
    }

    fn from_files(read: impl Fn(&str) -> Result<String, FixtureError>) -> Result<Self, FixtureError> {
        Ok(Self {
            documents: parse_jsonl_str(&read("corpus.jsonl")?)?,
            questions: parse_jsonl_str(&read("questions.jsonl")?)?,
            judge: parse_jsonl_str(&read("judge.jsonl")?)?,
            extractor: parse_jsonl_str(&read("extractor.jsonl")?)?,
            reasoner: parse_jsonl_str(&read("reasoner.jsonl")?)?,
            teacher: parse_jsonl_str(&read("teacher.jsonl")?)?,
            expected_evidence: parse_jsonl_str(&read("expected_evidence.jsonl")?)?,
        })
    }

    /// Writes the embedded files into `dir`.
    pub fn write_embedded(dir: impl AsRef<Path>) -> std::io::Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir)?;
        for (name, contents) in EMBEDDED_FILES {
            fs::write(dir.join(name), contents)?;
        }
        Ok(())
    }

    pub fn corpus(&self) -> Corpus {
        Corpus::from_documents(self.documents.iter().cloned()).0
    }

    pub fn backends(&self) -> Result<FixtureBackends, ScriptError> {
        Ok(FixtureBackends {
            judge: ScriptedBackend::new(self.judge.iter().cloned())?,
            extractor: ScriptedBackend::new(self.extractor.iter().cloned())?,
            reasoner: ScriptedBackend::new(self.reasoner.iter().cloned())?,
            teacher: ScriptedBackend::new(self.teacher.iter().cloned())?,
        })
    }

    pub fn question(&self, id: &str) -> Option<&QuestionRecord> {
        self.questions.iter().find(|q| q.question_id == id)
    }
}

/// Runs questions through the fixture pipeline with timing disabled.
pub fn replay(set: &FixtureSet, questions: &[QuestionRecord], config: PipelineConfig) -> Result<Vec<Trajectory>, String> {
    let corpus = set.corpus();
    let index = Bm25Index::build(&corpus, Bm25Params::default()).map_err(|e| e.to_string())?;
    let b = set.backends().map_err(|e| e.to_string())?;
    let pipeline = Pipeline {
        corpus: &corpus,
        index: &index,
        judge: &b.judge,
        extractor: &b.extractor,
        reasoner: &b.reasoner,
        config,
        timing: Timing::Off,
    };
    Ok(questions.iter().map(|q| pipeline.run_question(q)).collect())
}

struct Recorder<'a> {
    inner: &'a dyn ChatBackend,
    calls: Mutex<Vec<(String, String)>>,
}

impl ChatBackend for Recorder<'_> {
    fn complete(&self, kind: PromptKind, messages: &[ChatMessage]) -> Result<String, BackendError> {
        let out = self.inner.complete(kind, messages)?;
        self.calls
            .lock()
            .unwrap_or_else(|e| e.into_inner())
            .push((user_text(messages), out.clone()));
        Ok(out)
    }
}

fn pool_size(extractor_user: &str) -> usize {
    extractor_user
        .split_once("SENTENCES:\n")
        .map_or(0, |(_, rest)| rest.lines().take_while(|l| !l.trim().is_empty()).count())
}

fn check_verdict_rules(file: &str, rules: &[ScriptRule], allow_prose: bool, issues: &mut Vec<String>) {
    for (i, r) in rules.iter().enumerate() {
        if allow_prose && !r.response.contains('{') {
            continue;
        }
        match parse_verdict_detailed(&r.response) {
            Ok(p) if p.warnings.is_empty() => {}
            Ok(p) => issues.push(format!("{file} rule {}: gap warnings {:?}", i + 1, p.warnings)),
            Err(e) => issues.push(format!("{file} rule {}: invalid verdict: {e}", i + 1)),
        }
    }
}

/// Cross-checks scripts against the corpus: expected sentences exist,
/// scripted verdicts validate, and replays at every budget from 0 to 5
/// (plus a trace-collection rollout and teacher labeling) complete without
/// missing scripts, with every extractor id inside its pool and every
/// selected sentence present in its source document.
pub fn verify_fixtures(set: &FixtureSet) -> Result<(), Vec<String>> {
    let mut issues = Vec::new();
    let corpus = set.corpus();
    if corpus.len() != set.documents.len() {
        issues.push("corpus has duplicate doc ids".to_string());
    }
    for e in &set.expected_evidence {
        match corpus.get_document(&e.title) {
            None => issues.push(format!("expected document {:?} not in corpus", e.title)),
            Some(d) if !segment_sentences(&d.text).contains(&e.sentence) => {
                issues.push(format!("expected sentence missing from {:?}: {}", e.title, e.sentence))
            }
            Some(_) => {}
        }
    }
    check_verdict_rules("judge.jsonl", &set.judge, false, &mut issues);
    check_verdict_rules("teacher.jsonl", &set.teacher, true, &mut issues);
    let backends = match set.backends() {
        Ok(b) => b,
        Err(e) => {
            issues.push(e.to_string());
            return Err(issues);
        }
    };
    let index = match Bm25Index::build(&corpus, Bm25Params::default()) {
        Ok(i) => i,
        Err(e) => {
            issues.push(e.to_string());
            return Err(issues);
        }
    };
    let recorder = Recorder {
        inner: &backends.extractor,
        calls: Mutex::new(Vec::new()),
    };
    let mut configs: Vec<PipelineConfig> = (0..=5)
        .map(|t| PipelineConfig {
            max_turns: t,
            ..Default::default()
        })
        .collect();
    configs.push(PipelineConfig {
        mode: RunMode::TraceCollection,
        ..Default::default()
    });
    for config in configs {
        let pipeline = Pipeline {
            corpus: &corpus,
            index: &index,
            judge: &backends.judge,
            extractor: &recorder,
            reasoner: &backends.reasoner,
            config,
            timing: Timing::Off,
        };
        for q in &set.questions {
            let traj = pipeline.run_question(q);
            if traj.stop_reason == StopReason::Failed {
                issues.push(format!(
                    "{} (T={}, {:?}): {}",
                    q.question_id,
                    config.max_turns,
                    config.mode,
                    traj.error.unwrap_or_default()
                ));
                continue;
            }
            check_sentences(&corpus, &traj, &mut issues);
            if config.mode == RunMode::TraceCollection {
                match snapshots_from_trajectory(&traj) {
                    Ok(mut snaps) => {
                        for (_, e) in label_snapshots(&mut snaps, &backends.teacher, 1) {
                            issues.push(format!("{} teacher: {e}", q.question_id));
                        }
                    }
                    Err(e) => issues.push(format!("{}: {e}", q.question_id)),
                }
            }
        }
    }
    for (user, raw) in recorder.calls.into_inner().unwrap_or_else(|e| e.into_inner()) {
        let size = pool_size(&user);
        match parse_selection(&raw, size, usize::MAX) {
            Ok(sel) if sel.warnings.is_empty() => {}
            Ok(sel) => issues.push(format!("extractor reply {raw} against pool of {size}: {:?}", sel.warnings)),
            Err(e) => issues.push(format!("extractor reply {raw}: {e}")),
        }
    }
    let mut seen = HashSet::new();
    issues.retain(|i| seen.insert(i.clone()));
    if issues.is_empty() {
        Ok(())
    } else {
        Err(issues)
    }
}

fn check_sentences(corpus: &Corpus, traj: &Trajectory, issues: &mut Vec<String>) {
    for tr in &traj.turns {
        for s in tr.evidence_block.iter().flat_map(|b| &b.selected) {
            let present = corpus
                .get_document(&s.doc_title)
                .is_some_and(|d| segment_sentences(&d.text).contains(&s.text));
            if !present {
                issues.push(format!("{}: sentence not in {:?}: {}", traj.question_id, s.doc_title, s.text));
            }
        }
    }
}

/// Generated corpus for supervision rollouts at scale.
///
/// Question `i` has nine documents carrying its topic token `zq{i}`: eight
/// notes and one archive page, the latter being the gold supporting title.
/// Term frequency fixes the ranking so the archive sits at rank `i % 9`;
/// with two documents per retrieval it is first retrieved at turn
/// `rank / 2 + 1`, and never within four turns when the rank is 8.
#[derive(Debug, Clone)]
pub struct SyntheticSet {
    pub documents: Vec<Document>,
    pub questions: Vec<QuestionRecord>,
    /// Questions whose teacher claims sufficiency before coverage.
    pub planted_conflicts: BTreeSet<usize>,
    /// Questions whose teacher emits prose at turn 2.
    pub format_failures: BTreeSet<usize>,
}

pub const SYNTHETIC_DOCS_PER_QUESTION: usize = 9;

impl SyntheticSet {
    pub fn generate(n_questions: usize) -> Self {
        let mut documents = Vec::with_capacity(n_questions * SYNTHETIC_DOCS_PER_QUESTION);
        let mut questions = Vec::with_capacity(n_questions);
        for i in 0..n_questions {
            let archive_rank = Self::archive_rank(i);
            let mut note = 0;
            for rank in 0..SYNTHETIC_DOCS_PER_QUESTION {
                let tf = SYNTHETIC_DOCS_PER_QUESTION - rank;
                let topic = vec![format!("zq{i}"); tf].join(" ");
                let (title, text) = if rank == archive_rank {
                    (
                        format!("Archive {i}"),
                        format!("Catalogue page on {topic}. It preserves the primary record."),
                    )
                } else {
                    note += 1;
                    (
                        format!("Note {i}-{note}"),
                        format!("Field memo {note} on {topic}. It lists routine observations."),
                    )
                };
                documents.push(Document {
                    doc_id: format!("s{i}-{rank}"),
                    title,
                    text,
                });
            }
            questions.push(QuestionRecord {
                question_id: format!("syn-{i:04}"),
                question: format!("Which entry describes zq{i}?"),
                answers: vec![format!("Quorra {i}")],
                supporting_titles: vec![format!("Archive {i}")],
            });
        }
        Self {
            documents,
            questions,
            planted_conflicts: (0..n_questions).filter(|i| i % 50 == 7).collect(),
            format_failures: (0..n_questions).filter(|i| i % 61 == 11).collect(),
        }
    }

    pub fn archive_rank(i: usize) -> usize {
        i % SYNTHETIC_DOCS_PER_QUESTION
    }

    /// First turn whose cumulative retrieval includes the gold title, given
    /// two documents per retrieval.
    pub fn cover_turn(i: usize) -> usize {
        Self::archive_rank(i) / 2 + 1
    }

    pub fn config() -> PipelineConfig {
        PipelineConfig {
            max_turns: 4,
            top_k: 2,
            mode: RunMode::TraceCollection,
            ..Default::default()
        }
    }

    pub fn corpus(&self) -> Corpus {
        Corpus::from_documents(self.documents.iter().cloned()).0
    }

    pub fn judge() -> ScriptedBackend {
        let verdict = JudgeVerdict::insufficient(vec![GapItem::new(GapCategory::Other, "ledger", "entry", "")]);
        ScriptedBackend::new([ScriptRule {
            kind: RuleKind::Judge,
            pattern: String::new(),
            match_mode: MatchMode::Always,
            response: verdict.to_wire(),
        }])
        .expect("static rule")
    }

    pub fn reasoner() -> ScriptedBackend {
        ScriptedBackend::new([ScriptRule {
            kind: RuleKind::Reasoner,
            pattern: String::new(),
            match_mode: MatchMode::Always,
            response: "unknown".into(),
        }])
        .expect("static rule")
    }

    pub fn teacher(&self) -> SyntheticTeacher {
        SyntheticTeacher {
            planted_conflicts: self.planted_conflicts.clone(),
            format_failures: self.format_failures.clone(),
        }
    }
}

fn topic_index(text: &str) -> Option<usize> {
    let start = text.find("zq")? + 2;
    let digits: String = text[start..].chars().take_while(char::is_ascii_digit).collect();
    digits.parse().ok()
}

/// Picks the first note sentence in the pool, or nothing.
#[derive(Debug, Default, Clone, Copy)]
pub struct SyntheticExtractor;

impl ChatBackend for SyntheticExtractor {
    fn complete(&self, _kind: PromptKind, messages: &[ChatMessage]) -> Result<String, BackendError> {
        let user = user_text(messages);
        let pick = user
            .split_once("SENTENCES:\n")
            .map(|(_, rest)| rest)
            .unwrap_or_default()
            .lines()
            .find_map(|l| {
                let (id, rest) = l.split_once(". [")?;
                rest.starts_with("Note ").then(|| id.parse::<usize>().ok()).flatten()
            });
        Ok(match pick {
            Some(id) => format!("{{\"evidence global ids\": [{id}]}}"),
            None => "{\"evidence global ids\": []}".to_string(),
        })
    }
}

/// Labels by coverage turn: sufficient once the gold page would have been
/// retrieved. Every seventh question under-claims after coverage.
#[derive(Debug, Clone)]
pub struct SyntheticTeacher {
    pub planted_conflicts: BTreeSet<usize>,
    pub format_failures: BTreeSet<usize>,
}

impl ChatBackend for SyntheticTeacher {
    fn complete(&self, _kind: PromptKind, messages: &[ChatMessage]) -> Result<String, BackendError> {
        let user = user_text(messages);
        let i = topic_index(&user).ok_or_else(|| BackendError::Response("no topic token".into()))?;
        let t = user.matches(" evidence:\n").count();
        if self.format_failures.contains(&i) && t == 2 {
            return Ok("The context seems mostly fine.".into());
        }
        let covered = t >= SyntheticSet::cover_turn(i);
        let sufficient = if self.planted_conflicts.contains(&i) {
            true
        } else {
            covered && i % 7 != 0
        };
        let verdict = if sufficient {
            JudgeVerdict::sufficient()
        } else {
            JudgeVerdict::insufficient(vec![GapItem::new(
                GapCategory::EvidenceSpan,
                &format!("zq{i}"),
                "primary_record",
                "",
            )])
        };
        Ok(verdict.to_wire())
    }
}
