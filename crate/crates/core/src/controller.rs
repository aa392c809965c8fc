//! The judge-first retrieval loop.
//!
//! For `t = 0..=T`: judge `(q, C_t)`; if sufficient or `t == T`, answer from
//! `(q, C_t)` and stop. Otherwise build a query from the gaps, retrieve with
//! cumulative title exclusion, extract an evidence block and append it.
//! Every turn is recorded in a [`TurnTrace`].

use std::collections::{BTreeSet, HashSet};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;
use tracing::warn;

use crate::bm25::Bm25Index;
use crate::corpus::{word_count, Corpus, Document};
use crate::evidence::{extract, raw_block, EvidenceBlock, EvidenceContext, ExtractRequest};
use crate::gap::{parse_verdict, JudgeVerdict};
use crate::llm::{render_prompt, BackendError, ChatBackend, PromptKind, PromptPayload, RenderError};
use crate::query::{build_query_styled, QueryString, QueryStyle};

pub const TRACE_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunMode {
    #[default]
    Inference,
    /// Ignore sufficiency and always retrieve up to the budget. The judge
    /// still runs (its gaps drive the queries) but the reasoner does not.
    TraceCollection,
}

/// Pipeline variants used for component ablations.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    #[default]
    Full,
    /// No judge: every turn is treated as insufficient with no gaps.
    NoJudge,
    /// Append every sentence of the retrieved documents instead of selecting.
    NoExtractor,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    /// Maximum retrieval turns `T`.
    pub max_turns: usize,
    /// Documents per retrieval `k`.
    pub top_k: usize,
    /// Gap phrases appended per query `K`.
    pub gap_phrases: usize,
    /// Sentences per evidence block `K_e`.
    pub evidence_cap: usize,
    pub mode: RunMode,
    pub query_style: QueryStyle,
    pub variant: Variant,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            max_turns: 4,
            top_k: 6,
            gap_phrases: 1,
            evidence_cap: 6,
            mode: RunMode::Inference,
            query_style: QueryStyle::Structured,
            variant: Variant::Full,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("invalid pipeline config: {0}")]
pub struct ConfigError(pub String);

impl PipelineConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |what: &str| Err(ConfigError(format!("{what} must be at least 1")));
        if self.top_k == 0 {
            return bad("top_k");
        }
        if self.gap_phrases == 0 {
            return bad("gap_phrases");
        }
        if self.evidence_cap == 0 {
            return bad("evidence_cap");
        }
        Ok(())
    }
}

/// Question with optional gold metadata. Gold fields are kept for analysis
/// only and never reach a prompt.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuestionRecord {
    pub question_id: String,
    pub question: String,
    #[serde(default)]
    pub answers: Vec<String>,
    #[serde(default)]
    pub supporting_titles: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TurnTrace {
    /// 1-based; the trace written after judging at loop step `t` is turn `t + 1`.
    pub turn: usize,
    pub verdict: JudgeVerdict,
    #[serde(default)]
    pub judge_parse_failed: bool,
    pub query: Option<QueryString>,
    pub retrieved_titles: Vec<String>,
    pub evidence_block: Option<EvidenceBlock>,
    pub context_words_after: usize,
    pub concat_words_after: usize,
    pub wall_ms: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    Sufficient,
    BudgetExhausted,
    /// A backend failed; `turns` holds whatever was recorded before.
    Failed,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CallCounts {
    pub judge: usize,
    pub retrieval: usize,
    pub extractor: usize,
    pub reasoner: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub schema_version: u32,
    pub question_id: String,
    pub question: String,
    #[serde(default)]
    pub gold_answers: Vec<String>,
    #[serde(default)]
    pub gold_supporting_titles: Vec<String>,
    pub turns: Vec<TurnTrace>,
    pub final_answer: String,
    /// Number of retrieval turns performed before stopping.
    pub final_turn: usize,
    pub stop_reason: StopReason,
    #[serde(default)]
    pub error: Option<String>,
    pub calls: CallCounts,
}

impl Trajectory {
    pub fn total_wall_ms(&self) -> f64 {
        self.turns.iter().map(|t| t.wall_ms).sum()
    }

    /// All titles retrieved across the trajectory, in retrieval order.
    pub fn retrieved_titles(&self) -> Vec<&str> {
        self.turns
            .iter()
            .flat_map(|t| t.retrieved_titles.iter().map(String::as_str))
            .collect()
    }

    /// `C_t` as the judge saw it after `t` appended blocks.
    pub fn context_after(&self, t: usize) -> EvidenceContext {
        let mut ctx = EvidenceContext::new();
        self.turns
            .iter()
            .filter_map(|tr| tr.evidence_block.clone())
            .take(t)
            .for_each(|b| ctx.append(b));
        ctx
    }

    pub fn last_verdict(&self) -> Option<&JudgeVerdict> {
        self.turns.last().map(|t| &t.verdict)
    }
}

/// Union of titles retrieved in the given turns.
pub fn cumulative_excluded_titles(turns: &[TurnTrace]) -> BTreeSet<String> {
    turns
        .iter()
        .flat_map(|t| t.retrieved_titles.iter().cloned())
        .collect()
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Timing {
    /// Real elapsed time per turn.
    #[default]
    Wall,
    /// Record zero; replays stay byte-identical.
    Off,
}

struct Stopwatch(Option<Instant>);

impl Stopwatch {
    fn start(timing: Timing) -> Self {
        Stopwatch(matches!(timing, Timing::Wall).then(Instant::now))
    }

    fn ms(&self) -> f64 {
        self.0.map_or(0.0, |s| s.elapsed().as_secs_f64() * 1000.0)
    }
}

#[derive(Debug, Error)]
pub enum AnswerError {
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Render(#[from] RenderError),
}

/// Final answer from `(q, C_t)`: trimmed reasoner completion.
pub fn answer(question: &str, context: &EvidenceContext, backend: &dyn ChatBackend) -> Result<String, AnswerError> {
    let rendered = context.render();
    let messages = render_prompt(
        PromptKind::Reasoner,
        &PromptPayload::Reasoner {
            question,
            context: &rendered,
        },
    )?;
    Ok(backend.complete(PromptKind::Reasoner, &messages)?.trim().to_string())
}

/// Everything a trajectory needs. All parts are shared read-only.
#[derive(Clone, Copy)]
pub struct Pipeline<'a> {
    pub corpus: &'a Corpus,
    pub index: &'a Bm25Index,
    pub judge: &'a dyn ChatBackend,
    pub extractor: &'a dyn ChatBackend,
    pub reasoner: &'a dyn ChatBackend,
    pub config: PipelineConfig,
    pub timing: Timing,
}

struct JudgeOutcome {
    verdict: JudgeVerdict,
    parse_failed: bool,
}

impl Pipeline<'_> {
    fn judge(&self, question: &str, context: &EvidenceContext, calls: &mut CallCounts) -> Result<JudgeOutcome, String> {
        if self.config.variant == Variant::NoJudge {
            return Ok(JudgeOutcome {
                verdict: JudgeVerdict::insufficient(Vec::new()),
                parse_failed: false,
            });
        }
        let rendered = context.render();
        let messages = render_prompt(
            PromptKind::Judge,
            &PromptPayload::Judge {
                question,
                context: &rendered,
            },
        )
        .map_err(|e| e.to_string())?;
        for attempt in 1..=2 {
            calls.judge += 1;
            let raw = self
                .judge
                .complete(PromptKind::Judge, &messages)
                .map_err(|e| format!("judge: {e}"))?;
            match parse_verdict(&raw) {
                Ok(verdict) => {
                    return Ok(JudgeOutcome {
                        verdict,
                        parse_failed: false,
                    })
                }
                Err(e) => warn!(attempt, error = %e, "unparsable judge output"),
            }
        }
        Ok(JudgeOutcome {
            verdict: JudgeVerdict::insufficient(Vec::new()),
            parse_failed: true,
        })
    }

    fn retrieve(&self, query: &str, excluded: &HashSet<String>) -> Vec<&Document> {
        self.index
            .search_dedup(query, self.config.top_k, excluded)
            .into_iter()
            .filter_map(|hit| self.corpus.get_by_id(&hit.doc_id))
            .collect()
    }

    /// Runs one question to completion. Backend failures end the trajectory
    /// with [`StopReason::Failed`] instead of propagating.
    pub fn run_question(&self, q: &QuestionRecord) -> Trajectory {
        let cfg = self.config;
        let mut traj = Trajectory {
            schema_version: TRACE_SCHEMA_VERSION,
            question_id: q.question_id.clone(),
            question: q.question.clone(),
            gold_answers: q.answers.clone(),
            gold_supporting_titles: q.supporting_titles.clone(),
            turns: Vec::new(),
            final_answer: String::new(),
            final_turn: 0,
            stop_reason: StopReason::BudgetExhausted,
            error: None,
            calls: CallCounts::default(),
        };
        if let Err(e) = cfg.validate() {
            traj.stop_reason = StopReason::Failed;
            traj.error = Some(e.to_string());
            return traj;
        }
        let mut context = EvidenceContext::new();
        let mut excluded: HashSet<String> = HashSet::new();
        let mut concat_words = 0usize;
        let collecting = cfg.mode == RunMode::TraceCollection;

        for t in 0..=cfg.max_turns {
            if collecting && t == cfg.max_turns {
                break;
            }
            let watch = Stopwatch::start(self.timing);
            let judged = match self.judge(&q.question, &context, &mut traj.calls) {
                Ok(j) => j,
                Err(e) => return fail(traj, e),
            };
            let stop_now = (!collecting && judged.verdict.is_sufficient()) || t == cfg.max_turns;
            if stop_now {
                traj.calls.reasoner += 1;
                match answer(&q.question, &context, self.reasoner) {
                    Ok(a) => traj.final_answer = a,
                    Err(e) => return fail(traj, format!("reasoner: {e}")),
                }
                traj.stop_reason = if judged.verdict.is_sufficient() {
                    StopReason::Sufficient
                } else {
                    StopReason::BudgetExhausted
                };
                traj.turns.push(TurnTrace {
                    turn: t + 1,
                    verdict: judged.verdict,
                    judge_parse_failed: judged.parse_failed,
                    query: None,
                    retrieved_titles: Vec::new(),
                    evidence_block: None,
                    context_words_after: context.word_count(),
                    concat_words_after: concat_words,
                    wall_ms: watch.ms(),
                });
                traj.final_turn = t;
                return traj;
            }

            let query = build_query_styled(
                &q.question,
                judged.verdict.gap_items(),
                cfg.gap_phrases,
                cfg.query_style,
            );
            traj.calls.retrieval += 1;
            let docs = self.retrieve(&query.text, &excluded);
            let block = match self.evidence_block(t + 1, q, &judged.verdict, &docs, &query, &mut traj.calls) {
                Ok(b) => b,
                Err(e) => return fail(traj, e),
            };
            for d in &docs {
                excluded.insert(d.title.clone());
                concat_words += word_count(&d.text);
            }
            context.append(block.clone());
            traj.turns.push(TurnTrace {
                turn: t + 1,
                verdict: judged.verdict,
                judge_parse_failed: judged.parse_failed,
                query: Some(query),
                retrieved_titles: block.retrieved_titles.clone(),
                evidence_block: Some(block),
                context_words_after: context.word_count(),
                concat_words_after: concat_words,
                wall_ms: watch.ms(),
            });
            traj.final_turn = t + 1;
        }
        // Only trace collection leaves the loop without answering.
        traj.stop_reason = StopReason::BudgetExhausted;
        traj
    }

    fn evidence_block(
        &self,
        turn: usize,
        q: &QuestionRecord,
        verdict: &JudgeVerdict,
        docs: &[&Document],
        query: &QueryString,
        calls: &mut CallCounts,
    ) -> Result<EvidenceBlock, String> {
        let req = ExtractRequest {
            turn,
            question: &q.question,
            gaps: verdict.gap_items(),
            docs,
            query,
            cap: self.config.evidence_cap,
        };
        if self.config.variant == Variant::NoExtractor {
            return Ok(raw_block(&req));
        }
        if !docs.is_empty() {
            calls.extractor += 1;
        }
        extract(&req, self.extractor).map_err(|e| e.to_string())
    }

    /// Runs `questions` on `workers` threads and hands trajectories to `sink`
    /// in input order as soon as each prefix is complete.
    pub fn run_many<F>(&self, questions: &[QuestionRecord], workers: usize, mut sink: F)
    where
        F: FnMut(Trajectory),
    {
        use std::collections::BTreeMap;
        use std::sync::atomic::{AtomicUsize, Ordering};
        use std::sync::mpsc;

        let workers = workers.clamp(1, questions.len().max(1));
        let next = AtomicUsize::new(0);
        let (tx, rx) = mpsc::channel::<(usize, Trajectory)>();
        std::thread::scope(|scope| {
            for _ in 0..workers {
                let tx = tx.clone();
                let next = &next;
                scope.spawn(move || loop {
                    let i = next.fetch_add(1, Ordering::Relaxed);
                    let Some(q) = questions.get(i) else { break };
                    if tx.send((i, self.run_question(q))).is_err() {
                        break;
                    }
                });
            }
            drop(tx);
            let mut pending = BTreeMap::new();
            let mut emit = 0usize;
            for (i, traj) in rx {
                pending.insert(i, traj);
                while let Some(t) = pending.remove(&emit) {
                    sink(t);
                    emit += 1;
                }
            }
        });
    }
}

fn fail(mut traj: Trajectory, error: String) -> Trajectory {
    warn!(question_id = %traj.question_id, %error, "trajectory failed");
    traj.stop_reason = StopReason::Failed;
    traj.error = Some(error);
    traj
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bm25::Bm25Params;
    use crate::corpus::Document;
    use crate::llm::{MatchMode, RuleKind, ScriptRule, ScriptedBackend};

    fn always(kind: RuleKind, response: &str) -> ScriptRule {
        ScriptRule {
            kind,
            pattern: String::new(),
            match_mode: MatchMode::Always,
            response: response.into(),
        }
    }

    fn small_corpus() -> Corpus {
        let docs = (0..20).map(|i| Document {
            doc_id: format!("d{i}"),
            title: format!("Page {i}"),
            text: format!("Page {i} talks about apples. It has fact number {i}."),
        });
        Corpus::from_documents(docs).0
    }

    fn question() -> QuestionRecord {
        QuestionRecord {
            question_id: "q1".into(),
            question: "Which page talks about apples?".into(),
            answers: vec!["Page 3".into()],
            supporting_titles: vec!["Page 3".into()],
        }
    }

    fn run(judge: &ScriptedBackend, config: PipelineConfig) -> Trajectory {
        let corpus = small_corpus();
        let index = Bm25Index::build(&corpus, Bm25Params::default()).unwrap();
        let extractor = ScriptedBackend::new([always(RuleKind::Extractor, r#"{"evidence global ids": [1]}"#)]).unwrap();
        let reasoner = ScriptedBackend::new([always(RuleKind::Reasoner, "  Page 3 \n")]).unwrap();
        let p = Pipeline {
            corpus: &corpus,
            index: &index,
            judge,
            extractor: &extractor,
            reasoner: &reasoner,
            config,
            timing: Timing::Off,
        };
        p.run_question(&question())
    }

    #[test]
    fn always_insufficient_exhausts_budget() {
        let judge = ScriptedBackend::new([always(
            RuleKind::Judge,
            r#"{"sufficient": false, "gap items": [{"category": "other", "target": "apples", "slot": "page", "description": ""}]}"#,
        )])
        .unwrap();
        let traj = run(&judge, PipelineConfig::default());
        assert_eq!(traj.stop_reason, StopReason::BudgetExhausted);
        assert_eq!(traj.calls.retrieval, 4);
        assert_eq!(traj.calls.judge, 5);
        assert_eq!(traj.calls.reasoner, 1);
        assert_eq!(traj.turns.len(), 5);
        assert_eq!(traj.final_turn, 4);
        assert_eq!(traj.final_answer, "Page 3");
        assert!(traj.turns[4].query.is_none());
        assert!(traj.turns[..4].iter().all(|t| t.query.is_some()));
        let titles = traj.retrieved_titles();
        let unique: HashSet<_> = titles.iter().collect();
        assert_eq!(titles.len(), unique.len());
        assert_eq!(titles.len(), 20);
    }

    #[test]
    fn sufficient_at_start_skips_retrieval() {
        let judge = ScriptedBackend::new([always(RuleKind::Judge, r#"{"sufficient": true, "gap items": []}"#)]).unwrap();
        let traj = run(&judge, PipelineConfig::default());
        assert_eq!(traj.stop_reason, StopReason::Sufficient);
        assert_eq!(traj.calls.retrieval, 0);
        assert_eq!(traj.turns.len(), 1);
        assert_eq!(traj.final_turn, 0);
        assert_eq!(traj.turns[0].context_words_after, 0);
    }

    #[test]
    fn judge_parse_failure_retries_then_continues() {
        let judge = ScriptedBackend::new([always(RuleKind::Judge, "not sure")]).unwrap();
        let traj = run(&judge, PipelineConfig { max_turns: 1, ..Default::default() });
        assert_eq!(traj.calls.judge, 4);
        assert!(traj.turns[0].judge_parse_failed);
        assert_eq!(traj.turns[0].query.as_ref().unwrap().text, question().question);
        assert_eq!(traj.stop_reason, StopReason::BudgetExhausted);
    }

    #[test]
    fn missing_script_marks_trajectory_failed() {
        let judge = ScriptedBackend::default();
        let traj = run(&judge, PipelineConfig::default());
        assert_eq!(traj.stop_reason, StopReason::Failed);
        assert!(traj.error.as_deref().unwrap().contains("judge"));
    }

    #[test]
    fn trace_collection_retrieves_to_budget_without_answering() {
        let judge = ScriptedBackend::new([always(RuleKind::Judge, r#"{"sufficient": true, "gap items": []}"#)]).unwrap();
        let traj = run(
            &judge,
            PipelineConfig {
                mode: RunMode::TraceCollection,
                ..Default::default()
            },
        );
        assert_eq!(traj.turns.len(), 4);
        assert_eq!(traj.calls.retrieval, 4);
        assert_eq!(traj.calls.reasoner, 0);
        assert_eq!(traj.final_turn, 4);
        assert_eq!(traj.context_after(2).blocks().len(), 2);
    }

    #[test]
    fn excluded_titles_accumulate() {
        assert!(cumulative_excluded_titles(&[]).is_empty());
        let mk = |titles: &[&str]| TurnTrace {
            turn: 1,
            verdict: JudgeVerdict::insufficient(vec![]),
            judge_parse_failed: false,
            query: None,
            retrieved_titles: titles.iter().map(|s| s.to_string()).collect(),
            evidence_block: None,
            context_words_after: 0,
            concat_words_after: 0,
            wall_ms: 0.0,
        };
        let got = cumulative_excluded_titles(&[mk(&["A", "B"]), mk(&["B", "C"])]);
        assert_eq!(got.into_iter().collect::<Vec<_>>(), ["A", "B", "C"]);
    }

    #[test]
    fn answer_trims_and_handles_empty_context() {
        let reasoner = ScriptedBackend::new([always(RuleKind::Reasoner, "  closed book \n")]).unwrap();
        assert_eq!(answer("Q?", &EvidenceContext::new(), &reasoner).unwrap(), "closed book");
    }

    #[test]
    fn run_many_preserves_input_order() {
        let corpus = small_corpus();
        let index = Bm25Index::build(&corpus, Bm25Params::default()).unwrap();
        let judge = ScriptedBackend::new([always(RuleKind::Judge, r#"{"sufficient": false, "gap items": []}"#)]).unwrap();
        let extractor = ScriptedBackend::new([always(RuleKind::Extractor, r#"{"evidence global ids": [2]}"#)]).unwrap();
        let reasoner = ScriptedBackend::new([always(RuleKind::Reasoner, "x")]).unwrap();
        let p = Pipeline {
            corpus: &corpus,
            index: &index,
            judge: &judge,
            extractor: &extractor,
            reasoner: &reasoner,
            config: PipelineConfig { max_turns: 2, ..Default::default() },
            timing: Timing::Off,
        };
        let qs: Vec<QuestionRecord> = (0..25)
            .map(|i| QuestionRecord {
                question_id: format!("q{i}"),
                question: format!("fact number {i}?"),
                answers: vec![],
                supporting_titles: vec![],
            })
            .collect();
        let mut ids = Vec::new();
        p.run_many(&qs, 4, |t| ids.push(t.question_id));
        assert_eq!(ids, qs.iter().map(|q| q.question_id.clone()).collect::<Vec<_>>());
    }
}
