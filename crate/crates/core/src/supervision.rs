//! Turn-level judge supervision built from rollouts: snapshots of `(q, C_t)`,
//! retrieval-coverage tags, teacher labels, conflict filtering, a seeded
//! split and chat-format export.

use std::collections::{BTreeMap, HashSet};
use std::io::{self, Write};

use rand_core::{RngCore, SeedableRng};
use rand_xoshiro::SplitMix64;
use serde::{Deserialize, Serialize};
use thiserror::Error;
use tracing::warn;

use crate::controller::{Pipeline, QuestionRecord, RunMode, StopReason, Trajectory};
use crate::gap::{parse_verdict, JudgeVerdict};
use crate::llm::{render_prompt, BackendError, ChatBackend, ChatMessage, PromptKind, PromptPayload, TemplateSet};

pub const DEFAULT_SPLIT_SEED: u64 = 42;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FilterStatus {
    Kept,
    DroppedFormat,
    DroppedConflict,
    #[default]
    Unlabeled,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SupervisionSnapshot {
    pub question_id: String,
    pub question: String,
    /// `C_t` rendered exactly as the judge sees it.
    pub context_text: String,
    /// Number of evidence blocks in `C_t`, at least 1.
    pub turn: usize,
    pub retrieval_sufficient_tag: bool,
    #[serde(default)]
    pub teacher_verdict: Option<JudgeVerdict>,
    #[serde(default)]
    pub filter_status: FilterStatus,
    /// Set when the rollout failed before reaching the budget.
    #[serde(default)]
    pub partial: bool,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SupervisionError {
    #[error("question {0} has no gold supporting titles")]
    MissingGold(String),
    #[error("snapshot collection requires trace_collection mode")]
    WrongMode,
    #[error("cannot split an empty snapshot set")]
    EmptySplit,
    #[error("train fraction must lie strictly between 0 and 1, got {0}")]
    BadFraction(f64),
}

/// True iff every gold title appears among the retrieved titles (exact match).
pub fn tag_retrieval_sufficiency<'a>(
    retrieved: impl IntoIterator<Item = &'a str>,
    gold: &[String],
) -> Result<bool, SupervisionError> {
    if gold.is_empty() {
        return Err(SupervisionError::MissingGold(String::new()));
    }
    let seen: HashSet<&str> = retrieved.into_iter().collect();
    Ok(gold.iter().all(|g| seen.contains(g.as_str())))
}

/// One snapshot per appended block of a collected trajectory.
pub fn snapshots_from_trajectory(traj: &Trajectory) -> Result<Vec<SupervisionSnapshot>, SupervisionError> {
    if traj.gold_supporting_titles.is_empty() {
        return Err(SupervisionError::MissingGold(traj.question_id.clone()));
    }
    let partial = traj.stop_reason == StopReason::Failed;
    let mut retrieved: Vec<&str> = Vec::new();
    let mut out = Vec::new();
    for tr in &traj.turns {
        let Some(_) = tr.evidence_block else { continue };
        retrieved.extend(tr.retrieved_titles.iter().map(String::as_str));
        let t = out.len() + 1;
        out.push(SupervisionSnapshot {
            question_id: traj.question_id.clone(),
            question: traj.question.clone(),
            context_text: traj.context_after(t).render(),
            turn: t,
            retrieval_sufficient_tag: tag_retrieval_sufficiency(
                retrieved.iter().copied(),
                &traj.gold_supporting_titles,
            )
            .map_err(|_| SupervisionError::MissingGold(traj.question_id.clone()))?,
            teacher_verdict: None,
            filter_status: FilterStatus::Unlabeled,
            partial,
        });
    }
    Ok(out)
}

#[derive(Debug, Default)]
pub struct Collection {
    pub snapshots: Vec<SupervisionSnapshot>,
    /// `(question_id, error)` for rollouts that failed part-way.
    pub failures: Vec<(String, String)>,
}

/// Rolls out every question to the budget and snapshots turns `1..=T`.
pub fn collect_snapshots(
    questions: &[QuestionRecord],
    pipeline: &Pipeline<'_>,
    workers: usize,
) -> Result<Collection, SupervisionError> {
    if pipeline.config.mode != RunMode::TraceCollection {
        return Err(SupervisionError::WrongMode);
    }
    if let Some(q) = questions.iter().find(|q| q.supporting_titles.is_empty()) {
        return Err(SupervisionError::MissingGold(q.question_id.clone()));
    }
    let mut out = Collection::default();
    let mut err = None;
    pipeline.run_many(questions, workers, |traj| {
        if let Some(e) = &traj.error {
            warn!(question_id = %traj.question_id, error = %e, "partial rollout");
            out.failures.push((traj.question_id.clone(), e.clone()));
        }
        match snapshots_from_trajectory(&traj) {
            Ok(s) => out.snapshots.extend(s),
            Err(e) => err = Some(e),
        }
    });
    match err {
        Some(e) => Err(e),
        None => Ok(out),
    }
}

/// Teacher verdict for one snapshot. `Ok(None)` means the output could not
/// be parsed even after one retry.
pub fn teacher_label(
    snapshot: &SupervisionSnapshot,
    backend: &dyn ChatBackend,
) -> Result<Option<JudgeVerdict>, BackendError> {
    let messages = render_prompt(
        PromptKind::Teacher,
        &PromptPayload::Teacher {
            question: &snapshot.question,
            context: &snapshot.context_text,
        },
    )
    .map_err(|e| BackendError::Request(e.to_string()))?;
    for attempt in 1..=2 {
        let raw = backend.complete(PromptKind::Teacher, &messages)?;
        match parse_verdict(&raw) {
            Ok(v) => return Ok(Some(v)),
            Err(e) => warn!(question_id = %snapshot.question_id, turn = snapshot.turn, attempt, error = %e, "unparsable teacher output"),
        }
    }
    Ok(None)
}

/// Labels all snapshots in place on `workers` threads. Returns backend
/// failures as `(index, error)`; those snapshots stay unlabeled.
pub fn label_snapshots(
    snapshots: &mut [SupervisionSnapshot],
    backend: &dyn ChatBackend,
    workers: usize,
) -> Vec<(usize, BackendError)> {
    if snapshots.is_empty() {
        return Vec::new();
    }
    let chunk = snapshots.len().div_ceil(workers.max(1));
    let mut failures = Vec::new();
    std::thread::scope(|scope| {
        let handles: Vec<_> = snapshots
            .chunks_mut(chunk)
            .enumerate()
            .map(|(c, part)| {
                scope.spawn(move || {
                    let mut errs = Vec::new();
                    for (i, s) in part.iter_mut().enumerate() {
                        match teacher_label(s, backend) {
                            Ok(Some(v)) => {
                                s.teacher_verdict = Some(v);
                                s.filter_status = FilterStatus::Unlabeled;
                            }
                            Ok(None) => {
                                s.teacher_verdict = None;
                                s.filter_status = FilterStatus::DroppedFormat;
                            }
                            Err(e) => errs.push((c * chunk + i, e)),
                        }
                    }
                    errs
                })
            })
            .collect();
        for h in handles {
            failures.extend(h.join().expect("labeling worker panicked"));
        }
    });
    failures
}

#[derive(Debug, Default, Clone, PartialEq)]
pub struct FilterOutcome {
    pub kept: Vec<SupervisionSnapshot>,
    pub dropped: Vec<SupervisionSnapshot>,
}

/// Keeps labeled snapshots except teacher-sufficient ones whose retrieval tag
/// is false. Unparsable and unlabeled snapshots are dropped.
pub fn filter_supervision(snapshots: impl IntoIterator<Item = SupervisionSnapshot>) -> FilterOutcome {
    let mut out = FilterOutcome::default();
    for mut s in snapshots {
        s.filter_status = match (&s.teacher_verdict, s.filter_status) {
            (None, FilterStatus::DroppedFormat) => FilterStatus::DroppedFormat,
            (None, _) => FilterStatus::Unlabeled,
            (Some(v), _) if v.is_sufficient() && !s.retrieval_sufficient_tag => FilterStatus::DroppedConflict,
            (Some(_), _) => FilterStatus::Kept,
        };
        if s.filter_status == FilterStatus::Kept {
            out.kept.push(s);
        } else {
            out.dropped.push(s);
        }
    }
    out
}

/// Fisher–Yates over a SplitMix64 stream seeded with `seed`: for `i` from
/// `n-1` down to `1`, swap `i` with `next_u64() % (i + 1)`.
pub fn seeded_permutation(n: usize, seed: u64) -> Vec<usize> {
    let mut rng = SplitMix64::seed_from_u64(seed);
    let mut idx: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = (rng.next_u64() % (i as u64 + 1)) as usize;
        idx.swap(i, j);
    }
    idx
}

/// Shuffles with [`seeded_permutation`] and takes the first
/// `floor(N * train_fraction)` items as the training split.
pub fn split_dataset<T: Clone>(items: &[T], train_fraction: f64, seed: u64) -> Result<(Vec<T>, Vec<T>), SupervisionError> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(SupervisionError::BadFraction(train_fraction));
    }
    if items.is_empty() {
        return Err(SupervisionError::EmptySplit);
    }
    let n_train = (items.len() as f64 * train_fraction).floor() as usize;
    let order = seeded_permutation(items.len(), seed);
    let train = order[..n_train].iter().map(|&i| items[i].clone()).collect();
    let val = order[n_train..].iter().map(|&i| items[i].clone()).collect();
    Ok((train, val))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SftRecord {
    pub messages: Vec<ChatMessage>,
}

/// Chat record: judge system prompt, judge user message for `(q, C_t)`,
/// teacher verdict as the assistant turn. `None` for non-kept snapshots.
pub fn sft_record(s: &SupervisionSnapshot) -> Option<SftRecord> {
    if s.filter_status != FilterStatus::Kept {
        return None;
    }
    let verdict = s.teacher_verdict.as_ref()?;
    let mut messages = render_prompt(
        PromptKind::Judge,
        &PromptPayload::Judge {
            question: &s.question,
            context: &s.context_text,
        },
    )
    .ok()?;
    messages.push(ChatMessage::assistant(verdict.to_wire()));
    Some(SftRecord { messages })
}

/// Writes kept snapshots as chat JSONL; returns the number of records.
pub fn export_sft<'a, W: Write>(
    snapshots: impl IntoIterator<Item = &'a SupervisionSnapshot>,
    mut out: W,
) -> io::Result<usize> {
    let mut n = 0;
    for rec in snapshots.into_iter().filter_map(sft_record) {
        serde_json::to_writer(&mut out, &rec)?;
        out.write_all(b"\n")?;
        n += 1;
    }
    out.flush()?;
    Ok(n)
}

#[derive(Debug, Default, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SupervisionStats {
    pub total: usize,
    pub per_turn: BTreeMap<usize, usize>,
    pub per_status: BTreeMap<String, usize>,
    pub tag_true: usize,
    pub tag_false: usize,
    pub teacher_sufficient: usize,
    pub teacher_insufficient: usize,
}

pub fn supervision_stats<'a>(snapshots: impl IntoIterator<Item = &'a SupervisionSnapshot>) -> SupervisionStats {
    let mut st = SupervisionStats::default();
    for s in snapshots {
        st.total += 1;
        *st.per_turn.entry(s.turn).or_default() += 1;
        let status = serde_json::to_value(s.filter_status).expect("status serializes");
        *st.per_status.entry(status.as_str().unwrap_or_default().to_string()).or_default() += 1;
        if s.retrieval_sufficient_tag {
            st.tag_true += 1;
        } else {
            st.tag_false += 1;
        }
        match &s.teacher_verdict {
            Some(v) if v.is_sufficient() => st.teacher_sufficient += 1,
            Some(_) => st.teacher_insufficient += 1,
            None => {}
        }
    }
    st
}

impl SupervisionStats {
    pub fn render_text(&self) -> String {
        let mut out = format!("snapshots: {}\n", self.total);
        for (t, n) in &self.per_turn {
            out.push_str(&format!("  turn {t}: {n}\n"));
        }
        for (s, n) in &self.per_status {
            out.push_str(&format!("  {s}: {n}\n"));
        }
        out.push_str(&format!(
            "retrieval tag true/false: {}/{}\nteacher sufficient/insufficient: {}/{}\n",
            self.tag_true, self.tag_false, self.teacher_sufficient, self.teacher_insufficient
        ));
        out
    }
}

#[derive(Debug, Default, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SftStats {
    pub records: usize,
    pub sufficient: usize,
    pub insufficient: usize,
}

/// Recounts label balance from an exported chat JSONL text.
pub fn recount_sft(text: &str) -> Result<SftStats, String> {
    let mut st = SftStats::default();
    for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let rec: SftRecord = serde_json::from_str(line).map_err(|e| format!("line {}: {e}", i + 1))?;
        let last = rec.messages.last().ok_or_else(|| format!("line {}: no messages", i + 1))?;
        let v = parse_verdict(&last.content).map_err(|e| format!("line {}: {e}", i + 1))?;
        st.records += 1;
        if v.is_sufficient() {
            st.sufficient += 1;
        } else {
            st.insufficient += 1;
        }
    }
    Ok(st)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct AuditHit {
    pub line: usize,
    pub needle: String,
}

/// Case-insensitive scan of every message of every record for any gold
/// answer or gold supporting title.
pub fn audit_sft(text: &str, golds: &[QuestionRecord]) -> Vec<AuditHit> {
    let needles: Vec<String> = golds
        .iter()
        .flat_map(|q| q.answers.iter().chain(&q.supporting_titles))
        .map(|s| s.trim().to_lowercase())
        .filter(|s| !s.is_empty())
        .collect::<std::collections::BTreeSet<_>>()
        .into_iter()
        .collect();
    let mut hits = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let visible = match serde_json::from_str::<SftRecord>(line) {
            Ok(r) => r.messages.iter().map(|m| m.content.as_str()).collect::<Vec<_>>().join("\n"),
            Err(_) => line.to_string(),
        }
        .to_lowercase();
        for n in &needles {
            if visible.contains(n.as_str()) {
                hits.push(AuditHit {
                    line: i + 1,
                    needle: n.clone(),
                });
            }
        }
    }
    hits
}

/// The judge system prompt every SFT record starts with.
pub fn sft_system_prompt() -> &'static str {
    TemplateSet::V1.judge
}
