//! Answer metrics, the sufficiency confusion matrix, compression accounting
//! and run/sweep reports over trajectories.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;
use tracing::warn;

use crate::controller::{QuestionRecord, StopReason, Trajectory};
use crate::supervision::tag_retrieval_sufficiency;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum EvalError {
    #[error("no gold answers to score against")]
    EmptyGold,
}

/// Lowercase, punctuation to spaces, drop the articles a/an/the, collapse
/// whitespace.
pub fn normalize_answer(s: &str) -> String {
    let spaced: String = s
        .to_lowercase()
        .chars()
        .map(|c| if c.is_alphanumeric() || c.is_whitespace() { c } else { ' ' })
        .collect();
    spaced
        .split_whitespace()
        .filter(|t| !matches!(*t, "a" | "an" | "the"))
        .collect::<Vec<_>>()
        .join(" ")
}

pub fn exact_match(pred: &str, golds: &[String]) -> Result<f64, EvalError> {
    if golds.is_empty() {
        return Err(EvalError::EmptyGold);
    }
    let p = normalize_answer(pred);
    Ok(if golds.iter().any(|g| normalize_answer(g) == p) { 1.0 } else { 0.0 })
}

fn f1_single(pred: &str, gold: &str) -> f64 {
    let p = normalize_answer(pred);
    let g = normalize_answer(gold);
    let pt: Vec<&str> = p.split_whitespace().collect();
    let gt: Vec<&str> = g.split_whitespace().collect();
    if pt.is_empty() || gt.is_empty() {
        return 0.0;
    }
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for t in &gt {
        *counts.entry(t).or_default() += 1;
    }
    let mut common = 0usize;
    for t in &pt {
        if let Some(c) = counts.get_mut(t) {
            if *c > 0 {
                *c -= 1;
                common += 1;
            }
        }
    }
    if common == 0 {
        return 0.0;
    }
    let precision = common as f64 / pt.len() as f64;
    let recall = common as f64 / gt.len() as f64;
    2.0 * precision * recall / (precision + recall)
}

/// Token-overlap F1 with multiplicity, maximised over gold aliases.
pub fn f1(pred: &str, golds: &[String]) -> Result<f64, EvalError> {
    if golds.is_empty() {
        return Err(EvalError::EmptyGold);
    }
    Ok(golds.iter().map(|g| f1_single(pred, g)).fold(0.0, f64::max))
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct QaMetrics {
    pub em: f64,
    pub f1: f64,
    pub n: usize,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct ConfusionRates {
    pub tp: f64,
    pub fp: f64,
    #[serde(rename = "fn")]
    pub fn_: f64,
    pub tn: f64,
}

/// Predicted sufficiency vs. whether retrieval covered every gold title.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub tn: usize,
    pub rates: ConfusionRates,
}

impl ConfusionMatrix {
    pub fn n(&self) -> usize {
        self.tp + self.fp + self.fn_ + self.tn
    }

    fn add(&mut self, predicted: bool, truth: bool) {
        match (predicted, truth) {
            (true, true) => self.tp += 1,
            (true, false) => self.fp += 1,
            (false, true) => self.fn_ += 1,
            (false, false) => self.tn += 1,
        }
    }

    fn finish(mut self) -> Self {
        let n = self.n();
        if n > 0 {
            let r = |c: usize| c as f64 / n as f64;
            self.rates = ConfusionRates {
                tp: r(self.tp),
                fp: r(self.fp),
                fn_: r(self.fn_),
                tn: r(self.tn),
            };
        }
        self
    }
}

/// Cells over questions. Trajectories without gold titles or without any
/// recorded verdict are skipped and their ids returned.
pub fn confusion_matrix<'a>(trajectories: impl IntoIterator<Item = &'a Trajectory>) -> (ConfusionMatrix, Vec<String>) {
    let mut m = ConfusionMatrix::default();
    let mut excluded = Vec::new();
    for t in trajectories {
        let truth = tag_retrieval_sufficiency(t.retrieved_titles(), &t.gold_supporting_titles);
        match (t.last_verdict(), truth) {
            (Some(v), Ok(truth)) => m.add(v.is_sufficient(), truth),
            _ => {
                warn!(question_id = %t.question_id, "excluded from confusion matrix");
                excluded.push(t.question_id.clone());
            }
        }
    }
    (m.finish(), excluded)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompressionGroup {
    pub final_turn: usize,
    pub n: usize,
    pub mean_evidence_words: f64,
    pub mean_concat_words: f64,
    /// Concatenated / evidence; absent when the group has no evidence words.
    pub ratio: Option<f64>,
    /// Evidence / concatenated.
    pub inverse_ratio: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CompressionReport {
    pub groups: Vec<CompressionGroup>,
    pub overall: Option<CompressionGroup>,
}

fn final_words(t: &Trajectory) -> (usize, usize) {
    t.turns
        .last()
        .map_or((0, 0), |tr| (tr.context_words_after, tr.concat_words_after))
}

fn group(final_turn: usize, rows: &[(usize, usize)]) -> CompressionGroup {
    let n = rows.len();
    let ev: usize = rows.iter().map(|r| r.0).sum();
    let cc: usize = rows.iter().map(|r| r.1).sum();
    let mean = |s: usize| if n == 0 { 0.0 } else { s as f64 / n as f64 };
    CompressionGroup {
        final_turn,
        n,
        mean_evidence_words: mean(ev),
        mean_concat_words: mean(cc),
        ratio: (ev > 0).then(|| cc as f64 / ev as f64),
        inverse_ratio: (cc > 0).then(|| ev as f64 / cc as f64),
    }
}

/// Word counts from the final row of each trajectory, grouped by final turn.
pub fn compression_stats<'a>(trajectories: impl IntoIterator<Item = &'a Trajectory>) -> CompressionReport {
    let mut by_turn: BTreeMap<usize, Vec<(usize, usize)>> = BTreeMap::new();
    for t in trajectories {
        by_turn.entry(t.final_turn).or_default().push(final_words(t));
    }
    let all: Vec<(usize, usize)> = by_turn.values().flatten().copied().collect();
    CompressionReport {
        groups: by_turn.iter().map(|(k, rows)| group(*k, rows)).collect(),
        overall: (!all.is_empty()).then(|| group(0, &all)),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuestionScore {
    pub question_id: String,
    pub prediction: String,
    pub em: f64,
    pub f1: f64,
    pub final_turn: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub trajectories: usize,
    pub qa: Option<QaMetrics>,
    pub confusion: Option<ConfusionMatrix>,
    pub compression: CompressionReport,
    /// Mean over trajectories of summed per-turn wall time, in seconds.
    pub mean_latency_s: f64,
    pub mean_retrieval_turns: f64,
    pub failed: Vec<String>,
    /// Trace ids missing from the gold file.
    pub unmatched: Vec<String>,
    pub notices: Vec<String>,
    pub per_question: Vec<QuestionScore>,
}

/// Joins traces with gold records by question id. Without a gold file the
/// gold data embedded in the traces is used; questions with no gold answers
/// are left out of QA scoring and those with no gold titles out of the
/// confusion matrix.
pub fn aggregate_run(trajectories: &[Trajectory], golds: Option<&[QuestionRecord]>) -> RunReport {
    let gold_by_id: Option<HashMap<&str, &QuestionRecord>> =
        golds.map(|g| g.iter().map(|q| (q.question_id.as_str(), q)).collect());
    let mut unmatched = Vec::new();
    let mut joined: Vec<Trajectory> = Vec::with_capacity(trajectories.len());
    for t in trajectories {
        let mut t = t.clone();
        if let Some(map) = &gold_by_id {
            match map.get(t.question_id.as_str()) {
                Some(g) => {
                    t.gold_answers = g.answers.clone();
                    t.gold_supporting_titles = g.supporting_titles.clone();
                }
                None => {
                    unmatched.push(t.question_id.clone());
                    continue;
                }
            }
        }
        joined.push(t);
    }

    let mut notices = Vec::new();
    let mut per_question = Vec::new();
    for t in &joined {
        if let (Ok(em), Ok(f)) = (exact_match(&t.final_answer, &t.gold_answers), f1(&t.final_answer, &t.gold_answers)) {
            per_question.push(QuestionScore {
                question_id: t.question_id.clone(),
                prediction: t.final_answer.clone(),
                em,
                f1: f,
                final_turn: t.final_turn,
            });
        }
    }
    let qa = if per_question.is_empty() {
        notices.push("no gold answers; QA metrics skipped".to_string());
        None
    } else {
        let n = per_question.len();
        Some(QaMetrics {
            em: per_question.iter().map(|s| s.em).sum::<f64>() / n as f64,
            f1: per_question.iter().map(|s| s.f1).sum::<f64>() / n as f64,
            n,
        })
    };

    let (cm, excluded) = confusion_matrix(&joined);
    let confusion = if cm.n() == 0 {
        notices.push("no gold supporting titles; confusion matrix skipped".to_string());
        None
    } else {
        if !excluded.is_empty() {
            notices.push(format!("{} question(s) excluded from confusion matrix", excluded.len()));
        }
        Some(cm)
    };

    let n = joined.len();
    let mean = |f: &dyn Fn(&Trajectory) -> f64| {
        if n == 0 {
            0.0
        } else {
            joined.iter().map(f).sum::<f64>() / n as f64
        }
    };
    RunReport {
        trajectories: n,
        qa,
        confusion,
        compression: compression_stats(&joined),
        mean_latency_s: mean(&|t| t.total_wall_ms() / 1000.0),
        mean_retrieval_turns: mean(&|t| t.final_turn as f64),
        failed: joined
            .iter()
            .filter(|t| t.stop_reason == StopReason::Failed)
            .map(|t| t.question_id.clone())
            .collect(),
        unmatched,
        notices,
        per_question,
    }
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |x| format!("{x:.4}"))
}

impl RunReport {
    pub fn render_text(&self, group_by_final_turn: bool) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "trajectories: {}", self.trajectories);
        if let Some(qa) = &self.qa {
            let _ = writeln!(s, "EM: {:.4}  F1: {:.4}  (n={})", qa.em, qa.f1, qa.n);
        }
        let _ = writeln!(s, "mean latency (s/q): {:.4}", self.mean_latency_s);
        let _ = writeln!(s, "mean retrieval turns: {:.4}", self.mean_retrieval_turns);
        if let Some(c) = &self.confusion {
            let _ = writeln!(s, "confusion (pred x retrieval truth), n={}:", c.n());
            let _ = writeln!(s, "  TP {} ({:.2}%)  FP {} ({:.2}%)", c.tp, c.rates.tp * 100.0, c.fp, c.rates.fp * 100.0);
            let _ = writeln!(s, "  FN {} ({:.2}%)  TN {} ({:.2}%)", c.fn_, c.rates.fn_ * 100.0, c.tn, c.rates.tn * 100.0);
        }
        if let Some(o) = &self.compression.overall {
            let _ = writeln!(
                s,
                "compression: evidence {:.1} words, concatenated {:.1} words, ratio {}, inverse {}",
                o.mean_evidence_words,
                o.mean_concat_words,
                opt(o.ratio),
                opt(o.inverse_ratio)
            );
        }
        if group_by_final_turn {
            let _ = writeln!(s, "final_turn  n  evidence_words  concat_words  ratio  inverse");
            for g in &self.compression.groups {
                let _ = writeln!(
                    s,
                    "{}  {}  {:.1}  {:.1}  {}  {}",
                    g.final_turn,
                    g.n,
                    g.mean_evidence_words,
                    g.mean_concat_words,
                    opt(g.ratio),
                    opt(g.inverse_ratio)
                );
            }
        }
        for f in &self.failed {
            let _ = writeln!(s, "failed: {f}");
        }
        for u in &self.unmatched {
            let _ = writeln!(s, "unmatched: {u}");
        }
        for n in &self.notices {
            let _ = writeln!(s, "notice: {n}");
        }
        s
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub max_turns: usize,
    pub n: usize,
    pub em: Option<f64>,
    pub f1: Option<f64>,
    pub mean_retrieval_turns: f64,
}

/// F1-vs-budget table from one report per budget.
pub fn budget_sweep(runs: &[(usize, RunReport)]) -> Vec<SweepRow> {
    let mut rows: Vec<SweepRow> = runs
        .iter()
        .map(|(t, r)| SweepRow {
            max_turns: *t,
            n: r.trajectories,
            em: r.qa.map(|q| q.em),
            f1: r.qa.map(|q| q.f1),
            mean_retrieval_turns: r.mean_retrieval_turns,
        })
        .collect();
    rows.sort_by_key(|r| r.max_turns);
    rows
}

pub fn render_sweep(rows: &[SweepRow]) -> String {
    let mut s = String::from("T  n  EM  F1  mean_turns\n");
    for r in rows {
        let _ = writeln!(s, "{}  {}  {}  {}  {:.2}", r.max_turns, r.n, opt(r.em), opt(r.f1), r.mean_retrieval_turns);
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::controller::{CallCounts, TurnTrace, TRACE_SCHEMA_VERSION};
    use crate::gap::JudgeVerdict;

    fn golds(g: &[&str]) -> Vec<String> {
        g.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn normalization_table() {
        assert_eq!(normalize_answer("The Michael Swango."), "michael swango");
        assert_eq!(normalize_answer("Cold-Spring  Historic District"), "cold spring historic district");
        assert_eq!(normalize_answer(""), "");
        assert_eq!(normalize_answer("An apple, a day"), "apple day");
        assert_eq!(normalize_answer("theater"), "theater");
    }

    #[test]
    fn em_and_f1_cases() {
        assert_eq!(exact_match("Michael Swango", &golds(&["Michael Swango"])), Ok(1.0));
        assert_eq!(
            exact_match("Cold Spring Historic District", &golds(&["Valhalla Highlands Historic District"])),
            Ok(0.0)
        );
        assert_eq!(exact_match("the ANSWER", &golds(&["answer"])), Ok(1.0));
        assert_eq!(
            f1("Cold Spring Historic District", &golds(&["Valhalla Highlands Historic District"])),
            Ok(0.5)
        );
        assert_eq!(f1("same words", &golds(&["same words"])), Ok(1.0));
        assert_eq!(f1("", &golds(&["x"])), Ok(0.0));
        assert_eq!(f1("x", &[]), Err(EvalError::EmptyGold));
        assert_eq!(exact_match("x", &[]), Err(EvalError::EmptyGold));
        assert_eq!(f1("x b", &golds(&["zzz", "b c"])), Ok(0.5));
        assert_eq!(f1("a b", &golds(&["b c"])).unwrap(), 2.0 / 3.0);
        assert_eq!(f1("b b", &golds(&["b"])).unwrap(), 2.0 / 3.0);
    }

    fn traj(id: &str, last_sufficient: bool, retrieved: &[&str], gold_titles: &[&str], final_turn: usize, words: (usize, usize)) -> Trajectory {
        let verdict = if last_sufficient {
            JudgeVerdict::sufficient()
        } else {
            JudgeVerdict::insufficient(vec![])
        };
        Trajectory {
            schema_version: TRACE_SCHEMA_VERSION,
            question_id: id.into(),
            question: "q".into(),
            gold_answers: vec!["ans".into()],
            gold_supporting_titles: golds(gold_titles),
            turns: vec![TurnTrace {
                turn: 1,
                verdict,
                judge_parse_failed: false,
                query: None,
                retrieved_titles: golds(retrieved),
                evidence_block: None,
                context_words_after: words.0,
                concat_words_after: words.1,
                wall_ms: 500.0,
            }],
            final_answer: "ans".into(),
            final_turn,
            stop_reason: StopReason::Sufficient,
            error: None,
            calls: CallCounts::default(),
        }
    }

    #[test]
    fn confusion_four_cells() {
        let ts = [
            traj("tp", true, &["A"], &["A"], 1, (1, 1)),
            traj("fp", true, &["B"], &["A"], 1, (1, 1)),
            traj("fn", false, &["A"], &["A"], 1, (1, 1)),
            traj("tn", false, &[], &["A"], 1, (1, 1)),
            traj("nogold", false, &[], &[], 1, (1, 1)),
        ];
        let (m, excluded) = confusion_matrix(&ts);
        assert_eq!((m.tp, m.fp, m.fn_, m.tn), (1, 1, 1, 1));
        assert_eq!(excluded, ["nogold"]);
        let r = m.rates;
        assert!((r.tp + r.fp + r.fn_ + r.tn - 1.0).abs() < 1e-9);
        assert_eq!(r.tp, 0.25);
    }

    #[test]
    fn compression_groups_by_final_turn() {
        let ts = [
            traj("a", true, &[], &["A"], 1, (100, 450)),
            traj("b", true, &[], &["A"], 1, (100, 450)),
            traj("c", true, &[], &["A"], 2, (0, 300)),
        ];
        let rep = compression_stats(&ts);
        let sizes: Vec<(usize, usize)> = rep.groups.iter().map(|g| (g.final_turn, g.n)).collect();
        assert_eq!(sizes, [(1, 2), (2, 1)]);
        assert_eq!(rep.groups[0].ratio, Some(4.5));
        assert_eq!(rep.groups[0].inverse_ratio, Some(100.0 / 450.0));
        assert_eq!(rep.groups[1].ratio, None);
    }

    #[test]
    fn aggregate_joins_and_reports() {
        let mut a = traj("a", true, &["A"], &["A"], 1, (10, 20));
        a.final_answer = "The ans".into();
        let mut b = traj("b", true, &["A"], &["A"], 2, (10, 20));
        b.final_answer = "wrong".into();
        let c = traj("zz", true, &["A"], &["A"], 2, (10, 20));
        let gold = |id: &str| QuestionRecord {
            question_id: id.into(),
            question: "q".into(),
            answers: vec!["ans".into()],
            supporting_titles: vec![],
        };
        let rep = aggregate_run(&[a, b, c], Some(&[gold("a"), gold("b")]));
        assert_eq!(rep.trajectories, 2);
        assert_eq!(rep.unmatched, ["zz"]);
        let qa = rep.qa.unwrap();
        assert_eq!((qa.em, qa.f1, qa.n), (0.5, 0.5, 2));
        assert!(rep.confusion.is_none());
        assert!(rep.notices.iter().any(|n| n.contains("confusion")));
        assert_eq!(rep.mean_latency_s, 0.5);
        assert!(rep.render_text(true).contains("final_turn"));
    }

    #[test]
    fn sweep_rows_sorted_by_budget() {
        let r = aggregate_run(&[traj("a", true, &[], &["A"], 0, (0, 0))], None);
        let rows = budget_sweep(&[(2, r.clone()), (0, r)]);
        assert_eq!(rows.iter().map(|r| r.max_turns).collect::<Vec<_>>(), [0, 2]);
        assert!(render_sweep(&rows).starts_with("T  n  EM  F1"));
    }
}
