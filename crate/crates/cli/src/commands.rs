use std::collections::HashSet;
use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use gaprag_core::eval::{aggregate_run, budget_sweep, render_sweep, RunReport};
use gaprag_core::fixtures::{verify_fixtures, FixtureSet, FIXTURE_VERSION};
use gaprag_core::jsonl::{read_jsonl, to_jsonl_line, write_jsonl, JsonlError};
use gaprag_core::supervision::{
    audit_sft, collect_snapshots, export_sft, filter_supervision, label_snapshots, split_dataset, supervision_stats,
};
use gaprag_core::{
    ingest_corpus, Bm25Index, ChatBackend, Corpus, FilterStatus, Pipeline, QuestionRecord, RunMode, SupervisionSnapshot,
    Trajectory, Variant,
};
use tracing::{info, warn};

use crate::config::{Role, RunConfig};
use crate::error::{Code, Fail};

fn fail(code: Code, msg: impl Into<String>) -> anyhow::Error {
    Fail::new(code, msg).into()
}

fn require(path: Option<&PathBuf>, what: &str) -> Result<PathBuf> {
    path.cloned()
        .ok_or_else(|| fail(Code::Config, format!("no {what} path: set paths.{what} or pass the flag")))
}

/// Reads a stage input, naming the command that produces it when absent.
fn read_stage<T: serde::de::DeserializeOwned>(path: &Path, producer: &str) -> Result<Vec<T>> {
    if !path.is_file() {
        return Err(fail(
            Code::MissingInput,
            format!("{} not found; run `gaprag {producer}` first", path.display()),
        ));
    }
    read_jsonl(path).map_err(jsonl_fail)
}

fn jsonl_fail(e: JsonlError) -> anyhow::Error {
    match e {
        JsonlError::Io { .. } => fail(Code::Io, e.to_string()),
        JsonlError::Record { .. } => fail(Code::Input, e.to_string()),
    }
}

fn read_questions(path: &Path) -> Result<Vec<QuestionRecord>> {
    if !path.is_file() {
        return Err(fail(Code::MissingInput, format!("questions file {} not found", path.display())));
    }
    read_jsonl(path).map_err(jsonl_fail)
}

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| fail(Code::Io, format!("{}: {e}", dir.display())))?;
    }
    Ok(())
}

fn load_corpus(cfg: &RunConfig) -> Result<Corpus> {
    if !cfg.corpus.is_file() {
        return Err(fail(Code::MissingInput, format!("corpus {} not found", cfg.corpus.display())));
    }
    let (corpus, report) = ingest_corpus(&cfg.corpus).map_err(|e| fail(Code::Io, e.to_string()))?;
    for issue in report.errors.iter().chain(&report.duplicates) {
        warn!(line = issue.line, message = %issue.message, "skipped corpus record");
    }
    Ok(corpus)
}

pub fn index(cfg: &RunConfig) -> Result<()> {
    let corpus = load_corpus(cfg)?;
    let index = Bm25Index::build(&corpus, cfg.bm25).map_err(|e| fail(Code::Index, e.to_string()))?;
    ensure_parent(&cfg.index)?;
    index.save(&cfg.index).map_err(|e| fail(Code::Io, e.to_string()))?;
    println!(
        "indexed {} documents (mean length {:.1} tokens) -> {}",
        index.doc_count(),
        index.avg_doc_length(),
        cfg.index.display()
    );
    Ok(())
}

fn load_index(cfg: &RunConfig, corpus: &Corpus) -> Result<Bm25Index> {
    if !cfg.index.is_file() {
        return Err(fail(
            Code::MissingInput,
            format!("index {} not found; run `gaprag index` first", cfg.index.display()),
        ));
    }
    let index = Bm25Index::load(&cfg.index).map_err(|e| fail(Code::Index, e.to_string()))?;
    let same_docs = index.doc_count() == corpus.len()
        && corpus.documents().iter().enumerate().all(|(i, d)| index.doc_id(i) == d.doc_id);
    if !same_docs || index.params() != cfg.bm25 {
        return Err(fail(
            Code::Index,
            format!("index {} does not match the corpus or bm25 settings; rerun `gaprag index`", cfg.index.display()),
        ));
    }
    Ok(index)
}

struct Roles {
    judge: Box<dyn ChatBackend>,
    extractor: Box<dyn ChatBackend>,
    reasoner: Box<dyn ChatBackend>,
}

fn roles(cfg: &RunConfig) -> Result<Roles> {
    let variant = cfg.pipeline.variant;
    let answering = cfg.pipeline.mode == RunMode::Inference;
    Ok(Roles {
        judge: cfg.backend(Role::Judge, variant != Variant::NoJudge)?,
        extractor: cfg.backend(Role::Extractor, variant != Variant::NoExtractor)?,
        reasoner: cfg.backend(Role::Reasoner, answering)?,
    })
}

fn with_pipeline<R>(cfg: &RunConfig, f: impl FnOnce(&Pipeline<'_>) -> Result<R>) -> Result<R> {
    let corpus = load_corpus(cfg)?;
    let index = load_index(cfg, &corpus)?;
    let r = roles(cfg)?;
    let pipeline = Pipeline {
        corpus: &corpus,
        index: &index,
        judge: r.judge.as_ref(),
        extractor: r.extractor.as_ref(),
        reasoner: r.reasoner.as_ref(),
        config: cfg.pipeline,
        timing: cfg.timing,
    };
    f(&pipeline)
}

/// Ids already in a trace file. A torn final line (from an interrupted run)
/// is cut off; damage anywhere else is an error.
fn completed_ids(path: &Path) -> Result<HashSet<String>> {
    let mut ids = HashSet::new();
    if !path.exists() {
        return Ok(ids);
    }
    let text = fs::read_to_string(path).map_err(|e| fail(Code::Io, format!("{}: {e}", path.display())))?;
    let mut good_len = 0usize;
    let mut offset = 0usize;
    let lines: Vec<&str> = text.split_inclusive('\n').collect();
    for (i, line) in lines.iter().enumerate() {
        offset += line.len();
        if line.trim().is_empty() {
            good_len = offset;
            continue;
        }
        let complete = line.ends_with('\n');
        match serde_json::from_str::<Trajectory>(line) {
            Ok(t) if complete => {
                ids.insert(t.question_id);
                good_len = offset;
            }
            _ if i + 1 == lines.len() => {
                warn!(path = %path.display(), "dropping incomplete final trace line");
            }
            Err(e) => return Err(fail(Code::Input, format!("{} line {}: {e}", path.display(), i + 1))),
            Ok(_) => unreachable!("only the final line can lack a newline"),
        }
    }
    if good_len < text.len() {
        let f = OpenOptions::new()
            .write(true)
            .open(path)
            .map_err(|e| fail(Code::Io, format!("{}: {e}", path.display())))?;
        f.set_len(good_len as u64).map_err(|e| fail(Code::Io, e.to_string()))?;
    }
    Ok(ids)
}

pub fn run(cfg: &RunConfig) -> Result<()> {
    let questions = read_questions(&require(cfg.paths.questions.as_ref(), "questions")?)?;
    let output = require(cfg.paths.traces.as_ref(), "traces")?;
    ensure_parent(&output)?;
    let done = completed_ids(&output)?;
    let todo: Vec<QuestionRecord> = questions.iter().filter(|q| !done.contains(&q.question_id)).cloned().collect();
    let mut cfg = cfg.clone();
    cfg.pipeline.mode = RunMode::Inference;
    let file = OpenOptions::new()
        .create(true)
        .append(true)
        .open(&output)
        .map_err(|e| fail(Code::Io, format!("{}: {e}", output.display())))?;
    let mut out = BufWriter::new(file);
    let mut written = 0usize;
    let mut failed = 0usize;
    let mut io_err = None;
    with_pipeline(&cfg, |pipeline| {
        pipeline.run_many(&todo, cfg.workers, |traj| {
            if let Some(e) = &traj.error {
                warn!(question_id = %traj.question_id, error = %e, "question failed");
                failed += 1;
            }
            if io_err.is_none() {
                let res = out.write_all(to_jsonl_line(&traj).as_bytes()).and_then(|_| out.flush());
                match res {
                    Ok(()) => written += 1,
                    Err(e) => io_err = Some(e),
                }
            }
        });
        Ok(())
    })?;
    if let Some(e) = io_err {
        return Err(fail(Code::Io, format!("{}: {e}", output.display())));
    }
    println!(
        "wrote {written} trajectories ({} already present, {failed} failed) -> {}",
        done.len(),
        output.display()
    );
    if let Some(path) = &cfg.paths.report {
        let trajectories: Vec<Trajectory> = read_stage(&output, "run")?;
        write_report(path, &aggregate_run(&trajectories, Some(questions.as_slice())))?;
        println!("report -> {}", path.display());
    }
    if failed > 0 && failed == todo.len() {
        return Err(fail(Code::Backend, format!("all {failed} questions failed; see the error field of each trace")));
    }
    Ok(())
}

pub fn collect(cfg: &RunConfig) -> Result<()> {
    let questions = read_questions(&require(cfg.paths.questions.as_ref(), "questions")?)?;
    let output = require(cfg.paths.snapshots.as_ref(), "snapshots")?;
    let mut cfg = cfg.clone();
    cfg.pipeline.mode = RunMode::TraceCollection;
    let collection = with_pipeline(&cfg, |pipeline| {
        collect_snapshots(&questions, pipeline, cfg.workers).map_err(|e| fail(Code::Input, e.to_string()))
    })?;
    for (id, e) in &collection.failures {
        warn!(question_id = %id, error = %e, "rollout stopped early");
    }
    ensure_parent(&output)?;
    let n = write_jsonl(&output, &collection.snapshots).map_err(jsonl_fail)?;
    println!(
        "collected {n} snapshots from {} questions ({} partial) -> {}",
        questions.len(),
        collection.failures.len(),
        output.display()
    );
    Ok(())
}

pub fn label(cfg: &RunConfig) -> Result<()> {
    let input = require(cfg.paths.snapshots.as_ref(), "snapshots")?;
    let output = require(cfg.paths.labeled.as_ref(), "labeled")?;
    let mut snapshots: Vec<SupervisionSnapshot> = read_stage(&input, "collect")?;
    let teacher = cfg.backend(Role::Teacher, true)?;
    let errors = label_snapshots(&mut snapshots, teacher.as_ref(), cfg.workers);
    for (i, e) in &errors {
        warn!(question_id = %snapshots[*i].question_id, turn = snapshots[*i].turn, error = %e, "teacher call failed");
    }
    if !errors.is_empty() && errors.len() == snapshots.len() {
        return Err(fail(Code::Backend, format!("teacher failed on all {} snapshots: {}", errors.len(), errors[0].1)));
    }
    let outcome = filter_supervision(snapshots);
    ensure_parent(&output)?;
    write_jsonl(&output, outcome.kept.iter().chain(&outcome.dropped)).map_err(jsonl_fail)?;
    let stats = supervision_stats(outcome.kept.iter().chain(&outcome.dropped));
    print!("{}", stats.render_text());
    println!("kept {} of {} -> {}", outcome.kept.len(), stats.total, output.display());
    Ok(())
}

pub struct SplitOptions {
    pub audit: bool,
}

pub fn split(cfg: &RunConfig, opts: &SplitOptions) -> Result<()> {
    let input = require(cfg.paths.labeled.as_ref(), "labeled")?;
    let train_path = require(cfg.paths.train.as_ref(), "train")?;
    let val_path = require(cfg.paths.val.as_ref(), "val")?;
    let labeled: Vec<SupervisionSnapshot> = read_stage(&input, "label")?;
    let kept: Vec<SupervisionSnapshot> =
        labeled.into_iter().filter(|s| s.filter_status == FilterStatus::Kept).collect();
    let (train, val) = split_dataset(&kept, cfg.split.train_fraction, cfg.split.seed)
        .map_err(|e| fail(Code::Input, e.to_string()))?;
    let mut texts = Vec::new();
    for (path, part) in [(&train_path, &train), (&val_path, &val)] {
        ensure_parent(path)?;
        let mut buf = Vec::new();
        export_sft(part, &mut buf).map_err(|e| fail(Code::Io, e.to_string()))?;
        fs::write(path, &buf).map_err(|e| fail(Code::Io, format!("{}: {e}", path.display())))?;
        texts.push(String::from_utf8(buf).context("exported SFT is UTF-8")?);
    }
    println!(
        "split {} kept snapshots (seed {}, fraction {}) -> train {} ({}), val {} ({})",
        kept.len(),
        cfg.split.seed,
        cfg.split.train_fraction,
        train.len(),
        train_path.display(),
        val.len(),
        val_path.display()
    );
    if opts.audit {
        let questions = read_questions(&require(cfg.paths.questions.as_ref(), "questions")?)?;
        let hits: usize = texts.iter().map(|t| audit_sft(t, &questions).len()).sum();
        if hits > 0 {
            return Err(fail(Code::Audit, format!("{hits} gold answer/title occurrences in exported records")));
        }
        println!("audit: no gold answers or titles found");
    }
    Ok(())
}

pub struct AnalyzeOptions {
    pub traces: PathBuf,
    pub gold: Option<PathBuf>,
    pub group_by_final_turn: bool,
    pub json: Option<PathBuf>,
}

pub fn analyze(opts: &AnalyzeOptions) -> Result<()> {
    let trajectories: Vec<Trajectory> = read_stage(&opts.traces, "run")?;
    let golds = opts.gold.as_deref().map(read_questions).transpose()?;
    let mut report = aggregate_run(&trajectories, golds.as_deref());
    if golds.is_none() {
        report
            .notices
            .insert(0, "no gold file given; using gold fields embedded in the traces".into());
    }
    print!("{}", report.render_text(opts.group_by_final_turn));
    if let Some(path) = &opts.json {
        write_report(path, &report)?;
    }
    Ok(())
}

fn write_report(path: &Path, report: &RunReport) -> Result<()> {
    ensure_parent(path)?;
    let text = serde_json::to_string_pretty(report).context("report serializes")?;
    fs::write(path, text + "\n").map_err(|e| fail(Code::Io, format!("{}: {e}", path.display())))?;
    Ok(())
}

pub struct SweepOptions {
    pub budgets: std::ops::RangeInclusive<usize>,
    pub traces_dir: Option<PathBuf>,
    pub json: Option<PathBuf>,
}

pub fn sweep(cfg: &RunConfig, opts: &SweepOptions) -> Result<()> {
    let questions = read_questions(&require(cfg.paths.questions.as_ref(), "questions")?)?;
    let mut cfg = cfg.clone();
    cfg.pipeline.mode = RunMode::Inference;
    let runs = with_pipeline(&cfg, |base| {
        let mut runs = Vec::new();
        for t in opts.budgets.clone() {
            let mut pipeline = *base;
            pipeline.config.max_turns = t;
            let mut trajs = Vec::with_capacity(questions.len());
            pipeline.run_many(&questions, cfg.workers, |traj| trajs.push(traj));
            if let Some(dir) = &opts.traces_dir {
                fs::create_dir_all(dir).map_err(|e| fail(Code::Io, format!("{}: {e}", dir.display())))?;
                write_jsonl(dir.join(format!("traces_t{t}.jsonl")), &trajs).map_err(jsonl_fail)?;
            }
            info!(max_turns = t, "sweep budget done");
            runs.push((t, aggregate_run(&trajs, Some(&questions))));
        }
        Ok(runs)
    })?;
    let rows = budget_sweep(&runs);
    print!("{}", render_sweep(&rows));
    if let Some(path) = &opts.json {
        ensure_parent(path)?;
        let text = serde_json::to_string_pretty(&rows).context("sweep serializes")?;
        fs::write(path, text + "\n").map_err(|e| fail(Code::Io, format!("{}: {e}", path.display())))?;
    }
    Ok(())
}

pub fn verify(dir: Option<&Path>) -> Result<()> {
    let set = match dir {
        Some(d) => FixtureSet::load(d).map_err(|e| fail(Code::Fixtures, e.to_string()))?,
        None => FixtureSet::embedded(),
    };
    verify_fixtures(&set).map_err(|problems| fail(Code::Fixtures, problems.join("; ")))?;
    println!(
        "fixtures ok: {} documents, {} questions",
        set.documents.len(),
        set.questions.len()
    );
    Ok(())
}

pub const FIXTURE_CONFIG: &str = r#"corpus = "corpus.jsonl"
index = "out/index.json"
timing = "off"
workers = 2

[pipeline]
max_turns = 4
top_k = 6
gap_phrases = 1
evidence_cap = 6

[split]
seed = 42
train_fraction = 0.9

[backends.judge]
kind = "scripted"
script = "judge.jsonl"

[backends.teacher]
kind = "scripted"
script = "teacher.jsonl"

[backends.extractor]
kind = "scripted"
script = "extractor.jsonl"

[backends.reasoner]
kind = "scripted"
script = "reasoner.jsonl"

[paths]
questions = "questions.jsonl"
traces = "out/traces.jsonl"
snapshots = "out/snapshots.jsonl"
labeled = "out/labeled.jsonl"
train = "out/train.jsonl"
val = "out/val.jsonl"
report = "out/report.json"
"#;

pub fn export_fixtures(dir: &Path) -> Result<()> {
    FixtureSet::write_embedded(dir).map_err(|e| fail(Code::Io, format!("{}: {e}", dir.display())))?;
    let config = dir.join("gaprag.toml");
    let mut f = File::create(&config).map_err(|e| fail(Code::Io, format!("{}: {e}", config.display())))?;
    f.write_all(FIXTURE_CONFIG.as_bytes())
        .map_err(|e| fail(Code::Io, e.to_string()))?;
    println!("wrote fixture set {FIXTURE_VERSION} and {}", config.display());
    Ok(())
}
