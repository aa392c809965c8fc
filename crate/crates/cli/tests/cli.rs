use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

fn gaprag(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gaprag"))
        .args(args)
        .env_remove("RUST_LOG")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = gaprag(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

/// Exit status and the single error line on stderr.
fn err(args: &[&str]) -> (i32, String) {
    let out = gaprag(args);
    assert!(!out.status.success(), "{args:?} unexpectedly succeeded");
    let stderr = String::from_utf8(out.stderr).unwrap();
    let line = stderr
        .lines()
        .find(|l| l.starts_with("error code="))
        .unwrap_or_else(|| panic!("no error line in {stderr:?}"))
        .to_string();
    (out.status.code().unwrap(), line)
}

fn golden(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/fixtures/v1/golden").join(name)
}

struct Fixture {
    dir: TempDir,
}

impl Fixture {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        ok(&["export-fixtures", dir.path().to_str().unwrap()]);
        let f = Fixture { dir };
        ok(&["index", "-c", &f.config()]);
        f
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.dir.path().join(rel)
    }

    fn p(&self, rel: &str) -> String {
        self.path(rel).to_str().unwrap().to_string()
    }

    fn config(&self) -> String {
        self.p("gaprag.toml")
    }
}

#[test]
fn fixture_run_matches_golden_traces_and_report() {
    let f = Fixture::new();
    let out = ok(&["run", "-c", &f.config()]);
    assert!(out.contains("wrote 5 trajectories"), "{out}");
    assert_eq!(
        fs::read(f.path("out/traces.jsonl")).unwrap(),
        fs::read(golden("traces.jsonl")).unwrap()
    );
    // `run` writes the configured report itself.
    assert_eq!(
        fs::read(f.path("out/report.json")).unwrap(),
        fs::read(golden("report.json")).unwrap()
    );
    fs::remove_file(f.path("out/report.json")).unwrap();
    let text = ok(&[
        "analyze",
        "--traces",
        &f.p("out/traces.jsonl"),
        "--gold",
        &f.p("questions.jsonl"),
        "--group-by-final-turn",
        "--json",
        &f.p("out/report.json"),
    ]);
    assert!(text.contains("EM: 0.8000  F1: 0.9000  (n=5)"), "{text}");
    assert!(text.contains("final_turn  n  evidence_words"), "{text}");
    assert_eq!(
        fs::read(f.path("out/report.json")).unwrap(),
        fs::read(golden("report.json")).unwrap()
    );
    let report: serde_json::Value = serde_json::from_slice(&fs::read(f.path("out/report.json")).unwrap()).unwrap();
    // Four correct answers plus the half-overlap failure case.
    assert_eq!(report["qa"]["em"], 0.8);
    assert_eq!(report["qa"]["f1"], 0.9);
    let c = &report["confusion"];
    assert_eq!((c["tp"].as_u64(), c["fp"].as_u64(), c["fn"].as_u64(), c["tn"].as_u64()), (Some(4), Some(0), Some(0), Some(1)));
}

#[test]
fn run_resumes_after_interruption() {
    let f = Fixture::new();
    let golden_bytes = fs::read(golden("traces.jsonl")).unwrap();
    let text = String::from_utf8(golden_bytes.clone()).unwrap();
    let first_two: usize = text.split_inclusive('\n').take(2).map(str::len).sum();
    // Two complete records and half of the third, as a kill would leave it.
    let torn = first_two + 40;
    fs::create_dir_all(f.path("out")).unwrap();
    fs::write(f.path("out/traces.jsonl"), &golden_bytes[..torn]).unwrap();
    let out = ok(&["run", "-c", &f.config()]);
    assert!(out.contains("wrote 3 trajectories (2 already present"), "{out}");
    assert_eq!(fs::read(f.path("out/traces.jsonl")).unwrap(), golden_bytes);
    let again = ok(&["run", "-c", &f.config()]);
    assert!(again.contains("wrote 0 trajectories (5 already present"), "{again}");
}

#[test]
fn run_with_no_questions_writes_empty_output() {
    let f = Fixture::new();
    fs::write(f.path("none.jsonl"), "").unwrap();
    ok(&["run", "-c", &f.config(), "--questions", &f.p("none.jsonl"), "-o", &f.p("out/empty.jsonl")]);
    assert_eq!(fs::read(f.path("out/empty.jsonl")).unwrap(), b"");
}

#[test]
fn index_is_idempotent_and_reports_count() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = dir.path().join("c.jsonl");
    fs::write(
        &corpus,
        concat!(
            "{\"doc_id\":\"1\",\"title\":\"A\",\"text\":\"Alpha beta.\"}\n",
            "{\"doc_id\":\"2\",\"title\":\"B\",\"text\":\"Beta gamma.\"}\n",
            "{\"doc_id\":\"3\",\"title\":\"C\",\"text\":\"Gamma delta.\"}\n",
        ),
    )
    .unwrap();
    let config = dir.path().join("g.toml");
    fs::write(&config, "corpus = \"c.jsonl\"\nindex = \"idx/index.json\"\n").unwrap();
    let cfg = config.to_str().unwrap();
    let out = ok(&["index", "-c", cfg]);
    assert!(out.starts_with("indexed 3 documents"), "{out}");
    let first = fs::read(dir.path().join("idx/index.json")).unwrap();
    ok(&["index", "-c", cfg]);
    assert_eq!(fs::read(dir.path().join("idx/index.json")).unwrap(), first);

    let (code, line) = err(&["index", "-c", cfg, "--corpus", "/nonexistent/corpus.jsonl"]);
    assert_eq!(code, 1);
    assert!(line.starts_with("error code=MISSING_INPUT "), "{line}");
}

#[test]
fn supervision_stages_chain_and_are_stable() {
    let f = Fixture::new();
    let cfg = f.config();
    let (_, line) = err(&["label", "-c", &cfg]);
    assert!(line.starts_with("error code=MISSING_INPUT") && line.contains("gaprag collect"), "{line}");
    let (_, line) = err(&["split", "-c", &cfg]);
    assert!(line.contains("gaprag label"), "{line}");

    let out = ok(&["collect", "-c", &cfg]);
    assert!(out.starts_with("collected 20 snapshots from 5 questions"), "{out}");
    let snapshots = fs::read_to_string(f.path("out/snapshots.jsonl")).unwrap();
    assert_eq!(snapshots.lines().count(), 20);

    let out = ok(&["label", "-c", &cfg]);
    assert!(out.contains("kept 13 of 20"), "{out}");
    assert!(out.contains("dropped_conflict: 4") && out.contains("dropped_format: 3"), "{out}");

    ok(&["split", "-c", &cfg]);
    let train = fs::read(f.path("out/train.jsonl")).unwrap();
    let val = fs::read(f.path("out/val.jsonl")).unwrap();
    let lines = |b: &[u8]| b.iter().filter(|&&c| c == b'\n').count();
    assert_eq!((lines(&train), lines(&val)), (11, 2));
    ok(&["split", "-c", &cfg]);
    assert_eq!(fs::read(f.path("out/train.jsonl")).unwrap(), train);
    assert_eq!(fs::read(f.path("out/val.jsonl")).unwrap(), val);

    ok(&["split", "-c", &cfg, "--seed", "7", "-o", &f.p("out/t7.jsonl"), "--val", &f.p("out/v7.jsonl")]);
    assert_ne!(fs::read(f.path("out/t7.jsonl")).unwrap(), train);

    // Evidence in these records quotes gold pages, so the audit must object.
    let (code, line) = err(&["split", "-c", &cfg, "--audit"]);
    assert_eq!(code, 1);
    assert!(line.starts_with("error code=AUDIT"), "{line}");
}

#[test]
fn analyze_without_any_gold_skips_confusion_with_notice() {
    let f = Fixture::new();
    let questions = fs::read_to_string(f.path("questions.jsonl")).unwrap();
    let stripped: String = questions
        .lines()
        .map(|l| {
            let mut v: serde_json::Value = serde_json::from_str(l).unwrap();
            v["supporting_titles"] = serde_json::json!([]);
            format!("{v}\n")
        })
        .collect();
    fs::write(f.path("bare.jsonl"), stripped).unwrap();
    ok(&["run", "-c", &f.config(), "--questions", &f.p("bare.jsonl"), "-o", &f.p("out/bare.jsonl")]);
    let text = ok(&["analyze", "--traces", &f.p("out/bare.jsonl"), "--json", &f.p("out/bare_report.json")]);
    assert!(text.contains("notice: no gold file given"), "{text}");
    assert!(text.contains("confusion matrix skipped") && !text.contains("TP "), "{text}");
    let report: serde_json::Value = serde_json::from_slice(&fs::read(f.path("out/bare_report.json")).unwrap()).unwrap();
    assert!(report["confusion"].is_null());
    assert!(report["notices"].as_array().unwrap().len() >= 2);
}

#[test]
fn sweep_prints_one_row_per_budget() {
    let f = Fixture::new();
    let out = ok(&["sweep", "-c", &f.config(), "--traces-dir", &f.p("out/sweep")]);
    let rows: Vec<&str> = out.lines().skip(1).collect();
    assert_eq!(rows.len(), 6, "{out}");
    assert!(rows[0].starts_with("0  5  0.0000  0.1667"), "{out}");
    assert!(f.path("out/sweep/traces_t5.jsonl").is_file());
}

#[test]
fn flags_override_config() {
    let f = Fixture::new();
    ok(&["run", "-c", &f.config(), "--max-turns", "0", "-o", &f.p("out/t0.jsonl")]);
    let text = fs::read_to_string(f.path("out/t0.jsonl")).unwrap();
    for line in text.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        assert_eq!(v["final_turn"], 0);
        assert_eq!(v["turns"].as_array().unwrap().len(), 1);
    }
}

#[test]
fn fatal_errors_are_single_coded_lines() {
    let f = Fixture::new();
    let (code, line) = err(&["run", "--bogus"]);
    assert_eq!(code, 2);
    assert!(line.starts_with("error code=USAGE "), "{line}");

    fs::write(f.path("typo.toml"), "corpus = \"corpus.jsonl\"\nindex = \"i\"\nworkerz = 3\n").unwrap();
    let (code, line) = err(&["index", "-c", &f.p("typo.toml")]);
    assert_eq!(code, 2);
    assert!(line.starts_with("error code=CONFIG "), "{line}");

    let (code, line) = err(&["run", "-c", &f.config(), "--top-k", "0"]);
    assert_eq!(code, 2);
    assert!(line.contains("top_k"), "{line}");

    let (_, line) = err(&["run", "-c", &f.config(), "--index", &f.p("missing-index.json")]);
    assert!(line.starts_with("error code=MISSING_INPUT") && line.contains("gaprag index"), "{line}");

    // Index built for a different corpus.
    let corpus = fs::read_to_string(f.path("corpus.jsonl")).unwrap();
    let fewer: String = corpus.lines().skip(1).map(|l| format!("{l}\n")).collect();
    fs::write(f.path("fewer.jsonl"), fewer).unwrap();
    let (_, line) = err(&["run", "-c", &f.config(), "--corpus", &f.p("fewer.jsonl")]);
    assert!(line.starts_with("error code=INDEX"), "{line}");
}

#[test]
fn verify_fixtures_reports_corruption() {
    let out = ok(&["verify-fixtures"]);
    assert!(out.starts_with("fixtures ok"), "{out}");
    let f = Fixture::new();
    ok(&["verify-fixtures", "--dir", &f.p("")]);
    let corpus = fs::read_to_string(f.path("corpus.jsonl")).unwrap();
    fs::write(f.path("corpus.jsonl"), corpus.replace("Florence, Colorado", "Boulder, Colorado")).unwrap();
    let (code, line) = err(&["verify-fixtures", "--dir", &f.p("")]);
    assert_eq!(code, 1);
    assert!(line.starts_with("error code=FIXTURES") && line.contains("Michael Swango"), "{line}");
}
