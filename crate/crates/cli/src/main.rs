mod commands;
mod config;
mod error;

use std::io::IsTerminal;
use std::path::PathBuf;

use anyhow::Result;
use clap::{Args, Parser, Subcommand, ValueEnum};
use gaprag_core::{QueryStyle, Timing, Variant};
use tracing_subscriber::EnvFilter;

use commands::{AnalyzeOptions, SplitOptions, SweepOptions};
use config::RunConfig;
use error::{Code, Fail};

/// Gap-guided iterative retrieval: indexing, runs, supervision and analysis.
#[derive(Parser)]
#[command(name = "gaprag", version)]
struct Cli {
    /// Log progress to stderr (repeat for debug output).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build and save the BM25 index for the configured corpus.
    Index {
        #[command(flatten)]
        common: Common,
    },
    /// Answer questions and append one trajectory per question. Resumes by
    /// skipping ids already in the output.
    Run {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        knobs: Knobs,
    },
    /// Roll every question out to the turn budget and write supervision
    /// snapshots.
    Collect {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        knobs: Knobs,
    },
    /// Label snapshots with the teacher and apply the conflict filter.
    Label {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        workers: Option<usize>,
    },
    /// Split kept snapshots into train/validation chat JSONL.
    Split {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        train_fraction: Option<f64>,
        /// Fail if any gold answer or gold title appears in the export.
        #[arg(long)]
        audit: bool,
    },
    /// Score a trace file.
    Analyze {
        /// Trace JSONL written by `run`.
        #[arg(long)]
        traces: PathBuf,
        /// Question file with gold answers and titles.
        #[arg(long)]
        gold: Option<PathBuf>,
        /// Add the per-final-turn compression table.
        #[arg(long)]
        group_by_final_turn: bool,
        /// Also write the report as JSON.
        #[arg(long)]
        json: Option<PathBuf>,
    },
    /// Run every budget in a range and print an F1-by-budget table.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        knobs: Knobs,
        #[arg(long, default_value_t = 0)]
        min_turns: usize,
        #[arg(long, default_value_t = 5)]
        max_turns_to: usize,
        /// Write `traces_t<T>.jsonl` for each budget here.
        #[arg(long)]
        traces_dir: Option<PathBuf>,
        #[arg(long)]
        json: Option<PathBuf>,
    },
    /// Cross-check fixture scripts against the fixture corpus.
    VerifyFixtures {
        /// Fixture directory; defaults to the built-in set.
        #[arg(long)]
        dir: Option<PathBuf>,
    },
    /// Write the built-in fixture set and a ready-to-use config to a directory.
    ExportFixtures { dir: PathBuf },
}

/// Config file plus path overrides.
#[derive(Args)]
struct Common {
    #[arg(short, long, default_value = "gaprag.toml")]
    config: PathBuf,
    #[arg(long)]
    corpus: Option<PathBuf>,
    #[arg(long)]
    index: Option<PathBuf>,
    #[arg(long)]
    questions: Option<PathBuf>,
    /// Output path of this command (traces, snapshots, labeled or train file).
    #[arg(short, long)]
    output: Option<PathBuf>,
    /// Input path of this command (snapshots for `label`, labeled for `split`).
    #[arg(short, long)]
    input: Option<PathBuf>,
    /// Validation output for `split`.
    #[arg(long)]
    val: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum VariantArg {
    Full,
    NoJudge,
    NoExtractor,
}

#[derive(Clone, Copy, ValueEnum)]
enum StyleArg {
    Structured,
    FreeText,
}

#[derive(Clone, Copy, ValueEnum)]
enum TimingArg {
    Wall,
    Off,
}

/// Pipeline overrides.
#[derive(Args)]
struct Knobs {
    #[arg(long)]
    max_turns: Option<usize>,
    #[arg(long)]
    top_k: Option<usize>,
    #[arg(long)]
    gap_phrases: Option<usize>,
    #[arg(long)]
    evidence_cap: Option<usize>,
    #[arg(long)]
    workers: Option<usize>,
    #[arg(long, value_enum)]
    variant: Option<VariantArg>,
    #[arg(long, value_enum)]
    query_style: Option<StyleArg>,
    #[arg(long, value_enum)]
    timing: Option<TimingArg>,
}

#[derive(Clone, Copy)]
enum Stage {
    Index,
    Run,
    Collect,
    Label,
    Split,
    Sweep,
}

fn load(common: &Common, stage: Stage) -> Result<RunConfig, Fail> {
    let mut cfg = RunConfig::load(&common.config)?;
    let p = &mut cfg.paths;
    if let Some(c) = &common.corpus {
        cfg.corpus = c.clone();
    }
    if let Some(i) = &common.index {
        cfg.index = i.clone();
    }
    if let Some(q) = &common.questions {
        p.questions = Some(q.clone());
    }
    if let Some(v) = &common.val {
        p.val = Some(v.clone());
    }
    let (input, output) = match stage {
        Stage::Index | Stage::Sweep => (None, None),
        Stage::Run => (None, Some(&mut p.traces)),
        Stage::Collect => (None, Some(&mut p.snapshots)),
        Stage::Label => (Some(&mut p.snapshots), Some(&mut p.labeled)),
        Stage::Split => (Some(&mut p.labeled), Some(&mut p.train)),
    };
    if let (Some(slot), Some(v)) = (input, &common.input) {
        *slot = Some(v.clone());
    }
    if let (Some(slot), Some(v)) = (output, &common.output) {
        *slot = Some(v.clone());
    }
    Ok(cfg)
}

fn apply(cfg: &mut RunConfig, k: &Knobs) -> Result<(), Fail> {
    let pc = &mut cfg.pipeline;
    if let Some(v) = k.max_turns {
        pc.max_turns = v;
    }
    if let Some(v) = k.top_k {
        pc.top_k = v;
    }
    if let Some(v) = k.gap_phrases {
        pc.gap_phrases = v;
    }
    if let Some(v) = k.evidence_cap {
        pc.evidence_cap = v;
    }
    if let Some(v) = k.variant {
        pc.variant = match v {
            VariantArg::Full => Variant::Full,
            VariantArg::NoJudge => Variant::NoJudge,
            VariantArg::NoExtractor => Variant::NoExtractor,
        };
    }
    if let Some(v) = k.query_style {
        pc.query_style = match v {
            StyleArg::Structured => QueryStyle::Structured,
            StyleArg::FreeText => QueryStyle::FreeText,
        };
    }
    if let Some(v) = k.timing {
        cfg.timing = match v {
            TimingArg::Wall => Timing::Wall,
            TimingArg::Off => Timing::Off,
        };
    }
    if let Some(w) = k.workers {
        cfg.workers = w;
    }
    cfg.validate()
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Index { common } => commands::index(&load(&common, Stage::Index)?),
        Command::Run { common, knobs } => {
            let mut cfg = load(&common, Stage::Run)?;
            apply(&mut cfg, &knobs)?;
            commands::run(&cfg)
        }
        Command::Collect { common, knobs } => {
            let mut cfg = load(&common, Stage::Collect)?;
            apply(&mut cfg, &knobs)?;
            commands::collect(&cfg)
        }
        Command::Label { common, workers } => {
            let mut cfg = load(&common, Stage::Label)?;
            if let Some(w) = workers {
                cfg.workers = w;
                cfg.validate()?;
            }
            commands::label(&cfg)
        }
        Command::Split {
            common,
            seed,
            train_fraction,
            audit,
        } => {
            let mut cfg = load(&common, Stage::Split)?;
            if let Some(s) = seed {
                cfg.split.seed = s;
            }
            if let Some(f) = train_fraction {
                cfg.split.train_fraction = f;
            }
            cfg.validate()?;
            commands::split(&cfg, &SplitOptions { audit })
        }
        Command::Analyze {
            traces,
            gold,
            group_by_final_turn,
            json,
        } => commands::analyze(&AnalyzeOptions {
            traces,
            gold,
            group_by_final_turn,
            json,
        }),
        Command::Sweep {
            common,
            knobs,
            min_turns,
            max_turns_to,
            traces_dir,
            json,
        } => {
            let mut cfg = load(&common, Stage::Sweep)?;
            apply(&mut cfg, &knobs)?;
            if min_turns > max_turns_to {
                return Err(Fail::new(Code::Usage, "--min-turns exceeds --max-turns-to").into());
            }
            commands::sweep(
                &cfg,
                &SweepOptions {
                    budgets: min_turns..=max_turns_to,
                    traces_dir,
                    json,
                },
            )
        }
        Command::VerifyFixtures { dir } => commands::verify(dir.as_deref()),
        Command::ExportFixtures { dir } => commands::export_fixtures(&dir),
    }
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => e.exit(),
        Err(e) => {
            let first = e.to_string().lines().next().unwrap_or_default().trim_start_matches("error: ").to_string();
            let err = anyhow::Error::new(Fail::new(Code::Usage, first));
            eprintln!("{}", error::render(Code::Usage, &err));
            std::process::exit(Code::Usage.exit_code());
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    tracing_subscriber::fmt()
        .with_writer(std::io::stderr)
        .with_ansi(std::io::stderr().is_terminal())
        .with_env_filter(EnvFilter::try_from_default_env().unwrap_or_else(|_| EnvFilter::new(level)))
        .init();
    if let Err(err) = dispatch(cli) {
        let code = error::code_of(&err);
        eprintln!("{}", error::render(code, &err));
        std::process::exit(code.exit_code());
    }
}
