use std::fs;
use std::io::{self, Write};
use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use kbvqa::harness::config::RunConfig;
use kbvqa::harness::eval::{ablate, detector_report, AblationTable, Case};
use kbvqa::harness::synth::{generate, GenSpec};
use kbvqa::harness::train::{DetectorRun, EpochLog, FileSink};
use kbvqa::harness::{cached_clues, evaluate_run, load_corpus, train, RunDir, Stage};
use kbvqa::kb::{HopMode, KnowledgeBase, Normalizer, RetrievalQuery};

#[derive(Parser)]
#[command(name = "kbvqa", version, about = "Knowledge-based VQA: retrieval, memory network, training and evaluation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic corpus.
    Gen {
        /// Generator spec (flat key = value).
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Override a spec key, e.g. `--set entities=80`.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        sets: Vec<String>,
    },
    /// Build or query a knowledge base.
    Kb {
        #[command(subcommand)]
        command: KbCommand,
    },
    /// Train the detector, the memory network, or both.
    Train {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, value_enum, default_value = "all")]
        stage: StageArg,
    },
    /// Evaluate a trained run.
    Eval {
        #[command(flatten)]
        run: RunArgs,
        /// Split to evaluate; repeatable. Defaults to `eval_splits`.
        #[arg(long)]
        split: Vec<String>,
        /// Write per-sample results as JSON lines.
        #[arg(long)]
        dump: Option<PathBuf>,
        /// Also report detector accuracy.
        #[arg(long)]
        detector: bool,
    },
    /// Train and evaluate ablation cases against one trained detector.
    Ablate {
        #[command(flatten)]
        run: RunArgs,
        /// Comma-separated cases from sub, obj, both, rel, att, full.
        #[arg(long, default_value = "sub,obj,both,rel,att,full")]
        cases: String,
    },
}

#[derive(Subcommand)]
enum KbCommand {
    /// Parse a tab-separated fact file and write the index.
    Build {
        #[arg(long)]
        facts: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        no_case_fold: bool,
    },
    /// Retrieve candidate facts for clue sets.
    Query {
        #[arg(long)]
        kb: PathBuf,
        #[arg(long = "subject")]
        subjects: Vec<String>,
        #[arg(long = "object")]
        objects: Vec<String>,
        #[arg(long = "relation")]
        relations: Vec<String>,
        #[arg(long, default_value_t = 1)]
        hops: usize,
        #[arg(long)]
        directed: bool,
    },
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    /// Override a config key, e.g. `--set seed=3`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
}

#[derive(Clone, Copy, ValueEnum)]
enum StageArg {
    Detector,
    Memnet,
    All,
}

fn split_kv(s: &str) -> Result<(&str, &str)> {
    s.split_once('=')
        .map(|(k, v)| (k.trim(), v.trim()))
        .with_context(|| format!("expected KEY=VALUE, got `{s}`"))
}

impl RunArgs {
    fn load(&self) -> Result<RunConfig> {
        let mut cfg = RunConfig::load(&self.config).with_context(|| format!("reading {}", self.config.display()))?;
        for s in &self.sets {
            let (k, v) = split_kv(s)?;
            cfg.set(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Writes to stdout; a closed pipe ends the process quietly.
fn out(text: &str) -> Result<()> {
    let mut stdout = io::stdout().lock();
    match stdout.write_all(text.as_bytes()).and_then(|_| stdout.flush()) {
        Err(e) if e.kind() == io::ErrorKind::BrokenPipe => std::process::exit(0),
        r => Ok(r?),
    }
}

macro_rules! outln {
    ($($arg:tt)*) => {
        out(&format!("{}\n", format_args!($($arg)*)))?
    };
}

fn log_epoch(log: &EpochLog) {
    eprintln!(
        "[{}] epoch {:>3}  loss {:.6}  train acc {:.4}",
        log.stage, log.epoch, log.loss, log.train_accuracy
    );
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    match cli.command {
        Command::Gen { spec, out, sets } => {
            let mut text = match &spec {
                Some(p) => fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?,
                None => String::new(),
            };
            for s in &sets {
                let (k, v) = split_kv(s)?;
                text.push_str(&format!("\n{k} = {v}"));
            }
            let spec = GenSpec::parse_str(&text)?;
            let corpus = generate(&spec)?;
            corpus.self_check()?;
            corpus.write(&out)?;
            eprintln!(
                "wrote {} facts, {} words, splits {} to {}",
                corpus.kb.len(),
                corpus.vocab.len(),
                corpus
                    .splits
                    .iter()
                    .map(|(n, s, _)| format!("{n}={}", s.len()))
                    .collect::<Vec<_>>()
                    .join(" "),
                out.display()
            );
        }
        Command::Kb { command } => match command {
            KbCommand::Build { facts, out, no_case_fold } => {
                let text = fs::read_to_string(&facts)?;
                let kb = KnowledgeBase::from_tsv(&text, Normalizer { case_fold: !no_case_fold })?;
                kb.save(&out)?;
                eprintln!(
                    "{} facts ({} duplicates dropped), {} entities, {} relations",
                    kb.len(),
                    kb.duplicates(),
                    kb.entities().len(),
                    kb.relations().len()
                );
            }
            KbCommand::Query {
                kb,
                subjects,
                objects,
                relations,
                hops,
                directed,
            } => {
                let kb = KnowledgeBase::load(&kb)?;
                let query = RetrievalQuery {
                    subjects,
                    objects,
                    relations: (!relations.is_empty()).then_some(relations),
                    hops,
                    mode: if directed { HopMode::Directed } else { HopMode::Undirected },
                };
                for c in kb.retrieve(&query)?.candidates {
                    outln!("{}", kb.oriented_triplet(c.fact));
                }
            }
        },
        Command::Train { run, stage } => {
            let cfg = run.load()?;
            let corpus = load_corpus(&cfg)?;
            let stage = match stage {
                StageArg::Detector => Stage::Detector,
                StageArg::Memnet => Stage::Memnet,
                StageArg::All => Stage::All,
            };
            fs::create_dir_all(&cfg.run_dir)?;
            let mut sink = FileSink::new(&cfg.run_dir, log_epoch);
            train(&cfg, &corpus, stage, &mut sink)?;
        }
        Command::Eval {
            run,
            split,
            dump,
            detector,
        } => {
            let mut cfg = run.load()?;
            if !split.is_empty() {
                cfg.eval_splits = split;
            }
            let corpus = load_corpus(&cfg)?;
            if detector {
                let det = DetectorRun::load(&cfg, &corpus, &RunDir { root: &cfg.run_dir }.detector())?;
                for name in &cfg.eval_splits {
                    let r = detector_report(&det, &corpus.kb, corpus.split(name)?, cfg.det_batch)?;
                    outln!("{}", serde_json::to_string(&r)?);
                }
            }
            let (summary, results) = evaluate_run(&cfg, &corpus, &cfg.eval_splits)?;
            for r in &summary.splits {
                outln!(
                    "{:<10} n={:<6} top1 {:.4}  top3 {:.4}  recall+rel {:.4}  recall-rel {:.4}  {:?}",
                    r.split, r.samples, r.top1, r.top3, r.recall_with_relation, r.recall_without_relation, r.failures
                );
            }
            outln!(
                "{:<10} top1 {:.4}  top3 {:.4}  recall+rel {:.4}  recall-rel {:.4}",
                "average", summary.top1, summary.top3, summary.recall_with_relation, summary.recall_without_relation
            );
            if let Some(path) = dump {
                let mut text = String::new();
                for r in &results {
                    text.push_str(&serde_json::to_string(r)?);
                    text.push('\n');
                }
                fs::write(path, text)?;
            }
        }
        Command::Ablate { run, cases } => {
            let cfg = run.load()?;
            let cases: Vec<Case> = cases.split(',').map(Case::parse).collect::<Result<_, _>>()?;
            if cases.is_empty() {
                bail!("no ablation cases given");
            }
            let corpus = load_corpus(&cfg)?;
            let det = DetectorRun::load(&cfg, &corpus, &RunDir { root: &cfg.run_dir }.detector())
                .context("ablation needs a trained detector; run `train --stage detector` first")?;
            let clues = |name: &str| cached_clues(&cfg, &corpus, name);
            let mut sink = log_epoch;
            let table: AblationTable = ablate(&cfg, &corpus, &det, &clues, &cases, &mut sink)?;
            out(&table.render())?;
            fs::write(cfg.run_dir.join("ablation.json"), serde_json::to_vec_pretty(&table)?)?;
        }
    }
    Ok(())
}
