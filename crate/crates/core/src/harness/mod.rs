//! Data, synthetic corpora, two-stage training, evaluation and ablations,
//! plus the on-disk run layout used by the command line.
//!
//! A run directory holds `config.txt`, `detector.ckpt`, `clues.{split}.json`
//! (clue sets from the frozen detector), `memnet.ckpt`, `metrics.jsonl` and
//! `report.json`.

pub mod config;
pub mod data;
pub mod eval;
pub mod synth;
pub mod train;

use std::fs;
use std::path::{Path, PathBuf};

use crate::detector::ClueSet;
use crate::error::{Error, Result};
use config::RunConfig;
use data::Corpus;
use eval::{evaluate, EvalSummary, SampleResult};
use train::{compute_clues, load_clues, retrieve_split, save_clues, train_detector, train_memnet, DetectorRun, MemRun, Sink};

pub use config::RunConfig as Config;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Detector,
    Memnet,
    All,
}

/// File names inside a run directory.
pub struct RunDir<'a> {
    pub root: &'a Path,
}

impl RunDir<'_> {
    pub fn detector(&self) -> PathBuf {
        self.root.join("detector.ckpt")
    }

    pub fn memnet(&self) -> PathBuf {
        self.root.join("memnet.ckpt")
    }

    pub fn clues(&self, split: &str) -> PathBuf {
        self.root.join(format!("clues.{split}.json"))
    }

    pub fn report(&self) -> PathBuf {
        self.root.join("report.json")
    }
}

/// Splits a run touches: `train` plus every evaluation split.
pub fn run_splits(cfg: &RunConfig) -> Vec<&str> {
    let mut v = vec!["train"];
    v.extend(cfg.eval_splits.iter().map(String::as_str));
    v
}

pub fn load_corpus(cfg: &RunConfig) -> Result<Corpus> {
    Corpus::load(&cfg.data_dir, &run_splits(cfg), cfg.max_question_len)
}

/// Runs one or both training stages, writing checkpoints and cached clue
/// sets into `cfg.run_dir`.
pub fn train(cfg: &RunConfig, corpus: &Corpus, stage: Stage, sink: &mut dyn Sink) -> Result<()> {
    let dir = RunDir { root: &cfg.run_dir };
    fs::create_dir_all(dir.root)?;
    cfg.save(dir.root.join("config.txt"))?;
    let train_split = corpus.split("train")?;
    let det = match stage {
        Stage::Detector | Stage::All => {
            let det = train_detector(cfg, corpus, train_split, Some(&dir.detector()), sink)?;
            det.save(&dir.detector())?;
            for name in run_splits(cfg) {
                let clues = compute_clues(
                    &det,
                    &corpus.kb,
                    corpus.split(name)?,
                    cfg.topk_sub,
                    cfg.topk_obj,
                    cfg.topk_rel,
                    cfg.det_batch,
                )?;
                save_clues(&dir.clues(name), &clues)?;
            }
            det
        }
        Stage::Memnet => DetectorRun::load(cfg, corpus, &dir.detector())?,
    };
    if stage == Stage::Detector {
        return Ok(());
    }
    let clues = cached_clues(cfg, corpus, "train")?;
    let retr = retrieve_split(cfg, &corpus.kb, train_split, &clues)?;
    let mem = train_memnet(cfg, corpus, train_split, &retr, Some(&det), Some(&dir.memnet()), sink)?;
    mem.save(&dir.memnet())
}

/// Clue sets cached by the detector stage; they must reach the configured K.
pub fn cached_clues(cfg: &RunConfig, corpus: &Corpus, split: &str) -> Result<Vec<ClueSet>> {
    let dir = RunDir { root: &cfg.run_dir };
    let path = dir.clues(split);
    let clues = if path.exists() {
        load_clues(&path)?
    } else {
        let det = DetectorRun::load(cfg, corpus, &dir.detector())?;
        let clues = compute_clues(
            &det,
            &corpus.kb,
            corpus.split(split)?,
            cfg.topk_sub,
            cfg.topk_obj,
            cfg.topk_rel,
            cfg.det_batch,
        )?;
        save_clues(&path, &clues)?;
        clues
    };
    let n_ent = corpus.kb.entities().len();
    let n_rel = corpus.kb.relations().len();
    let short = clues.iter().any(|c| {
        c.subjects.len() < cfg.topk_sub.min(n_ent)
            || c.objects.len() < cfg.topk_obj.min(n_ent)
            || c.relations.len() < cfg.topk_rel.min(n_rel)
    });
    if short {
        return Err(Error::config(format!(
            "cached clues for {split} are shorter than the configured top-K; retrain the detector stage"
        )));
    }
    Ok(clues)
}

/// Evaluates the trained run on `splits`, writing `report.json`.
pub fn evaluate_run(cfg: &RunConfig, corpus: &Corpus, splits: &[String]) -> Result<(EvalSummary, Vec<SampleResult>)> {
    let dir = RunDir { root: &cfg.run_dir };
    let mem = MemRun::load(cfg, corpus, &dir.memnet())?;
    let mut reports = Vec::new();
    let mut dump = Vec::new();
    for name in splits {
        let split = corpus.split(name)?;
        let clues = cached_clues(cfg, corpus, name)?;
        let retr = retrieve_split(cfg, &corpus.kb, split, &clues)?;
        let (report, results) = evaluate(cfg, &corpus.kb, &mem, split, &retr)?;
        reports.push(report);
        dump.extend(results);
    }
    let summary = EvalSummary::new(reports)?;
    fs::write(dir.report(), serde_json::to_vec_pretty(&summary)?)?;
    Ok((summary, dump))
}
