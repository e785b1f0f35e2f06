//! QA metrics, the failure taxonomy, detector diagnostics and ablations.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::detector::{top_k, ClueSet};
use crate::error::{Error, Result};
use crate::harness::config::RunConfig;
use crate::harness::data::{Corpus, Split};
use crate::harness::train::{
    clue_query, compute_clues, retrieve_split, seeded, tag, train_memnet, DetectorRun, MemRun, Retrieval, Sink,
};
use crate::kb::{EntityId, KnowledgeBase};
use crate::memnet::{fill_memory, MemInput, MemoryBank, SlotSource};

/// Why a sample was answered wrongly, if it was.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    Correct,
    /// Nothing was retrieved.
    EmptyRetrieval,
    /// The answer is not among the candidates the memory was filled from.
    RetrievalMiss,
    /// The answer was available but another slot won.
    RankingError,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FailureCounts {
    pub correct: usize,
    pub empty_retrieval: usize,
    pub retrieval_miss: usize,
    pub ranking_error: usize,
}

impl FailureCounts {
    fn add(&mut self, o: Outcome) {
        match o {
            Outcome::Correct => self.correct += 1,
            Outcome::EmptyRetrieval => self.empty_retrieval += 1,
            Outcome::RetrievalMiss => self.retrieval_miss += 1,
            Outcome::RankingError => self.ranking_error += 1,
        }
    }

    pub fn total(&self) -> usize {
        self.correct + self.empty_retrieval + self.retrieval_miss + self.ranking_error
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub split: String,
    pub samples: usize,
    pub top1: f64,
    pub top3: f64,
    pub recall_with_relation: f64,
    pub recall_without_relation: f64,
    pub failures: FailureCounts,
}

impl EvalReport {
    /// Internal consistency; a violation is a bug, not a data problem.
    fn assert_consistent(&self, memory_recall: f64) {
        let unit = |x: f64| (0.0..=1.0).contains(&x);
        assert!(
            unit(self.top1) && unit(self.top3) && unit(self.recall_with_relation) && unit(self.recall_without_relation),
            "metrics out of range: {self:?}"
        );
        assert!(self.top3 >= self.top1, "top-3 below top-1: {self:?}");
        assert!(
            self.recall_without_relation >= self.recall_with_relation,
            "filtered recall exceeds unfiltered: {self:?}"
        );
        assert!(self.top1 <= memory_recall, "top-1 exceeds recall: {self:?}");
        assert_eq!(self.failures.total(), self.samples);
    }
}

/// Per-split reports and their unweighted average.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub splits: Vec<EvalReport>,
    pub top1: f64,
    pub top3: f64,
    pub recall_with_relation: f64,
    pub recall_without_relation: f64,
}

impl EvalSummary {
    pub fn new(splits: Vec<EvalReport>) -> Result<Self> {
        if splits.is_empty() {
            return Err(Error::config("no evaluation splits"));
        }
        let n = splits.len() as f64;
        let mean = |f: fn(&EvalReport) -> f64| splits.iter().map(f).sum::<f64>() / n;
        Ok(EvalSummary {
            top1: mean(|r| r.top1),
            top3: mean(|r| r.top3),
            recall_with_relation: mean(|r| r.recall_with_relation),
            recall_without_relation: mean(|r| r.recall_without_relation),
            splits,
        })
    }
}

/// Per-sample evaluation record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleResult {
    pub id: String,
    pub predicted: Option<String>,
    pub answer: String,
    pub top3: Vec<String>,
    pub outcome: Outcome,
}

/// Slot order by descending probability, ties to the lower slot.
fn ranked(probs: &[f64]) -> Vec<usize> {
    top_k(probs, probs.len())
}

/// The answer a slot stands for; KB negatives stand for nothing.
fn slot_answer(kb: &KnowledgeBase, bank: &MemoryBank, slot: usize) -> Option<EntityId> {
    (bank.sources[slot] != SlotSource::Negative).then(|| kb.answer_entity(bank.slots[slot]))
}

/// First three distinct answers in rank order. Each negative slot is a
/// separate wrong entry.
fn top3_answers(kb: &KnowledgeBase, bank: &MemoryBank, probs: &[f64]) -> Vec<Option<EntityId>> {
    let mut seen = BTreeSet::new();
    let mut out = Vec::with_capacity(3);
    for slot in ranked(probs) {
        if out.len() == 3 {
            break;
        }
        match slot_answer(kb, bank, slot) {
            Some(e) if seen.insert(e) => out.push(Some(e)),
            Some(_) => {}
            None => out.push(None),
        }
    }
    out
}

/// Fills evaluation memories: the ground truth stays only if it was
/// retrieved, and the fill stream is fixed per sample.
pub fn eval_banks(cfg: &RunConfig, kb: &KnowledgeBase, retrievals: &[Retrieval]) -> Result<Vec<MemoryBank>> {
    retrievals
        .iter()
        .enumerate()
        .map(|(i, r)| {
            let mut rng = seeded(cfg.seed, tag::EVAL_FILL, 0, i as u64);
            fill_memory(r.memory_source(cfg), Some(r.gt), false, kb, cfg.n_mem, &mut rng)
        })
        .collect()
}

/// Answer distributions over each bank's slots.
pub fn predict_banks(cfg: &RunConfig, mem: &MemRun, split: &Split, banks: &[MemoryBank]) -> Result<Vec<Vec<f64>>> {
    let mut out = Vec::with_capacity(split.len());
    let idx: Vec<usize> = (0..split.len()).collect();
    for chunk in idx.chunks(cfg.mem_batch) {
        let inputs: Vec<MemInput> = chunk
            .iter()
            .map(|&i| MemInput {
                features: &split.features[i],
                question: &split.samples[i].tokens,
                slots: &banks[i].slots,
            })
            .collect();
        out.extend(mem.model.predict(&mem.store, &mem.facts, &inputs)?);
    }
    Ok(out)
}

/// Scores given predictions. `probs[i]` ranks the slots of `banks[i]`.
pub fn score(
    kb: &KnowledgeBase,
    split: &Split,
    retrievals: &[Retrieval],
    banks: &[MemoryBank],
    probs: &[Vec<f64>],
    relation_filter: bool,
) -> Result<(EvalReport, Vec<SampleResult>)> {
    if split.is_empty() {
        return Err(Error::data(format!("split {} is empty", split.name)));
    }
    let n = split.len();
    let mut failures = FailureCounts::default();
    let (mut top1, mut top3, mut rec_with, mut rec_without, mut rec_mem) = (0, 0, 0, 0, 0);
    let mut results = Vec::with_capacity(n);
    for i in 0..n {
        let (r, bank, p) = (&retrievals[i], &banks[i], &probs[i]);
        let answer = kb.answer_entity(r.gt);
        let with = r.with_relation.answers(kb).contains(&answer);
        let without = r.without_relation.answers(kb).contains(&answer);
        let source = if relation_filter { &r.with_relation } else { &r.without_relation };
        let in_memory_source = if relation_filter { with } else { without };
        rec_with += with as usize;
        rec_without += without as usize;
        rec_mem += in_memory_source as usize;

        let best = ranked(p)[0];
        let predicted = slot_answer(kb, bank, best);
        let hit1 = predicted == Some(answer);
        let t3 = top3_answers(kb, bank, p);
        let hit3 = t3.contains(&Some(answer));
        top1 += hit1 as usize;
        top3 += hit3 as usize;
        let outcome = if hit1 {
            Outcome::Correct
        } else if source.is_empty() {
            Outcome::EmptyRetrieval
        } else if !in_memory_source {
            Outcome::RetrievalMiss
        } else {
            Outcome::RankingError
        };
        failures.add(outcome);
        let name = |e: Option<EntityId>| e.map(|e| kb.entity_name(e).to_string());
        results.push(SampleResult {
            id: split.samples[i].id.clone(),
            predicted: name(predicted),
            answer: kb.entity_name(answer).to_string(),
            top3: t3.into_iter().map(|e| name(e).unwrap_or_else(|| "-".into())).collect(),
            outcome,
        });
    }
    let frac = |k: usize| k as f64 / n as f64;
    let report = EvalReport {
        split: split.name.clone(),
        samples: n,
        top1: frac(top1),
        top3: frac(top3),
        recall_with_relation: frac(rec_with),
        recall_without_relation: frac(rec_without),
        failures,
    };
    report.assert_consistent(frac(rec_mem));
    Ok((report, results))
}

/// Full evaluation of one split.
pub fn evaluate(
    cfg: &RunConfig,
    kb: &KnowledgeBase,
    mem: &MemRun,
    split: &Split,
    retrievals: &[Retrieval],
) -> Result<(EvalReport, Vec<SampleResult>)> {
    if split.is_empty() {
        return Err(Error::data(format!("split {} is empty", split.name)));
    }
    let banks = eval_banks(cfg, kb, retrievals)?;
    let probs = predict_banks(cfg, mem, split, &banks)?;
    score(kb, split, retrievals, &banks, &probs, cfg.relation_filter)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectorReport {
    pub split: String,
    pub subject_top1: f64,
    pub relation_top1: f64,
    pub relation_top3: f64,
    pub object_top1: f64,
}

pub fn detector_report(det: &DetectorRun, kb: &KnowledgeBase, split: &Split, batch: usize) -> Result<DetectorReport> {
    if split.is_empty() {
        return Err(Error::data(format!("split {} is empty", split.name)));
    }
    let preds = det.predict(split, batch)?;
    let (mut s1, mut r1, mut r3, mut o1) = (0, 0, 0, 0);
    for (p, sample) in preds.iter().zip(&split.samples) {
        let l = sample.phrase_labels(kb)?;
        s1 += (top_k(&p.subject, 1)[0] == l.subject) as usize;
        o1 += (top_k(&p.object, 1)[0] == l.object) as usize;
        let rel = top_k(&p.relation, 3);
        r1 += (rel[0] == l.relation) as usize;
        r3 += rel.contains(&l.relation) as usize;
    }
    let n = split.len() as f64;
    Ok(DetectorReport {
        split: split.name.clone(),
        subject_top1: s1 as f64 / n,
        relation_top1: r1 as f64 / n,
        relation_top3: r3 as f64 / n,
        object_top1: o1 as f64 / n,
    })
}

/// Fraction of samples whose answer is reachable from the union of the
/// top-`k` subject and object clues, without relation filtering.
pub fn union_recall(cfg: &RunConfig, kb: &KnowledgeBase, split: &Split, clues: &[ClueSet], k: usize) -> Result<f64> {
    let mut c = cfg.clone();
    c.topk_sub = k;
    c.topk_obj = k;
    c.use_subject_clues = true;
    c.use_object_clues = true;
    let mut hits = 0;
    for (s, cl) in split.samples.iter().zip(clues) {
        let gt = s.gt_fact(kb)?;
        let cands = kb.retrieve(&clue_query(&c, cl, false))?;
        hits += cands.answers(kb).contains(&kb.answer_entity(gt)) as usize;
    }
    Ok(hits as f64 / split.len().max(1) as f64)
}

/// The ablation grid: clue sources, relation filtering and two-way attention.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Case {
    Sub,
    Obj,
    Both,
    Rel,
    Att,
    Full,
}

impl Case {
    pub const ALL: [Case; 6] = [Case::Sub, Case::Obj, Case::Both, Case::Rel, Case::Att, Case::Full];

    pub fn parse(s: &str) -> Result<Self> {
        Ok(match s.trim() {
            "sub" => Case::Sub,
            "obj" => Case::Obj,
            "both" => Case::Both,
            "rel" => Case::Rel,
            "att" => Case::Att,
            "full" => Case::Full,
            other => return Err(Error::config(format!("unknown ablation case `{other}`"))),
        })
    }

    pub fn name(self) -> &'static str {
        match self {
            Case::Sub => "sub",
            Case::Obj => "obj",
            Case::Both => "both",
            Case::Rel => "rel",
            Case::Att => "att",
            Case::Full => "full",
        }
    }

    /// `(subject clues, object clues, relation filter, two-way attention)`.
    pub fn flags(self) -> (bool, bool, bool, bool) {
        match self {
            Case::Sub => (true, false, false, false),
            Case::Obj => (false, true, false, false),
            Case::Both => (true, true, false, false),
            Case::Rel => (true, true, true, false),
            Case::Att => (true, true, false, true),
            Case::Full => (true, true, true, true),
        }
    }

    pub fn apply(self, base: &RunConfig) -> Result<RunConfig> {
        let (s, o, r, a) = self.flags();
        let mut cfg = base.clone();
        cfg.use_subject_clues = s;
        cfg.use_object_clues = o;
        cfg.relation_filter = r;
        cfg.two_way_attention = a;
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub case: Case,
    pub subject_clues: bool,
    pub object_clues: bool,
    pub relation_filter: bool,
    pub two_way_attention: bool,
    pub summary: EvalSummary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn row(&self, case: Case) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.case == case)
    }

    /// Fixed-width text table, one row per case.
    pub fn render(&self) -> String {
        let mark = |b: bool| if b { "x" } else { "" };
        let mut s = format!(
            "{:<6}{:>5}{:>5}{:>5}{:>5}{:>10}{:>10}{:>8}{:>8}\n",
            "case", "sub", "obj", "rel", "att", "rec+rel", "rec-rel", "top1", "top3"
        );
        for r in &self.rows {
            s.push_str(&format!(
                "{:<6}{:>5}{:>5}{:>5}{:>5}{:>10.4}{:>10.4}{:>8.4}{:>8.4}\n",
                r.case.name(),
                mark(r.subject_clues),
                mark(r.object_clues),
                mark(r.relation_filter),
                mark(r.two_way_attention),
                r.summary.recall_with_relation,
                r.summary.recall_without_relation,
                r.summary.top1,
                r.summary.top3
            ));
        }
        s
    }
}

/// Trains and evaluates one memory network per case against a shared
/// trained detector and its clue sets (`clues[split]`, ranked at least to
/// the configured top-K).
pub fn ablate(
    base: &RunConfig,
    corpus: &Corpus,
    det: &DetectorRun,
    clues: &dyn Fn(&str) -> Result<Vec<ClueSet>>,
    cases: &[Case],
    sink: &mut dyn Sink,
) -> Result<AblationTable> {
    let train = corpus.split("train")?;
    let train_clues = clues("train")?;
    let eval_clues: Vec<(String, Vec<ClueSet>)> = base
        .eval_splits
        .iter()
        .map(|s| Ok((s.clone(), clues(s)?)))
        .collect::<Result<_>>()?;
    let mut rows = Vec::with_capacity(cases.len());
    for &case in cases {
        let cfg = case.apply(base)?;
        let retr = retrieve_split(&cfg, &corpus.kb, train, &train_clues)?;
        let mem = train_memnet(&cfg, corpus, train, &retr, Some(det), None, sink)?;
        let mut reports = Vec::new();
        for (name, cl) in &eval_clues {
            let split = corpus.split(name)?;
            let r = retrieve_split(&cfg, &corpus.kb, split, cl)?;
            reports.push(evaluate(&cfg, &corpus.kb, &mem, split, &r)?.0);
        }
        let (s, o, r, a) = case.flags();
        rows.push(AblationRow {
            case,
            subject_clues: s,
            object_clues: o,
            relation_filter: r,
            two_way_attention: a,
            summary: EvalSummary::new(reports)?,
        });
    }
    Ok(AblationTable { rows })
}

/// Clue sets for a split straight from the detector at the configured K.
pub fn clues_from_detector<'a>(
    cfg: &'a RunConfig,
    corpus: &'a Corpus,
    det: &'a DetectorRun,
) -> impl Fn(&str) -> Result<Vec<ClueSet>> + 'a {
    move |name| {
        compute_clues(
            det,
            &corpus.kb,
            corpus.split(name)?,
            cfg.topk_sub,
            cfg.topk_obj,
            cfg.topk_rel,
            cfg.det_batch,
        )
    }
}
