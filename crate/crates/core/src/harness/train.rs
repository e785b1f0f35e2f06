//! Two-stage training: the relation phrase detector, then (with the
//! detector frozen) the memory network over precomputed clue sets.

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use numcore::{adam_step, checkpoint, AdamConfig, Graph, ParameterStore};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::detector::{top_k, top_k_clues, ClueSet, Detector, DetectorConfig, DetectorInput, LossWeights, PhraseLabels};
use crate::error::{Error, Result};
use crate::harness::config::RunConfig;
use crate::harness::data::{Corpus, Split};
use crate::kb::{CandidateFactSet, KnowledgeBase, OrientedFact, RetrievalQuery};
use crate::memnet::{fill_memory, FactTokens, MemInput, MemNet, MemNetConfig, Mode};

/// Stream tags for [`seeded`]; each consumer of randomness gets its own.
pub(crate) mod tag {
    pub const DET_INIT: u64 = 1;
    pub const DET_SHUFFLE: u64 = 2;
    pub const MEM_INIT: u64 = 3;
    pub const MEM_SHUFFLE: u64 = 4;
    pub const MEM_FILL: u64 = 5;
    pub const EVAL_FILL: u64 = 6;
}

/// Independent stream `(tag, a, b)` of the run seed.
pub(crate) fn seeded(seed: u64, tag: u64, a: u64, b: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((tag << 56) ^ (a << 32) ^ b);
    rng
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub stage: String,
    pub epoch: usize,
    pub loss: f64,
    /// Top-1 on the training batches as seen during the epoch.
    pub train_accuracy: f64,
}

/// Where per-epoch logs go.
pub trait Sink {
    fn epoch(&mut self, log: &EpochLog);
}

impl<F: FnMut(&EpochLog)> Sink for F {
    fn epoch(&mut self, log: &EpochLog) {
        self(log)
    }
}

/// Discards logs.
pub fn quiet() -> impl Sink {
    |_: &EpochLog| {}
}

/// Appends logs to `run_dir/metrics.jsonl` and forwards them to `inner`.
pub struct FileSink<S> {
    path: PathBuf,
    inner: S,
}

impl<S: Sink> FileSink<S> {
    pub fn new(run_dir: &Path, inner: S) -> Self {
        FileSink {
            path: run_dir.join("metrics.jsonl"),
            inner,
        }
    }
}

impl<S: Sink> Sink for FileSink<S> {
    fn epoch(&mut self, log: &EpochLog) {
        if let Ok(mut f) = OpenOptions::new().create(true).append(true).open(&self.path) {
            if let Ok(line) = serde_json::to_string(log) {
                let _ = writeln!(f, "{line}");
            }
        }
        self.inner.epoch(log);
    }
}

/// Consecutive batches of a shuffled order; a trailing single sample joins
/// the previous batch so batch statistics are never taken over one sample.
fn batches(order: &[usize], size: usize) -> Vec<&[usize]> {
    let mut out: Vec<&[usize]> = order.chunks(size).collect();
    if out.len() > 1 && out.last().is_some_and(|b| b.len() == 1) {
        out.pop();
        let n = out.len();
        let start = (n - 1) * size;
        out[n - 1] = &order[start..];
    }
    out
}

fn adam(cfg: &RunConfig, lr: f64) -> AdamConfig {
    AdamConfig {
        decoupled: cfg.decoupled_weight_decay,
        ..AdamConfig::new(lr, cfg.weight_decay)
    }
}

fn argmax(p: &[f64]) -> usize {
    top_k(p, 1)[0]
}

/// Fresh `model` built into a new store must match `loaded` parameter for
/// parameter, so ids assigned at construction index the loaded values.
fn check_layout(fresh: &ParameterStore, loaded: &ParameterStore, what: &str) -> Result<()> {
    let same = fresh.len() == loaded.len()
        && fresh
            .iter()
            .zip(loaded.iter())
            .all(|(a, b)| a.name == b.name && a.value.shape() == b.value.shape());
    if same {
        Ok(())
    } else {
        Err(Error::data(format!("{what} checkpoint does not match the configured model")))
    }
}

pub struct DetectorRun {
    pub store: ParameterStore,
    pub model: Detector,
}

pub fn detector_config(cfg: &RunConfig, corpus: &Corpus) -> DetectorConfig {
    DetectorConfig {
        word_dim: cfg.word_dim,
        hidden: cfg.det_hidden,
        attention_hidden: cfg.det_attention_hidden,
        feat_dim: cfg.feat_dim,
        words: corpus.vocab.len(),
        entities: corpus.kb.entities().len(),
        relations: corpus.kb.relations().len(),
    }
}

impl DetectorRun {
    pub fn init(cfg: &RunConfig, corpus: &Corpus) -> Result<Self> {
        let mut store = ParameterStore::with_precision(cfg.precision);
        let mut rng = seeded(cfg.seed, tag::DET_INIT, 0, 0);
        let model = Detector::new(&mut store, detector_config(cfg, corpus), &mut rng)?;
        Ok(DetectorRun { store, model })
    }

    pub fn load(cfg: &RunConfig, corpus: &Corpus, path: &Path) -> Result<Self> {
        let fresh = Self::init(cfg, corpus)?;
        let store = checkpoint::load(path)?;
        check_layout(&fresh.store, &store, "detector")?;
        Ok(DetectorRun {
            store,
            model: fresh.model,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        Ok(checkpoint::save(&self.store, path)?)
    }

    pub fn predict(&self, split: &Split, batch: usize) -> Result<Vec<crate::detector::RelationPhrasePrediction>> {
        let mut out = Vec::with_capacity(split.len());
        for chunk in (0..split.len()).collect::<Vec<_>>().chunks(batch.max(1)) {
            let inputs: Vec<DetectorInput> = chunk
                .iter()
                .map(|&i| DetectorInput {
                    features: &split.features[i],
                    question: &split.samples[i].tokens,
                })
                .collect();
            out.extend(self.model.predict(&self.store, &inputs)?);
        }
        Ok(out)
    }
}

fn check_features(cfg: &RunConfig, split: &Split) -> Result<()> {
    if let Some(f) = split.features.first() {
        if f.rows() != cfg.feat_dim {
            return Err(Error::config(format!(
                "feat_dim is {} but split {} has {}-dimensional features",
                cfg.feat_dim,
                split.name,
                f.rows()
            )));
        }
    }
    Ok(())
}

/// Stage 1. On divergence the last good parameters are written to
/// `checkpoint` (when given) before the error is returned.
pub fn train_detector(
    cfg: &RunConfig,
    corpus: &Corpus,
    train: &Split,
    checkpoint: Option<&Path>,
    sink: &mut dyn Sink,
) -> Result<DetectorRun> {
    if train.is_empty() {
        return Err(Error::data("training split is empty"));
    }
    check_features(cfg, train)?;
    let mut run = DetectorRun::init(cfg, corpus)?;
    let labels: Vec<PhraseLabels> = train
        .samples
        .iter()
        .map(|s| s.phrase_labels(&corpus.kb))
        .collect::<Result<_>>()?;
    let weights = LossWeights {
        subject: cfg.lambda_sub,
        relation: cfg.lambda_rel,
        object: cfg.lambda_obj,
    };
    let opt = adam(cfg, cfg.det_lr);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut last_good = run.store.clone();
    for epoch in 0..cfg.det_epochs {
        order.shuffle(&mut seeded(cfg.seed, tag::DET_SHUFFLE, epoch as u64, 0));
        let (mut total, mut hits) = (0.0, 0usize);
        for batch in batches(&order, cfg.det_batch) {
            let inputs: Vec<DetectorInput> = batch
                .iter()
                .map(|&i| DetectorInput {
                    features: &train.features[i],
                    question: &train.samples[i].tokens,
                })
                .collect();
            let batch_labels: Vec<PhraseLabels> = batch.iter().map(|&i| labels[i]).collect();
            let mut g = Graph::with_precision(run.store.precision());
            let out = run.model.forward(&mut g, &run.store, &inputs)?;
            let loss = run.model.loss(&mut g, &out, &batch_labels, weights)?;
            let value = g.value(loss).item()?;
            if !value.is_finite() {
                if let Some(path) = checkpoint {
                    checkpoint::save(&last_good, path)?;
                }
                return Err(Error::Diverged { epoch, loss: value });
            }
            last_good.clone_from(&run.store);
            let rel = g.value(out.relation);
            hits += batch_labels
                .iter()
                .enumerate()
                .filter(|(b, l)| argmax(&rel.column_at(*b)) == l.relation)
                .count();
            total += value * batch.len() as f64;
            g.backward_into(loss, &mut run.store)?;
            adam_step(&mut run.store, &opt)?;
        }
        sink.epoch(&EpochLog {
            stage: "detector".into(),
            epoch,
            loss: total / train.len() as f64,
            train_accuracy: hits as f64 / train.len() as f64,
        });
    }
    Ok(run)
}

/// Ranked clue lists for every sample of a split.
pub fn compute_clues(
    det: &DetectorRun,
    kb: &KnowledgeBase,
    split: &Split,
    k_sub: usize,
    k_obj: usize,
    k_rel: usize,
    batch: usize,
) -> Result<Vec<ClueSet>> {
    det.predict(split, batch)?
        .iter()
        .map(|p| top_k_clues(p, k_sub, k_obj, k_rel, kb.entities(), kb.relations()))
        .collect()
}

pub fn save_clues(path: &Path, clues: &[ClueSet]) -> Result<()> {
    fs::write(path, serde_json::to_vec(clues)?)?;
    Ok(())
}

pub fn load_clues(path: &Path) -> Result<Vec<ClueSet>> {
    Ok(serde_json::from_slice(&fs::read(path)?)?)
}

/// Candidate sets for one sample with and without the relation filter.
#[derive(Debug, Clone)]
pub struct Retrieval {
    pub with_relation: CandidateFactSet,
    pub without_relation: CandidateFactSet,
    pub gt: OrientedFact,
}

impl Retrieval {
    /// The set the memory is filled from under `cfg`.
    pub fn memory_source(&self, cfg: &RunConfig) -> &CandidateFactSet {
        if cfg.relation_filter {
            &self.with_relation
        } else {
            &self.without_relation
        }
    }
}

pub fn clue_query(cfg: &RunConfig, clues: &ClueSet, relations: bool) -> RetrievalQuery {
    let take = |v: &[String], k: usize, on: bool| if on { v[..k.min(v.len())].to_vec() } else { Vec::new() };
    RetrievalQuery {
        subjects: take(&clues.subjects, cfg.topk_sub, cfg.use_subject_clues),
        objects: take(&clues.objects, cfg.topk_obj, cfg.use_object_clues),
        relations: relations.then(|| take(&clues.relations, cfg.topk_rel, true)),
        hops: cfg.hops,
        mode: cfg.hop_mode,
    }
}

/// Retrieval for every sample of a split from its clue sets.
pub fn retrieve_split(cfg: &RunConfig, kb: &KnowledgeBase, split: &Split, clues: &[ClueSet]) -> Result<Vec<Retrieval>> {
    if clues.len() != split.len() {
        return Err(Error::data(format!(
            "split {} has {} samples but {} clue sets",
            split.name,
            split.len(),
            clues.len()
        )));
    }
    split
        .samples
        .iter()
        .zip(clues)
        .map(|(s, c)| {
            let gt = s.gt_fact(kb)?;
            Ok(Retrieval {
                with_relation: kb.retrieve(&clue_query(cfg, c, true))?.with_ground_truth(gt),
                without_relation: kb.retrieve(&clue_query(cfg, c, false))?.with_ground_truth(gt),
                gt,
            })
        })
        .collect()
}

pub struct MemRun {
    pub store: ParameterStore,
    pub model: MemNet,
    pub facts: FactTokens,
}

pub fn memnet_config(cfg: &RunConfig, corpus: &Corpus) -> MemNetConfig {
    MemNetConfig {
        word_dim: cfg.word_dim,
        mem_dim: cfg.mem_dim,
        feat_dim: cfg.feat_dim,
        attention_hidden: cfg.mem_attention_hidden,
        words: corpus.vocab.len(),
        two_way_attention: cfg.two_way_attention,
        scorer: cfg.answer_scorer(),
    }
}

impl MemRun {
    /// Fresh parameters. With `tie_embeddings` the word table starts as a
    /// copy of the detector's.
    pub fn init(cfg: &RunConfig, corpus: &Corpus, det: Option<&DetectorRun>) -> Result<Self> {
        let mut store = ParameterStore::with_precision(cfg.precision);
        let mut rng = seeded(cfg.seed, tag::MEM_INIT, 0, 0);
        let model = MemNet::new(&mut store, memnet_config(cfg, corpus), &mut rng)?;
        if cfg.tie_embeddings {
            let det = det.ok_or_else(|| Error::config("tie_embeddings needs the trained detector"))?;
            let table = det.store.value(det.model.embed.table).clone();
            store.set_value(model.embed.table, table)?;
        }
        Ok(MemRun {
            store,
            model,
            facts: FactTokens::new(&corpus.kb, &corpus.vocab),
        })
    }

    pub fn load(cfg: &RunConfig, corpus: &Corpus, path: &Path) -> Result<Self> {
        let mut c = cfg.clone();
        c.tie_embeddings = false;
        let fresh = Self::init(&c, corpus, None)?;
        let store = checkpoint::load(path)?;
        check_layout(&fresh.store, &store, "memory network")?;
        Ok(MemRun {
            store,
            model: fresh.model,
            facts: fresh.facts,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        Ok(checkpoint::save(&self.store, path)?)
    }
}

/// Stage 2: the memory is refilled every epoch from each sample's
/// candidate set, always holding the ground truth.
pub fn train_memnet(
    cfg: &RunConfig,
    corpus: &Corpus,
    train: &Split,
    retrievals: &[Retrieval],
    det: Option<&DetectorRun>,
    checkpoint: Option<&Path>,
    sink: &mut dyn Sink,
) -> Result<MemRun> {
    if train.is_empty() {
        return Err(Error::data("training split is empty"));
    }
    if retrievals.len() != train.len() {
        return Err(Error::data("one retrieval per training sample is required"));
    }
    check_features(cfg, train)?;
    let mut run = MemRun::init(cfg, corpus, det)?;
    let opt = adam(cfg, cfg.mem_lr);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut last_good = run.store.clone();
    for epoch in 0..cfg.mem_epochs {
        order.shuffle(&mut seeded(cfg.seed, tag::MEM_SHUFFLE, epoch as u64, 0));
        let (mut total, mut hits) = (0.0, 0usize);
        for batch in batches(&order, cfg.mem_batch) {
            let banks = batch
                .iter()
                .map(|&i| {
                    let r = &retrievals[i];
                    let mut rng = seeded(cfg.seed, tag::MEM_FILL, epoch as u64, i as u64);
                    fill_memory(r.memory_source(cfg), Some(r.gt), true, &corpus.kb, cfg.n_mem, &mut rng)
                })
                .collect::<Result<Vec<_>>>()?;
            let inputs: Vec<MemInput> = batch
                .iter()
                .zip(&banks)
                .map(|(&i, bank)| MemInput {
                    features: &train.features[i],
                    question: &train.samples[i].tokens,
                    slots: &bank.slots,
                })
                .collect();
            let gt: Vec<Option<usize>> = banks.iter().map(|b| b.gt_index).collect();
            let mut g = Graph::with_precision(run.store.precision());
            let out = run.model.forward(&mut g, &run.store, &run.facts, &inputs, Mode::Train)?;
            let loss = MemNet::qa_loss(&mut g, &out, &gt)?;
            let value = g.value(loss).item()?;
            if !value.is_finite() {
                if let Some(path) = checkpoint {
                    checkpoint::save(&last_good, path)?;
                }
                return Err(Error::Diverged { epoch, loss: value });
            }
            last_good.clone_from(&run.store);
            hits += out
                .samples
                .iter()
                .zip(&gt)
                .filter(|(s, gt)| Some(argmax(g.value(s.probs).data())) == **gt)
                .count();
            total += value * batch.len() as f64;
            g.backward_into(loss, &mut run.store)?;
            adam_step(&mut run.store, &opt)?;
            if let Some(stats) = &out.batch_stats {
                run.model.update_running_stats(&mut run.store, stats)?;
            }
        }
        sink.epoch(&EpochLog {
            stage: "memnet".into(),
            epoch,
            loss: total / train.len() as f64,
            train_accuracy: hits as f64 / train.len() as f64,
        });
    }
    Ok(run)
}
