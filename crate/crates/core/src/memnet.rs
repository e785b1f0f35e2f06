//! Key-value memory network: memory filling and encoding, the two-way
//! attention reads, the generalization hop and answer scoring.

use std::collections::{HashMap, HashSet};

use numcore::{BatchStats, Graph, Init, ParamId, ParameterStore, Tensor, Var};
use rand::seq::{index::sample, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::encoders::{encode_sequences, group_by_length, BiLstm, Embedding, Fuse, Gated, Gru, SelfAttentiveQuestion, TopDownAttention};
use crate::error::{Error, Result};
use crate::kb::{CandidateFactSet, KnowledgeBase, OrientedFact};
use crate::vocab::{tokenize, Vocab};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SlotSource {
    Retrieved,
    Injected,
    Negative,
}

/// Fixed-capacity memory contents for one sample (fact identities only;
/// embeddings are computed in the forward pass).
#[derive(Debug, Clone, PartialEq)]
pub struct MemoryBank {
    pub slots: Vec<OrientedFact>,
    pub sources: Vec<SlotSource>,
    pub gt_index: Option<usize>,
}

impl MemoryBank {
    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn ground_truth_slots(&self) -> usize {
        self.gt_index.iter().count()
    }
}

/// Builds a bank of exactly `n_mem` slots.
///
/// The ground truth is kept when retrieved; when it was not retrieved it is
/// added only if `inject_gt` is set. Remaining capacity takes a uniform
/// sample of the other candidates, or, when there are too few, uniform
/// negatives from the whole KB that are not already present. If even the KB
/// runs out, non-ground-truth slots are repeated. Slots are shuffled.
pub fn fill_memory<R: Rng + ?Sized>(
    candidates: &CandidateFactSet,
    gt: Option<OrientedFact>,
    inject_gt: bool,
    kb: &KnowledgeBase,
    n_mem: usize,
    rng: &mut R,
) -> Result<MemoryBank> {
    if n_mem == 0 {
        return Err(Error::config("memory size must be at least 1"));
    }
    let mut kept: Vec<(OrientedFact, SlotSource)> = Vec::with_capacity(n_mem);
    let retrieved_gt = gt.filter(|g| candidates.oriented().any(|c| c == *g));
    match (retrieved_gt, gt) {
        (Some(g), _) => kept.push((g, SlotSource::Retrieved)),
        (None, Some(g)) if inject_gt => kept.push((g, SlotSource::Injected)),
        _ => {}
    }
    let others: Vec<OrientedFact> = candidates.oriented().filter(|c| Some(*c) != gt).collect();
    let room = n_mem - kept.len();
    if others.len() >= room {
        let mut picks = sample(rng, others.len(), room).into_vec();
        picks.sort_unstable();
        kept.extend(picks.into_iter().map(|i| (others[i], SlotSource::Retrieved)));
    } else {
        kept.extend(others.iter().map(|&c| (c, SlotSource::Retrieved)));
        let need = n_mem - kept.len();
        let present: HashSet<usize> = candidates
            .oriented()
            .chain(gt)
            .map(OrientedFact::code)
            .collect();
        let negatives = sample_negatives(kb, &present, need, rng);
        if kept.is_empty() && negatives.is_empty() {
            return Err(Error::data("cannot fill memory from an empty knowledge base"));
        }
        let short = need - negatives.len();
        kept.extend(negatives.iter().map(|&c| (OrientedFact::from_code(c), SlotSource::Negative)));
        if short > 0 {
            // pool for repeats: anything that is not the ground truth
            let pool: Vec<(OrientedFact, SlotSource)> = kept.iter().copied().filter(|(f, _)| Some(*f) != gt).collect();
            if pool.is_empty() {
                return Err(Error::data("memory cannot be filled without repeating the ground truth"));
            }
            for _ in 0..short {
                kept.push(pool[rng.random_range(0..pool.len())]);
            }
        }
    }
    kept.shuffle(rng);
    let gt_index = gt.and_then(|g| {
        kept.iter()
            .position(|(f, s)| *f == g && *s != SlotSource::Negative)
    });
    let (slots, sources) = kept.into_iter().unzip();
    Ok(MemoryBank {
        slots,
        sources,
        gt_index,
    })
}

/// Up to `need` distinct oriented-fact codes outside `present`, uniformly.
fn sample_negatives<R: Rng + ?Sized>(kb: &KnowledgeBase, present: &HashSet<usize>, need: usize, rng: &mut R) -> Vec<usize> {
    let total = 2 * kb.len();
    let free = total - present.iter().filter(|&&c| c < total).count();
    if need == 0 || free == 0 {
        return Vec::new();
    }
    if free > 4 * need {
        let mut chosen = Vec::with_capacity(need);
        let mut seen = HashSet::with_capacity(need);
        while chosen.len() < need {
            let c = rng.random_range(0..total);
            if !present.contains(&c) && seen.insert(c) {
                chosen.push(c);
            }
        }
        chosen
    } else {
        let complement: Vec<usize> = (0..total).filter(|c| !present.contains(c)).collect();
        let k = need.min(complement.len());
        let mut picks = sample(rng, complement.len(), k).into_vec();
        picks.sort_unstable();
        picks.into_iter().map(|i| complement[i]).collect()
    }
}

/// Word ids for every oriented fact of a KB, indexed by `OrientedFact::code`.
#[derive(Debug, Clone)]
pub struct FactTokens {
    tokens: Vec<Vec<usize>>,
}

impl FactTokens {
    pub fn new(kb: &KnowledgeBase, vocab: &Vocab) -> Self {
        let tokens = (0..2 * kb.len())
            .map(|code| {
                let t = kb.oriented_triplet(OrientedFact::from_code(code));
                let words: Vec<String> = t.words().flat_map(tokenize).collect();
                let ids = vocab.encode(words.iter().map(String::as_str));
                if ids.is_empty() {
                    vec![crate::vocab::UNK]
                } else {
                    ids
                }
            })
            .collect();
        FactTokens { tokens }
    }

    pub fn get(&self, fact: OrientedFact) -> &[usize] {
        &self.tokens[fact.code()]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MemNetConfig {
    pub word_dim: usize,
    pub mem_dim: usize,
    pub feat_dim: usize,
    pub attention_hidden: usize,
    pub words: usize,
    pub two_way_attention: bool,
    pub scorer: AnswerScorer,
}

/// How a slot is scored from `[ĥ; M^k_i]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AnswerScorer {
    /// `w · [ĥ; k] + b`. The `ĥ` term is the same for every slot and
    /// cancels in the softmax, so the ranking ignores the question.
    Linear,
    /// `w · tanh(W_c [ĥ; k] + b_c) + b` with the given hidden width.
    Mlp(usize),
}

/// Additive attention read `â = softmax(W_s tanh(W_q x + W_k K))`,
/// returning `(V âᵀ, â)`.
#[derive(Debug, Clone, Copy)]
pub struct AttentionRead {
    pub w_query: ParamId,
    pub w_key: ParamId,
    pub w_score: ParamId,
}

impl AttentionRead {
    fn new<R: Rng + ?Sized>(store: &mut ParameterStore, name: &str, dim: usize, hidden: usize, rng: &mut R) -> Result<Self> {
        Ok(AttentionRead {
            w_query: store.register(format!("{name}.w_query"), hidden, dim, Init::FanIn(dim), rng)?,
            w_key: store.register(format!("{name}.w_key"), hidden, dim, Init::FanIn(dim), rng)?,
            w_score: store.register(format!("{name}.w_score"), 1, hidden, Init::FanIn(hidden), rng)?,
        })
    }

    pub fn read(&self, g: &mut Graph, store: &ParameterStore, x: Var, keys: Var, values: Var) -> Result<(Var, Var)> {
        let (wq, wk, ws) = (
            g.param(store, self.w_query),
            g.param(store, self.w_key),
            g.param(store, self.w_score),
        );
        let qx = g.matmul(wq, x)?;
        let kk = g.matmul(wk, keys)?;
        let pre = g.add_broadcast(kk, qx)?;
        let act = g.tanh(pre);
        let logits = g.matmul(ws, act)?;
        let att = g.softmax(logits, 1)?;
        let att_col = g.transpose(att);
        Ok((g.matmul(values, att_col)?, att))
    }
}

/// Parameters used only with two-way attention on.
#[derive(Debug, Clone)]
pub struct TwoWay {
    pub read: AttentionRead,
    pub question_proj: ParamId,
    pub image_proj: ParamId,
    pub f_v: Gated,
    pub f_q: Gated,
}

#[derive(Debug, Clone)]
pub struct MemNet {
    pub config: MemNetConfig,
    pub embed: Embedding,
    pub question: SelfAttentiveQuestion,
    pub attention: TopDownAttention,
    pub fuse: Fuse,
    pub fact_rnn: BiLstm,
    pub w_key: ParamId,
    pub w_value: ParamId,
    pub two_way: Option<TwoWay>,
    pub read_gen: AttentionRead,
    pub gen_gru: Gru,
    pub bn_gamma: ParamId,
    pub bn_beta: ParamId,
    pub bn_mean: ParamId,
    pub bn_var: ParamId,
    /// Hidden layer of the nonlinear scorer (`W_c`, `b_c`).
    pub answer_hidden: Option<(ParamId, ParamId)>,
    pub w_answer: ParamId,
    pub b_answer: ParamId,
}

/// One memnet input.
#[derive(Debug, Clone, Copy)]
pub struct MemInput<'a> {
    pub features: &'a Tensor,
    pub question: &'a [usize],
    pub slots: &'a [OrientedFact],
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics in the normalization layer.
    Train,
    /// Running statistics.
    Eval,
}

/// Per-sample nodes kept for inspection.
#[derive(Debug, Clone)]
pub struct SampleTrace {
    pub joint: Var,
    pub visual_attention: Var,
    pub summary: Option<Var>,
    pub memory_attention: Option<Var>,
    pub question_attention: Option<Var>,
    pub image_attention: Option<Var>,
    pub fused: Var,
    pub summary_gen: Var,
    pub gen_attention: Var,
    pub final_state: Var,
    /// `1 × N` answer distribution over slots.
    pub probs: Var,
}

struct Partial {
    keys: Var,
    trace: SampleTrace,
}

#[derive(Debug, Clone)]
pub struct MemOutput {
    pub samples: Vec<SampleTrace>,
    pub batch_stats: Option<BatchStats>,
}

impl MemNet {
    pub fn new<R: Rng + ?Sized>(store: &mut ParameterStore, config: MemNetConfig, rng: &mut R) -> Result<Self> {
        let c = &config;
        if [c.word_dim, c.mem_dim, c.feat_dim, c.attention_hidden].contains(&0) {
            return Err(Error::config("memory network dimensions must be positive"));
        }
        let (dw, dm, df, da) = (c.word_dim, c.mem_dim, c.feat_dim, c.attention_hidden);
        let two_way = if c.two_way_attention {
            Some(TwoWay {
                read: AttentionRead::new(store, "mem.read", dm, da, rng)?,
                question_proj: store.register("mem.question_proj", dw, dm, Init::FanIn(dm), rng)?,
                image_proj: store.register("mem.image_proj", dm, df, Init::FanIn(df), rng)?,
                f_v: Gated::new(store, "mem.aware.f_v", df, dm, rng)?,
                f_q: Gated::new(store, "mem.aware.f_q", dw, dm, rng)?,
            })
        } else {
            None
        };
        let (answer_hidden, answer_in) = match c.scorer {
            AnswerScorer::Linear => (None, 2 * dm),
            AnswerScorer::Mlp(0) => return Err(Error::config("answer scorer width must be positive")),
            AnswerScorer::Mlp(width) => {
                let w = store.register("mem.answer_hidden.w", width, 2 * dm, Init::FanIn(2 * dm), rng)?;
                let b = store.register("mem.answer_hidden.b", width, 1, Init::FanIn(2 * dm), rng)?;
                (Some((w, b)), width)
            }
        };
        Ok(MemNet {
            embed: Embedding::new(store, "mem.embed", dw, c.words, rng)?,
            question: SelfAttentiveQuestion::new(store, "mem.question", dw, dm, rng)?,
            attention: TopDownAttention::new(store, "mem.att", df, dm, da, rng)?,
            fuse: Fuse::new(store, "mem.fuse", df, dm, dm, rng)?,
            fact_rnn: BiLstm::new(store, "mem.fact_rnn", dw, dm, rng)?,
            w_key: store.register("mem.w_key", dm, dm, Init::FanIn(dm), rng)?,
            w_value: store.register("mem.w_value", dm, dm, Init::FanIn(dm), rng)?,
            two_way,
            read_gen: AttentionRead::new(store, "mem.read_gen", dm, da, rng)?,
            gen_gru: Gru::new(store, "mem.gen_gru", 2 * dm, dm, rng)?,
            bn_gamma: store.register("mem.bn.gamma", dm, 1, Init::Ones, rng)?,
            bn_beta: store.register("mem.bn.beta", dm, 1, Init::Zeros, rng)?,
            bn_mean: store.register_buffer("mem.bn.running_mean", Tensor::zeros(dm, 1))?,
            bn_var: store.register_buffer("mem.bn.running_var", Tensor::filled(dm, 1, 1.0))?,
            answer_hidden,
            w_answer: store.register("mem.w_answer", 1, answer_in, Init::FanIn(answer_in), rng)?,
            b_answer: store.register("mem.b_answer", 1, 1, Init::Zeros, rng)?,
            config,
        })
    }

    /// Keys and values for every distinct oriented fact in the batch.
    /// Returns `(keys, values, column of each fact)`.
    pub fn encode_memory(
        &self,
        g: &mut Graph,
        store: &ParameterStore,
        facts: &FactTokens,
        slots: &[OrientedFact],
    ) -> Result<(Var, Var, HashMap<OrientedFact, usize>)> {
        if slots.is_empty() {
            return Err(Error::data("memory is empty"));
        }
        let mut column = HashMap::new();
        let mut unique = Vec::new();
        for &s in slots {
            column.entry(s).or_insert_with(|| {
                unique.push(s);
                unique.len() - 1
            });
        }
        let seqs: Vec<&[usize]> = unique.iter().map(|&f| facts.get(f)).collect();
        let enc = encode_sequences(g, store, &self.embed, &seqs, |g, st, x, len, n| {
            self.fact_rnn.encode(g, st, x, len, n)
        })?;
        let (wk, wv) = (g.param(store, self.w_key), g.param(store, self.w_value));
        let keys = g.matmul(wk, enc)?;
        let values = g.matmul(wv, enc)?;
        Ok((keys, values, column))
    }

    /// Self-attentive question encodings for a batch, one column each, plus
    /// the per-sample word embedding matrices.
    fn encode_questions(&self, g: &mut Graph, store: &ParameterStore, questions: &[&[usize]]) -> Result<(Var, Vec<Var>)> {
        if questions.iter().any(|q| q.is_empty()) {
            return Err(Error::data("empty question"));
        }
        let hs = questions
            .iter()
            .map(|q| self.embed.lookup(g, store, q))
            .collect::<Result<Vec<_>>>()?;
        let mut blocks = Vec::new();
        let mut order = Vec::new();
        for (len, members) in group_by_length(questions.iter().map(|q| q.len())) {
            let group: Vec<Var> = members.iter().map(|&i| hs[i]).collect();
            blocks.push(self.question.encode(g, store, &group, len)?);
            order.extend(members);
        }
        let stacked = if blocks.len() == 1 { blocks[0] } else { g.concat_cols(&blocks)? };
        let mut inverse = vec![0; order.len()];
        for (pos, &i) in order.iter().enumerate() {
            inverse[i] = pos;
        }
        let q = if inverse.iter().enumerate().all(|(a, &b)| a == b) {
            stacked
        } else {
            g.select_cols(stacked, &inverse)?
        };
        Ok((q, hs))
    }

    /// Memory-aware attention over question words and image objects.
    /// Returns `(h^m, â^q, â^v)`.
    pub fn memory_aware(
        &self,
        g: &mut Graph,
        store: &ParameterStore,
        tw: &TwoWay,
        m: Var,
        words: Var,
        v: Var,
    ) -> Result<(Var, Var, Var)> {
        let p = g.param(store, tw.question_proj);
        let pm = g.matmul(p, m)?;
        let wt = g.transpose(words);
        let sq = g.matmul(wt, pm)?;
        let aq = g.softmax(sq, 0)?;
        let qm = g.matmul(words, aq)?;

        let w_img = g.param(store, tw.image_proj);
        let proj = g.matmul(w_img, v)?;
        let pt = g.transpose(proj);
        let sv = g.matmul(pt, m)?;
        let av = g.softmax(sv, 0)?;
        let vm = g.matmul(v, av)?;

        let a = tw.f_v.forward(g, store, vm)?;
        let b = tw.f_q.forward(g, store, qm)?;
        Ok((g.mul(a, b)?, aq, av))
    }

    /// Records the forward pass for a batch.
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParameterStore,
        facts: &FactTokens,
        batch: &[MemInput<'_>],
        mode: Mode,
    ) -> Result<MemOutput> {
        if batch.is_empty() {
            return Err(Error::data("empty memnet batch"));
        }
        let all_slots: Vec<OrientedFact> = batch.iter().flat_map(|s| s.slots.iter().copied()).collect();
        let (keys_all, values_all, column) = self.encode_memory(g, store, facts, &all_slots)?;
        let questions: Vec<&[usize]> = batch.iter().map(|s| s.question).collect();
        let (q_all, words) = self.encode_questions(g, store, &questions)?;

        let single_fact_block = column.len() == 1;
        let mut partial = Vec::with_capacity(batch.len());
        for (b, s) in batch.iter().enumerate() {
            if s.slots.is_empty() {
                return Err(Error::data(format!("sample {b} has an empty memory")));
            }
            let cols: Vec<usize> = s.slots.iter().map(|f| column[f]).collect();
            let (keys, values) = if single_fact_block && cols.len() == 1 {
                (keys_all, values_all)
            } else {
                (g.select_cols(keys_all, &cols)?, g.select_cols(values_all, &cols)?)
            };
            let q = if batch.len() == 1 { q_all } else { g.select_cols(q_all, &[b])? };
            let v = g.constant(s.features.clone());
            let (v_hat, visual_attention) = self.attention.forward(g, store, v, q)?;
            let joint = self.fuse.forward(g, store, v_hat, q)?;

            let (fused, summary, memory_attention, question_attention, image_attention) = match &self.two_way {
                Some(tw) => {
                    let (m, am) = tw.read.read(g, store, joint, keys, values)?;
                    let (hm, aq, av) = self.memory_aware(g, store, tw, m, words[b], v)?;
                    (hm, Some(m), Some(am), Some(aq), Some(av))
                }
                None => (joint, None, None, None, None),
            };
            let (summary_gen, gen_attention) = self.read_gen.read(g, store, fused, keys, values)?;
            partial.push(Partial {
                keys,
                trace: SampleTrace {
                    joint,
                    visual_attention,
                    summary,
                    memory_attention,
                    question_attention,
                    image_attention,
                    fused,
                    summary_gen,
                    gen_attention,
                    final_state: fused,
                    probs: fused,
                },
            });
        }

        let fused: Vec<Var> = partial.iter().map(|p| p.trace.fused).collect();
        let inputs: Vec<Var> = partial
            .iter()
            .map(|p| g.concat_rows(&[p.trace.fused, p.trace.summary_gen]))
            .collect::<std::result::Result<_, _>>()?;
        let (hm, x) = if batch.len() == 1 {
            (fused[0], inputs[0])
        } else {
            (g.concat_cols(&fused)?, g.concat_cols(&inputs)?)
        };
        let step = self.gen_gru.step(g, store, x, hm)?;
        let pre = g.add(hm, step)?;
        let (gamma, beta) = (g.param(store, self.bn_gamma), g.param(store, self.bn_beta));
        let (normed, batch_stats) = match mode {
            Mode::Train => {
                let (y, stats) = g.batch_norm(pre, gamma, beta, BN_EPS)?;
                (y, Some(stats))
            }
            Mode::Eval => {
                let stats = self.running_stats(store);
                (g.fixed_norm(pre, gamma, beta, &stats, BN_EPS)?, None)
            }
        };

        // The concatenation [ĥ; k_i] is never materialized: a weight over it
        // is split into the state half and the key half.
        let dm = self.config.mem_dim;
        let state_cols: Vec<usize> = (0..dm).collect();
        let key_cols: Vec<usize> = (dm..2 * dm).collect();
        let hidden = match self.answer_hidden {
            Some((w, b)) => {
                let w = g.param(store, w);
                Some((g.select_cols(w, &state_cols)?, g.select_cols(w, &key_cols)?, g.param(store, b)))
            }
            None => None,
        };
        let w = g.param(store, self.w_answer);
        let b_ans = g.param(store, self.b_answer);
        let mut samples = Vec::with_capacity(batch.len());
        for (b, p) in partial.into_iter().enumerate() {
            let final_state = if batch.len() == 1 { normed } else { g.select_cols(normed, &[b])? };
            let logits = match hidden {
                Some((w_state, w_key, b_hidden)) => {
                    let s_state = g.linear(w_state, final_state, Some(b_hidden))?;
                    let s_keys = g.matmul(w_key, p.keys)?;
                    let pre = g.add_broadcast(s_keys, s_state)?;
                    let act = g.tanh(pre);
                    let out = g.matmul(w, act)?;
                    g.add_broadcast(out, b_ans)?
                }
                None => {
                    let w_state = g.select_cols(w, &state_cols)?;
                    let w_key = g.select_cols(w, &key_cols)?;
                    let s_state = g.matmul(w_state, final_state)?;
                    let s_keys = g.matmul(w_key, p.keys)?;
                    let shared = g.add(s_state, b_ans)?;
                    g.add_broadcast(s_keys, shared)?
                }
            };
            let probs = g.softmax(logits, 1)?;
            samples.push(SampleTrace {
                final_state,
                probs,
                ..p.trace
            });
        }
        Ok(MemOutput { samples, batch_stats })
    }

    pub fn running_stats(&self, store: &ParameterStore) -> BatchStats {
        BatchStats {
            mean: store.value(self.bn_mean).data().to_vec(),
            var: store.value(self.bn_var).data().to_vec(),
        }
    }

    /// `running = momentum · running + (1 − momentum) · batch`.
    pub fn update_running_stats(&self, store: &mut ParameterStore, stats: &BatchStats) -> Result<()> {
        let blend = |old: &Tensor, new: &[f64]| {
            let data = old
                .data()
                .iter()
                .zip(new)
                .map(|(o, n)| BN_MOMENTUM * o + (1.0 - BN_MOMENTUM) * n)
                .collect();
            Tensor::new(old.rows(), 1, data)
        };
        let mean = blend(store.value(self.bn_mean), &stats.mean)?;
        let var = blend(store.value(self.bn_var), &stats.var)?;
        store.set_value(self.bn_mean, mean)?;
        store.set_value(self.bn_var, var)?;
        Ok(())
    }

    /// Mean of `−log p[gt]` over the batch.
    pub fn qa_loss(g: &mut Graph, out: &MemOutput, gt: &[Option<usize>]) -> Result<Var> {
        let mut terms = Vec::with_capacity(gt.len());
        for (i, (s, &gt)) in out.samples.iter().zip(gt).enumerate() {
            let idx = gt.ok_or_else(|| Error::MissingGroundTruth(format!("batch position {i}")))?;
            terms.push(g.cross_entropy(s.probs, idx)?);
        }
        Ok(g.mean_of(&terms)?)
    }

    /// Answer distributions for a batch at evaluation time.
    pub fn predict(
        &self,
        store: &ParameterStore,
        facts: &FactTokens,
        batch: &[MemInput<'_>],
    ) -> Result<Vec<Vec<f64>>> {
        let mut g = Graph::with_precision(store.precision());
        let out = self.forward(&mut g, store, facts, batch, Mode::Eval)?;
        Ok(out.samples.iter().map(|s| g.value(s.probs).data().to_vec()).collect())
    }
}
