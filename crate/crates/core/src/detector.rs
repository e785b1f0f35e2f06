//! Relation phrase detector: predicts subject, relation and object
//! distributions from an image and a question, and turns them into clue
//! sets for retrieval.

use numcore::{Graph, Init, ParamId, ParameterStore, Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::encoders::{encode_sequences, Embedding, Fuse, Gru, TopDownAttention};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct DetectorConfig {
    pub word_dim: usize,
    pub hidden: usize,
    pub attention_hidden: usize,
    pub feat_dim: usize,
    pub words: usize,
    pub entities: usize,
    pub relations: usize,
}

/// Loss weights for the three heads.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub subject: f64,
    pub relation: f64,
    pub object: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            subject: 1.0,
            relation: 1.0,
            object: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PhraseLabels {
    pub subject: usize,
    pub relation: usize,
    pub object: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct Head {
    pub w: ParamId,
    pub b: ParamId,
}

impl Head {
    fn new<R: Rng + ?Sized>(
        store: &mut ParameterStore,
        name: &str,
        input: usize,
        classes: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Head {
            w: store.register(format!("{name}.w"), classes, input, Init::FanIn(input), rng)?,
            b: store.register(format!("{name}.b"), classes, 1, Init::FanIn(input), rng)?,
        })
    }

    fn forward(&self, g: &mut Graph, store: &ParameterStore, h: Var) -> Result<Var> {
        let (w, b) = (g.param(store, self.w), g.param(store, self.b));
        let logits = g.linear(w, h, Some(b))?;
        Ok(g.softmax(logits, 0)?)
    }
}

#[derive(Debug, Clone)]
pub struct Detector {
    pub config: DetectorConfig,
    pub embed: Embedding,
    pub gru: Gru,
    pub attention: TopDownAttention,
    pub fuse: Fuse,
    pub subject: Head,
    pub relation: Head,
    pub object: Head,
}

/// One detector input: `feat_dim × K` object features and question ids.
#[derive(Debug, Clone, Copy)]
pub struct DetectorInput<'a> {
    pub features: &'a Tensor,
    pub question: &'a [usize],
}

/// Column-per-sample head distributions for a batch.
#[derive(Debug, Clone, Copy)]
pub struct DetectorOutput {
    pub subject: Var,
    pub relation: Var,
    pub object: Var,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RelationPhrasePrediction {
    pub subject: Vec<f64>,
    pub relation: Vec<f64>,
    pub object: Vec<f64>,
}

impl Detector {
    pub fn new<R: Rng + ?Sized>(store: &mut ParameterStore, config: DetectorConfig, rng: &mut R) -> Result<Self> {
        let c = &config;
        if [c.word_dim, c.hidden, c.attention_hidden, c.feat_dim, c.entities, c.relations]
            .contains(&0)
        {
            return Err(Error::config("detector dimensions must be positive"));
        }
        Ok(Detector {
            embed: Embedding::new(store, "det.embed", c.word_dim, c.words, rng)?,
            gru: Gru::new(store, "det.gru", c.word_dim, c.hidden, rng)?,
            attention: TopDownAttention::new(store, "det.att", c.feat_dim, c.hidden, c.attention_hidden, rng)?,
            fuse: Fuse::new(store, "det.fuse", c.feat_dim, c.hidden, c.hidden, rng)?,
            subject: Head::new(store, "det.head_s", c.hidden, c.entities, rng)?,
            relation: Head::new(store, "det.head_r", c.hidden, c.relations, rng)?,
            object: Head::new(store, "det.head_o", c.hidden, c.entities, rng)?,
            config,
        })
    }

    /// Records the forward pass for a batch on `g`.
    pub fn forward(&self, g: &mut Graph, store: &ParameterStore, batch: &[DetectorInput<'_>]) -> Result<DetectorOutput> {
        if batch.is_empty() {
            return Err(Error::data("empty detector batch"));
        }
        let questions: Vec<&[usize]> = batch.iter().map(|s| s.question).collect();
        let q_all = encode_sequences(g, store, &self.embed, &questions, |g, st, x, len, n| {
            self.gru.encode(g, st, x, len, n)
        })?;
        let mut hs = Vec::with_capacity(batch.len());
        for (b, sample) in batch.iter().enumerate() {
            let q = if batch.len() == 1 { q_all } else { g.select_cols(q_all, &[b])? };
            let v = g.constant(sample.features.clone());
            let (v_hat, _) = self.attention.forward(g, store, v, q)?;
            hs.push(self.fuse.forward(g, store, v_hat, q)?);
        }
        let h = if hs.len() == 1 { hs[0] } else { g.concat_cols(&hs)? };
        Ok(DetectorOutput {
            subject: self.subject.forward(g, store, h)?,
            relation: self.relation.forward(g, store, h)?,
            object: self.object.forward(g, store, h)?,
        })
    }

    /// Mean weighted cross-entropy over the batch.
    pub fn loss(
        &self,
        g: &mut Graph,
        out: &DetectorOutput,
        labels: &[PhraseLabels],
        weights: LossWeights,
    ) -> Result<Var> {
        let n = g.shape(out.subject).1;
        if labels.len() != n {
            return Err(Error::data(format!("{} labels for a batch of {n}", labels.len())));
        }
        let mut per_sample = Vec::with_capacity(n);
        for (b, l) in labels.iter().enumerate() {
            let mut terms = Vec::with_capacity(3);
            for (dist, label, w) in [
                (out.subject, l.subject, weights.subject),
                (out.relation, l.relation, weights.relation),
                (out.object, l.object, weights.object),
            ] {
                let col = if n == 1 { dist } else { g.select_cols(dist, &[b])? };
                let ce = g.cross_entropy(col, label)?;
                terms.push(g.scale(ce, w));
            }
            let st = g.add(terms[0], terms[1])?;
            per_sample.push(g.add(st, terms[2])?);
        }
        Ok(g.mean_of(&per_sample)?)
    }

    /// Inference without recording gradients.
    pub fn predict(&self, store: &ParameterStore, batch: &[DetectorInput<'_>]) -> Result<Vec<RelationPhrasePrediction>> {
        let mut g = Graph::with_precision(store.precision());
        let out = self.forward(&mut g, store, batch)?;
        let (s, r, o) = (g.value(out.subject), g.value(out.relation), g.value(out.object));
        Ok((0..batch.len())
            .map(|b| RelationPhrasePrediction {
                subject: s.column_at(b),
                relation: r.column_at(b),
                object: o.column_at(b),
            })
            .collect())
    }
}

/// Indices of the `k` largest scores, highest first; ties go to the lower
/// index. `k` is clamped to the number of scores.
pub fn top_k(scores: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx.truncate(k.min(scores.len()));
    idx
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ClueSet {
    pub subjects: Vec<String>,
    pub subject_scores: Vec<f64>,
    pub objects: Vec<String>,
    pub object_scores: Vec<f64>,
    pub relations: Vec<String>,
    pub relation_scores: Vec<f64>,
}

impl ClueSet {
    /// Restricts each list to its first `k` entries (lists are ranked).
    pub fn truncated(&self, k_sub: usize, k_obj: usize, k_rel: usize) -> ClueSet {
        let cut = |v: &[String], s: &[f64], k: usize| {
            let k = k.min(v.len());
            (v[..k].to_vec(), s[..k].to_vec())
        };
        let (subjects, subject_scores) = cut(&self.subjects, &self.subject_scores, k_sub);
        let (objects, object_scores) = cut(&self.objects, &self.object_scores, k_obj);
        let (relations, relation_scores) = cut(&self.relations, &self.relation_scores, k_rel);
        ClueSet {
            subjects,
            subject_scores,
            objects,
            object_scores,
            relations,
            relation_scores,
        }
    }
}

pub fn top_k_clues(
    pred: &RelationPhrasePrediction,
    k_sub: usize,
    k_obj: usize,
    k_rel: usize,
    entities: &[String],
    relations: &[String],
) -> Result<ClueSet> {
    if k_sub == 0 || k_obj == 0 || k_rel == 0 {
        return Err(Error::config("top-K sizes must be at least 1"));
    }
    let pick = |p: &[f64], k: usize, names: &[String]| -> (Vec<String>, Vec<f64>) {
        top_k(p, k).into_iter().map(|i| (names[i].clone(), p[i])).unzip()
    };
    let (subjects, subject_scores) = pick(&pred.subject, k_sub, entities);
    let (objects, object_scores) = pick(&pred.object, k_obj, entities);
    let (relations, relation_scores) = pick(&pred.relation, k_rel, relations);
    Ok(ClueSet {
        subjects,
        subject_scores,
        objects,
        object_scores,
        relations,
        relation_scores,
    })
}
