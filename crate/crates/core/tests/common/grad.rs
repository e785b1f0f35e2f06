//! Finite-difference cases: single tape operations and whole module
//! forward passes, each built from a seed.

use kbvqa::detector::{Detector, DetectorConfig, DetectorInput, LossWeights, PhraseLabels};
use kbvqa::encoders::{Embedding, Fuse, Gru, SelfAttentiveQuestion, TopDownAttention};
use kbvqa::kb::{FactTriplet, KnowledgeBase, Normalizer, OrientedFact};
use kbvqa::memnet::{AnswerScorer, FactTokens, MemInput, MemNet, MemNetConfig, Mode};
use kbvqa::vocab::Vocab;
use numcore::gradcheck::check_params;
use numcore::{BatchStats, Graph, Init, ParamId, ParameterStore, Result, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const EPS: f64 = 1e-5;
pub const TOL: f64 = 1e-4;

#[derive(Debug, Clone)]
pub struct Check {
    pub label: String,
    pub checked: usize,
    pub error: f64,
    pub worst: Option<(String, usize, f64, f64)>,
}

fn rand_tensor(rng: &mut ChaCha8Rng, r: usize, c: usize, scale: f64) -> Tensor {
    Tensor::new(r, c, (0..r * c).map(|_| rng.random_range(-scale..scale)).collect()).unwrap()
}

fn param(store: &mut ParameterStore, rng: &mut ChaCha8Rng, name: &str, r: usize, c: usize) -> ParamId {
    let t = rand_tensor(rng, r, c, 1.5);
    store.register(name, r, c, Init::Value(t), rng).unwrap()
}

fn tokens(rng: &mut ChaCha8Rng, vocab: usize) -> Vec<usize> {
    let len = rng.random_range(1..5);
    (0..len).map(|_| rng.random_range(2..vocab)).collect()
}

/// Contracts an output with fixed random weights so every entry matters.
fn project(g: &mut Graph, y: Var, w: &Tensor) -> Result<Var> {
    let w = g.constant(w.clone());
    let m = g.mul(y, w)?;
    Ok(g.sum(m))
}

fn into_num(e: kbvqa::Error) -> numcore::NumError {
    match e {
        kbvqa::Error::Num(n) => n,
        other => panic!("{other}"),
    }
}

fn run(
    label: String,
    store: &mut ParameterStore,
    rng: &mut ChaCha8Rng,
    per_param: usize,
    build: impl FnMut(&mut Graph, &ParameterStore) -> Result<Var>,
) -> Check {
    let report = check_params(store, build, EPS, per_param, rng).unwrap();
    Check {
        label,
        checked: report.checked,
        error: report.max_relative_error,
        worst: report.worst,
    }
}

#[derive(Clone, Copy, Debug)]
pub enum Op {
    MatMul,
    AddSubMul,
    Broadcast,
    Activations,
    SoftmaxCols,
    SoftmaxRows,
    Concat,
    Select,
    CrossEntropy,
    BatchNorm,
    FixedNorm,
}

pub const OPS: [Op; 11] = [
    Op::MatMul,
    Op::AddSubMul,
    Op::Broadcast,
    Op::Activations,
    Op::SoftmaxCols,
    Op::SoftmaxRows,
    Op::Concat,
    Op::Select,
    Op::CrossEntropy,
    Op::BatchNorm,
    Op::FixedNorm,
];

pub fn op_case(op: Op, seed: u64) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let m = rng.random_range(1..5);
    let n = rng.random_range(2..5);
    let k = rng.random_range(1..4);
    let mut store = ParameterStore::new();
    let a = param(&mut store, &mut rng, "a", m, n);
    let b = param(&mut store, &mut rng, "b", m, n);
    let c = param(&mut store, &mut rng, "c", n, k);
    let col = param(&mut store, &mut rng, "col", m, 1);
    let row = param(&mut store, &mut rng, "row", 1, n);
    let s = param(&mut store, &mut rng, "s", 1, 1);
    let w_mn = rand_tensor(&mut rng, m, n, 1.5);
    let w_mk = rand_tensor(&mut rng, m, k, 1.5);
    let label = rng.random_range(0..m * n);
    let picks: Vec<usize> = (0..5).map(|_| rng.random_range(0..n)).collect();
    let w_pick = rand_tensor(&mut rng, m, picks.len(), 1.5);
    let stats = BatchStats {
        mean: (0..m).map(|_| rng.random_range(-1.0..1.0)).collect(),
        var: (0..m).map(|_| rng.random_range(0.1..2.0)).collect(),
    };

    let build = move |g: &mut Graph, st: &ParameterStore| -> Result<Var> {
        let (va, vb, vc) = (g.param(st, a), g.param(st, b), g.param(st, c));
        match op {
            Op::MatMul => {
                let y = g.matmul(va, vc)?;
                project(g, y, &w_mk)
            }
            Op::AddSubMul => {
                let x = g.add(va, vb)?;
                let y = g.sub(x, vb)?;
                let z = g.mul(y, vb)?;
                let z = g.scale(z, -0.7);
                project(g, z, &w_mn)
            }
            Op::Broadcast => {
                let (vcol, vrow, vs) = (g.param(st, col), g.param(st, row), g.param(st, s));
                let x = g.add_broadcast(va, vcol)?;
                let x = g.add_broadcast(x, vrow)?;
                let x = g.add_broadcast(x, vs)?;
                let x = g.mul(x, x)?;
                project(g, x, &w_mn)
            }
            Op::Activations => {
                let t = g.tanh(va);
                let s = g.sigmoid(vb);
                let y = g.mul(t, s)?;
                project(g, y, &w_mn)
            }
            Op::SoftmaxCols => {
                let y = g.softmax(va, 0)?;
                project(g, y, &w_mn)
            }
            Op::SoftmaxRows => {
                let y = g.softmax(va, 1)?;
                project(g, y, &w_mn)
            }
            Op::Concat => {
                let r = g.concat_rows(&[va, vb])?;
                let cc = g.concat_cols(&[va, vb])?;
                let rt = g.transpose(r);
                let prod = g.matmul(rt, r)?;
                let sl = g.slice_rows(cc, 0, m)?;
                let sl = g.tanh(sl);
                let p1 = g.sum(prod);
                let s2 = g.sum(sl);
                g.add(p1, s2)
            }
            Op::Select => {
                let y = g.select_cols(va, &picks)?;
                let y = g.mul(y, y)?;
                project(g, y, &w_pick)
            }
            Op::CrossEntropy => {
                let cols: Vec<Var> = (0..n).map(|j| g.select_cols(va, &[j])).collect::<Result<_>>()?;
                let column = g.concat_rows(&cols)?;
                let p = g.softmax(column, 0)?;
                let l = g.cross_entropy(p, label)?;
                let vs = g.param(st, s);
                g.matmul(l, vs)
            }
            Op::BatchNorm => {
                let gamma = g.param(st, col);
                let zero = g.constant(Tensor::zeros(m, 1));
                let (y, _) = g.batch_norm(va, gamma, zero, 1e-5)?;
                let y = g.mul(y, vb)?;
                project(g, y, &w_mn)
            }
            Op::FixedNorm => {
                let gamma = g.param(st, col);
                let beta = g.constant(Tensor::filled(m, 1, 0.3));
                let y = g.fixed_norm(va, gamma, beta, &stats, 1e-5)?;
                let y = g.tanh(y);
                project(g, y, &w_mn)
            }
        }
    };
    run(format!("op {op:?} seed {seed}"), &mut store, &mut rng, 64, build)
}

/// Embedding, GRU, top-down attention and fusion chained together.
pub fn encoders_case(seed: u64) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParameterStore::new();
    let (dw, dh, feat, k) = (3, 4, 3, rng.random_range(1..4));
    let emb = Embedding::new(&mut store, "emb", dw, 8, &mut rng).unwrap();
    let gru = Gru::new(&mut store, "gru", dw, dh, &mut rng).unwrap();
    let att = TopDownAttention::new(&mut store, "att", feat, dh, 3, &mut rng).unwrap();
    let fuse = Fuse::new(&mut store, "fuse", feat, dh, 4, &mut rng).unwrap();
    let ids = tokens(&mut rng, 8);
    let v = rand_tensor(&mut rng, feat, k, 1.0);
    let w = rand_tensor(&mut rng, 4, 1, 1.0);
    let build = |g: &mut Graph, st: &ParameterStore| {
        let x = emb.lookup(g, st, &ids).map_err(into_num)?;
        let q = gru.encode(g, st, x, ids.len(), 1).map_err(into_num)?;
        let vv = g.constant(v.clone());
        let (v_hat, _) = att.forward(g, st, vv, q).map_err(into_num)?;
        let h = fuse.forward(g, st, v_hat, q).map_err(into_num)?;
        project(g, h, &w)
    };
    run(format!("encoders seed {seed}"), &mut store, &mut rng, 6, build)
}

pub fn self_attention_case(seed: u64) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
    let mut store = ParameterStore::new();
    let emb = Embedding::new(&mut store, "emb", 3, 8, &mut rng).unwrap();
    let enc = SelfAttentiveQuestion::new(&mut store, "saq", 3, 4, &mut rng).unwrap();
    let (a, b) = (tokens(&mut rng, 8), tokens(&mut rng, 8));
    let b = if b.len() == a.len() { b } else { a.iter().rev().copied().collect() };
    let w = rand_tensor(&mut rng, 4, 2, 1.0);
    let build = |g: &mut Graph, st: &ParameterStore| {
        let ha = emb.lookup(g, st, &a).map_err(into_num)?;
        let hb = emb.lookup(g, st, &b).map_err(into_num)?;
        let q = enc.encode(g, st, &[ha, hb], a.len()).map_err(into_num)?;
        project(g, q, &w)
    };
    run(format!("self-attention seed {seed}"), &mut store, &mut rng, 6, build)
}

pub fn detector_case(seed: u64) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(200 + seed);
    let mut store = ParameterStore::new();
    let cfg = DetectorConfig {
        word_dim: 3,
        hidden: 4,
        attention_hidden: 3,
        feat_dim: 3,
        words: 9,
        entities: 5,
        relations: 3,
    };
    let det = Detector::new(&mut store, cfg, &mut rng).unwrap();
    let feats: Vec<Tensor> = (0..2).map(|_| rand_tensor(&mut rng, 3, 2, 1.0)).collect();
    let qs: Vec<Vec<usize>> = (0..2).map(|_| tokens(&mut rng, 9)).collect();
    let labels: Vec<PhraseLabels> = (0..2)
        .map(|_| PhraseLabels {
            subject: rng.random_range(0..5),
            relation: rng.random_range(0..3),
            object: rng.random_range(0..5),
        })
        .collect();
    let weights = LossWeights {
        subject: 1.0,
        relation: 0.5,
        object: 2.0,
    };
    let build = |g: &mut Graph, st: &ParameterStore| {
        let batch: Vec<DetectorInput> = feats
            .iter()
            .zip(&qs)
            .map(|(f, q)| DetectorInput { features: f, question: q })
            .collect();
        let out = det.forward(g, st, &batch).map_err(into_num)?;
        det.loss(g, &out, &labels, weights).map_err(into_num)
    };
    run(format!("detector seed {seed}"), &mut store, &mut rng, 6, build)
}

/// The whole memory network loss; even seeds use the MLP answer scorer,
/// odd seeds the linear one.
pub fn memnet_case(seed: u64, two_way: bool) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(300 + seed);
    let facts: Vec<FactTriplet> = (0..6)
        .map(|i| FactTriplet::new(format!("e{}", i % 4), ["is a", "near"][i % 2], format!("e{}", (i + 1) % 5)))
        .collect();
    let kb = KnowledgeBase::build(&facts, Normalizer::default());
    let mut words: Vec<String> = kb.entities().to_vec();
    words.extend(["is", "a", "near", "what"].map(String::from));
    let vocab = Vocab::from_tokens(&words);
    let tokens_of = FactTokens::new(&kb, &vocab);
    let mut store = ParameterStore::new();
    let cfg = MemNetConfig {
        word_dim: 3,
        mem_dim: 4,
        feat_dim: 3,
        attention_hidden: 3,
        words: vocab.len(),
        two_way_attention: two_way,
        scorer: if seed.is_multiple_of(2) { AnswerScorer::Mlp(3) } else { AnswerScorer::Linear },
    };
    let net = MemNet::new(&mut store, cfg, &mut rng).unwrap();
    let n_mem = 4;
    let samples: Vec<(Tensor, Vec<usize>, Vec<OrientedFact>, usize)> = (0..3)
        .map(|_| {
            let q = tokens(&mut rng, vocab.len());
            let slots = (0..n_mem)
                .map(|_| OrientedFact::from_code(rng.random_range(0..2 * kb.len())))
                .collect();
            (rand_tensor(&mut rng, 3, 2, 1.0), q, slots, rng.random_range(0..n_mem))
        })
        .collect();
    let build = |g: &mut Graph, st: &ParameterStore| {
        let batch: Vec<MemInput> = samples
            .iter()
            .map(|(f, q, s, _)| MemInput {
                features: f,
                question: q,
                slots: s,
            })
            .collect();
        let out = net.forward(g, st, &tokens_of, &batch, Mode::Train).map_err(into_num)?;
        let gt: Vec<Option<usize>> = samples.iter().map(|s| Some(s.3)).collect();
        MemNet::qa_loss(g, &out, &gt).map_err(into_num)
    };
    let label = format!("memnet two_way={two_way} seed {seed}");
    run(label, &mut store, &mut rng, 6, build)
}

/// Every op case and every composite for `seeds` seeds each.
pub fn suite(seeds: u64) -> Vec<Check> {
    let mut out = Vec::new();
    for seed in 0..seeds {
        out.extend(OPS.iter().map(|&op| op_case(op, 1000 + seed)));
        out.push(encoders_case(seed));
        out.push(self_attention_case(seed));
        out.push(detector_case(seed));
        out.push(memnet_case(seed, true));
        out.push(memnet_case(seed, false));
    }
    out
}
