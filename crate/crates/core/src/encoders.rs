//! Sequence and image encoders built on the differentiation tape.
//!
//! Matrices hold one sample per column. Recurrent encoders take a *packed*
//! input of shape `in × (len · batch)` whose columns are sample-major
//! (`column = b * len + t`), so sequences of equal length share every step.

use numcore::{Graph, Init, ParamId, ParameterStore, Tensor, Var};
use rand::Rng;

use crate::error::{Error, Result};

fn weight<R: Rng + ?Sized>(
    store: &mut ParameterStore,
    name: String,
    rows: usize,
    cols: usize,
    rng: &mut R,
) -> Result<ParamId> {
    Ok(store.register(name, rows, cols, Init::FanIn(cols), rng)?)
}

fn bias<R: Rng + ?Sized>(
    store: &mut ParameterStore,
    name: String,
    rows: usize,
    fan_in: usize,
    rng: &mut R,
) -> Result<ParamId> {
    Ok(store.register(name, rows, 1, Init::FanIn(fan_in), rng)?)
}

fn zero_bias<R: Rng + ?Sized>(store: &mut ParameterStore, name: String, rows: usize, rng: &mut R) -> Result<ParamId> {
    Ok(store.register(name, rows, 1, Init::Zeros, rng)?)
}

/// Column indices of step `t` in a packed sample-major layout.
pub fn step_columns(len: usize, batch: usize, t: usize) -> Vec<usize> {
    (0..batch).map(|b| b * len + t).collect()
}

/// Learned word embedding table, `dim × vocab`.
#[derive(Debug, Clone)]
pub struct Embedding {
    pub table: ParamId,
    pub dim: usize,
    pub vocab: usize,
}

impl Embedding {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParameterStore,
        name: &str,
        dim: usize,
        vocab: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let table = store.register(format!("{name}.table"), dim, vocab, Init::FanIn(vocab), rng)?;
        Ok(Embedding { table, dim, vocab })
    }

    /// Column `i` of the result is the embedding of `ids[i]`.
    pub fn lookup(&self, g: &mut Graph, store: &ParameterStore, ids: &[usize]) -> Result<Var> {
        if let Some(&id) = ids.iter().find(|&&id| id >= self.vocab) {
            return Err(Error::TokenOutOfRange { id, size: self.vocab });
        }
        let table = g.param(store, self.table);
        Ok(g.select_cols(table, ids)?)
    }
}

/// GRU with gates stacked `[z; r; n]`:
/// `z = σ(W_z x + U_z h + b_z)`, `r = σ(W_r x + U_r h + b_r)`,
/// `n = tanh(W_n x + U_n (r ∘ h) + b_n)`, `h' = z ∘ h + (1 − z) ∘ n`.
#[derive(Debug, Clone)]
pub struct Gru {
    pub wx: ParamId,
    pub b: ParamId,
    pub u_zr: ParamId,
    pub u_n: ParamId,
    pub input: usize,
    pub hidden: usize,
}

impl Gru {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParameterStore,
        name: &str,
        input: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Gru {
            wx: weight(store, format!("{name}.wx"), 3 * hidden, input, rng)?,
            b: zero_bias(store, format!("{name}.b"), 3 * hidden, rng)?,
            u_zr: weight(store, format!("{name}.u_zr"), 2 * hidden, hidden, rng)?,
            u_n: weight(store, format!("{name}.u_n"), hidden, hidden, rng)?,
            input,
            hidden,
        })
    }

    fn input_part(&self, g: &mut Graph, store: &ParameterStore, x: Var) -> Result<Var> {
        let (wx, b) = (g.param(store, self.wx), g.param(store, self.b));
        Ok(g.linear(wx, x, Some(b))?)
    }

    fn step_from(&self, g: &mut Graph, store: &ParameterStore, gx: Var, h: Var) -> Result<Var> {
        let n = self.hidden;
        let (u_zr, u_n) = (g.param(store, self.u_zr), g.param(store, self.u_n));
        let gx_zr = g.slice_rows(gx, 0, 2 * n)?;
        let gx_n = g.slice_rows(gx, 2 * n, n)?;
        let uh = g.matmul(u_zr, h)?;
        let pre = g.add(gx_zr, uh)?;
        let zr = g.sigmoid(pre);
        let z = g.slice_rows(zr, 0, n)?;
        let r = g.slice_rows(zr, n, n)?;
        let rh = g.mul(r, h)?;
        let un = g.matmul(u_n, rh)?;
        let pre_n = g.add(gx_n, un)?;
        let cand = g.tanh(pre_n);
        let diff = g.sub(h, cand)?;
        let zd = g.mul(z, diff)?;
        Ok(g.add(cand, zd)?)
    }

    /// One cell update from hidden state `h` (`hidden × batch`).
    pub fn step(&self, g: &mut Graph, store: &ParameterStore, x: Var, h: Var) -> Result<Var> {
        let gx = self.input_part(g, store, x)?;
        self.step_from(g, store, gx, h)
    }

    /// Final hidden state after a left-to-right pass from zero.
    pub fn encode(&self, g: &mut Graph, store: &ParameterStore, x: Var, len: usize, batch: usize) -> Result<Var> {
        let gx_all = self.input_part(g, store, x)?;
        let mut h = g.constant(Tensor::zeros(self.hidden, batch));
        for t in 0..len {
            let gx = if len == 1 {
                gx_all
            } else {
                g.select_cols(gx_all, &step_columns(len, batch, t))?
            };
            h = self.step_from(g, store, gx, h)?;
        }
        Ok(h)
    }
}

/// LSTM with gates stacked `[i; f; g; o]` and zero initial state.
#[derive(Debug, Clone)]
pub struct Lstm {
    pub wx: ParamId,
    pub b: ParamId,
    pub u: ParamId,
    pub hidden: usize,
}

impl Lstm {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParameterStore,
        name: &str,
        input: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Lstm {
            wx: weight(store, format!("{name}.wx"), 4 * hidden, input, rng)?,
            b: zero_bias(store, format!("{name}.b"), 4 * hidden, rng)?,
            u: weight(store, format!("{name}.u"), 4 * hidden, hidden, rng)?,
            hidden,
        })
    }

    /// Final hidden state; `reverse` reads each sequence right to left.
    pub fn encode(
        &self,
        g: &mut Graph,
        store: &ParameterStore,
        x: Var,
        len: usize,
        batch: usize,
        reverse: bool,
    ) -> Result<Var> {
        let n = self.hidden;
        let (wx, b, u) = (g.param(store, self.wx), g.param(store, self.b), g.param(store, self.u));
        let gx_all = g.linear(wx, x, Some(b))?;
        let mut h = g.constant(Tensor::zeros(n, batch));
        let mut c = h;
        for step in 0..len {
            let t = if reverse { len - 1 - step } else { step };
            let gx = if len == 1 {
                gx_all
            } else {
                g.select_cols(gx_all, &step_columns(len, batch, t))?
            };
            let uh = g.matmul(u, h)?;
            let pre = g.add(gx, uh)?;
            let if_pre = g.slice_rows(pre, 0, 2 * n)?;
            let if_gate = g.sigmoid(if_pre);
            let i = g.slice_rows(if_gate, 0, n)?;
            let f = g.slice_rows(if_gate, n, n)?;
            let g_pre = g.slice_rows(pre, 2 * n, n)?;
            let cand = g.tanh(g_pre);
            let o_pre = g.slice_rows(pre, 3 * n, n)?;
            let o = g.sigmoid(o_pre);
            let fc = g.mul(f, c)?;
            let ig = g.mul(i, cand)?;
            c = g.add(fc, ig)?;
            let tc = g.tanh(c);
            h = g.mul(o, tc)?;
        }
        Ok(h)
    }
}

/// Bidirectional LSTM whose output is `[forward final; backward final]`.
#[derive(Debug, Clone)]
pub struct BiLstm {
    pub forward: Lstm,
    pub backward: Lstm,
    pub out_dim: usize,
}

impl BiLstm {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParameterStore,
        name: &str,
        input: usize,
        out_dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if out_dim == 0 || !out_dim.is_multiple_of(2) {
            return Err(Error::config(format!("BiLSTM output dimension must be even, got {out_dim}")));
        }
        Ok(BiLstm {
            forward: Lstm::new(store, &format!("{name}.fwd"), input, out_dim / 2, rng)?,
            backward: Lstm::new(store, &format!("{name}.bwd"), input, out_dim / 2, rng)?,
            out_dim,
        })
    }

    pub fn encode(&self, g: &mut Graph, store: &ParameterStore, x: Var, len: usize, batch: usize) -> Result<Var> {
        let f = self.forward.encode(g, store, x, len, batch, false)?;
        let b = self.backward.encode(g, store, x, len, batch, true)?;
        Ok(g.concat_rows(&[f, b])?)
    }
}

/// `y = tanh(W x + b) ∘ σ(W' x + b')`.
#[derive(Debug, Clone)]
pub struct Gated {
    pub w: ParamId,
    pub b: ParamId,
    pub w_gate: ParamId,
    pub b_gate: ParamId,
}

impl Gated {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParameterStore,
        name: &str,
        input: usize,
        output: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Gated {
            w: weight(store, format!("{name}.w"), output, input, rng)?,
            b: bias(store, format!("{name}.b"), output, input, rng)?,
            w_gate: weight(store, format!("{name}.w_gate"), output, input, rng)?,
            b_gate: bias(store, format!("{name}.b_gate"), output, input, rng)?,
        })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParameterStore, x: Var) -> Result<Var> {
        let (w, b) = (g.param(store, self.w), g.param(store, self.b));
        let (wg, bg) = (g.param(store, self.w_gate), g.param(store, self.b_gate));
        let y = g.linear(w, x, Some(b))?;
        let y = g.tanh(y);
        let gate = g.linear(wg, x, Some(bg))?;
        let gate = g.sigmoid(gate);
        Ok(g.mul(y, gate)?)
    }
}

/// Question-conditioned attention over object features:
/// `a_i = W_a f_a([v_i; q])`, `â = softmax(a)`, `v̂ = Σ â_i v_i`.
#[derive(Debug, Clone)]
pub struct TopDownAttention {
    pub f_a: Gated,
    pub w_a: ParamId,
}

impl TopDownAttention {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParameterStore,
        name: &str,
        feat: usize,
        query: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(TopDownAttention {
            f_a: Gated::new(store, &format!("{name}.f_a"), feat + query, hidden, rng)?,
            w_a: weight(store, format!("{name}.w_a"), 1, hidden, rng)?,
        })
    }

    /// `v` is `feat × K`, `q` is `query × 1`. Returns `(v̂, â)` with `v̂`
    /// a column and `â` a `1 × K` row.
    pub fn forward(&self, g: &mut Graph, store: &ParameterStore, v: Var, q: Var) -> Result<(Var, Var)> {
        let k = g.shape(v).1;
        let qs = g.repeat_cols(q, k)?;
        let joint = g.concat_rows(&[v, qs])?;
        let f = self.f_a.forward(g, store, joint)?;
        let w_a = g.param(store, self.w_a);
        let logits = g.matmul(w_a, f)?;
        let att = g.softmax(logits, 1)?;
        let att_col = g.transpose(att);
        let v_hat = g.matmul(v, att_col)?;
        Ok((v_hat, att))
    }
}

/// Column-normalized self-attention `â = softmax(Hᵀ H)` and the attended
/// sequence `H â` (each column a convex combination of columns of `H`).
pub fn self_attend(g: &mut Graph, h: Var) -> Result<(Var, Var)> {
    let ht = g.transpose(h);
    let scores = g.matmul(ht, h)?;
    let att = g.softmax(scores, 0)?;
    let attended = g.matmul(h, att)?;
    Ok((attended, att))
}

/// Self-attentive question encoder: BiLSTM over `[H â; H]`.
#[derive(Debug, Clone)]
pub struct SelfAttentiveQuestion {
    pub rnn: BiLstm,
    pub word_dim: usize,
}

impl SelfAttentiveQuestion {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParameterStore,
        name: &str,
        word_dim: usize,
        out_dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(SelfAttentiveQuestion {
            rnn: BiLstm::new(store, &format!("{name}.rnn"), 2 * word_dim, out_dim, rng)?,
            word_dim,
        })
    }

    /// The attention-augmented input `[H â; H]` for one question.
    pub fn augment(&self, g: &mut Graph, h: Var) -> Result<Var> {
        let (attended, _) = self_attend(g, h)?;
        Ok(g.concat_rows(&[attended, h])?)
    }

    /// Encodes questions of equal length `len`; each entry of `hs` is
    /// `word_dim × len`. Returns `out_dim × hs.len()`.
    pub fn encode(&self, g: &mut Graph, store: &ParameterStore, hs: &[Var], len: usize) -> Result<Var> {
        let parts = hs.iter().map(|&h| self.augment(g, h)).collect::<Result<Vec<_>>>()?;
        let packed = if parts.len() == 1 { parts[0] } else { g.concat_cols(&parts)? };
        self.rnn.encode(g, store, packed, len, hs.len())
    }
}

/// `h = f_v(v̂) ∘ f_q(q)`.
#[derive(Debug, Clone)]
pub struct Fuse {
    pub f_v: Gated,
    pub f_q: Gated,
}

impl Fuse {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParameterStore,
        name: &str,
        visual: usize,
        query: usize,
        out: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Fuse {
            f_v: Gated::new(store, &format!("{name}.f_v"), visual, out, rng)?,
            f_q: Gated::new(store, &format!("{name}.f_q"), query, out, rng)?,
        })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParameterStore, v_hat: Var, q: Var) -> Result<Var> {
        let a = self.f_v.forward(g, store, v_hat)?;
        let b = self.f_q.forward(g, store, q)?;
        Ok(g.mul(a, b)?)
    }
}

/// Groups sequence indices by length, preserving input order within a
/// group. Groups are ordered by length.
pub fn group_by_length(lens: impl IntoIterator<Item = usize>) -> Vec<(usize, Vec<usize>)> {
    let mut groups: std::collections::BTreeMap<usize, Vec<usize>> = Default::default();
    for (i, l) in lens.into_iter().enumerate() {
        groups.entry(l).or_default().push(i);
    }
    groups.into_iter().collect()
}

/// Encodes token sequences of arbitrary lengths with `embed` + `rnn`,
/// returning an `out × n` matrix whose column `i` encodes `seqs[i]`.
pub fn encode_sequences<F>(
    g: &mut Graph,
    store: &ParameterStore,
    embed: &Embedding,
    seqs: &[&[usize]],
    mut rnn: F,
) -> Result<Var>
where
    F: FnMut(&mut Graph, &ParameterStore, Var, usize, usize) -> Result<Var>,
{
    if seqs.iter().any(|s| s.is_empty()) {
        return Err(Error::data("cannot encode an empty token sequence"));
    }
    let groups = group_by_length(seqs.iter().map(|s| s.len()));
    let mut blocks = Vec::with_capacity(groups.len());
    let mut order = Vec::with_capacity(seqs.len());
    for (len, members) in &groups {
        let ids: Vec<usize> = members.iter().flat_map(|&i| seqs[i].iter().copied()).collect();
        let x = embed.lookup(g, store, &ids)?;
        blocks.push(rnn(g, store, x, *len, members.len())?);
        order.extend(members.iter().copied());
    }
    let stacked = if blocks.len() == 1 { blocks[0] } else { g.concat_cols(&blocks)? };
    if order.iter().enumerate().all(|(pos, &i)| pos == i) {
        return Ok(stacked);
    }
    let mut inverse = vec![0; order.len()];
    for (pos, &i) in order.iter().enumerate() {
        inverse[i] = pos;
    }
    Ok(g.select_cols(stacked, &inverse)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sig(x: f64) -> f64 {
        1.0 / (1.0 + (-x).exp())
    }

    fn mv(w: &Tensor, x: &[f64]) -> Vec<f64> {
        (0..w.rows())
            .map(|i| (0..w.cols()).map(|j| w.get(i, j) * x[j]).sum())
            .collect()
    }

    fn col(t: &Tensor, c: usize) -> Vec<f64> {
        t.column_at(c)
    }

    fn randomize(store: &mut ParameterStore, rng: &mut ChaCha8Rng) {
        for id in store.ids().collect::<Vec<_>>() {
            let (r, c) = store.value(id).shape();
            let data = (0..r * c).map(|_| rng.random_range(-0.8..0.8)).collect();
            store.set_value(id, Tensor::new(r, c, data).unwrap()).unwrap();
        }
    }

    fn zero_all(store: &mut ParameterStore) {
        for id in store.ids().collect::<Vec<_>>() {
            let (r, c) = store.value(id).shape();
            store.set_value(id, Tensor::zeros(r, c)).unwrap();
        }
    }

    fn random_seq(rng: &mut ChaCha8Rng, d: usize, len: usize) -> Tensor {
        Tensor::new(d, len, (0..d * len).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    fn gru_oracle(store: &ParameterStore, gru: &Gru, x: &Tensor) -> Vec<f64> {
        let n = gru.hidden;
        let (wx, b) = (store.value(gru.wx), store.value(gru.b));
        let (u_zr, u_n) = (store.value(gru.u_zr), store.value(gru.u_n));
        let mut h = vec![0.0; n];
        for t in 0..x.cols() {
            let gx: Vec<f64> = mv(wx, &col(x, t)).iter().zip(b.data()).map(|(a, b)| a + b).collect();
            let uh = mv(u_zr, &h);
            let z: Vec<f64> = (0..n).map(|i| sig(gx[i] + uh[i])).collect();
            let r: Vec<f64> = (0..n).map(|i| sig(gx[n + i] + uh[n + i])).collect();
            let rh: Vec<f64> = (0..n).map(|i| r[i] * h[i]).collect();
            let un = mv(u_n, &rh);
            let cand: Vec<f64> = (0..n).map(|i| (gx[2 * n + i] + un[i]).tanh()).collect();
            h = (0..n).map(|i| z[i] * h[i] + (1.0 - z[i]) * cand[i]).collect();
        }
        h
    }

    fn lstm_oracle(store: &ParameterStore, lstm: &Lstm, x: &Tensor, reverse: bool) -> Vec<f64> {
        let n = lstm.hidden;
        let (wx, b, u) = (store.value(lstm.wx), store.value(lstm.b), store.value(lstm.u));
        let (mut h, mut c) = (vec![0.0; n], vec![0.0; n]);
        let steps: Vec<usize> = if reverse { (0..x.cols()).rev().collect() } else { (0..x.cols()).collect() };
        for t in steps {
            let wxv = mv(wx, &col(x, t));
            let uh = mv(u, &h);
            let pre: Vec<f64> = (0..4 * n).map(|i| wxv[i] + uh[i] + b.data()[i]).collect();
            for k in 0..n {
                let (i, f) = (sig(pre[k]), sig(pre[n + k]));
                let gg = pre[2 * n + k].tanh();
                let o = sig(pre[3 * n + k]);
                c[k] = f * c[k] + i * gg;
                h[k] = o * c[k].tanh();
            }
        }
        h
    }

    fn max_diff(a: &[f64], b: &[f64]) -> f64 {
        assert_eq!(a.len(), b.len());
        a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
    }

    #[test]
    fn embedding_lookup() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParameterStore::new();
        let emb = Embedding::new(&mut store, "emb", 4, 6, &mut rng).unwrap();
        let mut g = Graph::new();
        let x = emb.lookup(&mut g, &store, &[3, 5, 3]).unwrap();
        let t = g.value(x).clone();
        assert_eq!(t.shape(), (4, 3));
        assert_eq!(t.column_at(0), t.column_at(2));
        let one = emb.lookup(&mut g, &store, &[2]).unwrap();
        assert_eq!(g.value(one).shape(), (4, 1));
        assert!(matches!(
            emb.lookup(&mut g, &store, &[6]),
            Err(Error::TokenOutOfRange { id: 6, size: 6 })
        ));

        let s = g.sum(x);
        g.backward_into(s, &mut store).unwrap();
        let grad = store.get(emb.table).grad.clone().unwrap();
        for r in 0..4 {
            assert_eq!(grad.get(r, 0), 0.0);
            assert_eq!(grad.get(r, 3), 2.0);
        }
    }

    #[test]
    fn gru_zero_weights_give_zero_state() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParameterStore::new();
        let gru = Gru::new(&mut store, "gru", 3, 4, &mut rng).unwrap();
        zero_all(&mut store);
        let mut g = Graph::new();
        let x = g.constant(random_seq(&mut rng, 3, 5));
        let h = gru.encode(&mut g, &store, x, 5, 1).unwrap();
        assert_eq!(g.value(h), &Tensor::zeros(4, 1));

        // zero cell from a nonzero state halves it
        let h0 = g.constant(Tensor::column(vec![1.0, -2.0, 0.5, 4.0]).unwrap());
        let x1 = g.constant(random_seq(&mut rng, 3, 1));
        let h1 = gru.step(&mut g, &store, x1, h0).unwrap();
        assert_eq!(g.value(h1).data(), &[0.5, -1.0, 0.25, 2.0]);
    }

    #[test]
    fn gru_matches_oracle_and_single_step() {
        for seed in 0..20 {
            let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
            let mut store = ParameterStore::new();
            let (d, n) = (rng.random_range(1..5), rng.random_range(1..5));
            let len = rng.random_range(1..6);
            let gru = Gru::new(&mut store, "gru", d, n, &mut rng).unwrap();
            randomize(&mut store, &mut rng);
            let xt = random_seq(&mut rng, d, len);
            let mut g = Graph::new();
            let x = g.constant(xt.clone());
            let h = gru.encode(&mut g, &store, x, len, 1).unwrap();
            let want = gru_oracle(&store, &gru, &xt);
            assert!(max_diff(g.value(h).data(), &want) <= 1e-12);

            if len == 1 {
                let zero = g.constant(Tensor::zeros(n, 1));
                let s = gru.step(&mut g, &store, x, zero).unwrap();
                assert_eq!(g.value(s), g.value(h));
            }
        }
    }

    #[test]
    fn packed_batches_match_individual_runs() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut store = ParameterStore::new();
        let gru = Gru::new(&mut store, "gru", 3, 2, &mut rng).unwrap();
        let seqs: Vec<Tensor> = (0..3).map(|_| random_seq(&mut rng, 3, 4)).collect();
        let mut g = Graph::new();
        let parts: Vec<Var> = seqs.iter().map(|s| g.constant(s.clone())).collect();
        let packed = g.concat_cols(&parts).unwrap();
        let all = gru.encode(&mut g, &store, packed, 4, 3).unwrap();
        for (b, s) in seqs.iter().enumerate() {
            let want = gru_oracle(&store, &gru, s);
            assert!(max_diff(&g.value(all).column_at(b), &want) <= 1e-12);
        }
    }

    #[test]
    fn bilstm_zero_weights_and_odd_dim() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParameterStore::new();
        assert!(matches!(
            BiLstm::new(&mut store, "bad", 3, 5, &mut rng),
            Err(Error::Config(_))
        ));
        let mut store = ParameterStore::new();
        let rnn = BiLstm::new(&mut store, "rnn", 3, 6, &mut rng).unwrap();
        zero_all(&mut store);
        let mut g = Graph::new();
        let x = g.constant(random_seq(&mut rng, 3, 4));
        let h = rnn.encode(&mut g, &store, x, 4, 1).unwrap();
        assert_eq!(g.value(h), &Tensor::zeros(6, 1));
    }

    #[test]
    fn bilstm_palindrome_with_tied_weights() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut store = ParameterStore::new();
        let rnn = BiLstm::new(&mut store, "rnn", 2, 6, &mut rng).unwrap();
        randomize(&mut store, &mut rng);
        for (f, b) in [
            (rnn.forward.wx, rnn.backward.wx),
            (rnn.forward.u, rnn.backward.u),
            (rnn.forward.b, rnn.backward.b),
        ] {
            let v = store.value(f).clone();
            store.set_value(b, v).unwrap();
        }
        let a = random_seq(&mut rng, 2, 1);
        let c = random_seq(&mut rng, 2, 1);
        let mut g = Graph::new();
        let (va, vc) = (g.constant(a), g.constant(c));
        let x = g.concat_cols(&[va, vc, va]).unwrap();
        let h = rnn.encode(&mut g, &store, x, 3, 1).unwrap();
        let out = g.value(h).data().to_vec();
        assert_eq!(out[..3], out[3..]);
    }

    #[test]
    fn bilstm_matches_oracle() {
        for seed in 0..20 {
            let mut rng = ChaCha8Rng::seed_from_u64(200 + seed);
            let mut store = ParameterStore::new();
            let d = rng.random_range(1..5);
            let half = rng.random_range(1..4);
            let len = rng.random_range(1..6);
            let rnn = BiLstm::new(&mut store, "rnn", d, 2 * half, &mut rng).unwrap();
            randomize(&mut store, &mut rng);
            let xt = random_seq(&mut rng, d, len);
            let mut g = Graph::new();
            let x = g.constant(xt.clone());
            let h = rnn.encode(&mut g, &store, x, len, 1).unwrap();
            let mut want = lstm_oracle(&store, &rnn.forward, &xt, false);
            want.extend(lstm_oracle(&store, &rnn.backward, &xt, true));
            assert!(max_diff(g.value(h).data(), &want) <= 1e-12);
        }
    }

    #[test]
    fn gated_layer_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut store = ParameterStore::new();
        let layer = Gated::new(&mut store, "gate", 1, 1, &mut rng).unwrap();
        zero_all(&mut store);
        let mut g = Graph::new();
        let x = g.constant(Tensor::scalar(1.0));
        let y = layer.forward(&mut g, &store, x).unwrap();
        assert_eq!(g.value(y).item().unwrap(), 0.0);

        store.set_value(layer.w, Tensor::scalar(1.0)).unwrap();
        let mut g = Graph::new();
        let x = g.constant(Tensor::scalar(1.0));
        let y = layer.forward(&mut g, &store, x).unwrap();
        let got = g.value(y).item().unwrap();
        assert!((got - 0.380797077977882).abs() < 1e-12, "{got}");

        store.set_value(layer.b_gate, Tensor::scalar(20.0)).unwrap();
        let mut g = Graph::new();
        let x = g.constant(Tensor::scalar(1.0));
        let y = layer.forward(&mut g, &store, x).unwrap();
        assert!((g.value(y).item().unwrap() - 1f64.tanh()).abs() < 1e-6);
    }

    #[test]
    fn top_down_attention_properties() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut store = ParameterStore::new();
        let (f, dq, k) = (5, 3, 4);
        let att = TopDownAttention::new(&mut store, "tda", f, dq, 6, &mut rng).unwrap();
        randomize(&mut store, &mut rng);

        let shared = random_seq(&mut rng, f, 1);
        let mut same = Tensor::zeros(f, k);
        for c in 0..k {
            for r in 0..f {
                same.set(r, c, shared.get(r, 0));
            }
        }
        let mut g = Graph::new();
        let v = g.constant(same);
        let q = g.constant(random_seq(&mut rng, dq, 1));
        let (v_hat, _) = att.forward(&mut g, &store, v, q).unwrap();
        assert!(g.value(v_hat).max_abs_diff(&shared) <= 1e-12);

        let single = random_seq(&mut rng, f, 1);
        let v1 = g.constant(single.clone());
        let (v_hat, a) = att.forward(&mut g, &store, v1, q).unwrap();
        assert_eq!(g.value(a).data(), &[1.0]);
        assert!(g.value(v_hat).max_abs_diff(&single) <= 1e-15);

        for _ in 0..20 {
            let vt = random_seq(&mut rng, f, k);
            let v = g.constant(vt.clone());
            let (v_hat, a) = att.forward(&mut g, &store, v, q).unwrap();
            let a = g.value(a);
            assert!((a.sum() - 1.0).abs() <= 1e-9 && a.data().iter().all(|&x| x >= 0.0));
            for r in 0..f {
                let row: Vec<f64> = (0..k).map(|c| vt.get(r, c)).collect();
                let lo = row.iter().cloned().fold(f64::INFINITY, f64::min);
                let hi = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let x = g.value(v_hat).get(r, 0);
                assert!(x >= lo - 1e-12 && x <= hi + 1e-12);
            }
        }
    }

    #[test]
    fn self_attention_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut g = Graph::new();
        let one = random_seq(&mut rng, 3, 1);
        let h = g.constant(one.clone());
        let (attended, att) = self_attend(&mut g, h).unwrap();
        assert_eq!(g.value(att).data(), &[1.0]);
        assert_eq!(g.value(attended), &one);

        let c = random_seq(&mut rng, 3, 1);
        let cv = g.constant(c);
        let rep = g.repeat_cols(cv, 4).unwrap();
        let (_, att) = self_attend(&mut g, rep).unwrap();
        assert!(g.value(att).data().iter().all(|&x| (x - 0.25).abs() < 1e-15));
    }

    #[test]
    fn self_attentive_question_matches_oracle() {
        for seed in 0..10 {
            let mut rng = ChaCha8Rng::seed_from_u64(300 + seed);
            let mut store = ParameterStore::new();
            let (d, len) = (rng.random_range(1..4), rng.random_range(1..5));
            let enc = SelfAttentiveQuestion::new(&mut store, "saq", d, 4, &mut rng).unwrap();
            randomize(&mut store, &mut rng);
            let ht = random_seq(&mut rng, d, len);

            // straight-line: scores, column softmax, attended, stacked input
            let mut att = Tensor::zeros(len, len);
            for j in 0..len {
                let s: Vec<f64> = (0..len)
                    .map(|i| (0..d).map(|r| ht.get(r, i) * ht.get(r, j)).sum())
                    .collect();
                let m = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = s.iter().map(|x| (x - m).exp()).sum();
                for (i, si) in s.iter().enumerate() {
                    att.set(i, j, (si - m).exp() / z);
                }
            }
            let mut input = Tensor::zeros(2 * d, len);
            for j in 0..len {
                for r in 0..d {
                    input.set(r, j, (0..len).map(|i| ht.get(r, i) * att.get(i, j)).sum());
                    input.set(d + r, j, ht.get(r, j));
                }
            }
            let mut want = lstm_oracle(&store, &enc.rnn.forward, &input, false);
            want.extend(lstm_oracle(&store, &enc.rnn.backward, &input, true));

            let mut g = Graph::new();
            let h = g.constant(ht.clone());
            let q = enc.encode(&mut g, &store, &[h], len).unwrap();
            assert!(max_diff(g.value(q).data(), &want) <= 1e-12);
        }
    }

    #[test]
    fn fuse_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut store = ParameterStore::new();
        let fuse = Fuse::new(&mut store, "fuse", 3, 3, 4, &mut rng).unwrap();
        randomize(&mut store, &mut rng);
        let (vt, qt) = (random_seq(&mut rng, 3, 1), random_seq(&mut rng, 3, 1));

        let mut g = Graph::new();
        let (v, q) = (g.constant(vt.clone()), g.constant(qt.clone()));
        let h = fuse.forward(&mut g, &store, v, q).unwrap();
        let a = fuse.f_v.forward(&mut g, &store, v).unwrap();
        let b = fuse.f_q.forward(&mut g, &store, q).unwrap();
        let ab = g.mul(a, b).unwrap();
        assert_eq!(g.value(h), g.value(ab));

        let swapped = Fuse {
            f_v: fuse.f_q.clone(),
            f_q: fuse.f_v.clone(),
        };
        let hs = swapped.forward(&mut g, &store, q, v).unwrap();
        assert_eq!(g.value(hs), g.value(h));

        for id in [fuse.f_v.w, fuse.f_v.b, fuse.f_v.w_gate, fuse.f_v.b_gate] {
            let (r, c) = store.value(id).shape();
            store.set_value(id, Tensor::zeros(r, c)).unwrap();
        }
        let mut g = Graph::new();
        let (v, q) = (g.constant(vt), g.constant(qt));
        let h = fuse.forward(&mut g, &store, v, q).unwrap();
        assert_eq!(g.value(h), &Tensor::zeros(4, 1));
    }

    #[test]
    fn mixed_length_sequences_keep_order() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let mut store = ParameterStore::new();
        let emb = Embedding::new(&mut store, "emb", 3, 8, &mut rng).unwrap();
        let gru = Gru::new(&mut store, "gru", 3, 2, &mut rng).unwrap();
        let seqs: Vec<Vec<usize>> = vec![vec![2, 3, 4], vec![5], vec![6, 7, 2], vec![1, 1]];
        let refs: Vec<&[usize]> = seqs.iter().map(Vec::as_slice).collect();
        let mut g = Graph::new();
        let all = encode_sequences(&mut g, &store, &emb, &refs, |g, s, x, l, b| gru.encode(g, s, x, l, b)).unwrap();
        for (i, s) in seqs.iter().enumerate() {
            let x = emb.lookup(&mut g, &store, s).unwrap();
            let one = gru.encode(&mut g, &store, x, s.len(), 1).unwrap();
            assert!(max_diff(&g.value(all).column_at(i), g.value(one).data()) <= 1e-15);
        }
    }
}
