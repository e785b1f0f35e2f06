use numcore::gradcheck::check_params;
use numcore::{Graph, Init, ParamId, ParameterStore, Result, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const EPS: f64 = 1e-5;
const TOL: f64 = 1e-4;

fn random_tensor(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor {
    Tensor::new(r, c, (0..r * c).map(|_| rng.random_range(-1.5..1.5)).collect()).unwrap()
}

fn param(store: &mut ParameterStore, rng: &mut ChaCha8Rng, name: &str, r: usize, c: usize) -> ParamId {
    let t = random_tensor(rng, r, c);
    store.register(name, r, c, Init::Value(t), rng).unwrap()
}

/// Contracts an output with fixed random weights so every entry matters.
fn project(g: &mut Graph, y: Var, weights: &Tensor) -> Result<Var> {
    let w = g.constant(weights.clone());
    let m = g.mul(y, w)?;
    Ok(g.sum(m))
}

#[derive(Clone, Copy, Debug)]
enum Case {
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

const CASES: [Case; 11] = [
    Case::MatMul,
    Case::AddSubMul,
    Case::Broadcast,
    Case::Activations,
    Case::SoftmaxCols,
    Case::SoftmaxRows,
    Case::Concat,
    Case::Select,
    Case::CrossEntropy,
    Case::BatchNorm,
    Case::FixedNorm,
];

fn run_case(case: Case, seed: u64) -> f64 {
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
    let w_mn = random_tensor(&mut rng, m, n);
    let w_mk = random_tensor(&mut rng, m, k);
    let label = rng.random_range(0..m * n);
    let picks: Vec<usize> = (0..5).map(|_| rng.random_range(0..n)).collect();
    let w_pick = random_tensor(&mut rng, m, picks.len());
    let stats = numcore::BatchStats {
        mean: (0..m).map(|_| rng.random_range(-1.0..1.0)).collect(),
        var: (0..m).map(|_| rng.random_range(0.1..2.0)).collect(),
    };

    let build = move |g: &mut Graph, st: &ParameterStore| -> Result<Var> {
        let (va, vb, vc) = (g.param(st, a), g.param(st, b), g.param(st, c));
        match case {
            Case::MatMul => {
                let y = g.matmul(va, vc)?;
                project(g, y, &w_mk)
            }
            Case::AddSubMul => {
                let x = g.add(va, vb)?;
                let y = g.sub(x, vb)?;
                let z = g.mul(y, vb)?;
                let z = g.scale(z, -0.7);
                project(g, z, &w_mn)
            }
            Case::Broadcast => {
                let (vcol, vrow, vs) = (g.param(st, col), g.param(st, row), g.param(st, s));
                let x = g.add_broadcast(va, vcol)?;
                let x = g.add_broadcast(x, vrow)?;
                let x = g.add_broadcast(x, vs)?;
                let x = g.mul(x, x)?;
                project(g, x, &w_mn)
            }
            Case::Activations => {
                let t = g.tanh(va);
                let s = g.sigmoid(vb);
                let y = g.mul(t, s)?;
                project(g, y, &w_mn)
            }
            Case::SoftmaxCols => {
                let y = g.softmax(va, 0)?;
                project(g, y, &w_mn)
            }
            Case::SoftmaxRows => {
                let y = g.softmax(va, 1)?;
                project(g, y, &w_mn)
            }
            Case::Concat => {
                let r = g.concat_rows(&[va, vb])?;
                let cc = g.concat_cols(&[va, vb])?;
                let rt = g.transpose(r);
                let prod = g.matmul(rt, r)?; // n x n
                let sl = g.slice_rows(cc, 0, m)?;
                let sl = g.tanh(sl);
                let p1 = g.sum(prod);
                let s2 = g.sum(sl);
                g.add(p1, s2)
            }
            Case::Select => {
                let y = g.select_cols(va, &picks)?;
                let y = g.mul(y, y)?;
                project(g, y, &w_pick)
            }
            Case::CrossEntropy => {
                // softmax over all m*n entries laid out as one column
                let cols: Vec<Var> = (0..n)
                    .map(|j| g.select_cols(va, &[j]))
                    .collect::<Result<_>>()?;
                let column = g.concat_rows(&cols)?;
                let p = g.softmax(column, 0)?;
                let l = g.cross_entropy(p, label)?;
                let vs = g.param(st, s);
                g.matmul(l, vs)
            }
            Case::BatchNorm => {
                let gamma = g.param(st, col);
                let zero = g.constant(Tensor::zeros(m, 1));
                let (y, _) = g.batch_norm(va, gamma, zero, 1e-5)?;
                let y = g.mul(y, vb)?;
                project(g, y, &w_mn)
            }
            Case::FixedNorm => {
                let gamma = g.param(st, col);
                let beta = g.constant(Tensor::filled(m, 1, 0.3));
                let y = g.fixed_norm(va, gamma, beta, &stats, 1e-5)?;
                let y = g.tanh(y);
                project(g, y, &w_mn)
            }
        }
    };
    let report = check_params(&mut store, build, EPS, 64, &mut rng).unwrap();
    assert!(report.checked > 0);
    report.max_relative_error
}

#[test]
fn every_operation_matches_finite_differences() {
    // 11 cases x 10 seeds = 110 random instances.
    let mut worst = 0.0f64;
    for seed in 0..10 {
        for case in CASES {
            let err = run_case(case, 1000 + seed);
            assert!(err <= TOL, "{case:?} seed {seed}: relative error {err:e}");
            worst = worst.max(err);
        }
    }
    eprintln!("worst relative error over all op instances: {worst:e}");
}

#[test]
fn unused_parameters_get_zero_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut store = ParameterStore::new();
    let a = param(&mut store, &mut rng, "a", 2, 2);
    let unused = param(&mut store, &mut rng, "unused", 2, 2);
    let mut g = Graph::new();
    let va = g.param(&store, a);
    let _ = g.param(&store, unused);
    let l = g.sum(va);
    g.backward_into(l, &mut store).unwrap();
    assert_eq!(store.get(unused).grad.as_ref().unwrap(), &Tensor::zeros(2, 2));
    assert_eq!(store.get(a).grad.as_ref().unwrap(), &Tensor::filled(2, 2, 1.0));
}
