//! Randomized central-difference checks for every differentiable tape op.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use casgraph::autodiff::{AutodiffError, Graph, ParamSet, Tensor, Var};
use casgraph::seed;

const PROBES: usize = 1000;
const H: f64 = 1e-5;
const TOL: f64 = 1e-4;

type Build = dyn Fn(&mut Graph, &[Var]) -> Result<Var, AutodiffError>;

fn random_tensor(rng: &mut ChaCha8Rng, rows: usize, cols: usize, lo: f64, hi: f64) -> Tensor {
    Tensor::from_vec(rows, cols, (0..rows * cols).map(|_| rng.random_range(lo..hi)).collect())
}

/// `Σ w ⊙ op(inputs)` with fixed random weights, so every output entry
/// contributes to the probed gradient.
fn scalarize(inputs: &ParamSet, build: &Build, weights: &mut Option<Tensor>, rng: &mut ChaCha8Rng) -> (Graph, Var) {
    let mut tape = Graph::new();
    let vars: Vec<Var> = inputs.ids().map(|id| tape.param(inputs, id)).collect();
    let out = build(&mut tape, &vars).expect("op applies");
    let [r, c] = tape.value(out).shape();
    let w = weights.get_or_insert_with(|| random_tensor(rng, r, c, -1.0, 1.0)).clone();
    let wv = tape.constant(w);
    let prod = tape.mul(out, wv).expect("same shape");
    let loss = tape.sum(prod);
    (tape, loss)
}

/// Runs `PROBES` probes, each on fresh random inputs from `make`, and
/// returns the worst relative error.
fn check(name: &str, make: &dyn Fn(&mut ChaCha8Rng) -> Vec<Tensor>, build: &Build) {
    let mut rng = seed::rng(seed::fnv1a(name));
    let mut worst = 0.0f64;
    for _ in 0..PROBES {
        let mut inputs = ParamSet::new();
        for (k, t) in make(&mut rng).into_iter().enumerate() {
            inputs.add(format!("x{k}"), t);
        }
        let mut weights = None;
        let (tape, loss) = scalarize(&inputs, build, &mut weights, &mut rng);
        tape.backward(loss, &mut inputs).unwrap();

        let ids: Vec<_> = inputs.ids().collect();
        let id = ids[rng.random_range(0..ids.len())];
        let e = rng.random_range(0..inputs.value(id).len());
        let analytic = inputs.grad(id).data()[e];
        let orig = inputs.value(id).data()[e];
        let mut eval = |v: f64, inputs: &mut ParamSet| {
            inputs.value_mut(id).data_mut()[e] = v;
            let (t, l) = scalarize(inputs, build, &mut weights, &mut rng);
            t.value(l).item()
        };
        let up = eval(orig + H, &mut inputs);
        let down = eval(orig - H, &mut inputs);
        let numeric = (up - down) / (2.0 * H);
        let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6);
        worst = worst.max(rel);
    }
    assert!(worst < TOL, "{name}: worst relative error {worst:e}");
}

fn shape(rng: &mut ChaCha8Rng) -> (usize, usize) {
    (rng.random_range(1..5), rng.random_range(1..5))
}

fn unary(name: &str, lo: f64, hi: f64, op: fn(&mut Graph, Var) -> Var) {
    check(
        name,
        &|rng| {
            let (r, c) = shape(rng);
            vec![random_tensor(rng, r, c, lo, hi)]
        },
        &move |t, v| Ok(op(t, v[0])),
    );
}

fn binary(name: &str, op: fn(&mut Graph, Var, Var) -> Result<Var, AutodiffError>) {
    check(
        name,
        &|rng| {
            let (r, c) = shape(rng);
            vec![random_tensor(rng, r, c, -2.0, 2.0), random_tensor(rng, r, c, -2.0, 2.0)]
        },
        &move |t, v| op(t, v[0], v[1]),
    );
}

#[test]
fn elementwise_unary_ops() {
    unary("sigmoid", -4.0, 4.0, Graph::sigmoid);
    unary("tanh", -3.0, 3.0, Graph::tanh);
    unary("exp", -2.0, 2.0, Graph::exp);
    unary("log", 0.2, 5.0, Graph::log);
    unary("softplus", -6.0, 6.0, Graph::softplus);
    unary("transpose", -2.0, 2.0, Graph::transpose);
    unary("scale", -2.0, 2.0, |t, v| t.scale(v, -1.7));
    unary("add_scalar", -2.0, 2.0, |t, v| t.add_scalar(v, 0.3));
    unary("sum", -2.0, 2.0, Graph::sum);
    unary("mean", -2.0, 2.0, Graph::mean);
}

#[test]
fn elementwise_binary_ops() {
    binary("add", Graph::add);
    binary("sub", Graph::sub);
    binary("mul", Graph::mul);
    binary("cosine_similarity", Graph::cosine_similarity);
}

#[test]
fn matmul_and_broadcast() {
    check(
        "matmul",
        &|rng| {
            let (n, k, m) = (rng.random_range(1..5), rng.random_range(1..5), rng.random_range(1..5));
            vec![random_tensor(rng, n, k, -2.0, 2.0), random_tensor(rng, k, m, -2.0, 2.0)]
        },
        &|t, v| t.matmul(v[0], v[1]),
    );
    check(
        "add_row",
        &|rng| {
            let (r, c) = shape(rng);
            vec![random_tensor(rng, r, c, -2.0, 2.0), random_tensor(rng, 1, c, -2.0, 2.0)]
        },
        &|t, v| t.add_row(v[0], v[1]),
    );
}

#[test]
fn concat_and_slice() {
    check(
        "concat_cols",
        &|rng| {
            let r = rng.random_range(1..5);
            let (a, b) = (rng.random_range(1..4), rng.random_range(1..4));
            vec![random_tensor(rng, r, a, -2.0, 2.0), random_tensor(rng, r, b, -2.0, 2.0)]
        },
        &|t, v| t.concat_cols(v),
    );
    check(
        "concat_rows",
        &|rng| {
            let c = rng.random_range(1..5);
            let (a, b) = (rng.random_range(1..4), rng.random_range(1..4));
            vec![random_tensor(rng, a, c, -2.0, 2.0), random_tensor(rng, b, c, -2.0, 2.0)]
        },
        &|t, v| t.concat_rows(v),
    );
    check(
        "slice_cols",
        &|rng| vec![random_tensor(rng, 3, 6, -2.0, 2.0)],
        &|t, v| t.slice_cols(v[0], 2, 3),
    );
    check(
        "slice_rows",
        &|rng| vec![random_tensor(rng, 6, 3, -2.0, 2.0)],
        &|t, v| t.slice_rows(v[0], 1, 4),
    );
}

#[test]
fn row_reductions_and_indexing() {
    check(
        "normalize_rows",
        &|rng| {
            let (r, c) = shape(rng);
            vec![random_tensor(rng, r, c, 0.2, 2.0)]
        },
        &|t, v| t.normalize_rows(v[0]),
    );
    check(
        "logsumexp_rows",
        &|rng| vec![random_tensor(rng, 4, 4, -3.0, 3.0)],
        &|t, v| t.logsumexp_rows(v[0], (0..16).map(|k| k % 5 != 0).collect()),
    );
    check(
        "pick_rows",
        &|rng| vec![random_tensor(rng, 4, 3, -2.0, 2.0)],
        &|t, v| t.pick_rows(v[0], vec![2, 0, 1, 2]),
    );
    check(
        "gather_rows",
        &|rng| vec![random_tensor(rng, 4, 3, -2.0, 2.0)],
        &|t, v| t.gather_rows(v[0], vec![Some(3), None, Some(3), Some(0), None]),
    );
}

#[test]
fn accumulation_is_linear() {
    let mut rng = seed::rng(9);
    for _ in 0..50 {
        let mut ps = ParamSet::new();
        let x = ps.add("x", random_tensor(&mut rng, 3, 4, -1.0, 1.0));
        let (a, b) = (rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0));
        let losses = |tape: &mut Graph, ps: &ParamSet| {
            let v = tape.param(ps, x);
            let s = tape.tanh(v);
            let l1 = tape.sum(s);
            let e = tape.exp(v);
            let l2 = tape.mean(e);
            (l1, l2)
        };

        let mut tape = Graph::new();
        let (l1, l2) = losses(&mut tape, &ps);
        let s1 = tape.scale(l1, a);
        let s2 = tape.scale(l2, b);
        let combined = tape.add(s1, s2).unwrap();
        ps.zero_grad();
        tape.backward(combined, &mut ps).unwrap();
        let joint = ps.grad(x).clone();

        let mut separate = Vec::new();
        for (pick, coef) in [(0, a), (1, b)] {
            let mut tape = Graph::new();
            let (l1, l2) = losses(&mut tape, &ps);
            let l = tape.scale(if pick == 0 { l1 } else { l2 }, coef);
            ps.zero_grad();
            tape.backward(l, &mut ps).unwrap();
            separate.push(ps.grad(x).clone());
        }
        for k in 0..joint.len() {
            let want = separate[0].data()[k] + separate[1].data()[k];
            assert!((joint.data()[k] - want).abs() < 1e-12);
        }
    }
}

#[test]
fn backward_accumulates_until_zeroed() {
    let mut ps = ParamSet::new();
    let x = ps.add("x", Tensor::row(&[1.0, -2.0]));
    for round in 1..=3 {
        let mut tape = Graph::new();
        let v = tape.param(&ps, x);
        let l = tape.sum(v);
        tape.backward(l, &mut ps).unwrap();
        assert_eq!(ps.grad(x).data(), &[round as f64, round as f64]);
    }
    ps.zero_grad();
    assert_eq!(ps.grad(x).data(), &[0.0, 0.0]);
}
