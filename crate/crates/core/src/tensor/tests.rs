use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;

fn store_with(entries: &[(&str, &[usize])], seed: u64) -> ParamStore {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    for (name, shape) in entries {
        store.add(*name, Tensor::uniform(shape, 1.0, &mut rng)).unwrap();
    }
    store
}

#[test]
fn matmul_identity() {
    let tape = Tape::new();
    let i = tape.constant(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
    let m = tape.constant(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
    let out = tape.matmul(i, m).unwrap();
    assert_eq!(tape.value(out), vec![1.0, 2.0, 3.0, 4.0]);
    assert_eq!(tape.shape(out), vec![2, 2]);
}

#[test]
fn matmul_orthogonal_rows() {
    let tape = Tape::new();
    let a = tape.constant(&[1, 2], vec![1.0, 0.0]).unwrap();
    let b = tape.constant(&[2, 1], vec![0.0, 5.0]).unwrap();
    assert_eq!(tape.value(tape.matmul(a, b).unwrap()), vec![0.0]);
}

#[test]
fn matmul_shape_mismatch_names_both_shapes() {
    let tape = Tape::new();
    let a = tape.constant(&[2, 3], vec![0.0; 6]).unwrap();
    let b = tape.constant(&[2, 3], vec![0.0; 6]).unwrap();
    let err = tape.matmul(a, b).unwrap_err();
    match err {
        Error::Dimension { left, right, .. } => {
            assert_eq!(left, vec![2, 3]);
            assert_eq!(right, vec![2, 3]);
        }
        other => panic!("unexpected {other:?}"),
    }
}

#[test]
fn matmul_gradient_matches_finite_differences() {
    let mut store = store_with(&[("a", &[3, 4]), ("b", &[4, 2])], 11);
    let a = store.id("a").unwrap();
    let b = store.id("b").unwrap();
    let err = grad_check(&mut store, 1e-5, |tape, p| {
        Ok(tape.sum(tape.matmul(p[a], p[b])?))
    })
    .unwrap();
    assert!(err < 1e-6, "relative error {err}");
}

#[test]
fn softmax_uniform_and_stable() {
    let tape = Tape::new();
    let x = tape.vector(vec![0.0; 4]);
    assert_eq!(tape.value(tape.softmax(x).unwrap()), vec![0.25; 4]);

    let y = tape.vector(vec![1000.0, 0.0]);
    let p = tape.value(tape.softmax(y).unwrap());
    assert!(p.iter().all(|v| v.is_finite()));
    assert!((p[0] - 1.0).abs() < 1e-300_f64.max(f64::EPSILON));
    assert!(p[1] < 1e-300);
}

#[test]
fn softmax_matches_high_precision_reference() {
    // mpmath at 50 digits
    let expected = [
        0.090_030_573_170_380_46,
        0.244_728_471_054_797_64,
        0.665_240_955_774_821_9,
    ];
    let got = softmax_values(&[1.0, 2.0, 3.0]).unwrap();
    for (g, e) in got.iter().zip(expected) {
        assert!((g - e).abs() < 1e-12, "{g} vs {e}");
    }
}

#[test]
fn softmax_rejects_non_finite() {
    assert!(matches!(
        softmax_values(&[1.0, f64::NAN]),
        Err(Error::NumericDomain(_))
    ));
    let tape = Tape::new();
    let x = tape.vector(vec![f64::INFINITY, 0.0]);
    assert!(matches!(tape.softmax(x), Err(Error::NumericDomain(_))));
}

fn zero_lstm(store: &mut ParamStore, input: usize, hidden: usize) -> LstmParams {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    
    LstmParams::register(store, "cell", input, hidden, 0.0, &mut rng).unwrap()
}

#[test]
fn lstm_zero_case() {
    let mut store = ParamStore::new();
    let p = zero_lstm(&mut store, 3, 4);
    let tape = Tape::new();
    let bound = store.bind(&tape).unwrap();
    let (h, c) = lstm_cell(&tape, tape.zeros(3), tape.zeros(4), tape.zeros(4), &p.weights(&bound)).unwrap();
    assert_eq!(tape.value(h), vec![0.0; 4]);
    assert_eq!(tape.value(c), vec![0.0; 4]);
}

#[test]
fn lstm_saturated_forget_gate_keeps_cell() {
    let mut store = ParamStore::new();
    let p = zero_lstm(&mut store, 2, 2);
    // i bias 0 -> 0.5, f bias 50 -> 1, g bias 0.5 -> tanh(0.5), o bias 0
    store
        .get_mut(p.bias)
        .values_mut()
        .copy_from_slice(&[0.0, 0.0, 50.0, 50.0, 0.5, 0.5, 0.0, 0.0]);
    let tape = Tape::new();
    let bound = store.bind(&tape).unwrap();
    let c_prev = tape.vector(vec![0.3, -1.2]);
    let (_, c) = lstm_cell(&tape, tape.zeros(2), tape.zeros(2), c_prev, &p.weights(&bound)).unwrap();
    let cand = 0.5 * 0.5_f64.tanh();
    let c = tape.value(c);
    assert!((c[0] - (0.3 + cand)).abs() < 1e-12);
    assert!((c[1] - (-1.2 + cand)).abs() < 1e-12);
}

#[test]
fn lstm_chain_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut store = ParamStore::new();
    let p = LstmParams::register(&mut store, "cell", 3, 4, 0.5, &mut rng).unwrap();
    store.get_mut(p.bias).values_mut().iter_mut().for_each(|b| *b = 0.1);
    let x = store.add("x", Tensor::uniform(&[3, 3], 1.0, &mut rng)).unwrap();
    let err = grad_check(&mut store, 1e-5, |tape, b| {
        let w = p.weights(b);
        let mut h = tape.zeros(4);
        let mut c = tape.zeros(4);
        for t in 0..3 {
            let xt = tape.row(b[x], t)?;
            (h, c) = lstm_cell(tape, xt, h, c, &w)?;
        }
        tape.add(tape.sum(h), tape.scale(tape.sum(c), 0.5))
    })
    .unwrap();
    assert!(err < 1e-5, "relative error {err}");
}

#[test]
fn lstm_dimension_mismatch() {
    let mut store = ParamStore::new();
    let p = zero_lstm(&mut store, 3, 4);
    let tape = Tape::new();
    let bound = store.bind(&tape).unwrap();
    let r = lstm_cell(&tape, tape.zeros(2), tape.zeros(4), tape.zeros(4), &p.weights(&bound));
    assert!(matches!(r, Err(Error::Dimension { .. })));
}

#[test]
fn grad_check_quadratic_and_constant() {
    let mut store = ParamStore::new();
    let w = store.add("w", Tensor::new(&[1], vec![3.0]).unwrap()).unwrap();
    let err = grad_check(&mut store, 1e-4, |tape, b| tape.dot(b[w], b[w])).unwrap();
    assert!(err < 1e-9, "relative error {err}");

    let tape = Tape::new();
    let bound = store.bind(&tape).unwrap();
    let y = tape.dot(bound[w], bound[w]).unwrap();
    let g = tape.backward(y).unwrap();
    assert!((g.get(bound[w]).unwrap()[0] - 6.0).abs() < 1e-12);

    let err = grad_check(&mut store, 1e-4, |tape, b| {
        Ok(tape.affine(tape.scale(tape.sum(b[w]), 0.0), 1.0, 7.0))
    })
    .unwrap();
    assert!(err <= 1e-8, "constant objective error {err}");
}

#[test]
fn grad_check_rejects_bad_epsilon_and_non_finite() {
    let mut store = ParamStore::new();
    let w = store.add("w", Tensor::new(&[1], vec![-1.0]).unwrap()).unwrap();
    assert!(matches!(
        grad_check(&mut store, 1e-2, |t, b| Ok(t.sum(b[w]))),
        Err(Error::Config(_))
    ));
    assert!(matches!(
        grad_check(&mut store, 1e-5, |t, b| Ok(t.sum(t.affine(b[w], 0.0, f64::NAN)))),
        Err(Error::NumericDomain(_))
    ));
}

#[test]
fn backward_seeds_unit_gradient_on_loss() {
    let tape = Tape::new();
    let x = tape.param(&[2], vec![1.0, 2.0]).unwrap();
    let loss = tape.sum(x);
    let g = tape.backward(loss).unwrap();
    assert_eq!(g.get(loss).unwrap(), &[1.0]);
}

#[test]
fn reused_value_accumulates_adjoints() {
    // f(x) = g(x) + h(x) with g = sum(exp(x)), h = sum(x*x)
    let vals = vec![0.3, -0.7, 1.1];
    let grad_of = |which: u8| {
        let tape = Tape::new();
        let x = tape.param(&[3], vals.clone()).unwrap();
        let g = tape.sum(tape.exp(x));
        let h = tape.sum(tape.mul(x, x).unwrap());
        let loss = match which {
            0 => g,
            1 => h,
            _ => tape.add(g, h).unwrap(),
        };
        tape.backward(loss).unwrap().get(x).unwrap().to_vec()
    };
    let (g, h, both) = (grad_of(0), grad_of(1), grad_of(2));
    for i in 0..3 {
        assert!((both[i] - (g[i] + h[i])).abs() < 1e-15);
    }
}

#[test]
fn frozen_binding_receives_no_gradient() {
    let mut store = ParamStore::new();
    let w = store.add("w", Tensor::new(&[2], vec![1.0, 2.0]).unwrap()).unwrap();
    let tape = Tape::new();
    let bound = store.bind_frozen(&tape).unwrap();
    let x = tape.param(&[2], vec![3.0, 4.0]).unwrap();
    let loss = tape.dot(bound[w], x).unwrap();
    let g = tape.backward(loss).unwrap();
    assert!(g.get(bound[w]).is_none());
    assert_eq!(g.get(x).unwrap(), &[1.0, 2.0]);
}

#[test]
fn checkpoint_round_trip() {
    let store = store_with(&[("a", &[2, 3]), ("b", &[4])], 3);
    let mut buf = Vec::new();
    write_checkpoint(&mut buf, &[("", &store), ("lm.", &store)]).unwrap();
    let entries = read_checkpoint(buf.as_slice()).unwrap();
    assert_eq!(entries.len(), 4);
    assert_eq!(entries[2].0, "lm.a");

    let mut fresh = store_with(&[("a", &[2, 3]), ("b", &[4])], 99);
    fresh.load_prefixed(&entries, "lm.").unwrap();
    assert_eq!(fresh.get(fresh.id("a").unwrap()).values(), store.get(store.id("a").unwrap()).values());

    let mut wrong = store_with(&[("a", &[3, 2])], 1);
    assert!(wrong.load_prefixed(&entries, "").is_err());
}

#[test]
fn clip_and_sgd() {
    let mut store = ParamStore::new();
    let w = store.add("w", Tensor::new(&[2], vec![0.0, 0.0]).unwrap()).unwrap();
    let tape = Tape::new();
    let b = store.bind(&tape).unwrap();
    let c = tape.vector(vec![3.0, 4.0]);
    let loss = tape.dot(b[w], c).unwrap();
    let g = tape.backward(loss).unwrap();
    store.accumulate_grads(&b, &g);
    assert_eq!(store.clip_grad_norm(2.0), 5.0);
    store.sgd_step(1.0);
    let v = store.get(w).values();
    assert!((v[0] + 1.2).abs() < 1e-12 && (v[1] + 1.6).abs() < 1e-12);
}

#[derive(Debug, Clone, Copy)]
enum Prim {
    Add,
    Sub,
    Mul,
    Div,
    Matvec,
    Vecmat,
    Sigmoid,
    Tanh,
    Exp,
    Ln,
    Softmax,
    Dot,
    Concat,
    Stack,
    MulConst,
    Relu,
    MatMul,
    IndexSum,
}

const PRIMS: [Prim; 18] = [
    Prim::Add,
    Prim::Sub,
    Prim::Mul,
    Prim::Div,
    Prim::Matvec,
    Prim::Vecmat,
    Prim::Sigmoid,
    Prim::Tanh,
    Prim::Exp,
    Prim::Ln,
    Prim::Softmax,
    Prim::Dot,
    Prim::Concat,
    Prim::Stack,
    Prim::MulConst,
    Prim::Relu,
    Prim::MatMul,
    Prim::IndexSum,
];

fn prim_objective(tape: &Tape, b: &Bound, ids: &[ParamId; 3], prim: Prim) -> Result<Var> {
    let (u, v, m) = (b[ids[0]], b[ids[1]], b[ids[2]]);
    // Fixed random projection so every output coordinate carries a distinct weight.
    let proj = |x: Var| -> Result<Var> {
        let n = tape.value(x).len();
        let w: Vec<f64> = (0..n).map(|i| 0.3 + 0.17 * i as f64).collect();
        let shape = tape.shape(x);
        let w = tape.constant(&shape, w)?;
        let p = tape.mul(x, w)?;
        Ok(tape.sum(p))
    };
    let out = match prim {
        Prim::Add => tape.add(u, v)?,
        Prim::Sub => tape.sub(u, v)?,
        Prim::Mul => tape.mul(u, v)?,
        Prim::Div => tape.div(u, tape.affine(tape.mul(v, v)?, 1.0, 1.0))?,
        Prim::Matvec => tape.matvec(m, u)?,
        Prim::Vecmat => tape.vecmat(u, m)?,
        Prim::Sigmoid => tape.sigmoid(u),
        Prim::Tanh => tape.tanh(u),
        Prim::Exp => tape.exp(u),
        Prim::Ln => tape.ln_floor(tape.affine(tape.mul(u, u)?, 1.0, 0.5), 1e-12),
        Prim::Softmax => tape.softmax(u)?,
        Prim::Dot => tape.dot(u, v)?,
        Prim::Concat => tape.concat(&[u, tape.slice(v, 1, 2)?, u])?,
        Prim::Stack => tape.row(tape.stack(&[u, v, u])?, 2)?,
        Prim::MulConst => tape.mul_const(u, vec![0.0, 2.0, -1.0, 0.5])?,
        Prim::Relu => tape.relu(u),
        Prim::MatMul => tape.matmul(m, tape.matmul(m, m)?)?,
        Prim::IndexSum => tape.index_sum(u, &[0, 2, 2])?,
    };
    proj(out)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn primitives_match_finite_differences(seed in any::<u64>()) {
        let mut store = store_with(&[("u", &[4]), ("v", &[4]), ("m", &[4, 4])], seed);
        let ids = [store.id("u").unwrap(), store.id("v").unwrap(), store.id("m").unwrap()];
        for prim in PRIMS {
            let err = grad_check(&mut store, 1e-5, |t, b| prim_objective(t, b, &ids, prim)).unwrap();
            prop_assert!(err < 1e-5, "{prim:?}: relative error {err}");
        }
    }

    #[test]
    fn softmax_normalizes_and_is_permutation_equivariant(
        xs in proptest::collection::vec(-50.0f64..50.0, 1..12),
        rot in 0usize..12,
    ) {
        let p = softmax_values(&xs).unwrap();
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        prop_assert!(p.iter().all(|&v| v >= 0.0));
        let k = rot % xs.len();
        let mut rotated = xs.clone();
        rotated.rotate_left(k);
        let mut expected = p.clone();
        expected.rotate_left(k);
        let q = softmax_values(&rotated).unwrap();
        for (a, b) in q.iter().zip(&expected) {
            prop_assert!((a - b).abs() <= 1e-15);
        }
    }
}
