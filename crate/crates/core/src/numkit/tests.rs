use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::testkit::check_all;

const H: f64 = 1e-5;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

/// Builds `Σ op(params) ⊙ W` for a fixed random weight `W`, then checks every
/// parameter coordinate against central differences.
fn fd_check<F>(store: &mut ParamStore, seed: u64, build: F) -> f64
where
    F: Fn(&mut Tape) -> Var,
{
    let weights = {
        let tape_store = store.clone();
        let mut tape = Tape::new(&tape_store);
        let out = build(&mut tape);
        let shape = tape.value(out).shape().to_vec();
        rand_tensor(&mut ChaCha8Rng::seed_from_u64(seed), shape)
    };
    let loss = |s: &ParamStore| -> f64 {
        let mut tape = Tape::new(s);
        let out = build(&mut tape);
        let w = tape.constant(weights.clone()).unwrap();
        let p = tape.mul(out, w).unwrap();
        let l = tape.sum_all(p).unwrap();
        tape.value(l).data()[0]
    };
    let grad = |s: &ParamStore| -> Vec<Vec<f64>> {
        let mut tape = Tape::new(s);
        let out = build(&mut tape);
        let w = tape.constant(weights.clone()).unwrap();
        let p = tape.mul(out, w).unwrap();
        let l = tape.sum_all(p).unwrap();
        let g = tape.backward(l).unwrap();
        s.ids().map(|id| g.params.dense(id)).collect()
    };
    check_all(store, H, loss, grad).max_rel_err
}

#[test]
fn matmul_examples() {
    let store = ParamStore::new();
    let mut tape = Tape::new(&store);
    let a = tape.constant(Tensor::identity(2)).unwrap();
    let b = tape
        .constant(Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap())
        .unwrap();
    let c = tape.matmul(a, b).unwrap();
    assert_eq!(tape.value(c).data(), &[1.0, 2.0, 3.0, 4.0]);

    let a = tape.constant(Tensor::from_rows(&[vec![1.0, 2.0]]).unwrap()).unwrap();
    let b = tape
        .constant(Tensor::from_rows(&[vec![3.0], vec![4.0]]).unwrap())
        .unwrap();
    let c = tape.matmul(a, b).unwrap();
    assert_eq!(tape.value(c).data(), &[11.0]);

    let bad = tape.matmul(a, a);
    assert!(matches!(bad, Err(NumError::Dimension(_))));
}

#[test]
fn matmul_gradient_of_sum() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut store = ParamStore::new();
    let a = store.add("a", rand_tensor(&mut rng, vec![3, 4]));
    let b = store.add("b", rand_tensor(&mut rng, vec![4, 2]));
    let sum_ab = |s: &ParamStore| {
        let mut tape = Tape::new(s);
        let c = tape.matmul(Var::Param(a), Var::Param(b)).unwrap();
        let l = tape.sum_all(c).unwrap();
        (tape.value(l).data()[0], tape.backward(l).unwrap().params.dense(a))
    };
    let (_, ga) = sum_ab(&store);
    let r = crate::testkit::check_coords(&mut store, a, &(0..12).collect::<Vec<_>>(), &ga, H, |s| sum_ab(s).0);
    assert!(r.max_rel_err < 1e-6, "{r:?}");
}

#[test]
fn every_op_passes_finite_differences() {
    for seed in 0..4u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let m = rng.gen_range(1..5);
        let k = rng.gen_range(1..5);
        let n = rng.gen_range(2..5);
        let mut store = ParamStore::new();
        let a = store.add("a", rand_tensor(&mut rng, vec![m, k]));
        let b = store.add("b", rand_tensor(&mut rng, vec![k, n]));
        let bt = store.add("bt", rand_tensor(&mut rng, vec![n, k]));
        let sq = store.add("sq", rand_tensor(&mut rng, vec![n, n]));
        let x = store.add("x", rand_tensor(&mut rng, vec![m, n]));
        let y = store.add("y", rand_tensor(&mut rng, vec![m, n]));
        let bias = store.add("bias", rand_tensor(&mut rng, vec![n]));
        let gain = store.add("gain", rand_tensor(&mut rng, vec![n]));
        let table = store.add("table", rand_tensor(&mut rng, vec![5, n]));
        let col = store.add("col", rand_tensor(&mut rng, vec![m, 1]));
        let vb = Var::Param(store.add("vb", rand_tensor(&mut rng, vec![5])));
        let (a, b, bt, sq, x, y, bias, gain, table, col) = (
            Var::Param(a),
            Var::Param(b),
            Var::Param(bt),
            Var::Param(sq),
            Var::Param(x),
            Var::Param(y),
            Var::Param(bias),
            Var::Param(gain),
            Var::Param(table),
            Var::Param(col),
        );
        type Build = Box<dyn Fn(&mut Tape) -> Var>;
        let cases: Vec<(&str, Build)> = vec![
            ("matmul", Box::new(move |t: &mut Tape| t.matmul(a, b).unwrap())),
            ("matmul_nt", Box::new(move |t: &mut Tape| t.matmul_nt(a, bt).unwrap())),
            ("add", Box::new(move |t: &mut Tape| t.add(x, y).unwrap())),
            ("sub", Box::new(move |t: &mut Tape| t.sub(x, y).unwrap())),
            ("mul", Box::new(move |t: &mut Tape| t.mul(x, y).unwrap())),
            ("scale", Box::new(move |t: &mut Tape| t.scale(x, -1.7).unwrap())),
            ("add_bias", Box::new(move |t: &mut Tape| t.add_bias(x, bias).unwrap())),
            ("relu", Box::new(move |t: &mut Tape| t.relu(x).unwrap())),
            ("sigmoid", Box::new(move |t: &mut Tape| t.sigmoid(x).unwrap())),
            ("log_sigmoid", Box::new(move |t: &mut Tape| t.log_sigmoid(x).unwrap())),
            ("square", Box::new(move |t: &mut Tape| t.square(x).unwrap())),
            ("softmax", Box::new(move |t: &mut Tape| t.softmax(x).unwrap())),
            ("causal_softmax", Box::new(move |t: &mut Tape| t.causal_softmax(sq).unwrap())),
            (
                "layer_norm",
                Box::new(move |t: &mut Tape| t.layer_norm(x, gain, bias, 1e-5).unwrap()),
            ),
            (
                "embedding_bag",
                Box::new(move |t: &mut Tape| {
                    t.embedding_bag(table, vec![vec![(0, 0.5), (3, 0.5)], vec![], vec![(2, 1.0), (2, 1.0)]])
                        .unwrap()
                }),
            ),
            (
                "gather_scores",
                Box::new(move |t: &mut Tape| {
                    let h = t.slice_cols(x, 0, n).unwrap();
                    let cand = (0..m).map(|i| vec![i % 5, (i + 2) % 5, 4]).collect();
                    t.gather_scores(h, table, Some(vb), cand).unwrap()
                }),
            ),
            ("slice_cols", Box::new(move |t: &mut Tape| t.slice_cols(x, 1, n - 1).unwrap())),
            ("concat_cols", Box::new(move |t: &mut Tape| t.concat_cols(&[x, y, a]).unwrap())),
            ("concat_rows", Box::new(move |t: &mut Tape| t.concat_rows(&[x, y]).unwrap())),
            ("pick", Box::new(move |t: &mut Tape| t.pick(x, (0..m).map(|i| i % n).collect()).unwrap())),
            ("logsumexp_rows", Box::new(move |t: &mut Tape| t.logsumexp_rows(x).unwrap())),
            ("broadcast_cols", Box::new(move |t: &mut Tape| t.broadcast_cols(col, 3).unwrap())),
            ("mean_all", Box::new(move |t: &mut Tape| t.mean_all(x).unwrap())),
            (
                "dropout",
                Box::new(move |t: &mut Tape| {
                    let mut r = ChaCha8Rng::seed_from_u64(9);
                    t.dropout(x, 0.3, true, &mut r).unwrap()
                }),
            ),
        ];
        for (name, build) in cases {
            let err = fd_check(&mut store, seed, build);
            assert!(err < 1e-4, "{name} (seed {seed}): rel err {err}");
        }
    }
}

#[test]
fn composed_graph_passes_finite_differences() {
    // A small attention-like block mixing most ops.
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut store = ParamStore::new();
    let x = Var::Param(store.add("x", rand_tensor(&mut rng, vec![4, 6])));
    let wq = Var::Param(store.add("wq", rand_tensor(&mut rng, vec![6, 6])));
    let wk = Var::Param(store.add("wk", rand_tensor(&mut rng, vec![6, 6])));
    let g = Var::Param(store.add("g", rand_tensor(&mut rng, vec![6])));
    let b = Var::Param(store.add("b", rand_tensor(&mut rng, vec![6])));
    let out = Var::Param(store.add("out", rand_tensor(&mut rng, vec![7, 6])));
    let build = move |t: &mut Tape| {
        let h = t.layer_norm(x, g, b, 1e-5).unwrap();
        let q = t.matmul(h, wq).unwrap();
        let k = t.matmul(h, wk).unwrap();
        let s = t.matmul_nt(q, k).unwrap();
        let s = t.scale(s, 0.4).unwrap();
        let a = t.causal_softmax(s).unwrap();
        let v = t.matmul(a, h).unwrap();
        let r = t.relu(v).unwrap();
        let r = t.add(r, x).unwrap();
        let logits = t.matmul_nt(r, out).unwrap();
        let lse = t.logsumexp_rows(logits).unwrap();
        let pos = t.pick(logits, vec![0, 3, 6, 2]).unwrap();
        t.sub(lse, pos).unwrap()
    };
    let err = fd_check(&mut store, 3, build);
    assert!(err < 1e-4, "rel err {err}");
}

#[test]
fn softmax_matches_direct_formula() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let store = ParamStore::new();
    for _ in 0..50 {
        let xs: Vec<f64> = (0..5).map(|_| rng.gen_range(-5.0..5.0)).collect();
        let mut tape = Tape::new(&store);
        let x = tape.constant(Tensor::new(vec![1, 5], xs.clone()).unwrap()).unwrap();
        let y = tape.softmax(x).unwrap();
        // direct exp/Σexp without shifting
        let denom: f64 = xs.iter().map(|v| v.exp()).sum();
        for (got, v) in tape.value(y).data().iter().zip(&xs) {
            assert!((got - v.exp() / denom).abs() < 1e-12);
        }
        let s: f64 = tape.value(y).data().iter().sum();
        assert!((s - 1.0).abs() < 1e-9);
    }
}

#[test]
fn causal_softmax_zeroes_future() {
    let store = ParamStore::new();
    let mut tape = Tape::new(&store);
    let x = tape
        .constant(Tensor::new(vec![3, 3], vec![1.0, 50.0, 90.0, 2.0, 3.0, 700.0, 0.0, 0.0, 0.0]).unwrap())
        .unwrap();
    let y = tape.causal_softmax(x).unwrap();
    let v = tape.value(y).data();
    assert_eq!(v[0], 1.0);
    assert_eq!(v[1], 0.0);
    assert_eq!(v[2], 0.0);
    assert_eq!(v[5], 0.0);
    let allowed = v.iter().filter(|&&p| p > 0.0).count();
    assert_eq!(allowed, 6);
}

#[test]
fn layer_norm_examples() {
    let mut store = ParamStore::new();
    let g = store.add("g", Tensor::new(vec![2], vec![1.0, 1.0]).unwrap());
    let b = store.add("b", Tensor::new(vec![2], vec![0.0, 0.0]).unwrap());
    let mut tape = Tape::new(&store);
    let x = tape.constant(Tensor::from_rows(&[vec![1.0, 3.0], vec![5.0, 5.0]]).unwrap()).unwrap();
    let y = tape.layer_norm(x, Var::Param(g), Var::Param(b), 1e-12).unwrap();
    let v = tape.value(y).data();
    assert!((v[0] + 1.0).abs() < 1e-9 && (v[1] - 1.0).abs() < 1e-9);
    assert_eq!(&v[2..], &[0.0, 0.0]);
    assert!(tape.layer_norm(x, Var::Param(g), Var::Param(b), 0.0).is_err());
}

#[test]
fn layer_norm_rows_are_standardized() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut store = ParamStore::new();
    let g = store.add("g", Tensor::new(vec![8], vec![1.0; 8]).unwrap());
    let b = store.add("b", Tensor::zeros(vec![8]));
    let mut tape = Tape::new(&store);
    let x = tape.constant(rand_tensor(&mut rng, vec![6, 8])).unwrap();
    let y = tape.layer_norm(x, Var::Param(g), Var::Param(b), 1e-12).unwrap();
    for r in 0..6 {
        let row = tape.value(y).row(r);
        let mean = row.iter().sum::<f64>() / 8.0;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 8.0;
        assert!(mean.abs() < 1e-9 && (var - 1.0).abs() < 1e-9);
    }
}

#[test]
fn embedding_lookup_examples() {
    let mut store = ParamStore::new();
    let t = store.add("t", Tensor::identity(3));
    let mut tape = Tape::new(&store);
    let e = tape.embedding_lookup(Var::Param(t), &[0]).unwrap();
    assert_eq!(tape.value(e).data(), &[1.0, 0.0, 0.0]);
    assert!(matches!(
        tape.embedding_lookup(Var::Param(t), &[3]),
        Err(NumError::Index { index: 3, bound: 3 })
    ));

    // duplicate ids accumulate
    let e = tape.embedding_lookup(Var::Param(t), &[2, 2]).unwrap();
    let w = tape
        .constant(Tensor::from_rows(&[vec![1.0, 2.0, 3.0], vec![10.0, 20.0, 30.0]]).unwrap())
        .unwrap();
    let p = tape.mul(e, w).unwrap();
    let l = tape.sum_all(p).unwrap();
    let g = tape.backward(l).unwrap();
    assert_eq!(g.params.dense(t), vec![0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 11.0, 22.0, 33.0]);
    assert!(matches!(g.params.get(t), Some(ParamGrad::Rows { .. })));
}

#[test]
fn embedding_lookup_gradient_matches_fd() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let mut store = ParamStore::new();
    let t = Var::Param(store.add("t", rand_tensor(&mut rng, vec![4, 3])));
    let err = fd_check(&mut store, 4, move |tape: &mut Tape| {
        tape.embedding_lookup(t, &[1, 3, 1, 0]).unwrap()
    });
    assert!(err < 1e-6, "{err}");
}

#[test]
fn dropout_behaviour() {
    let store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut tape = Tape::new(&store);
    let x = tape.constant(Tensor::new(vec![1, 4], vec![1.0, 2.0, 3.0, 4.0]).unwrap()).unwrap();
    assert_eq!(tape.dropout(x, 0.0, true, &mut rng).unwrap(), x);
    assert_eq!(tape.dropout(x, 0.5, false, &mut rng).unwrap(), x);
    assert!(matches!(tape.dropout(x, 1.0, true, &mut rng), Err(NumError::Config(_))));
    assert!(tape.dropout(x, -0.1, true, &mut rng).is_err());

    let n = 100_000;
    let big = tape.constant(Tensor::new(vec![1, n], vec![2.0; n]).unwrap()).unwrap();
    let d = tape.dropout(big, 0.3, true, &mut rng).unwrap();
    let mean = tape.value(d).data().iter().sum::<f64>() / n as f64;
    assert!((mean - 2.0).abs() < 0.02, "mean {mean}");
    let zeros = tape.value(d).data().iter().filter(|&&v| v == 0.0).count();
    assert!((zeros as f64 / n as f64 - 0.3).abs() < 0.01);
}

#[test]
fn non_finite_forward_is_an_error() {
    let store = ParamStore::new();
    let mut tape = Tape::new(&store);
    let x = tape.constant(Tensor::scalar(1e300)).unwrap();
    assert!(matches!(tape.square(x), Err(NumError::NonFinite(_))));
    assert!(tape.constant(Tensor::scalar(f64::NAN)).is_err());
}

#[test]
fn backward_requires_scalar_root() {
    let store = ParamStore::new();
    let mut tape = Tape::new(&store);
    let x = tape.constant(Tensor::zeros(vec![2, 2])).unwrap();
    assert!(tape.backward(x).is_err());
}

#[test]
fn grad_buffer_merge_mixes_sparse_and_dense() {
    let mut store = ParamStore::new();
    let t = store.add("t", Tensor::zeros(vec![3, 2]));
    let mut a = GradBuffer::new(&store);
    a.add_row(t, 1, &[1.0, 2.0], 1.0);
    let mut b = GradBuffer::new(&store);
    b.add_dense(t, &[1.0; 6]);
    let mut c = a.clone();
    c.merge(&b);
    assert_eq!(c.dense(t), vec![1.0, 1.0, 2.0, 3.0, 1.0, 1.0]);
    let mut d = b.clone();
    d.merge(&a);
    assert_eq!(d.dense(t), c.dense(t));
    c.scale(2.0);
    assert_eq!(c.dense(t)[3], 6.0);
    assert!((a.global_norm() - 5f64.sqrt()).abs() < 1e-15);
}

#[test]
fn forward_and_backward_are_deterministic() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let mut store = ParamStore::new();
        let x = Var::Param(store.add("x", rand_tensor(&mut rng, vec![5, 4])));
        let w = Var::Param(store.add("w", rand_tensor(&mut rng, vec![4, 4])));
        let mut tape = Tape::new(&store);
        let mut drng = ChaCha8Rng::seed_from_u64(1);
        let h = tape.matmul(x, w).unwrap();
        let h = tape.dropout(h, 0.1, true, &mut drng).unwrap();
        let s = tape.softmax(h).unwrap();
        let l = tape.logsumexp_rows(s).unwrap();
        let l = tape.sum_all(l).unwrap();
        let g = tape.backward(l).unwrap();
        let bits: Vec<u64> = g.params.dense(ParamId(1)).iter().map(|v| v.to_bits()).collect();
        (tape.value(l).data()[0].to_bits(), bits)
    };
    assert_eq!(run(), run());
}
