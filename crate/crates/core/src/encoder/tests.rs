use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::datamodel::{generate_synthetic, DataConfig, Dataset};
use crate::testkit;
use crate::trainer::{sequence_loss, TrainConfig};

fn tiny_data() -> Dataset {
    let cfg = DataConfig {
        n_users: 40,
        n_articles: 120,
        n_outfits: 30,
        n_influencers: 4,
        ..DataConfig::default()
    };
    generate_synthetic(&cfg, 8).unwrap()
}

fn small_config() -> ModelConfig {
    ModelConfig {
        encoder: EncoderConfig {
            n_layers: 2,
            n_heads: 2,
            d_model: 8,
            d_ff: 16,
            dropout_rate: 0.1,
            max_positions: 40,
        },
        ..ModelConfig::default()
    }
}

fn random_input(tape: &mut Tape, n: usize, d: usize, rng: &mut ChaCha8Rng) -> (ComposedInput, Vec<f64>) {
    let data: Vec<f64> = (0..n * d).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let vectors = tape.constant(Tensor::new(vec![n, d], data.clone()).unwrap()).unwrap();
    let input = ComposedInput {
        vectors,
        n_context: 0,
        target_ids: vec![0; n],
        target_mask: vec![false; n],
        recency: vec![0; n],
        time_gap: vec![0; n],
    };
    (input, data)
}

#[test]
fn causal_mask_counts() {
    assert_eq!(causal_mask(1), vec![vec![true]]);
    let m = causal_mask(3);
    assert_eq!(m.iter().flatten().filter(|b| **b).count(), 6);
    for (i, row) in m.iter().enumerate() {
        for (j, &b) in row.iter().enumerate() {
            assert_eq!(b, j <= i);
        }
    }
}

#[test]
fn disallowed_attention_is_exactly_zero() {
    let store = ParamStore::new();
    let mut tape = Tape::new(&store);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let data: Vec<f64> = (0..36).map(|_| rng.gen_range(-5.0..5.0)).collect();
    let x = tape.constant(Tensor::new(vec![6, 6], data).unwrap()).unwrap();
    let a = tape.causal_softmax(x).unwrap();
    let allowed = causal_mask(6);
    for i in 0..6 {
        let row = tape.value(a).row(i);
        for j in 0..6 {
            if !allowed[i][j] {
                assert_eq!(row[j], 0.0);
            }
        }
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}

#[test]
fn logits_are_finite_and_normalize() {
    let ds = tiny_data();
    let model = Model::new(small_config(), &ds.schema, &ds.catalog, 1).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut tape = Tape::new(&model.store);
    let (input, _) = random_input(&mut tape, 12, 8, &mut rng);
    let logits = model.forward(&mut tape, &input, false, &mut rng).unwrap();
    let t = tape.value(logits).clone();
    assert_eq!(t.shape(), &[12, model.targets.len()]);
    assert!(t.all_finite());
    let p = t.softmax(1).unwrap();
    for r in 0..12 {
        assert!((p.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }
}

#[test]
fn future_perturbation_leaves_past_logits_unchanged() {
    let ds = tiny_data();
    let model = Model::new(small_config(), &ds.schema, &ds.catalog, 1).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for case in 0..10 {
        let n = rng.gen_range(2..20);
        let t = rng.gen_range(0..n - 1);
        let mut tape = Tape::new(&model.store);
        let (input, mut data) = random_input(&mut tape, n, 8, &mut rng);
        let base = model.forward(&mut tape, &input, false, &mut rng).unwrap();
        let base = tape.value(base).clone();
        for v in &mut data[(t + 1) * 8..] {
            *v += rng.gen_range(-2.0..2.0);
        }
        let vectors = tape.constant(Tensor::new(vec![n, 8], data).unwrap()).unwrap();
        let moved = ComposedInput { vectors, ..input };
        let out = model.forward(&mut tape, &moved, false, &mut rng).unwrap();
        let out = tape.value(out);
        for p in 0..=t {
            let same = base.row(p).iter().zip(out.row(p)).all(|(a, b)| a.to_bits() == b.to_bits());
            assert!(same, "case {case}: position {p} changed");
        }
        assert_ne!(base.row(n - 1), out.row(n - 1));
    }
}

#[test]
fn overlong_input_is_rejected() {
    let ds = tiny_data();
    let model = Model::new(small_config(), &ds.schema, &ds.catalog, 1).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut tape = Tape::new(&model.store);
    let (input, _) = random_input(&mut tape, 41, 8, &mut rng);
    assert!(matches!(
        model.forward(&mut tape, &input, false, &mut rng),
        Err(Error::Num(NumError::Dimension(_)))
    ));
}

#[test]
fn zero_head_gives_uniform_distribution() {
    let ds = tiny_data();
    let mut model = Model::new(small_config(), &ds.schema, &ds.catalog, 1).unwrap();
    let w = model.out_weight();
    model.store.get_mut(w).data_mut().iter_mut().for_each(|x| *x = 0.0);
    let seq = &ds.sequences[0];
    let p = model.predict_next(&seq.interactions[..2], &seq.context, 59).unwrap();
    let n_avail = (0..model.targets.len()).filter(|&k| model.targets.available(k)).count();
    for (k, &x) in p.iter().enumerate() {
        let want = if model.targets.available(k) { 1.0 / n_avail as f64 } else { 0.0 };
        assert!((x - want).abs() < 1e-12);
    }
}

#[test]
fn cold_start_distribution_is_valid() {
    let ds = tiny_data();
    let model = Model::new(small_config(), &ds.schema, &ds.catalog, 1).unwrap();
    let p = model.predict_next(&[], &ds.sequences[3].context, 59).unwrap();
    assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    assert!(p.iter().all(|x| *x >= 0.0));
    for (k, &x) in p.iter().enumerate() {
        if !model.targets.available(k) {
            assert_eq!(x, 0.0);
        }
    }
    // no context tokens and no history: uniform
    let cfg = ModelConfig {
        embedder: EmbedderConfig::ids_only(),
        ..small_config()
    };
    let ids = Model::new(cfg, &ds.schema, &ds.catalog, 1).unwrap();
    let p = ids.predict_next(&[], &ds.sequences[3].context, 59).unwrap();
    let nz: Vec<f64> = p.iter().copied().filter(|x| *x > 0.0).collect();
    assert!(nz.windows(2).all(|w| w[0] == w[1]));
}

#[test]
fn history_order_matters() {
    let ds = tiny_data();
    let model = Model::new(small_config(), &ds.schema, &ds.catalog, 1).unwrap();
    let seq = ds.sequences.iter().find(|s| s.interactions.len() >= 6).unwrap();
    let h: Vec<_> = seq.interactions[..6].to_vec();
    let mut rev = h.clone();
    rev.reverse();
    // keep days chronological so only the item order changes
    for (r, o) in rev.iter_mut().zip(&h) {
        r.day = o.day;
        r.timestamp = o.timestamp;
    }
    let a = model.predict_next(&h, &seq.context, 59).unwrap();
    let b = model.predict_next(&rev, &seq.context, 59).unwrap();
    let dist: f64 = a.iter().zip(&b).map(|(x, y)| (x - y).abs()).sum();
    assert!(dist > 0.0);
}

#[test]
fn loss_gradients_pass_spot_checks() {
    let ds = tiny_data();
    for (loss, age) in [
        (crate::trainer::LossKind::FullCe, false),
        (crate::trainer::LossKind::Bpr, true),
    ] {
        let cfg = ModelConfig {
            age_feature: age,
            ..small_config()
        };
        let mut model = Model::new(cfg, &ds.schema, &ds.catalog, 3).unwrap();
        let seq = ds
            .sequences
            .iter()
            .find(|s| {
                let mut tape = Tape::new(&model.store);
                let c = model.compose(&mut tape, &s.interactions, &s.context, 59).unwrap();
                c.target_mask.iter().filter(|b| **b).count() >= 2
            })
            .unwrap()
            .clone();
        let tc = TrainConfig {
            loss,
            n_negatives: 5,
            ..TrainConfig::default()
        };
        let eval = |store: &ParamStore, model: &Model| -> (f64, Vec<Vec<f64>>) {
            let mut tape = Tape::new(store);
            let mut d = seed::rng(1, "d", &[]);
            let mut n = seed::rng(1, "n", &[]);
            let (l, _) = sequence_loss(&mut tape, model, &seq, 59, &tc, &mut d, &mut n).unwrap().unwrap();
            let g = tape.backward(l).unwrap();
            (tape.value(l).data()[0], store.ids().map(|id| g.params.dense(id)).collect())
        };
        let (_, grads) = eval(&model.store, &model);
        let ids: Vec<ParamId> = model.store.ids().collect();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let frozen = model.clone();
        for id in ids {
            let len = model.store.get(id).len();
            // prefer coordinates that actually receive gradient
            let live: Vec<usize> = (0..len).filter(|&c| grads[id.index()][c] != 0.0).collect();
            let pool = if live.is_empty() { (0..len).collect() } else { live };
            let coords: Vec<usize> = (0..5).map(|_| pool[rng.gen_range(0..pool.len())]).collect();
            let r = testkit::check_coords(&mut model.store, id, &coords, &grads[id.index()], 1e-5, |s| {
                eval(s, &frozen).0
            });
            assert!(r.max_rel_err < 1e-3, "{loss}: {}: {r:?}", model.store.name(id));
        }
    }
}

#[test]
fn checkpoint_round_trip() {
    let ds = tiny_data();
    let model = Model::new(small_config(), &ds.schema, &ds.catalog, 1).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    save_checkpoint(&model, &path).unwrap();
    let bytes = std::fs::read(&path).unwrap();
    assert_eq!(&bytes[..8], CHECKPOINT_MAGIC);
    let back = load_checkpoint(&path, &ds.catalog).unwrap();
    assert_eq!(back.config, model.config);
    for id in model.store.ids() {
        for (a, b) in model.store.get(id).data().iter().zip(back.store.get(id).data()) {
            assert_eq!(*b, *a as f32 as f64);
        }
    }
    // saving the reloaded model reproduces the file
    let again = dir.path().join("n.ckpt");
    save_checkpoint(&back, &again).unwrap();
    assert_eq!(std::fs::read(&again).unwrap(), bytes);

    std::fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
    assert!(matches!(load_checkpoint(&path, &ds.catalog), Err(Error::Checkpoint(_))));
    let mut bad = bytes.clone();
    bad[0] = b'X';
    std::fs::write(&path, &bad).unwrap();
    assert!(matches!(load_checkpoint(&path, &ds.catalog), Err(Error::Checkpoint(_))));
}

#[test]
fn config_validation() {
    let mut c = EncoderConfig::default();
    c.n_heads = 3;
    assert!(c.validate().is_err());
    c = EncoderConfig::default();
    c.dropout_rate = 1.0;
    assert!(c.validate().is_err());
    assert!(serde_json::from_str::<EncoderConfig>(r#"{"layers": 2}"#).is_err());
}

#[test]
fn age_buckets() {
    assert_eq!(age_bucket(10, 40), 30);
    assert_eq!(age_bucket(0, 90), 60);
    assert_eq!(age_bucket(5, 5), 0);
    assert_eq!(age_bucket(6, 5), AGE_BUCKETS - 1);
}

#[test]
fn last_row_inference_matches_full_forward() {
    let ds = tiny_data();
    let model = Model::new(small_config(), &ds.schema, &ds.catalog, 1).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for n in [1, 2, 7, 19] {
        let mut tape = Tape::new(&model.store);
        let (input, _) = random_input(&mut tape, n, 8, &mut rng);
        let full = model.hidden(&mut tape, &input, false, &mut rng).unwrap();
        let last = model.hidden_last(&mut tape, &input).unwrap();
        let full = tape.value(full).row(n - 1).to_vec();
        let last = tape.value(last);
        assert_eq!(last.shape(), &[1, 8]);
        assert!(full.iter().zip(last.data()).all(|(a, b)| a.to_bits() == b.to_bits()), "n={n}");
    }
}
