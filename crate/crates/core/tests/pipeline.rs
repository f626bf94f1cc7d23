use proptest::prelude::*;
use proptest::strategy::Strategy as _;

use afra_core::datamodel::{generate_synthetic, load_dataset, save_dataset, DataConfig, ItemId};
use afra_core::encoder::{load_checkpoint, save_checkpoint, EncoderConfig, ModelConfig};
use afra_core::experiments::{fit, prepare, RunConfig};
use afra_core::metrics::{evaluate, hitrate_at_k, ndcg_at_k, precision_at_k, recall_at_k};
use afra_core::par::Exec;
use afra_core::reranker::{RerankConfig, Strategy};
use afra_core::trainer::TrainConfig;

fn tiny() -> RunConfig {
    RunConfig {
        data: DataConfig {
            n_users: 200,
            n_articles: 400,
            n_outfits: 80,
            n_influencers: 5,
            ..DataConfig::default()
        },
        model: ModelConfig {
            encoder: EncoderConfig {
                n_layers: 1,
                n_heads: 2,
                d_model: 8,
                d_ff: 16,
                ..EncoderConfig::default()
            },
            ..ModelConfig::default()
        },
        train: TrainConfig {
            epochs: 2,
            batch_size: 32,
            ..TrainConfig::default()
        },
        ..RunConfig::default()
    }
}

#[test]
fn dataset_survives_disk_round_trip() {
    let ds = generate_synthetic(&tiny().data, 3).unwrap();
    let dir = tempfile::tempdir().unwrap();
    save_dataset(&ds, dir.path()).unwrap();
    let back = load_dataset(dir.path()).unwrap();
    assert_eq!(back.sequences, ds.sequences);
    assert_eq!(back.horizon_days, ds.horizon_days);
    assert_eq!(back.catalog.items(), ds.catalog.items());
}

#[test]
fn trained_model_serves_the_same_after_checkpoint() {
    let cfg = tiny();
    let prep = prepare(&cfg, 4).unwrap();
    let (model, log) = fit(&prep, &cfg.model, &cfg.train, None, Exec::Parallel, |_| {}).unwrap();
    assert_eq!(log.len(), 2);
    assert!(log.iter().all(|e| e.loss.is_finite()));

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    save_checkpoint(&model, &path).unwrap();
    let loaded = load_checkpoint(&path, &prep.dataset.catalog).unwrap();
    let again = load_checkpoint(&path, &prep.dataset.catalog).unwrap();
    for case in prep.cases.iter().take(20) {
        let a = loaded.predict_next(&case.history, &case.context, case.day).unwrap();
        let b = again.predict_next(&case.history, &case.context, case.day).unwrap();
        assert_eq!(a, b);
        assert!((a.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }

    let rerank = RerankConfig {
        strategy: Strategy::Decay,
        ..RerankConfig::default()
    };
    let e = evaluate(&loaded, &prep.dataset.catalog, &prep.cases, &cfg.eval, &rerank, Exec::Sequential).unwrap();
    assert_eq!(e.lists.len(), prep.cases.len());
    for c in &e.report.cells {
        assert!(c.value.is_none_or(f64::is_finite), "{c:?}");
    }
}

proptest! {
    #[test]
    fn relevance_metrics_are_bounded_and_monotone(
        list in proptest::sample::subsequence((0u32..40).collect::<Vec<ItemId>>(), 0..30).prop_shuffle(),
        targets in proptest::collection::btree_set(0u32..40, 1..8),
        k in 1usize..35,
    ) {
        let targets: Vec<ItemId> = targets.into_iter().collect();
        for m in [recall_at_k, precision_at_k, hitrate_at_k, ndcg_at_k] {
            let v = m(&list, &targets, k);
            prop_assert!((0.0..=1.0).contains(&v));
        }
        prop_assert!(recall_at_k(&list, &targets, k) <= recall_at_k(&list, &targets, k + 1));
        prop_assert!(hitrate_at_k(&list, &targets, k) <= hitrate_at_k(&list, &targets, k + 1));
        let hits = list.iter().take(k).filter(|i| targets.contains(i)).count();
        prop_assert_eq!(hitrate_at_k(&list, &targets, k) > 0.0, hits > 0);
    }
}
