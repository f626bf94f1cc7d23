//! Sequential against rayon execution for one training epoch and for a
//! batch of evaluation requests. Build with `--no-default-features` to see
//! the parallel path fall back to a plain loop.

use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use afra_core::datamodel::DataConfig;
use afra_core::encoder::{EncoderConfig, Model, ModelConfig};
use afra_core::experiments::{prepare, Prepared, RunConfig};
use afra_core::metrics::{recommend_cases, DEFAULT_KS};
use afra_core::par::Exec;
use afra_core::reranker::{RerankConfig, ServingMode};
use afra_core::trainer::{train, TrainConfig};

fn setup() -> (RunConfig, Prepared) {
    let cfg = RunConfig {
        data: DataConfig {
            n_users: 800,
            n_articles: 1500,
            n_outfits: 200,
            n_influencers: 10,
            ..DataConfig::default()
        },
        model: ModelConfig {
            encoder: EncoderConfig {
                d_model: 16,
                n_heads: 2,
                d_ff: 32,
                ..EncoderConfig::default()
            },
            ..ModelConfig::default()
        },
        train: TrainConfig {
            epochs: 1,
            ..TrainConfig::default()
        },
        ..RunConfig::default()
    };
    let prep = prepare(&cfg, 1).expect("data generation");
    (cfg, prep)
}

fn modes() -> [(&'static str, Exec); 2] {
    [("sequential", Exec::Sequential), ("parallel", Exec::Parallel)]
}

fn bench_train(c: &mut Criterion) {
    let (cfg, prep) = setup();
    let seqs = prep.sequences(cfg.train.max_len, cfg.model.target_entity, None).unwrap();
    let fresh = Model::new(cfg.model.clone(), &prep.dataset.schema, &prep.dataset.catalog, 1).unwrap();
    let mut g = c.benchmark_group("train_epoch");
    g.sample_size(10);
    for (name, exec) in modes() {
        g.bench_with_input(BenchmarkId::from_parameter(name), &exec, |b, &exec| {
            b.iter(|| {
                let mut model = fresh.clone();
                train(&mut model, &seqs, prep.reference_day(), &cfg.train, exec, |_| {}).unwrap();
                black_box(model.store.len())
            })
        });
    }
    g.finish();
}

fn bench_eval(c: &mut Criterion) {
    let (cfg, prep) = setup();
    let model = Model::new(cfg.model.clone(), &prep.dataset.schema, &prep.dataset.catalog, 1).unwrap();
    let cases = &prep.cases[..prep.cases.len().min(400)];
    let k = DEFAULT_KS[2];
    let mut g = c.benchmark_group("recommend");
    g.sample_size(10);
    for (name, exec) in modes() {
        g.bench_with_input(BenchmarkId::from_parameter(name), &exec, |b, &exec| {
            b.iter(|| {
                let lists =
                    recommend_cases(&model, &prep.dataset.catalog, cases, ServingMode::Rt, &RerankConfig::default(), k, exec)
                        .unwrap();
                black_box(lists.len())
            })
        });
    }
    g.finish();
}

criterion_group!(benches, bench_train, bench_eval);
criterion_main!(benches);
