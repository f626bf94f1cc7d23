use super::*;
use crate::encoder::EncoderConfig;

fn tiny() -> RunConfig {
    RunConfig {
        data: DataConfig {
            n_users: 150,
            n_articles: 300,
            n_outfits: 60,
            n_influencers: 5,
            ..DataConfig::default()
        },
        model: ModelConfig {
            encoder: EncoderConfig {
                d_model: 8,
                n_heads: 2,
                d_ff: 16,
                n_layers: 1,
                ..EncoderConfig::default()
            },
            ..ModelConfig::default()
        },
        train: TrainConfig {
            epochs: 1,
            batch_size: 32,
            ..TrainConfig::default()
        },
        ..RunConfig::default()
    }
}

fn quiet() -> impl FnMut(&str) {
    |_: &str| {}
}

#[test]
fn config_defaults_and_unknown_keys() {
    let cfg = RunConfig::from_json("{}").unwrap();
    assert_eq!(cfg, RunConfig::default());
    assert_eq!(cfg.data.n_users, 10_000);
    assert_eq!(cfg.model.encoder.d_model, 32);
    let partial = RunConfig::from_json(r#"{"train": {"epochs": 3}, "eval": {"ks": [5]}}"#).unwrap();
    assert_eq!(partial.train.epochs, 3);
    assert_eq!(partial.train.lr, 0.01);
    assert_eq!(partial.eval.ks, vec![5]);
    assert!(matches!(RunConfig::from_json(r#"{"trian": {}}"#), Err(Error::Json(_))));
    assert!(matches!(RunConfig::from_json(r#"{"train": {"epoch": 3}}"#), Err(Error::Json(_))));
    assert!(matches!(RunConfig::from_json(r#"{"train": {"lr": -1.0}}"#), Err(Error::Config(_))));
    assert!(RunConfig::from_json(r#"{"rerank": {"strategy": "decay", "half_life": 0.0}}"#).is_err());
}

#[test]
fn config_round_trips() {
    let cfg = tiny();
    let text = serde_json::to_string_pretty(&cfg).unwrap();
    assert_eq!(RunConfig::from_json(&text).unwrap(), cfg);
}

#[test]
fn experiment_names() {
    for e in Experiment::ALL {
        assert_eq!(e.as_str().parse::<Experiment>().unwrap(), e);
    }
    assert!("table4".parse::<Experiment>().is_err());
}

#[test]
fn outfits_only_sequences_hold_only_outfits() {
    let cfg = tiny();
    let prep = prepare(&cfg, 3).unwrap();
    let catalog = &prep.dataset.catalog;
    let all = prep.sequences(100, EntityType::Outfit, None).unwrap();
    let only = prep.sequences(100, EntityType::Outfit, Some(EntityType::Outfit)).unwrap();
    assert!(!only.is_empty());
    assert!(only.len() <= all.len());
    for s in &only {
        assert!(s.interactions.iter().all(|i| catalog.entity(i.item) == EntityType::Outfit));
    }
    assert!(all.iter().any(|s| s.interactions.iter().any(|i| catalog.entity(i.item) != EntityType::Outfit)));
    let share = prep.same_day_share();
    assert!((0.0..=1.0).contains(&share));
}

#[test]
fn entity_filter_feeds_only_that_entity() {
    struct Echo(TargetSpace);
    impl Ranker for Echo {
        fn targets(&self) -> &TargetSpace {
            &self.0
        }
        fn scores(&self, history: &[Interaction], _: &Context, _: u32) -> Result<Vec<f64>> {
            Ok(vec![history.len() as f64; self.0.len()])
        }
    }
    let prep = prepare(&tiny(), 4).unwrap();
    let catalog = &prep.dataset.catalog;
    let echo = Echo(prep.targets.clone());
    let wrapped = EntityOnly {
        inner: &echo,
        catalog,
        entity: EntityType::Outfit,
    };
    let case = prep
        .cases
        .iter()
        .find(|c| c.history.iter().any(|i| catalog.entity(i.item) != EntityType::Outfit))
        .unwrap();
    let outfits = case.history.iter().filter(|i| catalog.entity(i.item) == EntityType::Outfit).count();
    let got = wrapped.scores(&case.history, &case.context, case.day).unwrap();
    assert_eq!(got[0], outfits as f64);
}

#[test]
fn table1_runs_and_repeats_exactly() {
    let cfg = tiny();
    let a = run_experiment(Experiment::Table1, &cfg, &[1], Exec::Parallel, &mut quiet()).unwrap();
    let b = run_experiment(Experiment::Table1, &cfg, &[1], Exec::Sequential, &mut quiet()).unwrap();
    assert_eq!(a, b);
    let names: Vec<&str> = a.variants.iter().map(|v| v.name.as_str()).collect();
    for want in ["afra-rt", "afra-batch", "afra-rt-outfits-only", "sasrec", "popularity", "cf-knn", "emb-knn"] {
        assert!(names.contains(&want), "{want} missing");
    }
    assert_eq!(a.claims.len(), 3);
    assert!(a.claims.iter().all(|c| c.checks.len() == 1));
    assert!(a.mean("afra-rt", "recall", 5, ALL).is_some());
    let csv = a.to_csv();
    assert_eq!(csv.lines().count(), 1 + a.variants.iter().map(|v| v.report.cells.len()).sum::<usize>());
    let text = a.summary();
    assert!(text.contains("rt-beats-batch"));
    assert!(text.contains("afra-batch"));
}

#[test]
fn table2_and_table3_cover_their_variants() {
    let mut cfg = tiny();
    cfg.train.epochs = 1;
    let t2 = run_experiment(Experiment::Table2, &cfg, &[2], Exec::Parallel, &mut quiet()).unwrap();
    let names: Vec<&str> = t2.variants.iter().map(|v| v.name.as_str()).collect();
    assert_eq!(
        names,
        ["full-ce", "sampled-ce-30", "sampled-ce-100", "bce-30", "bce-100", "bpr-30", "bpr-100", "top1-30", "top1-100"]
            .iter()
            .map(|s| &s[..])
            .collect::<Vec<_>>()
            .iter()
            .filter(|n| !n.ends_with("-100") || prep_targets(&cfg) > 100)
            .copied()
            .collect::<Vec<_>>()
    );
    let t3 = run_experiment(Experiment::Table3, &cfg, &[2], Exec::Parallel, &mut quiet()).unwrap();
    for v in ["none", "decay", "age-feature"] {
        assert!(t3.value(v, 2, "freshness", 30, ALL).is_some(), "{v}");
    }
    assert_eq!(t3.claims.len(), 2);
}

fn prep_targets(cfg: &RunConfig) -> usize {
    prepare(cfg, 2).unwrap().targets.len()
}

#[test]
fn diversity_reports_both_measures() {
    let cfg = tiny();
    let d = run_experiment(Experiment::Diversity, &cfg, &[5], Exec::Parallel, &mut quiet()).unwrap();
    for m in ["inter_list_diversity", "temporal_diversity"] {
        assert!(d.value("afra-rt", 5, m, 30, ALL).is_some());
    }
}

#[test]
fn missing_cut_off_is_a_config_error() {
    let mut cfg = tiny();
    cfg.eval.ks = vec![5];
    assert!(matches!(
        run_experiment(Experiment::Table3, &cfg, &[1], Exec::Parallel, &mut quiet()),
        Err(Error::Config(_))
    ));
    assert!(run_experiment(Experiment::Table1, &tiny(), &[], Exec::Parallel, &mut quiet()).is_err());
}

#[test]
fn shipped_configs_load() {
    let root = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    assert_eq!(RunConfig::load(&root.join("desk.json")).unwrap(), RunConfig::default());
    let paper = RunConfig::load(&root.join("paper.json")).unwrap();
    assert_eq!(paper.model.encoder.d_model, 128);
    assert_eq!(paper.data.n_outfits, 9900);
}
