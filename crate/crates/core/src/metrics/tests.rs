use proptest::prelude::{prop, prop_assert, prop_assert_eq, proptest, Strategy as _};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::datamodel::{generate_synthetic, time_split, DataConfig, EntityType};
use crate::reranker::Recommended;
use crate::testkit::oracle;

fn all_five(list: &[ItemId], t: &[ItemId], k: usize) -> [f64; 5] {
    [
        recall_at_k(list, t, k),
        precision_at_k(list, t, k),
        hitrate_at_k(list, t, k),
        ndcg_at_k(list, t, k),
        map_at_k(list, t, k),
    ]
}

fn all_oracles(list: &[ItemId], t: &[ItemId], k: usize) -> [f64; 5] {
    [
        oracle::recall(list, t, k),
        oracle::precision(list, t, k),
        oracle::hitrate(list, t, k),
        oracle::ndcg(list, t, k),
        oracle::map(list, t, k),
    ]
}

#[test]
fn single_target_at_rank_one() {
    assert_eq!(all_five(&[7, 1, 2, 3, 4], &[7], 5), [1.0, 0.2, 1.0, 1.0, 1.0]);
}

#[test]
fn no_hits_give_zero() {
    assert_eq!(all_five(&[1, 2, 3, 4, 5, 9], &[9], 5), [0.0; 5]);
}

fn permutations(universe: &[ItemId], len: usize) -> Vec<Vec<ItemId>> {
    if len == 0 {
        return vec![vec![]];
    }
    let mut out = Vec::new();
    for (i, &x) in universe.iter().enumerate() {
        let rest: Vec<ItemId> = universe.iter().enumerate().filter(|(j, _)| *j != i).map(|(_, &y)| y).collect();
        for mut p in permutations(&rest, len - 1) {
            p.insert(0, x);
            out.push(p);
        }
    }
    out
}

#[test]
fn relevance_matches_brute_force_exhaustively() {
    let universe: Vec<ItemId> = (0..6).collect();
    let lists = permutations(&universe, 4);
    for mask in 1u32..(1 << 6) {
        let targets: Vec<ItemId> = universe.iter().copied().filter(|i| mask & (1 << i) != 0).collect();
        for list in &lists {
            for k in 1..=6 {
                let (a, b) = (all_five(list, &targets, k), all_oracles(list, &targets, k));
                for (x, y) in a.iter().zip(&b) {
                    assert!((x - y).abs() < 1e-12, "{list:?} {targets:?} k={k}: {a:?} vs {b:?}");
                }
            }
        }
    }
}

#[test]
fn relevance_matches_brute_force_on_random_cases() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..1000 {
        let n = rng.gen_range(1..40);
        let mut pool: Vec<ItemId> = (0..60).collect();
        pool.shuffle(&mut rng);
        let list = pool[..n].to_vec();
        pool.shuffle(&mut rng);
        let targets = pool[..rng.gen_range(1..10)].to_vec();
        let k = rng.gen_range(1..45);
        let (a, b) = (all_five(&list, &targets, k), all_oracles(&list, &targets, k));
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-12);
        }
    }
}

#[test]
fn run_length_examples() {
    let (a, b) = (Some(1), Some(2));
    assert_eq!(inter_list_diversity(&[a, a, b, a], 4), 2);
    assert_eq!(inter_list_diversity(&[Some(1), Some(2), Some(3)], 3), 1);
    assert_eq!(inter_list_diversity(&[a, a, a, b], 2), 2);
    assert_eq!(inter_list_diversity(&[None, None], 2), 1);
}

#[test]
fn temporal_examples() {
    assert_eq!(temporal_diversity(&[1, 2, 3], &[1, 2, 3], 3), 0.0);
    assert_eq!(temporal_diversity(&[1, 2, 3], &[4, 5, 6], 3), 1.0);
    assert_eq!(temporal_diversity(&[1, 2, 3, 4], &[3, 9, 1, 8], 4), 0.5);
    // only the top k count
    assert_eq!(temporal_diversity(&[1, 2, 3], &[1, 2, 4], 2), 0.0);
}

fn with_ages(ages: &[i64]) -> RecommendationList {
    RecommendationList {
        items: ages
            .iter()
            .enumerate()
            .map(|(i, &a)| Recommended {
                id: i as u32,
                score: 1.0,
                age_days: a,
                creator: None,
            })
            .collect(),
    }
}

#[test]
fn freshness_examples() {
    assert_eq!(freshness_at_k(&with_ages(&[10, 20, 30]), 3), Some(20.0));
    assert_eq!(freshness_at_k(&with_ages(&[10, 20, 30]), 30), Some(20.0));
    assert_eq!(freshness_at_k(&with_ages(&[10, 20, 30]), 1), Some(10.0));
    assert_eq!(freshness_at_k(&with_ages(&[]), 5), None);
}

fn arb_creators() -> impl proptest::strategy::Strategy<Value = Vec<Option<u32>>> {
    prop::collection::vec(prop::option::weighted(0.9, 0u32..3), 0..40)
}

fn arb_ranked() -> impl proptest::strategy::Strategy<Value = (Vec<ItemId>, Vec<ItemId>)> {
    (
        prop::sample::subsequence((0u32..30).collect::<Vec<_>>(), 1..20).prop_shuffle(),
        prop::sample::subsequence((0u32..30).collect::<Vec<_>>(), 1..8),
    )
}

proptest! {
    #[test]
    fn runs_match_scan_oracle(c in arb_creators(), k in 1usize..45) {
        prop_assert_eq!(inter_list_diversity(&c, k), oracle::max_run(&c, k));
    }

    #[test]
    fn recall_is_monotone_in_k((list, targets) in arb_ranked(), k in 1usize..30) {
        prop_assert!(recall_at_k(&list, &targets, k) <= recall_at_k(&list, &targets, k + 1));
        prop_assert!(hitrate_at_k(&list, &targets, k) >= recall_at_k(&list, &targets, k));
        for v in all_five(&list, &targets, k) {
            prop_assert!((0.0..=1.0).contains(&v));
        }
    }

    #[test]
    fn temporal_is_symmetric((a, b) in arb_ranked(), k in 1usize..30) {
        let d = temporal_diversity(&a, &b, k);
        prop_assert_eq!(d, temporal_diversity(&b, &a, k));
        prop_assert!((0.0..=1.0).contains(&d));
    }
}

struct Fixed {
    targets: TargetSpace,
}

impl Ranker for Fixed {
    fn targets(&self) -> &TargetSpace {
        &self.targets
    }

    fn scores(&self, history: &[Interaction], _: &Context, _: u32) -> Result<Vec<f64>> {
        // deterministic but history-dependent
        let salt = history.len() as f64;
        Ok((0..self.targets.len()).map(|k| ((k as f64 + salt) * 0.37).sin()).collect())
    }
}

fn fixture() -> (crate::datamodel::Dataset, Vec<EvalCase>, Fixed) {
    let ds = generate_synthetic(
        &DataConfig {
            n_users: 200,
            n_articles: 300,
            n_outfits: 60,
            n_influencers: 5,
            ..DataConfig::default()
        },
        6,
    )
    .unwrap();
    let (_, test) = time_split(&ds, 59).unwrap();
    let targets = TargetSpace::new(&ds.catalog, EntityType::Outfit);
    let cases = build_cases(&test, &ds.catalog, &targets);
    (ds, cases, Fixed { targets })
}

#[test]
fn cases_follow_the_sequential_protocol() {
    let (ds, cases, r) = fixture();
    let (_, test) = time_split(&ds, 59).unwrap();
    assert!(!cases.is_empty());
    for c in &cases {
        assert_eq!(c.targets.len(), 1);
        assert!(r.targets.available_index(c.targets[0]).is_some());
        assert!(c.history.iter().all(|i| i.timestamp <= ds.horizon_days as u64 * 86_400));
        let user = test.users.iter().find(|u| u.user == c.user).unwrap();
        assert_eq!(c.segment, Segment::of_history(&user.history, &ds.catalog));
        assert!(c.history.starts_with(&user.history));
    }
    // later visits see earlier same-day activity
    let pair = cases.windows(2).find(|w| w[0].user == w[1].user).unwrap();
    assert!(pair[1].history.len() > pair[0].history.len());
    assert_eq!(pair[1].visit, pair[0].visit + 1);
}

#[test]
fn report_is_complete_and_deterministic() {
    let (ds, cases, r) = fixture();
    let cfg = EvalConfig::default();
    let a = evaluate(&r, &ds.catalog, &cases, &cfg, &RerankConfig::default(), Exec::Parallel).unwrap();
    let b = evaluate(&r, &ds.catalog, &cases, &cfg, &RerankConfig::default(), Exec::Sequential).unwrap();
    assert_eq!(a.report, b.report);
    assert_eq!(a.report.cells.len(), METRICS.len() * 3 * 4);
    for m in METRICS {
        for k in DEFAULT_KS {
            for s in ["all", "fully-cold", "article-only", "outfit-history"] {
                assert!(a.report.cells.iter().any(|c| c.metric == m && c.k == k && c.segment == s));
            }
        }
    }
    assert_eq!(a.report.cases["all"], cases.len());
    let parts: usize = Segment::ALL.iter().map(|s| a.report.cases[s.as_str()]).sum();
    assert_eq!(parts, cases.len());
    for c in &a.report.cells {
        if let Some(v) = c.value {
            if RELEVANCE.contains(&c.metric.as_str()) || c.metric == "temporal_diversity" {
                assert!((0.0..=1.0).contains(&v), "{c:?}");
            }
        }
    }
    // the overall recall is the case-weighted mean of the segments
    let overall = a.report.get("recall", 5, "all").unwrap();
    let weighted: f64 = Segment::ALL
        .iter()
        .filter_map(|s| Some(a.report.get("recall", 5, s.as_str())? * a.report.cases[s.as_str()] as f64))
        .sum::<f64>()
        / cases.len() as f64;
    assert!((overall - weighted).abs() < 1e-12);

    let csv = a.report.to_csv();
    assert!(csv.starts_with("metric,k,segment,value\n"));
    assert_eq!(csv.lines().count(), a.report.cells.len() + 1);
}

#[test]
fn single_k_reports_only_that_k() {
    let (ds, cases, r) = fixture();
    let cfg = EvalConfig {
        ks: vec![5],
        ..EvalConfig::default()
    };
    let e = evaluate(&r, &ds.catalog, &cases, &cfg, &RerankConfig::default(), Exec::Parallel).unwrap();
    assert!(e.report.cells.iter().all(|c| c.k == 5));
    assert!(e.lists.iter().all(|l| l.len() <= 5));
    assert!(EvalConfig { ks: vec![0], ..cfg }.validate().is_err());
}
