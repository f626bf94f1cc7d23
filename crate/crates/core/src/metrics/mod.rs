//! Offline evaluation: relevance metrics, freshness, inter-list and temporal
//! diversity, evaluation cases and the per-segment report.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::datamodel::{Catalog, Context, Interaction, ItemId, Segment, TargetSpace, TestView, UserId};
use crate::par::Exec;
use crate::reranker::{recommend, Ranker, RecommendationList, RerankConfig, ServingMode};
use crate::{Error, Result};

pub const DEFAULT_KS: [usize; 3] = [5, 15, 30];

pub const RELEVANCE: [&str; 5] = ["recall", "precision", "hitrate", "ndcg", "map"];
pub const METRICS: [&str; 8] = [
    "recall",
    "precision",
    "hitrate",
    "ndcg",
    "map",
    "freshness",
    "inter_list_diversity",
    "temporal_diversity",
];

/// Segment label for all cases together.
pub const ALL: &str = "all";

fn top(list: &[ItemId], k: usize) -> &[ItemId] {
    &list[..k.min(list.len())]
}

fn is_target(targets: &[ItemId], id: ItemId) -> bool {
    targets.contains(&id)
}

fn hits(list: &[ItemId], targets: &[ItemId], k: usize) -> usize {
    top(list, k).iter().filter(|&&id| is_target(targets, id)).count()
}

/// Fraction of targets found in the top `k`.
pub fn recall_at_k(list: &[ItemId], targets: &[ItemId], k: usize) -> f64 {
    if targets.is_empty() {
        return 0.0;
    }
    hits(list, targets, k) as f64 / targets.len() as f64
}

/// Hits in the top `k` divided by `k`.
pub fn precision_at_k(list: &[ItemId], targets: &[ItemId], k: usize) -> f64 {
    hits(list, targets, k) as f64 / k as f64
}

pub fn hitrate_at_k(list: &[ItemId], targets: &[ItemId], k: usize) -> f64 {
    if hits(list, targets, k) > 0 {
        1.0
    } else {
        0.0
    }
}

/// Binary-gain nDCG with a log2 discount; the ideal ranking puts
/// `min(|targets|, k)` hits first.
pub fn ndcg_at_k(list: &[ItemId], targets: &[ItemId], k: usize) -> f64 {
    let dcg: f64 = top(list, k)
        .iter()
        .enumerate()
        .filter(|(_, &id)| is_target(targets, id))
        .map(|(r, _)| 1.0 / (r as f64 + 2.0).log2())
        .sum();
    let ideal: f64 = (0..targets.len().min(k)).map(|r| 1.0 / (r as f64 + 2.0).log2()).sum();
    if ideal == 0.0 {
        0.0
    } else {
        dcg / ideal
    }
}

/// Mean of precision@rank over the ranks of hits, normalised by
/// `min(|targets|, k)`.
pub fn map_at_k(list: &[ItemId], targets: &[ItemId], k: usize) -> f64 {
    let denom = targets.len().min(k);
    if denom == 0 {
        return 0.0;
    }
    let mut found = 0;
    let mut sum = 0.0;
    for (r, &id) in top(list, k).iter().enumerate() {
        if is_target(targets, id) {
            found += 1;
            sum += found as f64 / (r + 1) as f64;
        }
    }
    sum / denom as f64
}

/// Mean age in days of the top `min(k, len)` items; `None` for an empty list.
pub fn freshness_at_k(list: &RecommendationList, k: usize) -> Option<f64> {
    let n = k.min(list.len());
    if n == 0 {
        return None;
    }
    Some(list.items[..n].iter().map(|r| r.age_days as f64).sum::<f64>() / n as f64)
}

/// Longest run of consecutive items from the same creator in the top `k`.
/// Items without a creator never extend a run.
pub fn inter_list_diversity(creators: &[Option<u32>], k: usize) -> usize {
    let mut best = 0;
    let mut run = 0;
    let mut prev = None;
    for &c in &creators[..k.min(creators.len())] {
        run = if c.is_some() && c == prev { run + 1 } else { 1 };
        prev = c;
        best = best.max(run);
    }
    best
}

/// `1 − |top_k(a) ∩ top_k(b)| / n` with `n` the longer of the two
/// truncated lists, so identical lists score 0 even when shorter than `k`.
pub fn temporal_diversity(a: &[ItemId], b: &[ItemId], k: usize) -> f64 {
    let (ta, tb) = (top(a, k), top(b, k));
    let n = ta.len().max(tb.len());
    if n == 0 {
        return 0.0;
    }
    let overlap = ta.iter().filter(|id| tb.contains(id)).count();
    1.0 - overlap as f64 / n as f64
}

/// One recommendation request with the item(s) the user went on to engage
/// with.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalCase {
    pub user: UserId,
    pub context: Context,
    /// Everything before the request, chronological. The serving mode decides
    /// how much of it is fed.
    pub history: Vec<Interaction>,
    pub day: u32,
    pub targets: Vec<ItemId>,
    pub segment: Segment,
    /// Position among this user's requests.
    pub visit: usize,
}

/// One case per available target-entity interaction in the test period.
/// Each case sees the pre-split history plus every test interaction before
/// it; the segment comes from the pre-split history alone.
pub fn build_cases(test: &TestView, catalog: &Catalog, targets: &TargetSpace) -> Vec<EvalCase> {
    let mut out = Vec::new();
    for u in &test.users {
        let segment = Segment::of_history(&u.history, catalog);
        let mut history = u.history.clone();
        let mut visit = 0;
        for it in &u.test {
            if targets.available_index(it.item).is_some() {
                out.push(EvalCase {
                    user: u.user,
                    context: u.context,
                    history: history.clone(),
                    day: it.day,
                    targets: vec![it.item],
                    segment,
                    visit,
                });
                visit += 1;
            }
            history.push(*it);
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub ks: Vec<usize>,
    pub mode: ServingMode,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            ks: DEFAULT_KS.to_vec(),
            mode: ServingMode::Rt,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.ks.is_empty() || self.ks.contains(&0) {
            return Err(Error::Config("k values must be a nonempty list of positive integers".into()));
        }
        Ok(())
    }

    pub fn max_k(&self) -> usize {
        self.ks.iter().copied().max().unwrap_or(1)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub metric: String,
    pub k: usize,
    pub segment: String,
    /// `None` when the segment has nothing to average.
    pub value: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub ks: Vec<usize>,
    /// Number of cases per segment.
    pub cases: BTreeMap<String, usize>,
    pub cells: Vec<Cell>,
}

impl MetricReport {
    pub fn get(&self, metric: &str, k: usize, segment: &str) -> Option<f64> {
        self.cells
            .iter()
            .find(|c| c.metric == metric && c.k == k && c.segment == segment)
            .and_then(|c| c.value)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("metric,k,segment,value\n");
        for c in &self.cells {
            let v = c.value.map(|v| v.to_string()).unwrap_or_default();
            writeln!(out, "{},{},{},{}", c.metric, c.k, c.segment, v).expect("writing to a String");
        }
        out
    }
}

fn segments() -> Vec<&'static str> {
    let mut s = vec![ALL];
    s.extend(Segment::ALL.iter().map(|g| g.as_str()));
    s
}

#[derive(Default)]
struct Acc {
    sum: f64,
    n: usize,
}

impl Acc {
    fn push(&mut self, x: f64) {
        self.sum += x;
        self.n += 1;
    }

    fn mean(&self) -> Option<f64> {
        (self.n > 0).then(|| self.sum / self.n as f64)
    }
}

/// Averages every metric per segment. `lists[i]` answers `cases[i]`;
/// temporal diversity pairs consecutive visits of the same user.
pub fn score_lists(cases: &[EvalCase], lists: &[RecommendationList], ks: &[usize]) -> Result<MetricReport> {
    if cases.len() != lists.len() {
        return Err(Error::Config(format!("{} cases but {} lists", cases.len(), lists.len())));
    }
    let mut acc: BTreeMap<(&str, usize, &str), Acc> = BTreeMap::new();
    let mut counts: BTreeMap<String, usize> = segments().into_iter().map(|s| (s.to_string(), 0)).collect();
    for (i, (case, list)) in cases.iter().zip(lists).enumerate() {
        let groups = [ALL, case.segment.as_str()];
        for g in groups {
            *counts.get_mut(g).expect("known segment") += 1;
        }
        let ids = list.ids();
        let creators: Vec<Option<u32>> = list.items.iter().map(|r| r.creator).collect();
        let prev = (i > 0 && cases[i - 1].user == case.user).then(|| lists[i - 1].ids());
        for &k in ks {
            let mut values = vec![
                ("recall", Some(recall_at_k(&ids, &case.targets, k))),
                ("precision", Some(precision_at_k(&ids, &case.targets, k))),
                ("hitrate", Some(hitrate_at_k(&ids, &case.targets, k))),
                ("ndcg", Some(ndcg_at_k(&ids, &case.targets, k))),
                ("map", Some(map_at_k(&ids, &case.targets, k))),
                ("freshness", freshness_at_k(list, k)),
                ("inter_list_diversity", (!ids.is_empty()).then(|| inter_list_diversity(&creators, k) as f64)),
            ];
            values.push(("temporal_diversity", prev.as_ref().map(|p| temporal_diversity(p, &ids, k))));
            for (m, v) in values {
                if let Some(v) = v {
                    for g in groups {
                        acc.entry((m, k, g)).or_default().push(v);
                    }
                }
            }
        }
    }
    let mut cells = Vec::new();
    for m in METRICS {
        for &k in ks {
            for g in segments() {
                cells.push(Cell {
                    metric: m.to_string(),
                    k,
                    segment: g.to_string(),
                    value: acc.get(&(m, k, g)).and_then(Acc::mean),
                });
            }
        }
    }
    Ok(MetricReport {
        ks: ks.to_vec(),
        cases: counts,
        cells,
    })
}

/// Lists for every case, computed independently per case.
pub fn recommend_cases(
    ranker: &dyn Ranker,
    catalog: &Catalog,
    cases: &[EvalCase],
    mode: ServingMode,
    rerank: &RerankConfig,
    k: usize,
    exec: Exec,
) -> Result<Vec<RecommendationList>> {
    exec.map(cases, |c| recommend(ranker, catalog, &c.history, &c.context, c.day, mode, rerank, k))
        .into_iter()
        .collect()
}

pub struct Evaluation {
    pub report: MetricReport,
    pub lists: Vec<RecommendationList>,
}

pub fn evaluate(
    ranker: &dyn Ranker,
    catalog: &Catalog,
    cases: &[EvalCase],
    cfg: &EvalConfig,
    rerank: &RerankConfig,
    exec: Exec,
) -> Result<Evaluation> {
    cfg.validate()?;
    let lists = recommend_cases(ranker, catalog, cases, cfg.mode, rerank, cfg.max_k(), exec)?;
    let report = score_lists(cases, &lists, &cfg.ks)?;
    Ok(Evaluation { report, lists })
}

#[cfg(test)]
mod tests;
