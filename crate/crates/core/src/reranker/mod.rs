//! Turning next-item scores into recommendation lists: serving-mode history
//! policies, availability filtering, top-k with a stable tie-break, and
//! age-decay re-ranking.

use std::cmp::Ordering;
use std::fmt;
use std::io::Write;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::datamodel::{Catalog, Context, DataError, Interaction, ItemId, TargetSpace, UserId};
use crate::encoder::Model;
use crate::{Error, Result};

/// Default decay half-life in days.
pub const DEFAULT_HALF_LIFE: f64 = 21.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ServingMode {
    /// Everything up to the current request is fed.
    Rt,
    /// Only interactions from previous days are fed.
    Batch,
}

impl ServingMode {
    pub fn as_str(self) -> &'static str {
        match self {
            ServingMode::Rt => "rt",
            ServingMode::Batch => "batch",
        }
    }

    /// The part of `history` this mode may see when serving on `day`.
    /// `history` is chronological.
    pub fn feed(self, history: &[Interaction], day: u32) -> &[Interaction] {
        match self {
            ServingMode::Rt => history,
            ServingMode::Batch => &history[..history.partition_point(|i| i.day < day)],
        }
    }
}

impl fmt::Display for ServingMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ServingMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rt" => Ok(ServingMode::Rt),
            "batch" => Ok(ServingMode::Batch),
            _ => Err(Error::Config(format!("unknown mode `{s}`; valid: rt, batch"))),
        }
    }
}

/// Freshness strategy applied at serving time. The age-feature strategy lives
/// in the model (`ModelConfig::age_feature`); here it ranks like `None`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Strategy {
    #[default]
    None,
    Decay,
    AgeFeature,
}

impl Strategy {
    pub const ALL: [Strategy; 3] = [Strategy::None, Strategy::Decay, Strategy::AgeFeature];

    pub fn as_str(self) -> &'static str {
        match self {
            Strategy::None => "none",
            Strategy::Decay => "decay",
            Strategy::AgeFeature => "age-feature",
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Strategy::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown rerank `{s}`; valid: none, decay, age-feature")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RerankConfig {
    pub strategy: Strategy,
    /// Days; only used by `Decay`.
    pub half_life: f64,
}

impl Default for RerankConfig {
    fn default() -> Self {
        RerankConfig {
            strategy: Strategy::None,
            half_life: DEFAULT_HALF_LIFE,
        }
    }
}

impl RerankConfig {
    pub fn decay(half_life: f64) -> Self {
        RerankConfig {
            strategy: Strategy::Decay,
            half_life,
        }
    }

    pub fn validate(&self) -> Result<()> {
        check_half_life(self.half_life)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Recommended {
    pub id: ItemId,
    pub score: f64,
    pub age_days: i64,
    pub creator: Option<u32>,
}

/// Items in rank order.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct RecommendationList {
    pub items: Vec<Recommended>,
}

fn rank_order(a: &Recommended, b: &Recommended) -> Ordering {
    b.score.total_cmp(&a.score).then(a.id.cmp(&b.id))
}

impl RecommendationList {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn ids(&self) -> Vec<ItemId> {
        self.items.iter().map(|r| r.id).collect()
    }

    pub fn truncate(&mut self, k: usize) {
        self.items.truncate(k);
    }

    /// Sorts by descending score, ties by ascending id.
    pub fn sort(&mut self) {
        self.items.sort_by(rank_order);
    }
}

/// Something that scores every item of a target space for one request.
pub trait Ranker: Sync {
    fn targets(&self) -> &TargetSpace;

    /// One score per target index; `NEG_INFINITY` marks a non-candidate.
    fn scores(&self, history: &[Interaction], context: &Context, day: u32) -> Result<Vec<f64>>;

    /// Secondary key for equal scores, higher first, before the id
    /// tie-break.
    fn tie_break(&self) -> Option<&[f64]> {
        None
    }
}

impl<R: Ranker + ?Sized> Ranker for &R {
    fn targets(&self) -> &TargetSpace {
        (**self).targets()
    }

    fn scores(&self, history: &[Interaction], context: &Context, day: u32) -> Result<Vec<f64>> {
        (**self).scores(history, context, day)
    }

    fn tie_break(&self) -> Option<&[f64]> {
        (**self).tie_break()
    }
}

impl Ranker for Model {
    fn targets(&self) -> &TargetSpace {
        &self.targets
    }

    fn scores(&self, history: &[Interaction], context: &Context, day: u32) -> Result<Vec<f64>> {
        self.predict_next(history, context, day)
    }
}

type Keyed = (f64, Recommended);

fn keyed_order((ta, a): &Keyed, (tb, b): &Keyed) -> Ordering {
    b.score.total_cmp(&a.score).then(tb.total_cmp(ta)).then(a.id.cmp(&b.id))
}

/// Sorts the `k` first items of `v` under `cmp` and drops the rest.
fn top_k_by<T>(v: &mut Vec<T>, k: usize, cmp: impl Fn(&T, &T) -> Ordering) {
    if k == 0 {
        v.clear();
        return;
    }
    if v.len() > k {
        v.select_nth_unstable_by(k - 1, &cmp);
        v.truncate(k);
    }
    v.sort_by(cmp);
}

fn candidate_pool(
    scores: &[f64],
    tie_break: Option<&[f64]>,
    targets: &TargetSpace,
    catalog: &Catalog,
    day: u32,
) -> Result<Vec<Keyed>> {
    if scores.len() != targets.len() {
        return Err(Error::Index {
            what: "score vector length".into(),
            index: scores.len(),
            bound: targets.len(),
        });
    }
    let mut keyed = Vec::with_capacity(scores.len());
    for (k, &score) in scores.iter().enumerate() {
        if !targets.available(k) || score == f64::NEG_INFINITY || score.is_nan() {
            continue;
        }
        let id = targets.id(k);
        let item = catalog
            .get(id)
            .ok_or_else(|| DataError::Invalid(format!("target {id} missing from catalog")))?;
        if item.entity != targets.entity() || item.created_day > day {
            continue;
        }
        let tb = tie_break.map_or(0.0, |t| t[k]);
        keyed.push((
            tb,
            Recommended {
                id,
                score,
                age_days: i64::from(day) - i64::from(item.created_day),
                creator: item.creator,
            },
        ));
    }
    Ok(keyed)
}

/// Every available, already-created target item with its score, in rank
/// order. Items created after `day` do not exist yet and are skipped.
pub fn candidates(
    scores: &[f64],
    tie_break: Option<&[f64]>,
    targets: &TargetSpace,
    catalog: &Catalog,
    day: u32,
) -> Result<RecommendationList> {
    let mut keyed = candidate_pool(scores, tie_break, targets, catalog, day)?;
    keyed.sort_by(keyed_order);
    Ok(RecommendationList {
        items: keyed.into_iter().map(|(_, r)| r).collect(),
    })
}

fn decay(r: &mut Recommended, half_life: f64) -> Result<()> {
    if r.age_days < 0 {
        return Err(DataError::Invalid(format!("item {} has negative age {}", r.id, r.age_days)).into());
    }
    r.score *= 0.5f64.powf(r.age_days as f64 / half_life);
    Ok(())
}

fn check_half_life(half_life: f64) -> Result<()> {
    if half_life <= 0.0 || half_life.is_nan() {
        return Err(Error::Config(format!("half-life {half_life} must be positive")));
    }
    Ok(())
}

/// `score · 0.5^(age / half_life)` for every item, then re-sorted.
pub fn age_decay_rerank(list: &RecommendationList, half_life: f64) -> Result<RecommendationList> {
    check_half_life(half_life)?;
    let mut out = list.clone();
    for r in &mut out.items {
        decay(r, half_life)?;
    }
    out.sort();
    Ok(out)
}

/// Top-`k` recommendations for one request. `history` holds everything the
/// user did before the request; `mode` decides how much of it is fed.
#[allow(clippy::too_many_arguments)]
pub fn recommend(
    ranker: &dyn Ranker,
    catalog: &Catalog,
    history: &[Interaction],
    context: &Context,
    day: u32,
    mode: ServingMode,
    rerank: &RerankConfig,
    k: usize,
) -> Result<RecommendationList> {
    if k == 0 {
        return Err(Error::Config("k must be at least 1".into()));
    }
    let fed = mode.feed(history, day);
    let scores = ranker.scores(fed, context, day)?;
    let mut pool = candidate_pool(&scores, ranker.tie_break(), ranker.targets(), catalog, day)?;
    // decay reorders the whole pool, so it runs before the cut
    let items = if rerank.strategy == Strategy::Decay {
        check_half_life(rerank.half_life)?;
        let mut items: Vec<Recommended> = pool.into_iter().map(|(_, r)| r).collect();
        for r in &mut items {
            decay(r, rerank.half_life)?;
        }
        top_k_by(&mut items, k, rank_order);
        items
    } else {
        top_k_by(&mut pool, k, keyed_order);
        pool.into_iter().map(|(_, r)| r).collect()
    };
    Ok(RecommendationList { items })
}

/// One line of the recommendation dump.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DumpRecord {
    pub user: UserId,
    pub day: u32,
    pub mode: ServingMode,
    pub items: RecommendationList,
}

pub fn write_dump(records: &[DumpRecord], mut out: impl Write) -> Result<()> {
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}
