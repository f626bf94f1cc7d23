//! Catalog and interaction-log schema, time-based splitting, sequence
//! construction, the synthetic generator and the on-disk JSONL format.

mod generator;
mod io;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use generator::{generate_synthetic, generate_synthetic_with_truth, DataConfig, PlantedTruth};
pub use io::{load_dataset, save_dataset};

pub type ItemId = u32;
pub type UserId = u32;

pub const SECONDS_PER_DAY: u64 = 86_400;

/// Item-level feature names accepted in catalogs.
pub const ITEM_FEATURES: [&str; 9] = [
    "brand",
    "color",
    "category",
    "material",
    "fit",
    "pattern",
    "influencer",
    "style",
    "price_bucket",
];

/// Context fields, in the fixed order used for context tokens.
pub const CONTEXT_FIELDS: [&str; 5] = ["country", "device", "language", "market", "premise"];

#[derive(Debug, Error)]
pub enum DataError {
    #[error("config error: {0}")]
    Config(String),
    #[error("{file}:{line}: {msg}")]
    Parse { file: String, line: usize, msg: String },
    #[error("schema error: {0}")]
    Schema(String),
    #[error("invalid data: {0}")]
    Invalid(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EntityType {
    Article,
    Outfit,
    Influencer,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Action {
    Click,
    Wishlist,
    AddToCart,
    Purchase,
}

impl Action {
    pub const ALL: [Action; 4] = [Action::Click, Action::Wishlist, Action::AddToCart, Action::Purchase];

    pub fn index(self) -> usize {
        self as usize
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Item {
    pub id: ItemId,
    pub entity: EntityType,
    pub features: BTreeMap<String, u32>,
    #[serde(default)]
    pub members: Vec<ItemId>,
    #[serde(default)]
    pub creator: Option<u32>,
    pub created_day: u32,
    pub available: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Interaction {
    pub user: UserId,
    pub item: ItemId,
    pub action: Action,
    pub timestamp: u64,
    pub day: u32,
}

impl Interaction {
    pub fn day_of(timestamp: u64) -> u32 {
        (timestamp / SECONDS_PER_DAY) as u32
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Context {
    pub market: u32,
    pub device: u32,
    pub premise: u32,
    pub language: u32,
    pub country: u32,
}

impl Context {
    /// Field values in [`CONTEXT_FIELDS`] order.
    pub fn fields(&self) -> [u32; 5] {
        [self.country, self.device, self.language, self.market, self.premise]
    }
}

/// User segment by the content of the pre-split history.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Segment {
    FullyCold,
    ArticleOnly,
    OutfitHistory,
}

impl Segment {
    pub const ALL: [Segment; 3] = [Segment::FullyCold, Segment::ArticleOnly, Segment::OutfitHistory];

    pub fn of_history(history: &[Interaction], catalog: &Catalog) -> Segment {
        if history.is_empty() {
            Segment::FullyCold
        } else if history.iter().any(|i| catalog.entity(i.item) == EntityType::Outfit) {
            Segment::OutfitHistory
        } else {
            Segment::ArticleOnly
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Segment::FullyCold => "fully-cold",
            Segment::ArticleOnly => "article-only",
            Segment::OutfitHistory => "outfit-history",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct UserSequence {
    pub user: UserId,
    pub context: Context,
    pub interactions: Vec<Interaction>,
}

/// Vocabulary sizes for every item feature and context field in use.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Schema {
    pub vocab: BTreeMap<String, u32>,
}

impl Schema {
    pub fn vocab_of(&self, name: &str) -> Option<u32> {
        self.vocab.get(name).copied()
    }

    pub fn validate_names(&self) -> Result<(), DataError> {
        for name in self.vocab.keys() {
            if !ITEM_FEATURES.contains(&name.as_str()) && !CONTEXT_FIELDS.contains(&name.as_str()) {
                return Err(DataError::Schema(format!("unknown feature `{name}`")));
            }
        }
        for f in CONTEXT_FIELDS {
            if !self.vocab.contains_key(f) {
                return Err(DataError::Schema(format!("missing context field `{f}`")));
            }
        }
        Ok(())
    }
}

/// Items indexed by id; `items[i].id == i`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Catalog {
    items: Vec<Item>,
}

impl Catalog {
    pub fn new(mut items: Vec<Item>) -> Result<Self, DataError> {
        items.sort_by_key(|i| i.id);
        for (pos, item) in items.iter().enumerate() {
            if item.id as usize != pos {
                return Err(DataError::Invalid(format!(
                    "catalog ids must be contiguous from 0; found {} at position {pos}",
                    item.id
                )));
            }
        }
        Ok(Catalog { items })
    }

    pub fn items(&self) -> &[Item] {
        &self.items
    }

    pub fn get(&self, id: ItemId) -> Option<&Item> {
        self.items.get(id as usize)
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn entity(&self, id: ItemId) -> EntityType {
        self.items[id as usize].entity
    }

    pub fn ids_of(&self, entity: EntityType) -> Vec<ItemId> {
        self.items.iter().filter(|i| i.entity == entity).map(|i| i.id).collect()
    }

    /// Outfits created by each influencer index.
    pub fn outfits_by_creator(&self) -> BTreeMap<u32, Vec<ItemId>> {
        let mut out: BTreeMap<u32, Vec<ItemId>> = BTreeMap::new();
        for it in &self.items {
            if let (EntityType::Outfit, Some(c)) = (it.entity, it.creator) {
                out.entry(c).or_default().push(it.id);
            }
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub schema: Schema,
    pub catalog: Catalog,
    pub sequences: Vec<UserSequence>,
    pub horizon_days: u32,
}

impl Dataset {
    /// Checks every cross-reference and range constraint.
    pub fn validate(&self) -> Result<(), DataError> {
        self.schema.validate_names()?;
        for item in self.catalog.items() {
            for (name, &v) in &item.features {
                let vocab = self
                    .schema
                    .vocab_of(name)
                    .filter(|_| ITEM_FEATURES.contains(&name.as_str()))
                    .ok_or_else(|| DataError::Schema(format!("unknown feature `{name}` on item {}", item.id)))?;
                if v >= vocab {
                    return Err(DataError::Invalid(format!(
                        "item {}: {name}={v} outside vocabulary of {vocab}",
                        item.id
                    )));
                }
            }
            match item.entity {
                EntityType::Outfit => {
                    if item.members.is_empty() {
                        return Err(DataError::Invalid(format!("outfit {} has no members", item.id)));
                    }
                    for &m in &item.members {
                        match self.catalog.get(m) {
                            Some(a) if a.entity == EntityType::Article => {}
                            _ => {
                                return Err(DataError::Invalid(format!(
                                    "outfit {} member {m} is not an article",
                                    item.id
                                )))
                            }
                        }
                    }
                }
                _ if !item.members.is_empty() => {
                    return Err(DataError::Invalid(format!("item {} is not an outfit but has members", item.id)))
                }
                _ => {}
            }
        }
        for seq in &self.sequences {
            for (name, v) in CONTEXT_FIELDS.iter().zip(seq.context.fields()) {
                let vocab = self.schema.vocab_of(name).unwrap_or(0);
                if v >= vocab {
                    return Err(DataError::Invalid(format!("user {}: {name}={v} outside vocabulary", seq.user)));
                }
            }
            let mut last = 0;
            for it in &seq.interactions {
                if it.user != seq.user {
                    return Err(DataError::Invalid(format!("interaction of user {} filed under {}", it.user, seq.user)));
                }
                if self.catalog.get(it.item).is_none() {
                    return Err(DataError::Invalid(format!("unknown item {}", it.item)));
                }
                if it.day != Interaction::day_of(it.timestamp) {
                    return Err(DataError::Invalid(format!("day {} inconsistent with timestamp {}", it.day, it.timestamp)));
                }
                if it.timestamp < last {
                    return Err(DataError::Invalid(format!("user {} interactions out of order", seq.user)));
                }
                if it.day >= self.horizon_days {
                    return Err(DataError::Invalid(format!("day {} beyond horizon", it.day)));
                }
                last = it.timestamp;
            }
        }
        Ok(())
    }

    pub fn num_interactions(&self) -> usize {
        self.sequences.iter().map(|s| s.interactions.len()).sum()
    }

    pub fn contexts(&self) -> BTreeMap<UserId, Context> {
        self.sequences.iter().map(|s| (s.user, s.context)).collect()
    }
}

/// The items a model ranks: every item of one entity type, in id order.
#[derive(Clone, Debug, PartialEq)]
pub struct TargetSpace {
    entity: EntityType,
    ids: Vec<ItemId>,
    index: Vec<Option<usize>>,
    available: Vec<bool>,
}

impl TargetSpace {
    pub fn new(catalog: &Catalog, entity: EntityType) -> Self {
        let ids = catalog.ids_of(entity);
        let mut index = vec![None; catalog.len()];
        for (k, &id) in ids.iter().enumerate() {
            index[id as usize] = Some(k);
        }
        let available = ids.iter().map(|&id| catalog.items[id as usize].available).collect();
        TargetSpace {
            entity,
            ids,
            index,
            available,
        }
    }

    pub fn entity(&self) -> EntityType {
        self.entity
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[ItemId] {
        &self.ids
    }

    pub fn id(&self, k: usize) -> ItemId {
        self.ids[k]
    }

    pub fn index_of(&self, item: ItemId) -> Option<usize> {
        self.index.get(item as usize).copied().flatten()
    }

    pub fn available(&self, k: usize) -> bool {
        self.available[k]
    }

    /// Index of `item` if it is a target that may be predicted.
    pub fn available_index(&self, item: ItemId) -> Option<usize> {
        self.index_of(item).filter(|&k| self.available[k])
    }
}

/// Interactions strictly before the split, per user.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainView {
    pub split_day: u32,
    pub sequences: Vec<UserSequence>,
}

impl TrainView {
    pub fn interactions(&self) -> impl Iterator<Item = &Interaction> {
        self.sequences.iter().flat_map(|s| s.interactions.iter())
    }
}

/// One user active on or after the split day: the feedable pre-split history
/// plus the test-period interactions.
#[derive(Clone, Debug, PartialEq)]
pub struct TestUser {
    pub user: UserId,
    pub context: Context,
    pub history: Vec<Interaction>,
    pub test: Vec<Interaction>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TestView {
    pub split_day: u32,
    pub users: Vec<TestUser>,
}

/// Partitions every user's interactions at `split_day`.
pub fn time_split(dataset: &Dataset, split_day: u32) -> Result<(TrainView, TestView), DataError> {
    if split_day == 0 || split_day >= dataset.horizon_days {
        return Err(DataError::Config(format!(
            "split day {split_day} must lie in 1..{}",
            dataset.horizon_days
        )));
    }
    let mut train = Vec::new();
    let mut test = Vec::new();
    for seq in &dataset.sequences {
        let (before, after): (Vec<Interaction>, Vec<Interaction>) =
            seq.interactions.iter().partition(|i| i.day < split_day);
        if !after.is_empty() {
            test.push(TestUser {
                user: seq.user,
                context: seq.context,
                history: before.clone(),
                test: after,
            });
        }
        if !before.is_empty() {
            train.push(UserSequence {
                user: seq.user,
                context: seq.context,
                interactions: before,
            });
        }
    }
    Ok((
        TrainView {
            split_day,
            sequences: train,
        },
        TestView { split_day, users: test },
    ))
}

/// Groups a log into per-user chronological sequences truncated to the
/// `max_len` most recent interactions, dropping users whose kept suffix has
/// no interaction with `required` entities.
pub fn build_sequences(
    interactions: &[Interaction],
    contexts: &BTreeMap<UserId, Context>,
    catalog: &Catalog,
    max_len: usize,
    required: EntityType,
) -> Result<Vec<UserSequence>, DataError> {
    if max_len == 0 {
        return Err(DataError::Config("max_len must be at least 1".into()));
    }
    let mut by_user: BTreeMap<UserId, Vec<Interaction>> = BTreeMap::new();
    for it in interactions {
        by_user.entry(it.user).or_default().push(*it);
    }
    let mut out = Vec::new();
    for (user, mut list) in by_user {
        list.sort_by_key(|i| i.timestamp);
        if list.len() > max_len {
            list.drain(..list.len() - max_len);
        }
        let has_required = list
            .iter()
            .any(|i| catalog.get(i.item).is_some_and(|it| it.entity == required));
        if !has_required {
            continue;
        }
        out.push(UserSequence {
            user,
            context: contexts.get(&user).copied().unwrap_or_default(),
            interactions: list,
        });
    }
    Ok(out)
}

/// Keeps the `max_len` most recent interactions.
pub fn truncate_recent(list: &[Interaction], max_len: usize) -> &[Interaction] {
    &list[list.len().saturating_sub(max_len)..]
}
