//! Per-position model inputs. Each interaction becomes the concatenation of
//! its item's feature blocks, a session block (recency and time gap) and a
//! one-hot action block, projected to the model width with a learned
//! positional vector added. Context tokens are prepended.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::datamodel::{
    Action, Catalog, Context, DataError, EntityType, Interaction, Item, Schema, TargetSpace, CONTEXT_FIELDS,
    ITEM_FEATURES,
};
use crate::numkit::{ParamId, ParamStore, Tape, Tensor, Var};
use crate::trainer::build_targets;
use crate::{Error, Result};

/// Pseudo-feature holding the raw item id, for IDs-only models.
pub const ITEM_ID: &str = "item_id";
/// Recency and gap are clipped to this many days.
pub const MAX_DAYS: u32 = 60;
pub const DAY_BUCKETS: usize = MAX_DAYS as usize + 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeatureDef {
    pub name: String,
    pub vocab: u32,
    /// Learned embedding width; `None` encodes the feature one-hot.
    #[serde(default)]
    pub width: Option<usize>,
}

impl FeatureDef {
    pub fn block_width(&self) -> usize {
        self.width.unwrap_or(self.vocab as usize)
    }
}

/// Ordered feature layout shared by every item.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct FeatureSpec {
    pub features: Vec<FeatureDef>,
}

fn default_width(name: &str) -> Option<usize> {
    match name {
        "brand" | "category" | "influencer" => Some(8),
        "style" | "price_bucket" => None,
        _ => Some(4),
    }
}

impl FeatureSpec {
    /// Every item feature present in `schema`, in the fixed registry order.
    pub fn from_schema(schema: &Schema) -> Self {
        let features = ITEM_FEATURES
            .iter()
            .filter_map(|&name| {
                schema.vocab_of(name).map(|vocab| FeatureDef {
                    name: name.to_string(),
                    vocab,
                    width: default_width(name),
                })
            })
            .collect();
        FeatureSpec { features }
    }

    pub fn item_ids(n_items: usize, width: usize) -> Self {
        FeatureSpec {
            features: vec![FeatureDef {
                name: ITEM_ID.into(),
                vocab: n_items as u32,
                width: Some(width),
            }],
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = Vec::new();
        for f in &self.features {
            if f.name != ITEM_ID && !ITEM_FEATURES.contains(&f.name.as_str()) {
                return Err(DataError::Schema(format!("unknown feature `{}`", f.name)).into());
            }
            if seen.contains(&f.name) {
                return Err(Error::Config(format!("feature `{}` listed twice", f.name)));
            }
            if f.vocab == 0 || f.block_width() == 0 {
                return Err(Error::Config(format!("feature `{}` has zero width", f.name)));
            }
            seen.push(f.name.clone());
        }
        if self.features.is_empty() {
            return Err(Error::Config("feature spec is empty".into()));
        }
        Ok(())
    }

    pub fn width(&self) -> usize {
        self.features.iter().map(FeatureDef::block_width).sum()
    }

    /// Start column of each feature block.
    pub fn offsets(&self) -> Vec<usize> {
        let mut at = 0;
        self.features
            .iter()
            .map(|f| {
                let o = at;
                at += f.block_width();
                o
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EmbedderConfig {
    /// Use only an item-id embedding instead of the item features.
    pub ids_only: bool,
    pub id_width: usize,
    pub context: bool,
    pub session: bool,
    pub action: bool,
    pub positional: bool,
    pub recency_width: usize,
    pub gap_width: usize,
}

impl Default for EmbedderConfig {
    fn default() -> Self {
        EmbedderConfig {
            ids_only: false,
            id_width: 32,
            context: true,
            session: true,
            action: true,
            positional: true,
            recency_width: 8,
            gap_width: 8,
        }
    }
}

impl EmbedderConfig {
    /// IDs-only inputs: no features, context, session or action blocks.
    pub fn ids_only() -> Self {
        EmbedderConfig {
            ids_only: true,
            context: false,
            session: false,
            action: false,
            ..EmbedderConfig::default()
        }
    }

    pub fn feature_spec(&self, schema: &Schema, n_items: usize) -> FeatureSpec {
        if self.ids_only {
            FeatureSpec::item_ids(n_items, self.id_width)
        } else {
            FeatureSpec::from_schema(schema)
        }
    }
}

type Bag = Vec<(usize, f64)>;

fn merge_bag(into: &mut BTreeMap<usize, f64>, bag: &Bag, w: f64) {
    for &(r, x) in bag {
        *into.entry(r).or_insert(0.0) += w * x;
    }
}

/// Precomputed `(row, weight)` bags per item and feature. Outfits average
/// their member articles; influencers average their outfits.
#[derive(Clone, Debug, PartialEq)]
pub struct ItemCodes {
    bags: Vec<Vec<Bag>>,
}

impl ItemCodes {
    pub fn build(catalog: &Catalog, spec: &FeatureSpec) -> Result<Self> {
        let by_creator = catalog.outfits_by_creator();
        let mut bags: Vec<Vec<Bag>> = Vec::with_capacity(catalog.len());
        // articles first, so outfits can reuse them; then outfits; then influencers
        let mut order: Vec<&Item> = catalog.items().iter().collect();
        order.sort_by_key(|i| (i.entity, i.id));
        let mut done: Vec<Option<Vec<Bag>>> = vec![None; catalog.len()];
        for item in order {
            let mut per_feature = Vec::with_capacity(spec.features.len());
            for (k, f) in spec.features.iter().enumerate() {
                let bag = if f.name == ITEM_ID {
                    vec![(item.id as usize, 1.0)]
                } else if let Some(&v) = item.features.get(&f.name) {
                    vec![(v as usize, 1.0)]
                } else {
                    let parts: Vec<&Vec<Bag>> = match item.entity {
                        EntityType::Article => Vec::new(),
                        EntityType::Outfit => {
                            if item.members.is_empty() {
                                return Err(DataError::Invalid(format!("outfit {} has no members", item.id)).into());
                            }
                            let mut v = Vec::with_capacity(item.members.len());
                            for &m in &item.members {
                                match done.get(m as usize).and_then(Option::as_ref) {
                                    Some(b) if catalog.entity(m) == EntityType::Article => v.push(b),
                                    _ => {
                                        return Err(DataError::Invalid(format!(
                                            "outfit {} member {m} is not an article",
                                            item.id
                                        ))
                                        .into())
                                    }
                                }
                            }
                            v
                        }
                        EntityType::Influencer => item
                            .features
                            .get("influencer")
                            .and_then(|c| by_creator.get(c))
                            .map(|outfits| {
                                outfits.iter().map(|&o| done[o as usize].as_ref().expect("outfits first")).collect()
                            })
                            .unwrap_or_default(),
                    };
                    let mut acc = BTreeMap::new();
                    let w = 1.0 / parts.len().max(1) as f64;
                    for p in &parts {
                        merge_bag(&mut acc, &p[k], w);
                    }
                    acc.into_iter().collect()
                };
                for &(r, _) in &bag {
                    if r >= f.vocab as usize {
                        return Err(Error::Index {
                            what: format!("item {} feature `{}`", item.id, f.name),
                            index: r,
                            bound: f.vocab as usize,
                        });
                    }
                }
                per_feature.push(bag);
            }
            done[item.id as usize] = Some(per_feature);
        }
        for slot in done {
            bags.push(slot.expect("every item encoded"));
        }
        Ok(ItemCodes { bags })
    }

    pub fn bag(&self, item: u32, feature: usize) -> &[(usize, f64)] {
        &self.bags[item as usize][feature]
    }

    pub fn len(&self) -> usize {
        self.bags.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bags.is_empty()
    }
}

/// One-hot interaction type.
pub fn action_encoding(action: Action) -> [f64; 4] {
    let mut v = [0.0; 4];
    v[action.index()] = 1.0;
    v
}

/// One-hot by raw index, for callers holding an untyped action code.
pub fn action_encoding_index(index: usize) -> Result<[f64; 4]> {
    Action::ALL.get(index).map(|&a| action_encoding(a)).ok_or(Error::Index {
        what: "action".into(),
        index,
        bound: Action::ALL.len(),
    })
}

/// Recency and time-gap buckets for a history relative to `reference_day`.
/// The gap of the last interaction is 0.
pub fn session_buckets(history: &[Interaction], reference_day: u32) -> Result<(Vec<u32>, Vec<u32>)> {
    let mut recency = Vec::with_capacity(history.len());
    let mut gap = Vec::with_capacity(history.len());
    for (t, it) in history.iter().enumerate() {
        if it.day > reference_day {
            return Err(DataError::Invalid(format!(
                "interaction on day {} is after reference day {reference_day}",
                it.day
            ))
            .into());
        }
        recency.push((reference_day - it.day).min(MAX_DAYS));
        let g = history.get(t + 1).map_or(0, |next| next.day.saturating_sub(it.day));
        gap.push(g.min(MAX_DAYS));
    }
    Ok((recency, gap))
}

/// Model input for one sequence, recorded on a tape.
#[derive(Clone, Debug)]
pub struct ComposedInput {
    /// `[positions, d_model]`.
    pub vectors: Var,
    pub n_context: usize,
    /// Target index of the next item at each position (0 where unmasked).
    pub target_ids: Vec<usize>,
    pub target_mask: Vec<bool>,
    pub recency: Vec<u32>,
    pub time_gap: Vec<u32>,
}

impl ComposedInput {
    pub fn positions(&self) -> usize {
        self.target_mask.len()
    }
}

#[derive(Clone, Debug)]
pub struct Embedder {
    pub config: EmbedderConfig,
    pub spec: FeatureSpec,
    d_model: usize,
    max_positions: usize,
    tables: Vec<Option<ParamId>>,
    recency: Option<ParamId>,
    gap: Option<ParamId>,
    proj_w: ParamId,
    proj_b: ParamId,
    positional: Option<ParamId>,
    context: Vec<ParamId>,
    codes: ItemCodes,
}

fn uniform(rng: &mut impl Rng, shape: Vec<usize>, a: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-a..a)).collect();
    Tensor::new(shape, data).expect("shape matches data")
}

/// Glorot-uniform bound.
pub(crate) fn glorot(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

const EMBED_INIT: f64 = 0.1;

impl Embedder {
    /// Registers the embedder's parameters in `store`.
    pub fn new(
        store: &mut ParamStore,
        config: EmbedderConfig,
        spec: FeatureSpec,
        schema: &Schema,
        catalog: &Catalog,
        d_model: usize,
        max_positions: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        spec.validate()?;
        if config.session && (config.recency_width == 0 || config.gap_width == 0) {
            return Err(Error::Config("session widths must be positive".into()));
        }
        let codes = ItemCodes::build(catalog, &spec)?;
        let mut tables = Vec::new();
        for f in &spec.features {
            tables.push(f.width.map(|w| {
                store.add(
                    format!("embed.{}", f.name),
                    uniform(rng, vec![f.vocab as usize, w], EMBED_INIT),
                )
            }));
        }
        let (recency, gap) = if config.session {
            (
                Some(store.add("embed.recency", uniform(rng, vec![DAY_BUCKETS, config.recency_width], EMBED_INIT))),
                Some(store.add("embed.gap", uniform(rng, vec![DAY_BUCKETS, config.gap_width], EMBED_INIT))),
            )
        } else {
            (None, None)
        };
        let mut width = spec.width();
        if config.session {
            width += config.recency_width + config.gap_width;
        }
        if config.action {
            width += Action::ALL.len();
        }
        let proj_w = store.add("embed.proj.w", uniform(rng, vec![width, d_model], glorot(width, d_model)));
        let proj_b = store.add("embed.proj.b", Tensor::zeros(vec![d_model]));
        let positional = config
            .positional
            .then(|| store.add("embed.position", uniform(rng, vec![max_positions, d_model], EMBED_INIT)));
        let mut context = Vec::new();
        if config.context {
            for name in CONTEXT_FIELDS {
                let vocab = schema
                    .vocab_of(name)
                    .ok_or_else(|| DataError::Schema(format!("missing context field `{name}`")))?;
                context.push(store.add(
                    format!("embed.ctx.{name}"),
                    uniform(rng, vec![vocab as usize, d_model], EMBED_INIT),
                ));
            }
        }
        Ok(Embedder {
            config,
            spec,
            d_model,
            max_positions,
            tables,
            recency,
            gap,
            proj_w,
            proj_b,
            positional,
            context,
            codes,
        })
    }

    pub fn n_context(&self) -> usize {
        self.context.len()
    }

    pub fn d_model(&self) -> usize {
        self.d_model
    }

    /// Longest history that fits next to the context tokens.
    pub fn max_history(&self) -> usize {
        self.max_positions - self.n_context()
    }

    pub fn codes(&self) -> &ItemCodes {
        &self.codes
    }

    /// Width of the concatenated pre-projection vector.
    pub fn input_width(&self, store: &ParamStore) -> usize {
        store.get(self.proj_w).shape()[0]
    }

    fn block(&self, store: &ParamStore, k: usize, bag: &[(usize, f64)]) -> Vec<f64> {
        let f = &self.spec.features[k];
        let mut out = vec![0.0; f.block_width()];
        match self.tables[k] {
            Some(table) => {
                let t = store.get(table);
                for &(r, w) in bag {
                    for (o, x) in out.iter_mut().zip(t.row(r)) {
                        *o += w * x;
                    }
                }
            }
            None => {
                for &(r, w) in bag {
                    out[r] += w;
                }
            }
        }
        out
    }

    /// Feature concatenation for one item, in spec order.
    pub fn embed_item(&self, store: &ParamStore, item: u32) -> Result<Vec<f64>> {
        if item as usize >= self.codes.len() {
            return Err(Error::Index {
                what: "item".into(),
                index: item as usize,
                bound: self.codes.len(),
            });
        }
        let mut out = Vec::with_capacity(self.spec.width());
        for k in 0..self.spec.features.len() {
            out.extend(self.block(store, k, self.codes.bag(item, k)));
        }
        Ok(out)
    }

    /// Mean of the member articles' blocks for one feature of an outfit.
    pub fn embed_composite_feature(
        &self,
        store: &ParamStore,
        catalog: &Catalog,
        outfit: &Item,
        feature: &str,
    ) -> Result<Vec<f64>> {
        let k = self
            .spec
            .features
            .iter()
            .position(|f| f.name == feature)
            .ok_or_else(|| DataError::Schema(format!("unknown feature `{feature}`")))?;
        if outfit.members.is_empty() {
            return Err(DataError::Invalid(format!("outfit {} has no members", outfit.id)).into());
        }
        let mut out = vec![0.0; self.spec.features[k].block_width()];
        for &m in &outfit.members {
            if catalog.get(m).is_none() {
                return Err(DataError::Invalid(format!("unknown member {m}")).into());
            }
            for (o, x) in out.iter_mut().zip(self.block(store, k, self.codes.bag(m, k))) {
                *o += x;
            }
        }
        let n = outfit.members.len() as f64;
        out.iter_mut().for_each(|x| *x /= n);
        Ok(out)
    }

    /// One `[1, d_model]` token per context field, stacked in field order.
    pub fn context_tokens(&self, tape: &mut Tape, context: &Context) -> Result<Option<Var>> {
        if self.context.is_empty() {
            return Ok(None);
        }
        let mut rows = Vec::with_capacity(self.context.len());
        for ((&table, value), name) in self.context.iter().zip(context.fields()).zip(CONTEXT_FIELDS) {
            let bound = tape.value(tape.param(table)).rows();
            if value as usize >= bound {
                return Err(Error::Index {
                    what: format!("context `{name}`"),
                    index: value as usize,
                    bound,
                });
            }
            rows.push(tape.embedding_lookup(tape.param(table), &[value as usize])?);
        }
        Ok(Some(tape.concat_rows(&rows)?))
    }

    /// Per-position inputs for `history` (chronological) and `context`, with
    /// recency measured against `reference_day`.
    pub fn compose(
        &self,
        tape: &mut Tape,
        history: &[Interaction],
        context: &Context,
        reference_day: u32,
        targets: &TargetSpace,
    ) -> Result<ComposedInput> {
        let n = history.len();
        let n_context = self.n_context();
        if n + n_context > self.max_positions {
            return Err(Error::Num(crate::numkit::NumError::Dimension(format!(
                "{} positions exceed the maximum of {}",
                n + n_context,
                self.max_positions
            ))));
        }
        for it in history {
            if it.item as usize >= self.codes.len() {
                return Err(Error::Index {
                    what: "item".into(),
                    index: it.item as usize,
                    bound: self.codes.len(),
                });
            }
        }
        let (recency, gap) = session_buckets(history, reference_day)?;
        let ctx = self.context_tokens(tape, context)?;

        let mut vectors = ctx;
        if n > 0 {
            let mut blocks = Vec::new();
            for (k, f) in self.spec.features.iter().enumerate() {
                let bags: Vec<Bag> = history.iter().map(|it| self.codes.bag(it.item, k).to_vec()).collect();
                match self.tables[k] {
                    Some(table) => blocks.push(tape.embedding_bag(tape.param(table), bags)?),
                    None => {
                        let w = f.block_width();
                        let mut data = vec![0.0; n * w];
                        for (i, bag) in bags.iter().enumerate() {
                            for &(r, x) in bag {
                                data[i * w + r] += x;
                            }
                        }
                        blocks.push(tape.constant(Tensor::new(vec![n, w], data)?)?);
                    }
                }
            }
            if let (Some(r), Some(g)) = (self.recency, self.gap) {
                let ri: Vec<usize> = recency.iter().map(|&x| x as usize).collect();
                let gi: Vec<usize> = gap.iter().map(|&x| x as usize).collect();
                blocks.push(tape.embedding_lookup(tape.param(r), &ri)?);
                blocks.push(tape.embedding_lookup(tape.param(g), &gi)?);
            }
            if self.config.action {
                let data = history.iter().flat_map(|it| action_encoding(it.action)).collect();
                blocks.push(tape.constant(Tensor::new(vec![n, Action::ALL.len()], data)?)?);
            }
            let concat = tape.concat_cols(&blocks)?;
            let projected = tape.matmul(concat, tape.param(self.proj_w))?;
            let mut x = tape.add_bias(projected, tape.param(self.proj_b))?;
            if let Some(p) = self.positional {
                let pos: Vec<usize> = (0..n).collect();
                let pe = tape.embedding_lookup(tape.param(p), &pos)?;
                x = tape.add(x, pe)?;
            }
            vectors = Some(match vectors {
                Some(c) => tape.concat_rows(&[c, x])?,
                None => x,
            });
        }
        let vectors = match vectors {
            Some(v) => v,
            None => tape.constant(Tensor::zeros(vec![0, self.d_model]))?,
        };
        let mask = build_targets(history, n_context, targets);
        let mut rec_all = vec![0; n_context];
        rec_all.extend(recency);
        let mut gap_all = vec![0; n_context];
        gap_all.extend(gap);
        Ok(ComposedInput {
            vectors,
            n_context,
            target_ids: mask.ids,
            target_mask: mask.bits,
            recency: rec_all,
            time_gap: gap_all,
        })
    }
}
