//! Deterministic synthetic catalog and interaction log with planted structure:
//!
//! - every user has a latent style; articles, outfits and influencers carry a
//!   style too, and article features are drawn mostly from the style's own
//!   values, so article history is predictive of outfit choices;
//! - each day is one session that commits to a single style, usually the
//!   user's own and sometimes a different one;
//! - a user's main style depends on their market, which gives context tokens
//!   something to learn for users without history;
//! - outfits are created on staggered days and a share of users strongly
//!   prefers recently created outfits;
//! - for everyone else an outfit's exposure grows with its age, so older
//!   outfits are clicked more for reasons unrelated to taste.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{
    Action, Catalog, Context, DataError, Dataset, EntityType, Interaction, Item, ItemId, Schema, UserSequence,
    SECONDS_PER_DAY,
};
use crate::seed;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub n_users: u32,
    pub n_articles: u32,
    pub n_outfits: u32,
    pub n_influencers: u32,
    pub horizon_days: u32,
    /// First test day; defaults to the last day of the horizon.
    pub split_day: Option<u32>,
    pub vocab: BTreeMap<String, u32>,
    /// Shares of (fully cold, article-only history, outfit history) users.
    pub segment_shares: [f64; 3],
    pub sessions_mean: f64,
    pub session_len_mean: f64,
    pub test_session_len_mean: f64,
    pub outfit_share: f64,
    pub influencer_share: f64,
    pub session_shift: f64,
    pub off_style: f64,
    pub context_strength: f64,
    pub feature_purity: f64,
    pub follow_prob: f64,
    pub trend_seeker_share: f64,
    pub trend_half_life: f64,
    /// Extra weight a fully exposed outfit gets from users who are not trend
    /// seekers: weight × (1 + gain · (1 − 0.5^(age / half-life))).
    pub exposure_gain: f64,
    pub exposure_half_life: f64,
    pub popularity_zipf: f64,
    pub unavailable_share: f64,
    pub backlog_share: f64,
    pub action_mix: [f64; 4],
    pub outfit_size: [u32; 2],
}

fn default_vocab() -> BTreeMap<String, u32> {
    [
        ("brand", 48),
        ("color", 16),
        ("category", 24),
        ("material", 8),
        ("fit", 8),
        ("pattern", 8),
        ("style", 8),
        ("price_bucket", 5),
        ("country", 10),
        ("device", 3),
        ("language", 4),
        ("market", 5),
        ("premise", 3),
    ]
    .into_iter()
    .map(|(k, v)| (k.to_string(), v))
    .collect()
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            n_users: 10_000,
            n_articles: 20_000,
            n_outfits: 2_000,
            n_influencers: 50,
            horizon_days: 60,
            split_day: None,
            vocab: default_vocab(),
            segment_shares: [0.23, 0.31, 0.46],
            sessions_mean: 4.0,
            session_len_mean: 6.0,
            test_session_len_mean: 7.0,
            outfit_share: 0.5,
            influencer_share: 0.03,
            session_shift: 0.35,
            off_style: 0.05,
            context_strength: 0.85,
            feature_purity: 0.85,
            follow_prob: 0.4,
            trend_seeker_share: 0.4,
            trend_half_life: 4.0,
            exposure_gain: 1.0,
            exposure_half_life: 14.0,
            popularity_zipf: 1.0,
            unavailable_share: 0.03,
            backlog_share: 0.3,
            action_mix: [0.7, 0.15, 0.1, 0.05],
            outfit_size: [2, 7],
        }
    }
}

impl DataConfig {
    pub fn split_day(&self) -> u32 {
        self.split_day.unwrap_or(self.horizon_days.saturating_sub(1))
    }

    fn vocab(&self, name: &str) -> u32 {
        self.vocab.get(name).copied().unwrap_or(0)
    }

    fn n_styles(&self) -> u32 {
        self.vocab("style")
    }

    pub fn validate(&self) -> Result<(), DataError> {
        let err = |m: String| Err(DataError::Config(m));
        if self.n_users == 0 || self.n_articles == 0 || self.n_outfits == 0 || self.n_influencers == 0 {
            return err("entity counts must be positive".into());
        }
        if self.horizon_days < 2 {
            return err("horizon must cover at least two days".into());
        }
        let split = self.split_day();
        if split == 0 || split >= self.horizon_days {
            return err(format!("split day {split} outside 1..{}", self.horizon_days));
        }
        for name in super::ITEM_FEATURES.iter().chain(super::CONTEXT_FIELDS.iter()) {
            if *name == "influencer" {
                continue;
            }
            if self.vocab(name) == 0 {
                return err(format!("vocabulary size for `{name}` must be positive"));
            }
        }
        if let Some(bad) = self.vocab.keys().find(|k| {
            !super::ITEM_FEATURES.contains(&k.as_str()) && !super::CONTEXT_FIELDS.contains(&k.as_str())
                || k.as_str() == "influencer"
        }) {
            return Err(DataError::Schema(format!("unknown feature `{bad}` in data config")));
        }
        let [lo, hi] = self.outfit_size;
        if lo == 0 || lo > hi {
            return err(format!("outfit size range {lo}..={hi} is empty"));
        }
        // every style needs enough articles to fill its largest outfit
        let per_style = self.n_articles / self.n_styles();
        if hi > per_style {
            return err(format!(
                "outfits of up to {hi} articles need at least {hi} articles per style, have {per_style}"
            ));
        }
        let share_sum: f64 = self.segment_shares.iter().sum();
        if (share_sum - 1.0).abs() > 1e-9 || self.segment_shares.iter().any(|s| *s < 0.0) {
            return err("segment shares must be non-negative and sum to 1".into());
        }
        let mix_sum: f64 = self.action_mix.iter().sum();
        if (mix_sum - 1.0).abs() > 1e-9 || self.action_mix.iter().any(|s| *s < 0.0) {
            return err("action mix must be non-negative and sum to 1".into());
        }
        for (name, p) in [
            ("outfit_share", self.outfit_share),
            ("influencer_share", self.influencer_share),
            ("session_shift", self.session_shift),
            ("off_style", self.off_style),
            ("context_strength", self.context_strength),
            ("feature_purity", self.feature_purity),
            ("follow_prob", self.follow_prob),
            ("trend_seeker_share", self.trend_seeker_share),
            ("unavailable_share", self.unavailable_share),
            ("backlog_share", self.backlog_share),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return err(format!("{name} must be a probability, got {p}"));
            }
        }
        if self.outfit_share + self.influencer_share > 1.0 {
            return err("outfit_share + influencer_share exceeds 1".into());
        }
        if self.sessions_mean < 1.0 || self.session_len_mean < 1.0 || self.test_session_len_mean < 1.0 {
            return err("session means must be at least 1".into());
        }
        if self.trend_half_life <= 0.0 || self.exposure_half_life <= 0.0 {
            return err("trend and exposure half-lives must be positive".into());
        }
        if !(self.exposure_gain >= 0.0 && self.exposure_gain.is_finite()) {
            return err(format!("exposure_gain must be non-negative, got {}", self.exposure_gain));
        }
        Ok(())
    }

    pub fn schema(&self) -> Schema {
        let mut vocab = self.vocab.clone();
        vocab.insert("influencer".into(), self.n_influencers);
        Schema { vocab }
    }
}

/// Latent variables behind a generated dataset, for tests that measure
/// whether the planted structure is present.
#[derive(Clone, Debug, PartialEq)]
pub struct PlantedTruth {
    pub item_style: Vec<u32>,
    pub user_style: Vec<u32>,
    pub user_segment: Vec<super::Segment>,
    pub trend_seeker: Vec<bool>,
    pub market_styles: Vec<[u32; 2]>,
}

pub fn generate_synthetic(config: &DataConfig, seed: u64) -> Result<Dataset, DataError> {
    generate_synthetic_with_truth(config, seed).map(|(d, _)| d)
}

fn poisson(rng: &mut ChaCha8Rng, mean: f64) -> u32 {
    // Knuth; means here are small
    let l = (-mean).exp();
    let mut k = 0;
    let mut p = 1.0;
    loop {
        p *= rng.gen::<f64>();
        if p <= l {
            return k;
        }
        k += 1;
    }
}

fn pick_weighted(rng: &mut ChaCha8Rng, weights: &[f64]) -> Option<usize> {
    let total: f64 = weights.iter().sum();
    if total <= 0.0 {
        return None;
    }
    let mut x = rng.gen::<f64>() * total;
    for (i, w) in weights.iter().enumerate() {
        if x < *w {
            return Some(i);
        }
        x -= w;
    }
    weights.iter().rposition(|w| *w > 0.0)
}

struct World<'a> {
    cfg: &'a DataConfig,
    n_styles: u32,
    items: Vec<Item>,
    item_style: Vec<u32>,
    articles_by_style: Vec<Vec<ItemId>>,
    outfits_by_style: Vec<Vec<ItemId>>,
    influencers_by_style: Vec<Vec<ItemId>>,
    /// Indexed by item id; zero for non-outfits.
    outfit_pop: Vec<f64>,
    outfits_with_article: BTreeMap<ItemId, Vec<ItemId>>,
}

fn style_value(rng: &mut ChaCha8Rng, style: u32, n_styles: u32, vocab: u32, purity: f64) -> u32 {
    if rng.gen::<f64>() >= purity {
        return rng.gen_range(0..vocab);
    }
    let own: Vec<u32> = (0..vocab).filter(|v| v % n_styles == style).collect();
    if own.is_empty() {
        style % vocab
    } else {
        *own.choose(rng).expect("non-empty")
    }
}

fn build_catalog<'a>(cfg: &'a DataConfig, rng: &mut ChaCha8Rng) -> World<'a> {
    let n_styles = cfg.n_styles();
    let split = cfg.split_day();
    let mut items = Vec::new();
    let mut item_style = Vec::new();
    let mut articles_by_style = vec![Vec::new(); n_styles as usize];
    let mut outfits_by_style = vec![Vec::new(); n_styles as usize];
    let mut influencers_by_style = vec![Vec::new(); n_styles as usize];

    // articles: balanced across styles so every style can fill an outfit
    for a in 0..cfg.n_articles {
        let style = a % n_styles;
        let mut features = BTreeMap::new();
        for f in ["brand", "color", "category", "material", "fit", "pattern"] {
            features.insert(f.to_string(), style_value(rng, style, n_styles, cfg.vocab(f), cfg.feature_purity));
        }
        features.insert("price_bucket".into(), rng.gen_range(0..cfg.vocab("price_bucket")));
        items.push(Item {
            id: a,
            entity: EntityType::Article,
            features,
            members: Vec::new(),
            creator: None,
            created_day: 0,
            available: true,
        });
        item_style.push(style);
        articles_by_style[style as usize].push(a);
    }

    let influencer_style: Vec<u32> = (0..cfg.n_influencers).map(|_| rng.gen_range(0..n_styles)).collect();
    let outfit_base = cfg.n_articles;
    let mut outfits_with_article: BTreeMap<ItemId, Vec<ItemId>> = BTreeMap::new();
    for o in 0..cfg.n_outfits {
        let id = outfit_base + o;
        let creator = rng.gen_range(0..cfg.n_influencers);
        let style = if rng.gen::<f64>() < 0.9 {
            influencer_style[creator as usize]
        } else {
            rng.gen_range(0..n_styles)
        };
        let size = rng.gen_range(cfg.outfit_size[0]..=cfg.outfit_size[1]) as usize;
        let mut members: Vec<ItemId> = articles_by_style[style as usize]
            .choose_multiple(rng, size)
            .copied()
            .collect();
        members.sort_unstable();
        let price = members
            .iter()
            .map(|m| items[*m as usize].features["price_bucket"] as f64)
            .sum::<f64>()
            / members.len() as f64;
        for &m in &members {
            outfits_with_article.entry(m).or_default().push(id);
        }
        let created_day = if rng.gen::<f64>() < cfg.backlog_share {
            0
        } else {
            rng.gen_range(1..=split)
        };
        let mut features = BTreeMap::new();
        features.insert("influencer".into(), creator);
        features.insert("style".into(), style);
        features.insert("price_bucket".into(), price.round() as u32);
        items.push(Item {
            id,
            entity: EntityType::Outfit,
            features,
            members,
            creator: Some(creator),
            created_day,
            available: rng.gen::<f64>() >= cfg.unavailable_share,
        });
        item_style.push(style);
        outfits_by_style[style as usize].push(id);
    }

    let infl_base = outfit_base + cfg.n_outfits;
    for (k, &style) in influencer_style.iter().enumerate() {
        let id = infl_base + k as u32;
        let mut features = BTreeMap::new();
        features.insert("influencer".into(), k as u32);
        features.insert("style".into(), style);
        items.push(Item {
            id,
            entity: EntityType::Influencer,
            features,
            members: Vec::new(),
            creator: None,
            created_day: 0,
            available: true,
        });
        item_style.push(style);
        influencers_by_style[style as usize].push(id);
    }

    // per-style Zipf popularity over a random ranking
    let mut outfit_pop = vec![0.0; items.len()];
    for list in &outfits_by_style {
        let mut ranked = list.clone();
        ranked.shuffle(rng);
        for (rank, id) in ranked.iter().enumerate() {
            outfit_pop[*id as usize] = 1.0 / ((rank + 1) as f64).powf(cfg.popularity_zipf);
        }
    }

    World {
        cfg,
        n_styles,
        items,
        item_style,
        articles_by_style,
        outfits_by_style,
        influencers_by_style,
        outfit_pop,
        outfits_with_article,
    }
}

impl World<'_> {
    fn outfit_weight(&self, id: ItemId, day: u32, seeker: bool, test: bool) -> f64 {
        let item = &self.items[id as usize];
        if item.created_day > day || (test && !item.available) {
            return 0.0;
        }
        let age = (day - item.created_day) as f64;
        let w = self.outfit_pop[id as usize];
        if seeker {
            w * 0.5f64.powf(age / self.cfg.trend_half_life)
        } else {
            w * (1.0 + self.cfg.exposure_gain * (1.0 - 0.5f64.powf(age / self.cfg.exposure_half_life)))
        }
    }

    fn pick_outfit(&self, rng: &mut ChaCha8Rng, style: u32, day: u32, seeker: bool, test: bool) -> Option<ItemId> {
        let pool = &self.outfits_by_style[style as usize];
        let weights: Vec<f64> = pool.iter().map(|&o| self.outfit_weight(o, day, seeker, test)).collect();
        pick_weighted(rng, &weights).map(|i| pool[i])
    }

    fn pick_any_outfit(&self, rng: &mut ChaCha8Rng, style: u32, day: u32, seeker: bool, test: bool) -> ItemId {
        if let Some(o) = self.pick_outfit(rng, style, day, seeker, test) {
            return o;
        }
        for s in 0..self.n_styles {
            if let Some(o) = self.pick_outfit(rng, (style + s) % self.n_styles, day, seeker, test) {
                return o;
            }
        }
        // every outfit unavailable or not yet created: fall back to the first backlog outfit
        self.outfits_by_style.iter().flatten().copied().next().expect("catalog has outfits")
    }
}

/// Generates a dataset; a pure function of `(config, seed)`.
pub fn generate_synthetic_with_truth(config: &DataConfig, seed: u64) -> Result<(Dataset, PlantedTruth), DataError> {
    config.validate()?;
    let cfg = config;
    let mut rng = seed::rng(seed, "catalog", &[]);
    let world = build_catalog(cfg, &mut rng);
    let n_styles = world.n_styles;
    let split = cfg.split_day();
    let n_markets = cfg.vocab("market");

    let mut market_rng = seed::rng(seed, "markets", &[]);
    let market_styles: Vec<[u32; 2]> = (0..n_markets)
        .map(|_| {
            let a = market_rng.gen_range(0..n_styles);
            let b = (a + 1 + market_rng.gen_range(0..n_styles - 1)) % n_styles;
            [a, b]
        })
        .collect();

    let mut sequences = Vec::with_capacity(cfg.n_users as usize);
    let mut user_style = Vec::new();
    let mut user_segment = Vec::new();
    let mut trend_seeker = Vec::new();
    for u in 0..cfg.n_users {
        let mut rng = seed::rng(seed, "user", &[u as u64]);
        let market = rng.gen_range(0..n_markets);
        let context = Context {
            market,
            country: (market * 2 + rng.gen_range(0..2)) % cfg.vocab("country"),
            language: market % cfg.vocab("language"),
            device: rng.gen_range(0..cfg.vocab("device")),
            premise: rng.gen_range(0..cfg.vocab("premise")),
        };
        let main_style = if rng.gen::<f64>() < cfg.context_strength {
            market_styles[market as usize][rng.gen_range(0..2)]
        } else {
            rng.gen_range(0..n_styles)
        };
        let seg_draw = rng.gen::<f64>();
        let segment = if seg_draw < cfg.segment_shares[0] {
            super::Segment::FullyCold
        } else if seg_draw < cfg.segment_shares[0] + cfg.segment_shares[1] {
            super::Segment::ArticleOnly
        } else {
            super::Segment::OutfitHistory
        };
        let seeker = rng.gen::<f64>() < cfg.trend_seeker_share;

        let mut days: Vec<u32> = Vec::new();
        if segment != super::Segment::FullyCold {
            let n = (1 + poisson(&mut rng, cfg.sessions_mean - 1.0)).min(split);
            let mut all: Vec<u32> = (0..split).collect();
            all.shuffle(&mut rng);
            days = all[..n as usize].to_vec();
            days.sort_unstable();
        }
        let test_day = rng.gen_range(split..cfg.horizon_days);

        let mut interactions = Vec::new();
        let mut session = SessionGen {
            world: &world,
            user: u,
            main_style,
            seeker,
            interactions: &mut interactions,
        };
        for &day in &days {
            let len = 2 + poisson(&mut rng, (cfg.session_len_mean - 2.0).max(0.0));
            let outfits_allowed = segment == super::Segment::OutfitHistory;
            session.run(&mut rng, day, len, outfits_allowed, false);
        }
        if segment == super::Segment::OutfitHistory
            && !interactions.iter().any(|i| world.items[i.item as usize].entity == EntityType::Outfit)
        {
            // guarantee the segment's defining property on the last history interaction
            let last = interactions.last_mut().expect("history has at least one session");
            let style = world.item_style[last.item as usize];
            last.item = world.pick_any_outfit(&mut rng, style, last.day, seeker, false);
        }
        let mut session = SessionGen {
            world: &world,
            user: u,
            main_style,
            seeker,
            interactions: &mut interactions,
        };
        let len = 1 + poisson(&mut rng, cfg.test_session_len_mean - 1.0);
        session.run(&mut rng, test_day, len, true, true);

        sequences.push(UserSequence {
            user: u,
            context,
            interactions,
        });
        user_style.push(main_style);
        user_segment.push(segment);
        trend_seeker.push(seeker);
    }

    let dataset = Dataset {
        schema: cfg.schema(),
        catalog: Catalog::new(world.items.clone())?,
        sequences,
        horizon_days: cfg.horizon_days,
    };
    let truth = PlantedTruth {
        item_style: world.item_style.clone(),
        user_style,
        user_segment,
        trend_seeker,
        market_styles,
    };
    Ok((dataset, truth))
}

struct SessionGen<'w, 'o> {
    world: &'w World<'w>,
    user: u32,
    main_style: u32,
    seeker: bool,
    interactions: &'o mut Vec<Interaction>,
}

impl SessionGen<'_, '_> {
    fn run(&mut self, rng: &mut ChaCha8Rng, day: u32, len: u32, outfits_allowed: bool, test: bool) {
        let w = self.world;
        let cfg = w.cfg;
        let style = if rng.gen::<f64>() < cfg.session_shift {
            (self.main_style + 1 + rng.gen_range(0..w.n_styles - 1)) % w.n_styles
        } else {
            self.main_style
        };
        let mut ts = day as u64 * SECONDS_PER_DAY + rng.gen_range(8 * 3600..20 * 3600);
        let mut prev: Option<ItemId> = None;
        let mut placed_outfit = false;
        for step in 0..len {
            let pick_style = if rng.gen::<f64>() < cfg.off_style {
                rng.gen_range(0..w.n_styles)
            } else {
                style
            };
            let draw = rng.gen::<f64>();
            let mut entity = if !outfits_allowed {
                EntityType::Article
            } else if draw < cfg.outfit_share {
                EntityType::Outfit
            } else if draw < cfg.outfit_share + cfg.influencer_share {
                EntityType::Influencer
            } else {
                EntityType::Article
            };
            // test sessions always contain at least one outfit
            if test && step + 1 == len && !placed_outfit {
                entity = EntityType::Outfit;
            }
            let item = match entity {
                EntityType::Outfit => {
                    let followed = prev
                        .filter(|p| w.items[*p as usize].entity == EntityType::Article)
                        .filter(|_| rng.gen::<f64>() < cfg.follow_prob)
                        .and_then(|p| w.outfits_with_article.get(&p))
                        .and_then(|cands| {
                            let weights: Vec<f64> =
                                cands.iter().map(|&o| w.outfit_weight(o, day, self.seeker, test)).collect();
                            pick_weighted(rng, &weights).map(|i| cands[i])
                        });
                    placed_outfit = true;
                    followed.unwrap_or_else(|| w.pick_any_outfit(rng, pick_style, day, self.seeker, test))
                }
                EntityType::Article => {
                    let from_outfit = prev
                        .filter(|p| w.items[*p as usize].entity == EntityType::Outfit)
                        .filter(|_| rng.gen::<f64>() < cfg.follow_prob)
                        .and_then(|p| w.items[p as usize].members.choose(rng).copied());
                    from_outfit.unwrap_or_else(|| {
                        *w.articles_by_style[pick_style as usize].choose(rng).expect("style has articles")
                    })
                }
                EntityType::Influencer => match w.influencers_by_style[pick_style as usize].choose(rng) {
                    Some(i) => *i,
                    None => *w.articles_by_style[pick_style as usize].choose(rng).expect("style has articles"),
                },
            };
            let action = Action::ALL[pick_weighted(rng, &cfg.action_mix).unwrap_or(0)];
            self.interactions.push(Interaction {
                user: self.user,
                item,
                action,
                timestamp: ts,
                day,
            });
            prev = Some(item);
            ts += rng.gen_range(20..400);
        }
    }
}
