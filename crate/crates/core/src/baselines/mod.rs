//! Comparison rankers: popularity, item-based collaborative filtering,
//! embedding nearest neighbours over articles, and the IDs-only sequence
//! model configuration.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use crate::datamodel::{Catalog, Context, EntityType, Interaction, ItemId, TargetSpace, UserId};
use crate::embedder::EmbedderConfig;
use crate::encoder::{Model, ModelConfig};
use crate::reranker::Ranker;
use crate::{Error, Result};

/// Candidate pool size for [`EmbeddingKnn`].
pub const RECENT_OUTFITS: usize = 200;
/// History window for [`EmbeddingKnn`].
pub const RECENT_ARTICLES: usize = 10;

/// Interaction counts per target item over a training log.
pub fn popularity_counts<'a>(interactions: impl IntoIterator<Item = &'a Interaction>, targets: &TargetSpace) -> Vec<f64> {
    let mut counts = vec![0.0; targets.len()];
    for it in interactions {
        if let Some(k) = targets.index_of(it.item) {
            counts[k] += 1.0;
        }
    }
    counts
}

/// Same list for everyone: training-window interaction counts.
pub struct Popularity {
    targets: TargetSpace,
    counts: Vec<f64>,
}

impl Popularity {
    pub fn new<'a>(interactions: impl IntoIterator<Item = &'a Interaction>, targets: TargetSpace) -> Self {
        let counts = popularity_counts(interactions, &targets);
        Popularity { targets, counts }
    }

    pub fn counts(&self) -> &[f64] {
        &self.counts
    }
}

impl Ranker for Popularity {
    fn targets(&self) -> &TargetSpace {
        &self.targets
    }

    fn scores(&self, _: &[Interaction], _: &Context, _: u32) -> Result<Vec<f64>> {
        Ok(self.counts.clone())
    }
}

/// Sparse user × target-item counts.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct InteractionMatrix {
    pub n_items: usize,
    pub rows: BTreeMap<UserId, BTreeMap<usize, f64>>,
}

impl InteractionMatrix {
    pub fn from_log<'a>(interactions: impl IntoIterator<Item = &'a Interaction>, targets: &TargetSpace) -> Self {
        let mut rows: BTreeMap<UserId, BTreeMap<usize, f64>> = BTreeMap::new();
        for it in interactions {
            if let Some(k) = targets.index_of(it.item) {
                *rows.entry(it.user).or_default().entry(k).or_insert(0.0) += 1.0;
            }
        }
        InteractionMatrix {
            n_items: targets.len(),
            rows,
        }
    }

    /// Column cosine similarities, sparse per item; self-similarity
    /// included. Rows are in ascending item order.
    pub fn item_cosine(&self) -> Vec<Vec<(usize, f64)>> {
        let mut norm = vec![0.0; self.n_items];
        let mut dot: Vec<HashMap<usize, f64>> = vec![HashMap::new(); self.n_items];
        for row in self.rows.values() {
            for (&a, &ca) in row {
                norm[a] += ca * ca;
                for (&b, &cb) in row {
                    *dot[a].entry(b).or_insert(0.0) += ca * cb;
                }
            }
        }
        dot.into_iter()
            .enumerate()
            .map(|(a, m)| {
                let mut v: Vec<(usize, f64)> = m
                    .into_iter()
                    .map(|(b, d)| (b, d / (norm[a].sqrt() * norm[b].sqrt())))
                    .collect();
                v.sort_by_key(|&(b, _)| b);
                v
            })
            .collect()
    }
}

/// Item-based CF: a candidate scores the sum of its column cosine to every
/// distinct target item in the fed history. Items already in the history are
/// excluded; users without target items get popularity, which also breaks
/// ties.
pub struct CfKnn {
    targets: TargetSpace,
    similar: Vec<Vec<(usize, f64)>>,
    popularity: Vec<f64>,
}

impl CfKnn {
    pub fn new(matrix: &InteractionMatrix, popularity: Vec<f64>, targets: TargetSpace) -> Result<Self> {
        if matrix.n_items != targets.len() || popularity.len() != targets.len() {
            return Err(Error::Config("matrix, popularity and target space sizes differ".into()));
        }
        Ok(CfKnn {
            targets,
            similar: matrix.item_cosine(),
            popularity,
        })
    }

    pub fn from_log<'a>(interactions: impl IntoIterator<Item = &'a Interaction> + Clone, targets: TargetSpace) -> Result<Self> {
        let matrix = InteractionMatrix::from_log(interactions.clone(), &targets);
        let popularity = popularity_counts(interactions, &targets);
        CfKnn::new(&matrix, popularity, targets)
    }
}

impl Ranker for CfKnn {
    fn targets(&self) -> &TargetSpace {
        &self.targets
    }

    fn scores(&self, history: &[Interaction], _: &Context, _: u32) -> Result<Vec<f64>> {
        let seen: BTreeSet<usize> = history.iter().filter_map(|i| self.targets.index_of(i.item)).collect();
        if seen.is_empty() {
            return Ok(self.popularity.clone());
        }
        let mut scores = vec![0.0; self.targets.len()];
        for &s in &seen {
            for &(o, c) in &self.similar[s] {
                scores[o] += c;
            }
        }
        for &s in &seen {
            scores[s] = f64::NEG_INFINITY;
        }
        Ok(scores)
    }

    fn tie_break(&self) -> Option<&[f64]> {
        Some(&self.popularity)
    }
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// Content kNN over article embeddings. A candidate outfit scores the mean,
/// over its member articles, of the best cosine match among the user's last
/// [`RECENT_ARTICLES`] article interactions. Candidates are the
/// [`RECENT_OUTFITS`] newest outfits that exist on the serving day; users
/// without article history get popularity.
pub struct EmbeddingKnn {
    targets: TargetSpace,
    vectors: BTreeMap<ItemId, Vec<f64>>,
    members: Vec<Vec<ItemId>>,
    /// Target indices, newest first.
    by_recency: Vec<(u32, usize)>,
    popularity: Vec<f64>,
    pool: usize,
}

impl EmbeddingKnn {
    /// `vectors` holds one embedding per article.
    pub fn new(catalog: &Catalog, targets: TargetSpace, vectors: BTreeMap<ItemId, Vec<f64>>, popularity: Vec<f64>) -> Result<Self> {
        if popularity.len() != targets.len() {
            return Err(Error::Config("popularity and target space sizes differ".into()));
        }
        let mut members = Vec::with_capacity(targets.len());
        let mut by_recency = Vec::with_capacity(targets.len());
        for (k, &id) in targets.ids().iter().enumerate() {
            let item = catalog.get(id).ok_or_else(|| Error::Config(format!("target {id} not in catalog")))?;
            for m in &item.members {
                if !vectors.contains_key(m) {
                    return Err(Error::Config(format!("no embedding for article {m}")));
                }
            }
            members.push(item.members.clone());
            by_recency.push((item.created_day, k));
        }
        by_recency.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
        Ok(EmbeddingKnn {
            targets,
            vectors,
            members,
            by_recency,
            popularity,
            pool: RECENT_OUTFITS,
        })
    }

    /// Uses the model's learned feature embeddings of every article.
    pub fn from_model(model: &Model, catalog: &Catalog, targets: TargetSpace, popularity: Vec<f64>) -> Result<Self> {
        let mut vectors = BTreeMap::new();
        for item in catalog.items().iter().filter(|i| i.entity == EntityType::Article) {
            vectors.insert(item.id, model.embedder.embed_item(&model.store, item.id)?);
        }
        EmbeddingKnn::new(catalog, targets, vectors, popularity)
    }

    pub fn with_pool(mut self, pool: usize) -> Self {
        self.pool = pool;
        self
    }

    /// Candidate target indices for `day`, newest first.
    pub fn pool(&self, day: u32) -> Vec<usize> {
        self.by_recency
            .iter()
            .filter(|(created, k)| *created <= day && self.targets.available(*k))
            .take(self.pool)
            .map(|&(_, k)| k)
            .collect()
    }
}

impl Ranker for EmbeddingKnn {
    fn targets(&self) -> &TargetSpace {
        &self.targets
    }

    fn scores(&self, history: &[Interaction], _: &Context, day: u32) -> Result<Vec<f64>> {
        let recent: Vec<&Vec<f64>> = history
            .iter()
            .rev()
            .filter_map(|i| self.vectors.get(&i.item))
            .take(RECENT_ARTICLES)
            .collect();
        if recent.is_empty() {
            return Ok(self.popularity.clone());
        }
        let mut scores = vec![f64::NEG_INFINITY; self.targets.len()];
        for k in self.pool(day) {
            let members = &self.members[k];
            if members.is_empty() {
                continue;
            }
            let total: f64 = members
                .iter()
                .map(|m| {
                    let v = &self.vectors[m];
                    recent.iter().map(|h| cosine(v, h)).fold(f64::NEG_INFINITY, f64::max)
                })
                .sum();
            scores[k] = total / members.len() as f64;
        }
        Ok(scores)
    }

    fn tie_break(&self) -> Option<&[f64]> {
        Some(&self.popularity)
    }
}

/// The IDs-only sequence model: item-id embeddings alone, no context tokens,
/// session or action inputs. Encoder, head and target mask are unchanged.
pub fn sasrec_config(base: &ModelConfig) -> ModelConfig {
    ModelConfig {
        embedder: EmbedderConfig::ids_only(),
        age_feature: false,
        ..base.clone()
    }
}
