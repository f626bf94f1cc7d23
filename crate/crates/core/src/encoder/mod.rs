//! Stacked causal-attention transformer with a next-item head over the
//! target entity type, plus the checkpoint format.

mod checkpoint;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};

use crate::datamodel::{truncate_recent, Catalog, Context, EntityType, Interaction, Schema, TargetSpace};
use crate::embedder::{glorot, ComposedInput, Embedder, EmbedderConfig, MAX_DAYS};
use crate::numkit::{softmax_in_place, NumError, ParamId, ParamStore, Tape, Tensor, Var};
use crate::{seed, Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub dropout_rate: f64,
    pub max_positions: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            n_layers: 2,
            n_heads: 4,
            d_model: 32,
            d_ff: 128,
            dropout_rate: 0.1,
            max_positions: 128,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_layers == 0 || self.n_heads == 0 || self.d_model == 0 || self.d_ff == 0 || self.max_positions == 0 {
            return Err(Error::Config("encoder sizes must be positive".into()));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} not divisible by {} heads",
                self.d_model, self.n_heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::Config(format!("dropout rate {} not in [0, 1)", self.dropout_rate)));
        }
        Ok(())
    }
}

/// Everything needed to rebuild a model's parameter layout.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub embedder: EmbedderConfig,
    pub target_entity: EntityType,
    /// Learned per-age-bucket score offset for candidates during training;
    /// every candidate is scored as age 0 at inference.
    pub age_feature: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            encoder: EncoderConfig::default(),
            embedder: EmbedderConfig::default(),
            target_entity: EntityType::Outfit,
            age_feature: false,
        }
    }
}

/// Age buckets 0..=60 plus one for candidates not yet created.
pub const AGE_BUCKETS: usize = MAX_DAYS as usize + 2;
const UNRELEASED: usize = AGE_BUCKETS - 1;

/// Age bucket of an item created on `created_day`, seen on `day`.
pub fn age_bucket(created_day: u32, day: u32) -> usize {
    if created_day > day {
        UNRELEASED
    } else {
        (day - created_day).min(MAX_DAYS) as usize
    }
}

/// `allowed[i][j]` iff position `i` may attend to position `j`.
pub fn causal_mask(n: usize) -> Vec<Vec<bool>> {
    (0..n).map(|i| (0..n).map(|j| j <= i).collect()).collect()
}

#[derive(Clone, Debug)]
struct Layer {
    ln1: (ParamId, ParamId),
    wq: ParamId,
    wk: ParamId,
    wv: ParamId,
    wo: ParamId,
    bo: ParamId,
    ln2: (ParamId, ParamId),
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

const LN_EPS: f64 = 1e-6;

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub embedder: Embedder,
    pub targets: TargetSpace,
    schema: Schema,
    layers: Vec<Layer>,
    final_ln: (ParamId, ParamId),
    out_w: ParamId,
    out_b: ParamId,
    age: Option<ParamId>,
    created_day: Vec<u32>,
}

fn uniform(rng: &mut impl Rng, shape: Vec<usize>, a: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(-a..a)).collect()).expect("shape matches data")
}

impl Model {
    /// Fresh parameters, initialized from `seed`.
    pub fn new(config: ModelConfig, schema: &Schema, catalog: &Catalog, seed: u64) -> Result<Self> {
        config.encoder.validate()?;
        let targets = TargetSpace::new(catalog, config.target_entity);
        if targets.is_empty() {
            return Err(Error::Config(format!("catalog has no {:?} items to predict", config.target_entity)));
        }
        let mut rng = seed::rng(seed, "init", &[]);
        let mut store = ParamStore::new();
        let e = &config.encoder;
        let d = e.d_model;
        let spec = config.embedder.feature_spec(schema, catalog.len());
        let embedder = Embedder::new(
            &mut store,
            config.embedder.clone(),
            spec,
            schema,
            catalog,
            d,
            e.max_positions,
            &mut rng,
        )?;
        let ln = |store: &mut ParamStore, name: String| {
            (
                store.add(format!("{name}.gain"), Tensor::new(vec![d], vec![1.0; d]).expect("len d")),
                store.add(format!("{name}.bias"), Tensor::zeros(vec![d])),
            )
        };
        let mut layers = Vec::new();
        for l in 0..e.n_layers {
            let p = format!("layer{l}");
            let a = glorot(d, d);
            layers.push(Layer {
                ln1: ln(&mut store, format!("{p}.ln1")),
                wq: store.add(format!("{p}.attn.q"), uniform(&mut rng, vec![d, d], a)),
                wk: store.add(format!("{p}.attn.k"), uniform(&mut rng, vec![d, d], a)),
                wv: store.add(format!("{p}.attn.v"), uniform(&mut rng, vec![d, d], a)),
                wo: store.add(format!("{p}.attn.o"), uniform(&mut rng, vec![d, d], a)),
                bo: store.add(format!("{p}.attn.o_bias"), Tensor::zeros(vec![d])),
                ln2: ln(&mut store, format!("{p}.ln2")),
                w1: store.add(format!("{p}.ffn.w1"), uniform(&mut rng, vec![d, e.d_ff], glorot(d, e.d_ff))),
                b1: store.add(format!("{p}.ffn.b1"), Tensor::zeros(vec![e.d_ff])),
                w2: store.add(format!("{p}.ffn.w2"), uniform(&mut rng, vec![e.d_ff, d], glorot(e.d_ff, d))),
                b2: store.add(format!("{p}.ffn.b2"), Tensor::zeros(vec![d])),
            });
        }
        let final_ln = ln(&mut store, "final_ln".into());
        let v = targets.len();
        let out_w = store.add("head.w", uniform(&mut rng, vec![v, d], glorot(d, v).min(0.1)));
        let out_b = store.add("head.bias", Tensor::zeros(vec![v]));
        let age = config
            .age_feature
            .then(|| store.add("head.age", Tensor::zeros(vec![AGE_BUCKETS, 1])));
        let created_day = targets
            .ids()
            .iter()
            .map(|&id| catalog.get(id).expect("target ids come from the catalog").created_day)
            .collect();
        Ok(Model {
            config,
            store,
            embedder,
            targets,
            schema: schema.clone(),
            layers,
            final_ln,
            out_w,
            out_b,
            age,
            created_day,
        })
    }

    pub fn schema(&self) -> &Schema {
        &self.schema
    }

    pub fn out_weight(&self) -> ParamId {
        self.out_w
    }

    pub fn out_bias(&self) -> ParamId {
        self.out_b
    }

    pub fn age_table(&self) -> Option<ParamId> {
        self.age
    }

    pub fn created_day(&self, target: usize) -> u32 {
        self.created_day[target]
    }

    /// Builds the inputs for `history` on `tape`.
    pub fn compose(
        &self,
        tape: &mut Tape,
        history: &[Interaction],
        context: &Context,
        reference_day: u32,
    ) -> Result<ComposedInput> {
        self.embedder.compose(tape, history, context, reference_day, &self.targets)
    }

    fn check_positions(&self, input: &ComposedInput) -> Result<usize> {
        let n = input.positions();
        if n > self.config.encoder.max_positions {
            return Err(NumError::Dimension(format!(
                "{n} positions exceed the maximum of {}",
                self.config.encoder.max_positions
            ))
            .into());
        }
        if n == 0 {
            return Err(NumError::Dimension("empty input".into()).into());
        }
        Ok(n)
    }

    /// One pre-norm block. With `last_only`, queries, the feed-forward part
    /// and the output cover only the final row; keys and values still span
    /// every row.
    fn block(&self, tape: &mut Tape, layer: &Layer, x: Var, last_only: bool, training: bool, rng: &mut ChaCha8Rng) -> Result<Var> {
        let e = &self.config.encoder;
        let dh = e.d_model / e.n_heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let rate = e.dropout_rate;
        let h = tape.layer_norm(x, tape.param(layer.ln1.0), tape.param(layer.ln1.1), LN_EPS)?;
        let (x, hq) = if last_only {
            let last = tape.value(x).rows() - 1;
            (tape.embedding_lookup(x, &[last])?, tape.embedding_lookup(h, &[last])?)
        } else {
            (x, h)
        };
        let q = tape.matmul(hq, tape.param(layer.wq))?;
        let k = tape.matmul(h, tape.param(layer.wk))?;
        let v = tape.matmul(h, tape.param(layer.wv))?;
        let mut heads = Vec::with_capacity(e.n_heads);
        for head in 0..e.n_heads {
            let qh = tape.slice_cols(q, head * dh, dh)?;
            let kh = tape.slice_cols(k, head * dh, dh)?;
            let vh = tape.slice_cols(v, head * dh, dh)?;
            let s = tape.matmul_nt(qh, kh)?;
            let s = tape.scale(s, scale)?;
            // the final row may attend to every position
            let a = if last_only { tape.softmax(s)? } else { tape.causal_softmax(s)? };
            heads.push(tape.matmul(a, vh)?);
        }
        let cat = if heads.len() == 1 { heads[0] } else { tape.concat_cols(&heads)? };
        let o = tape.matmul(cat, tape.param(layer.wo))?;
        let o = tape.add_bias(o, tape.param(layer.bo))?;
        let o = tape.dropout(o, rate, training, rng)?;
        let x = tape.add(x, o)?;

        let h = tape.layer_norm(x, tape.param(layer.ln2.0), tape.param(layer.ln2.1), LN_EPS)?;
        let f = tape.matmul(h, tape.param(layer.w1))?;
        let f = tape.add_bias(f, tape.param(layer.b1))?;
        let f = tape.relu(f)?;
        let f = tape.matmul(f, tape.param(layer.w2))?;
        let f = tape.add_bias(f, tape.param(layer.b2))?;
        let f = tape.dropout(f, rate, training, rng)?;
        Ok(tape.add(x, f)?)
    }

    /// Final hidden states `[positions, d_model]`.
    pub fn hidden(&self, tape: &mut Tape, input: &ComposedInput, training: bool, rng: &mut ChaCha8Rng) -> Result<Var> {
        self.check_positions(input)?;
        let mut x = tape.dropout(input.vectors, self.config.encoder.dropout_rate, training, rng)?;
        for layer in &self.layers {
            x = self.block(tape, layer, x, false, training, rng)?;
        }
        Ok(tape.layer_norm(x, tape.param(self.final_ln.0), tape.param(self.final_ln.1), LN_EPS)?)
    }

    /// Inference-mode hidden state of the final position only, `[1, d_model]`.
    /// Equal to the last row of [`Model::hidden`] without dropout.
    pub fn hidden_last(&self, tape: &mut Tape, input: &ComposedInput) -> Result<Var> {
        self.check_positions(input)?;
        // inference draws no randomness; the generator only satisfies the signature
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut x = input.vectors;
        let n_layers = self.layers.len();
        for (l, layer) in self.layers.iter().enumerate() {
            x = self.block(tape, layer, x, l + 1 == n_layers, false, &mut rng)?;
        }
        Ok(tape.layer_norm(x, tape.param(self.final_ln.0), tape.param(self.final_ln.1), LN_EPS)?)
    }

    /// Logits `[positions, |targets|]`. With the age feature, every candidate
    /// carries the age-0 offset.
    pub fn forward(&self, tape: &mut Tape, input: &ComposedInput, training: bool, rng: &mut ChaCha8Rng) -> Result<Var> {
        let h = self.hidden(tape, input, training, rng)?;
        self.head(tape, h)
    }

    /// Output head applied to rows of hidden states.
    pub fn head(&self, tape: &mut Tape, h: Var) -> Result<Var> {
        let logits = tape.matmul_nt(h, tape.param(self.out_w))?;
        let mut logits = tape.add_bias(logits, tape.param(self.out_b))?;
        if let Some(age) = self.age {
            let rows = tape.value(h).rows();
            let ones = tape.constant(Tensor::new(vec![rows, 1], vec![1.0; rows])?)?;
            let zero_age = vec![vec![0; self.targets.len()]; rows];
            let offset = tape.gather_scores(ones, tape.param(age), None, zero_age)?;
            logits = tape.add(logits, offset)?;
        }
        Ok(logits)
    }

    /// Logits of the next item after `history`, or `None` when the model has
    /// no positions to read from (no context tokens and no history).
    pub fn next_logits(&self, history: &[Interaction], context: &Context, reference_day: u32) -> Result<Option<Vec<f64>>> {
        let history = truncate_recent(history, self.embedder.max_history());
        if history.is_empty() && self.embedder.n_context() == 0 {
            return Ok(None);
        }
        let mut tape = Tape::new(&self.store);
        let input = self.compose(&mut tape, history, context, reference_day)?;
        let last = self.hidden_last(&mut tape, &input)?;
        let logits = self.head(&mut tape, last)?;
        Ok(Some(tape.value(logits).data().to_vec()))
    }

    /// Next-item distribution over the target space. Unavailable items get
    /// probability 0 and the rest are renormalized; with no readable
    /// position the distribution is uniform over available items.
    pub fn predict_next(&self, history: &[Interaction], context: &Context, reference_day: u32) -> Result<Vec<f64>> {
        let v = self.targets.len();
        let available: Vec<bool> = (0..v).map(|k| self.targets.available(k)).collect();
        let mut probs = match self.next_logits(history, context, reference_day)? {
            Some(l) => l,
            None => vec![0.0; v],
        };
        let mut avail_logits: Vec<f64> = probs.iter().zip(&available).filter(|(_, a)| **a).map(|(x, _)| *x).collect();
        softmax_in_place(&mut avail_logits);
        let mut it = avail_logits.into_iter();
        for (p, a) in probs.iter_mut().zip(&available) {
            *p = if *a { it.next().expect("one per available item") } else { 0.0 };
        }
        Ok(probs)
    }
}

#[cfg(test)]
mod tests;
