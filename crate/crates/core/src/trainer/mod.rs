//! Next-item training with target-entity masking, the five losses, uniform
//! negative sampling and the epoch loop.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::datamodel::{truncate_recent, Interaction, TargetSpace, UserSequence};
use crate::encoder::{age_bucket, Model};
use crate::numkit::{adam_step, AdamConfig, AdamState, GradBuffer, NumError, Tape, Tensor, Var};
use crate::par::Exec;
use crate::{seed, Error, Result};

/// Shifted targets: position `p` predicts the interaction after it.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TargetMask {
    /// Target-space index per position; 0 where the bit is off.
    pub ids: Vec<usize>,
    pub bits: Vec<bool>,
}

impl TargetMask {
    pub fn count(&self) -> usize {
        self.bits.iter().filter(|b| **b).count()
    }

    pub fn positions(&self) -> Vec<usize> {
        self.bits.iter().enumerate().filter(|(_, b)| **b).map(|(p, _)| p).collect()
    }
}

/// Targets for `n_context` context positions followed by `history`.
///
/// An interaction position is on iff the next interaction is an available
/// target-entity item. Context positions are off, except the last one, which
/// predicts the first interaction under the same rule; that is the position
/// cold-start users are served from. The last interaction has no successor.
pub fn build_targets(history: &[Interaction], n_context: usize, targets: &TargetSpace) -> TargetMask {
    let n = n_context + history.len();
    let mut ids = vec![0; n];
    let mut bits = vec![false; n];
    for p in n_context.saturating_sub(1)..n {
        // position p predicts history[p + 1 - n_context]
        let Some(next) = history.get(p + 1 - n_context) else {
            continue;
        };
        if let Some(k) = targets.available_index(next.item) {
            ids[p] = k;
            bits[p] = true;
        }
    }
    TargetMask { ids, bits }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossKind {
    FullCe,
    SampledCe,
    Bce,
    Bpr,
    Top1,
}

impl LossKind {
    pub const ALL: [LossKind; 5] = [
        LossKind::FullCe,
        LossKind::SampledCe,
        LossKind::Bce,
        LossKind::Bpr,
        LossKind::Top1,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            LossKind::FullCe => "full-ce",
            LossKind::SampledCe => "sampled-ce",
            LossKind::Bce => "bce",
            LossKind::Bpr => "bpr",
            LossKind::Top1 => "top1",
        }
    }

    pub fn is_sampled(self) -> bool {
        self != LossKind::FullCe
    }
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        LossKind::ALL.into_iter().find(|k| k.as_str() == s).ok_or_else(|| {
            let valid: Vec<&str> = LossKind::ALL.iter().map(|k| k.as_str()).collect();
            Error::Config(format!("unknown loss `{s}`; valid: {}", valid.join(", ")))
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub loss: LossKind,
    pub n_negatives: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub epochs: usize,
    pub seed: u64,
    /// Sequences keep only their most recent interactions.
    pub max_len: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            loss: LossKind::FullCe,
            n_negatives: 30,
            batch_size: 64,
            lr: 0.01,
            epochs: 10,
            seed: 0,
            max_len: 100,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.epochs == 0 || self.max_len == 0 {
            return Err(Error::Config("batch_size, epochs and max_len must be positive".into()));
        }
        if self.lr <= 0.0 || !self.lr.is_finite() {
            return Err(Error::Config(format!("learning rate {} must be positive", self.lr)));
        }
        if self.loss.is_sampled() && self.n_negatives == 0 {
            return Err(Error::Config("sampled losses need at least one negative".into()));
        }
        Ok(())
    }
}

/// `n` distinct target indices, uniform over `0..vocab` without `positive`.
pub fn sample_negatives(positive: usize, n: usize, vocab: usize, rng: &mut impl Rng) -> Result<Vec<usize>> {
    if positive >= vocab {
        return Err(Error::Index {
            what: "positive target".into(),
            index: positive,
            bound: vocab,
        });
    }
    if n == 0 || n > vocab - 1 {
        return Err(Error::Config(format!(
            "cannot draw {n} negatives from {} candidates",
            vocab - 1
        )));
    }
    Ok(rand::seq::index::sample(rng, vocab - 1, n)
        .into_iter()
        .map(|j| if j >= positive { j + 1 } else { j })
        .collect())
}

fn row_sums(tape: &mut Tape, x: Var) -> Result<Var> {
    let n = tape.value(x).cols();
    let ones = tape.constant(Tensor::new(vec![n, 1], vec![1.0; n])?)?;
    Ok(tape.matmul(x, ones)?)
}

/// Per-row loss `[m, 1]` of a sampled loss given positive scores `[m, 1]` and
/// negative scores `[m, n]`.
pub fn sampled_row_losses(tape: &mut Tape, kind: LossKind, pos: Var, neg: Var) -> Result<Var> {
    let n = tape.value(neg).cols();
    match kind {
        LossKind::FullCe => Err(Error::Config("full-ce has no sampled form".into())),
        LossKind::SampledCe => {
            let all = tape.concat_cols(&[pos, neg])?;
            let lse = tape.logsumexp_rows(all)?;
            Ok(tape.sub(lse, pos)?)
        }
        LossKind::Bce => {
            let a = tape.log_sigmoid(pos)?;
            let flipped = tape.scale(neg, -1.0)?;
            let b = tape.log_sigmoid(flipped)?;
            let b = row_sums(tape, b)?;
            let s = tape.add(a, b)?;
            Ok(tape.scale(s, -1.0)?)
        }
        LossKind::Bpr => {
            let p = tape.broadcast_cols(pos, n)?;
            let d = tape.sub(p, neg)?;
            let ls = tape.log_sigmoid(d)?;
            let s = row_sums(tape, ls)?;
            Ok(tape.scale(s, -1.0 / n as f64)?)
        }
        LossKind::Top1 => {
            let p = tape.broadcast_cols(pos, n)?;
            let d = tape.sub(neg, p)?;
            let s1 = tape.sigmoid(d)?;
            let sq = tape.square(neg)?;
            let s2 = tape.sigmoid(sq)?;
            let t = tape.add(s1, s2)?;
            let s = row_sums(tape, t)?;
            Ok(tape.scale(s, 1.0 / n as f64)?)
        }
    }
}

/// Per-row `logsumexp(logits) − logits[target]`, `[m, 1]`.
pub fn full_ce_row_losses(tape: &mut Tape, logits: Var, targets: Vec<usize>) -> Result<Var> {
    let lse = tape.logsumexp_rows(logits)?;
    let picked = tape.pick(logits, targets)?;
    Ok(tape.sub(lse, picked)?)
}

fn masked_mean(tape: &mut Tape, rows: Option<Var>, count: usize) -> Result<Var> {
    match rows {
        None => Ok(tape.constant(Tensor::scalar(0.0))?),
        Some(r) => {
            let s = tape.sum_all(r)?;
            Ok(tape.scale(s, 1.0 / count as f64)?)
        }
    }
}

fn mask_rows(mask: &[bool]) -> Vec<usize> {
    mask.iter().enumerate().filter(|(_, b)| **b).map(|(p, _)| p).collect()
}

/// Mean full cross-entropy over positions whose mask bit is set.
pub fn loss_full_ce(tape: &mut Tape, logits: Var, targets: &[usize], mask: &[bool]) -> Result<Var> {
    let rows = mask_rows(mask);
    let per_row = if rows.is_empty() {
        None
    } else {
        let sel = tape.embedding_lookup(logits, &rows)?;
        Some(full_ce_row_losses(tape, sel, rows.iter().map(|&p| targets[p]).collect())?)
    };
    masked_mean(tape, per_row, rows.len())
}

/// Mean sampled loss over masked positions; `pos` is `[P, 1]`, `neg` `[P, n]`.
pub fn loss_sampled(tape: &mut Tape, kind: LossKind, pos: Var, neg: Var, mask: &[bool]) -> Result<Var> {
    let rows = mask_rows(mask);
    let per_row = if rows.is_empty() {
        None
    } else {
        let p = tape.embedding_lookup(pos, &rows)?;
        let n = tape.embedding_lookup(neg, &rows)?;
        Some(sampled_row_losses(tape, kind, p, n)?)
    };
    masked_mean(tape, per_row, rows.len())
}

pub fn loss_sampled_ce(tape: &mut Tape, pos: Var, neg: Var, mask: &[bool]) -> Result<Var> {
    loss_sampled(tape, LossKind::SampledCe, pos, neg, mask)
}

pub fn loss_bce(tape: &mut Tape, pos: Var, neg: Var, mask: &[bool]) -> Result<Var> {
    loss_sampled(tape, LossKind::Bce, pos, neg, mask)
}

pub fn loss_bpr(tape: &mut Tape, pos: Var, neg: Var, mask: &[bool]) -> Result<Var> {
    loss_sampled(tape, LossKind::Bpr, pos, neg, mask)
}

pub fn loss_top1(tape: &mut Tape, pos: Var, neg: Var, mask: &[bool]) -> Result<Var> {
    loss_sampled(tape, LossKind::Top1, pos, neg, mask)
}

/// Sum of per-position losses for one sequence, and the number of masked
/// positions. `None` when nothing in the sequence is a target.
pub fn sequence_loss(
    tape: &mut Tape,
    model: &Model,
    seq: &UserSequence,
    reference_day: u32,
    cfg: &TrainConfig,
    dropout_rng: &mut rand_chacha::ChaCha8Rng,
    negative_rng: &mut impl Rng,
) -> Result<Option<(Var, usize)>> {
    let history = &seq.interactions;
    let input = model.compose(tape, history, &seq.context, reference_day)?;
    let rows = mask_rows(&input.target_mask);
    if rows.is_empty() {
        return Ok(None);
    }
    let h = model.hidden(tape, &input, true, dropout_rng)?;
    let hm = tape.embedding_lookup(h, &rows)?;
    let targets: Vec<usize> = rows.iter().map(|&p| input.target_ids[p]).collect();
    let target_days: Vec<u32> = rows.iter().map(|&p| history[p + 1 - input.n_context].day).collect();
    let (w, b) = (tape.param(model.out_weight()), tape.param(model.out_bias()));
    let v = model.targets.len();
    let candidates: Vec<Vec<usize>> = if cfg.loss.is_sampled() {
        let mut out = Vec::with_capacity(rows.len());
        for &t in &targets {
            let mut c = vec![t];
            c.extend(sample_negatives(t, cfg.n_negatives, v, negative_rng)?);
            out.push(c);
        }
        out
    } else {
        Vec::new()
    };
    let mut scores = if cfg.loss.is_sampled() {
        tape.gather_scores(hm, w, Some(b), candidates.clone())?
    } else {
        let l = tape.matmul_nt(hm, w)?;
        tape.add_bias(l, b)?
    };
    if let Some(age) = model.age_table() {
        let m = rows.len();
        let ones = tape.constant(Tensor::new(vec![m, 1], vec![1.0; m])?)?;
        let buckets: Vec<Vec<usize>> = target_days
            .iter()
            .enumerate()
            .map(|(i, &day)| {
                let ids: Box<dyn Iterator<Item = usize>> = if cfg.loss.is_sampled() {
                    Box::new(candidates[i].iter().copied())
                } else {
                    Box::new(0..v)
                };
                ids.map(|k| age_bucket(model.created_day(k), day)).collect()
            })
            .collect();
        let offset = tape.gather_scores(ones, tape.param(age), None, buckets)?;
        scores = tape.add(scores, offset)?;
    }
    let per_row = if cfg.loss.is_sampled() {
        let pos = tape.slice_cols(scores, 0, 1)?;
        let neg = tape.slice_cols(scores, 1, cfg.n_negatives)?;
        sampled_row_losses(tape, cfg.loss, pos, neg)?
    } else {
        full_ce_row_losses(tape, scores, targets)?
    };
    Ok(Some((tape.sum_all(per_row)?, rows.len())))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss: f64,
    pub wall_ms: u64,
}

struct SeqResult {
    loss: f64,
    count: usize,
    grads: Option<GradBuffer>,
}

fn diverged(e: Error, epoch: usize, user: u32) -> Error {
    match e {
        Error::Num(NumError::NonFinite(op)) => {
            Error::Diverged(format!("non-finite value in {op} (epoch {epoch}, user {user})"))
        }
        other => other,
    }
}

/// Trains `model` in place on `sequences`, with recency measured against
/// `reference_day`. Per-sequence gradients may be computed in parallel; they
/// are always reduced in sequence order, so results do not depend on `exec`.
pub fn train(
    model: &mut Model,
    sequences: &[UserSequence],
    reference_day: u32,
    cfg: &TrainConfig,
    exec: Exec,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<Vec<EpochLog>> {
    cfg.validate()?;
    if sequences.is_empty() {
        return Err(Error::Config("no training sequences".into()));
    }
    if cfg.loss.is_sampled() && cfg.n_negatives > model.targets.len() - 1 {
        return Err(Error::Config(format!(
            "{} negatives requested but only {} other targets exist",
            cfg.n_negatives,
            model.targets.len() - 1
        )));
    }
    let keep = cfg.max_len.min(model.embedder.max_history());
    let seqs: Vec<UserSequence> = sequences
        .iter()
        .map(|s| UserSequence {
            user: s.user,
            context: s.context,
            interactions: truncate_recent(&s.interactions, keep).to_vec(),
        })
        .collect();
    let adam = AdamConfig {
        lr: cfg.lr,
        ..AdamConfig::default()
    };
    let mut state = AdamState::new(&model.store);
    let mut logs = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let start = Instant::now();
        let mut order: Vec<usize> = (0..seqs.len()).collect();
        order.shuffle(&mut seed::rng(cfg.seed, "shuffle", &[epoch as u64]));
        let (mut loss_sum, mut count) = (0.0, 0usize);
        for batch in order.chunks(cfg.batch_size) {
            let m: &Model = model;
            let results: Vec<Result<SeqResult>> = exec.map(batch, |&i| {
                let seq = &seqs[i];
                let mut drng = seed::rng(cfg.seed, "dropout", &[epoch as u64, i as u64]);
                let mut nrng = seed::rng(cfg.seed, "negatives", &[epoch as u64, i as u64]);
                let mut tape = Tape::new(&m.store);
                let mut run = || -> Result<SeqResult> {
                    match sequence_loss(&mut tape, m, seq, reference_day, cfg, &mut drng, &mut nrng)? {
                        None => Ok(SeqResult {
                            loss: 0.0,
                            count: 0,
                            grads: None,
                        }),
                        Some((loss, c)) => {
                            let g = tape.backward(loss)?;
                            Ok(SeqResult {
                                loss: tape.value(loss).data()[0],
                                count: c,
                                grads: Some(g.params),
                            })
                        }
                    }
                };
                run().map_err(|e| diverged(e, epoch, seq.user))
            });
            let mut grads = GradBuffer::new(&model.store);
            let mut batch_count = 0;
            for r in results {
                let r = r?;
                loss_sum += r.loss;
                batch_count += r.count;
                if let Some(g) = &r.grads {
                    grads.merge(g);
                }
            }
            if batch_count == 0 {
                continue;
            }
            count += batch_count;
            grads.scale(1.0 / batch_count as f64);
            if !grads.all_finite() {
                return Err(Error::Diverged(format!("non-finite gradient in epoch {epoch}")));
            }
            adam_step(&mut model.store, &grads, &mut state, &adam)?;
        }
        if count == 0 {
            return Err(Error::Config("no sequence has a target position".into()));
        }
        let loss = loss_sum / count as f64;
        if !loss.is_finite() {
            return Err(Error::Diverged(format!("loss {loss} in epoch {epoch}")));
        }
        let log = EpochLog {
            epoch,
            loss,
            wall_ms: start.elapsed().as_millis() as u64,
        };
        on_epoch(&log);
        logs.push(log);
    }
    Ok(logs)
}
