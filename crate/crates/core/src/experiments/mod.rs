//! End-to-end runs: the combined run configuration, data preparation,
//! training, and the desk-scale comparisons behind `afra reproduce`.

use std::collections::BTreeMap;
use std::fmt::{self, Write as _};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::baselines::{sasrec_config, CfKnn, EmbeddingKnn, Popularity};
use crate::datamodel::{
    build_sequences, generate_synthetic, time_split, Catalog, Context, DataConfig, Dataset, EntityType, Interaction,
    Segment, TargetSpace, TestView, TrainView, UserSequence,
};
use crate::encoder::{Model, ModelConfig};
use crate::metrics::{build_cases, evaluate, EvalCase, EvalConfig, MetricReport, ALL};
use crate::par::Exec;
use crate::reranker::{Ranker, RerankConfig, ServingMode, Strategy};
use crate::trainer::{train, EpochLog, LossKind, TrainConfig};
use crate::{seed, Error, Result};

/// Every knob of a run, one section per module. Missing fields take the
/// desk-scale defaults; unknown fields are rejected.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub data: DataConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub rerank: RerankConfig,
    pub eval: EvalConfig,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        RunConfig::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.model.encoder.validate()?;
        self.train.validate()?;
        self.rerank.validate()?;
        self.eval.validate()
    }
}

/// First test day: the configured one, else the last day of the data.
pub fn split_day(cfg: &DataConfig, dataset: &Dataset) -> u32 {
    cfg.split_day.unwrap_or(dataset.horizon_days.saturating_sub(1))
}

/// A dataset split into its training view and evaluation cases.
pub struct Prepared {
    pub dataset: Dataset,
    pub train: TrainView,
    pub test: TestView,
    pub targets: TargetSpace,
    pub cases: Vec<EvalCase>,
}

impl Prepared {
    pub fn new(dataset: Dataset, split: u32, target_entity: EntityType) -> Result<Self> {
        let (train, test) = time_split(&dataset, split)?;
        let targets = TargetSpace::new(&dataset.catalog, target_entity);
        let cases = build_cases(&test, &dataset.catalog, &targets);
        Ok(Prepared {
            dataset,
            train,
            test,
            targets,
            cases,
        })
    }

    /// Recency reference for training: the last pre-split day.
    pub fn reference_day(&self) -> u32 {
        self.train.split_day - 1
    }

    /// Training sequences for the target entity, optionally restricted to
    /// interactions with `only`.
    pub fn sequences(&self, max_len: usize, target: EntityType, only: Option<EntityType>) -> Result<Vec<UserSequence>> {
        let catalog = &self.dataset.catalog;
        let log: Vec<Interaction> = self
            .train
            .interactions()
            .filter(|i| only.is_none_or(|e| catalog.get(i.item).is_some_and(|it| it.entity == e)))
            .copied()
            .collect();
        Ok(build_sequences(&log, &self.dataset.contexts(), catalog, max_len, target)?)
    }

    /// Share of cases whose fed history already has an interaction on the
    /// request day.
    pub fn same_day_share(&self) -> f64 {
        if self.cases.is_empty() {
            return 0.0;
        }
        let n = self
            .cases
            .iter()
            .filter(|c| c.history.last().is_some_and(|i| i.day == c.day))
            .count();
        n as f64 / self.cases.len() as f64
    }
}

/// Generates the data for `seed` and splits it.
pub fn prepare(cfg: &RunConfig, seed: u64) -> Result<Prepared> {
    let dataset = generate_synthetic(&cfg.data, seed)?;
    let split = split_day(&cfg.data, &dataset);
    Prepared::new(dataset, split, cfg.model.target_entity)
}

/// Builds a model from `model_cfg` and trains it. Initialization is seeded
/// from `train_cfg.seed`.
pub fn fit(
    prep: &Prepared,
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    only: Option<EntityType>,
    exec: Exec,
    on_epoch: impl FnMut(&EpochLog),
) -> Result<(Model, Vec<EpochLog>)> {
    let seqs = prep.sequences(train_cfg.max_len, model_cfg.target_entity, only)?;
    let init = seed::derive(train_cfg.seed, "init", &[]);
    let mut model = Model::new(model_cfg.clone(), &prep.dataset.schema, &prep.dataset.catalog, init)?;
    let logs = train(&mut model, &seqs, prep.reference_day(), train_cfg, exec, on_epoch)?;
    Ok((model, logs))
}

/// Feeds the wrapped ranker only interactions with one entity type, for
/// models trained on that entity alone.
pub struct EntityOnly<'a, R: ?Sized> {
    pub inner: &'a R,
    pub catalog: &'a Catalog,
    pub entity: EntityType,
}

impl<R: Ranker + ?Sized> Ranker for EntityOnly<'_, R> {
    fn targets(&self) -> &TargetSpace {
        self.inner.targets()
    }

    fn scores(&self, history: &[Interaction], context: &Context, day: u32) -> Result<Vec<f64>> {
        let kept: Vec<Interaction> = history
            .iter()
            .filter(|i| self.catalog.get(i.item).is_some_and(|it| it.entity == self.entity))
            .copied()
            .collect();
        self.inner.scores(&kept, context, day)
    }

    fn tie_break(&self) -> Option<&[f64]> {
        self.inner.tie_break()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Experiment {
    Table1,
    Table2,
    Table3,
    Diversity,
}

impl Experiment {
    pub const ALL: [Experiment; 4] = [Experiment::Table1, Experiment::Table2, Experiment::Table3, Experiment::Diversity];

    pub fn as_str(self) -> &'static str {
        match self {
            Experiment::Table1 => "table1",
            Experiment::Table2 => "table2",
            Experiment::Table3 => "table3",
            Experiment::Diversity => "diversity",
        }
    }
}

impl fmt::Display for Experiment {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Experiment {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Experiment::ALL
            .into_iter()
            .find(|e| e.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown experiment `{s}`; valid: table1, table2, table3, diversity")))
    }
}

/// One evaluated configuration on one seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Variant {
    pub name: String,
    pub seed: u64,
    pub report: MetricReport,
}

/// The numbers behind one claim on one seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub seed: u64,
    pub values: BTreeMap<String, f64>,
    pub passed: bool,
}

/// An ordinal statement checked on every seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Claim {
    pub name: String,
    pub statement: String,
    pub checks: Vec<Check>,
    pub passed: bool,
}

impl Claim {
    fn new(name: &str, statement: &str, checks: Vec<Check>) -> Self {
        let passed = !checks.is_empty() && checks.iter().all(|c| c.passed);
        Claim {
            name: name.into(),
            statement: statement.into(),
            checks,
            passed,
        }
    }
}

/// Everything an experiment produced. Holds no timings, so equal inputs give
/// equal reports.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub experiment: Experiment,
    pub seeds: Vec<u64>,
    /// Per-seed dataset statistics, keyed `name@seed`.
    pub stats: BTreeMap<String, f64>,
    pub variants: Vec<Variant>,
    pub claims: Vec<Claim>,
}

impl ExperimentReport {
    /// Value of a metric cell for one variant and seed.
    pub fn value(&self, variant: &str, seed: u64, metric: &str, k: usize, segment: &str) -> Option<f64> {
        self.variants
            .iter()
            .find(|v| v.name == variant && v.seed == seed)
            .and_then(|v| v.report.get(metric, k, segment))
    }

    /// Mean over seeds; `None` if any seed lacks the cell.
    pub fn mean(&self, variant: &str, metric: &str, k: usize, segment: &str) -> Option<f64> {
        let vals: Option<Vec<f64>> = self.seeds.iter().map(|&s| self.value(variant, s, metric, k, segment)).collect();
        let vals = vals?;
        (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
    }

    pub fn claim(&self, name: &str) -> Option<&Claim> {
        self.claims.iter().find(|c| c.name == name)
    }

    fn variant_names(&self) -> Vec<&str> {
        let mut names: Vec<&str> = Vec::new();
        for v in &self.variants {
            if !names.contains(&v.name.as_str()) {
                names.push(&v.name);
            }
        }
        names
    }

    /// Flat rows `variant,seed,metric,k,segment,value`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("variant,seed,metric,k,segment,value\n");
        for v in &self.variants {
            for c in &v.report.cells {
                let val = c.value.map(|x| x.to_string()).unwrap_or_default();
                writeln!(out, "{},{},{},{},{},{}", v.name, v.seed, c.metric, c.k, c.segment, val).expect("writing to a String");
            }
        }
        out
    }

    /// Seed-averaged table of the metrics this experiment is about, then
    /// one line per claim.
    pub fn summary(&self) -> String {
        let cols: Vec<(&str, usize, &str)> = match self.experiment {
            Experiment::Table1 => vec![
                ("recall", 5, ALL),
                ("recall", 15, ALL),
                ("recall", 30, ALL),
                ("recall", 5, "fully-cold"),
                ("recall", 15, "fully-cold"),
                ("recall", 30, "fully-cold"),
            ],
            Experiment::Table2 => vec![("recall", 5, ALL), ("recall", 30, ALL)],
            Experiment::Table3 => vec![("freshness", 30, ALL), ("recall", 30, ALL)],
            Experiment::Diversity => vec![
                ("inter_list_diversity", 5, ALL),
                ("inter_list_diversity", 15, ALL),
                ("inter_list_diversity", 30, ALL),
                ("temporal_diversity", 5, ALL),
                ("temporal_diversity", 15, ALL),
                ("temporal_diversity", 30, ALL),
            ],
        };
        let seeds: Vec<String> = self.seeds.iter().map(u64::to_string).collect();
        let mut out = format!("{} (mean over seeds {})\n", self.experiment, seeds.join(", "));
        write!(out, "{:<22}", "variant").expect("writing to a String");
        for (m, k, s) in &cols {
            let label = if *s == ALL { format!("{m}@{k}") } else { format!("{m}@{k}/{s}") };
            write!(out, " {label:>22}").expect("writing to a String");
        }
        out.push('\n');
        for name in self.variant_names() {
            write!(out, "{name:<22}").expect("writing to a String");
            for &(m, k, s) in &cols {
                let cell = self.mean(name, m, k, s).map(|v| format!("{v:.4}")).unwrap_or_else(|| "-".into());
                write!(out, " {cell:>22}").expect("writing to a String");
            }
            out.push('\n');
        }
        if !self.stats.is_empty() {
            out.push('\n');
            for (k, v) in &self.stats {
                writeln!(out, "{k}: {v:.4}").expect("writing to a String");
            }
        }
        out.push('\n');
        for c in &self.claims {
            let verdict = if c.passed { "PASS" } else { "FAIL" };
            writeln!(out, "[{verdict}] {}: {}", c.name, c.statement).expect("writing to a String");
            for ch in &c.checks {
                let vals: Vec<String> = ch.values.iter().map(|(k, v)| format!("{k}={v:.4}")).collect();
                writeln!(out, "    seed {}: {}", ch.seed, vals.join(" ")).expect("writing to a String");
            }
        }
        out
    }
}

/// Progress messages from a running experiment.
pub type Progress<'a> = &'a mut dyn FnMut(&str);

/// Required relative margin for the relevance comparisons.
pub const MARGIN: f64 = 0.10;
/// Largest tolerated relative recall@30 loss under decay re-ranking.
pub const DECAY_RECALL_TOLERANCE: f64 = 0.20;
pub const NEGATIVE_COUNTS: [usize; 2] = [30, 100];

fn relative(a: f64, b: f64) -> f64 {
    if b == 0.0 {
        if a > 0.0 {
            f64::INFINITY
        } else {
            0.0
        }
    } else {
        a / b - 1.0
    }
}

fn check(seed: u64, values: &[(&str, f64)], passed: bool) -> Check {
    Check {
        seed,
        values: values.iter().map(|(k, v)| (k.to_string(), *v)).collect(),
        passed,
    }
}

struct Runner<'c, 'p> {
    cfg: &'c RunConfig,
    exec: Exec,
    progress: Progress<'p>,
    variants: Vec<Variant>,
}

impl Runner<'_, '_> {
    fn train_cfg(&self, seed: u64, loss: LossKind, negatives: usize) -> TrainConfig {
        TrainConfig {
            seed: seed::derive(seed, "train", &[]),
            loss,
            n_negatives: negatives,
            ..self.cfg.train.clone()
        }
    }

    fn fit(&mut self, prep: &Prepared, name: &str, seed: u64, model_cfg: &ModelConfig, train_cfg: &TrainConfig, only: Option<EntityType>) -> Result<Model> {
        (self.progress)(&format!("seed {seed}: training {name}"));
        let epochs = train_cfg.epochs;
        let progress = &mut self.progress;
        let (model, _) = fit(prep, model_cfg, train_cfg, only, self.exec, |log| {
            progress(&format!("  epoch {}/{epochs} loss {:.4}", log.epoch + 1, log.loss))
        })?;
        Ok(model)
    }

    fn eval(&mut self, prep: &Prepared, name: &str, seed: u64, ranker: &dyn Ranker, mode: ServingMode, rerank: RerankConfig) -> Result<()> {
        (self.progress)(&format!("seed {seed}: evaluating {name}"));
        let cfg = EvalConfig {
            mode,
            ..self.cfg.eval.clone()
        };
        let e = evaluate(ranker, &prep.dataset.catalog, &prep.cases, &cfg, &rerank, self.exec)?;
        self.variants.push(Variant {
            name: name.into(),
            seed,
            report: e.report,
        });
        Ok(())
    }

    fn get(&self, name: &str, seed: u64, metric: &str, k: usize, segment: &str) -> f64 {
        self.variants
            .iter()
            .find(|v| v.name == name && v.seed == seed)
            .and_then(|v| v.report.get(metric, k, segment))
            .unwrap_or(f64::NAN)
    }
}

/// Runs one experiment on every seed.
pub fn run_experiment(which: Experiment, cfg: &RunConfig, seeds: &[u64], exec: Exec, progress: Progress) -> Result<ExperimentReport> {
    cfg.validate()?;
    if seeds.is_empty() {
        return Err(Error::Config("at least one seed is required".into()));
    }
    let needs: &[usize] = match which {
        Experiment::Table1 => &[5, 15],
        Experiment::Table2 => &[5, 30],
        Experiment::Table3 => &[30],
        Experiment::Diversity => &[],
    };
    if let Some(k) = needs.iter().find(|k| !cfg.eval.ks.contains(k)) {
        return Err(Error::Config(format!("{which} needs k={k} among the evaluated cut-offs")));
    }
    let mut r = Runner {
        cfg,
        exec,
        progress,
        variants: Vec::new(),
    };
    let mut stats = BTreeMap::new();
    for &seed in seeds {
        (r.progress)(&format!("seed {seed}: generating data"));
        let prep = prepare(cfg, seed)?;
        stats.insert(format!("same_day_share@{seed}"), prep.same_day_share());
        stats.insert(format!("cases@{seed}"), prep.cases.len() as f64);
        match which {
            Experiment::Table1 => table1(&mut r, &prep, seed)?,
            Experiment::Table2 => table2(&mut r, &prep, seed)?,
            Experiment::Table3 => table3(&mut r, &prep, seed)?,
            Experiment::Diversity => diversity(&mut r, &prep, seed)?,
        }
    }
    let claims = match which {
        Experiment::Table1 => table1_claims(&r, seeds, &stats),
        Experiment::Table2 => table2_claims(&r, seeds),
        Experiment::Table3 => table3_claims(&r, seeds),
        Experiment::Diversity => diversity_claims(&r, seeds),
    };
    Ok(ExperimentReport {
        experiment: which,
        seeds: seeds.to_vec(),
        stats,
        variants: r.variants,
        claims,
    })
}

fn table1(r: &mut Runner, prep: &Prepared, seed: u64) -> Result<()> {
    let model_cfg = r.cfg.model.clone();
    let tc = r.train_cfg(seed, r.cfg.train.loss, r.cfg.train.n_negatives);
    let none = RerankConfig::default();
    let catalog = &prep.dataset.catalog;

    let full = r.fit(prep, "afra", seed, &model_cfg, &tc, None)?;
    r.eval(prep, "afra-rt", seed, &full, ServingMode::Rt, none)?;
    r.eval(prep, "afra-batch", seed, &full, ServingMode::Batch, none)?;

    let entity = model_cfg.target_entity;
    let outfits = r.fit(prep, "afra-outfits-only", seed, &model_cfg, &tc, Some(entity))?;
    let only = EntityOnly {
        inner: &outfits,
        catalog,
        entity,
    };
    r.eval(prep, "afra-rt-outfits-only", seed, &only, ServingMode::Rt, none)?;
    r.eval(prep, "afra-batch-outfits-only", seed, &only, ServingMode::Batch, none)?;
    drop(outfits);

    let sasrec = r.fit(prep, "sasrec", seed, &sasrec_config(&model_cfg), &tc, None)?;
    r.eval(prep, "sasrec", seed, &sasrec, ServingMode::Rt, none)?;
    drop(sasrec);

    let log: Vec<Interaction> = prep.train.interactions().copied().collect();
    let pop = Popularity::new(&log, prep.targets.clone());
    r.eval(prep, "popularity", seed, &pop, ServingMode::Rt, none)?;
    let cf = CfKnn::from_log(&log, prep.targets.clone())?;
    r.eval(prep, "cf-knn", seed, &cf, ServingMode::Rt, none)?;
    let emb = EmbeddingKnn::from_model(&full, catalog, prep.targets.clone(), pop.counts().to_vec())?;
    r.eval(prep, "emb-knn", seed, &emb, ServingMode::Rt, none)?;
    Ok(())
}

fn table1_claims(r: &Runner, seeds: &[u64], stats: &BTreeMap<String, f64>) -> Vec<Claim> {
    let cold = Segment::FullyCold.as_str();
    let rt_vs_batch = seeds
        .iter()
        .map(|&s| {
            let (rt, batch) = (r.get("afra-rt", s, "recall", 5, ALL), r.get("afra-batch", s, "recall", 5, ALL));
            let share = stats[&format!("same_day_share@{s}")];
            let margin = relative(rt, batch);
            check(
                s,
                &[("rt", rt), ("batch", batch), ("margin", margin), ("same_day_share", share)],
                share >= 0.5 && margin >= MARGIN,
            )
        })
        .collect();
    let richer = seeds
        .iter()
        .map(|&s| {
            let full = r.get("afra-rt", s, "recall", 5, ALL);
            let outfits = r.get("afra-rt-outfits-only", s, "recall", 5, ALL);
            let sasrec = r.get("sasrec", s, "recall", 5, ALL);
            let (m1, m2) = (relative(full, outfits), relative(full, sasrec));
            check(
                s,
                &[
                    ("afra", full),
                    ("outfits_only", outfits),
                    ("sasrec", sasrec),
                    ("margin_outfits_only", m1),
                    ("margin_sasrec", m2),
                ],
                m1 >= MARGIN && m2 >= MARGIN,
            )
        })
        .collect();
    let cold_start = seeds
        .iter()
        .map(|&s| {
            let rt = r.get("afra-rt", s, "recall", 15, cold);
            let batch = r.get("afra-batch", s, "recall", 15, cold);
            let pop = r.get("popularity", s, "recall", 15, cold);
            check(s, &[("afra_rt", rt), ("afra_batch", batch), ("popularity", pop)], rt > pop && batch > pop)
        })
        .collect();
    vec![
        Claim::new(
            "rt-beats-batch",
            "recall@5 of AFRA-RT exceeds AFRA-Batch by at least 10% relative, with at least half of the cases in-session",
            rt_vs_batch,
        ),
        Claim::new(
            "rich-inputs-help",
            "recall@5 of AFRA-RT exceeds both the outfits-only model and the IDs-only model by at least 10% relative",
            richer,
        ),
        Claim::new(
            "cold-start",
            "for fully cold users, recall@15 of AFRA-RT and of AFRA-Batch exceeds popularity",
            cold_start,
        ),
    ]
}

fn loss_variant(loss: LossKind, negatives: usize) -> String {
    if loss.is_sampled() {
        format!("{loss}-{negatives}")
    } else {
        loss.to_string()
    }
}

fn table2(r: &mut Runner, prep: &Prepared, seed: u64) -> Result<()> {
    let model_cfg = r.cfg.model.clone();
    let none = RerankConfig::default();
    for loss in LossKind::ALL {
        let counts: &[usize] = if loss.is_sampled() { &NEGATIVE_COUNTS } else { &[0] };
        for &n in counts {
            if loss.is_sampled() && n >= prep.targets.len() {
                continue;
            }
            let name = loss_variant(loss, n);
            let tc = r.train_cfg(seed, loss, if loss.is_sampled() { n } else { r.cfg.train.n_negatives });
            let model = r.fit(prep, &name, seed, &model_cfg, &tc, None)?;
            r.eval(prep, &name, seed, &model, ServingMode::Rt, none)?;
        }
    }
    Ok(())
}

fn table2_claims(r: &Runner, seeds: &[u64]) -> Vec<Claim> {
    let mut claims = Vec::new();
    for &n in &NEGATIVE_COUNTS {
        let checks: Vec<Check> = seeds
            .iter()
            .filter(|&&s| r.variants.iter().any(|v| v.seed == s && v.name.ends_with(&format!("-{n}"))))
            .map(|&s| {
                let base5 = r.get("full-ce", s, "recall", 5, ALL);
                let base30 = r.get("full-ce", s, "recall", 30, ALL);
                let mut values = vec![];
                let mut worse = true;
                for loss in LossKind::ALL.into_iter().filter(|l| l.is_sampled()) {
                    let name = loss_variant(loss, n);
                    let d5 = relative(r.get(&name, s, "recall", 5, ALL), base5);
                    let d30 = relative(r.get(&name, s, "recall", 30, ALL), base30);
                    worse &= d5 < 0.0;
                    values.push((format!("{loss}_delta@5"), d5));
                    values.push((format!("{loss}_delta@30"), d30));
                }
                Check {
                    seed: s,
                    values: values.into_iter().collect(),
                    passed: worse,
                }
            })
            .collect();
        claims.push(Claim::new(
            &format!("full-ce-best-{n}"),
            &format!("with {n} negatives, every sampled loss has lower recall@5 than full cross-entropy"),
            checks,
        ));
    }
    claims
}

fn table3(r: &mut Runner, prep: &Prepared, seed: u64) -> Result<()> {
    let base_cfg = ModelConfig {
        age_feature: false,
        ..r.cfg.model.clone()
    };
    let tc = r.train_cfg(seed, r.cfg.train.loss, r.cfg.train.n_negatives);
    let model = r.fit(prep, "afra", seed, &base_cfg, &tc, None)?;
    r.eval(prep, "none", seed, &model, ServingMode::Rt, RerankConfig::default())?;
    let decay = RerankConfig {
        strategy: Strategy::Decay,
        half_life: r.cfg.rerank.half_life,
    };
    r.eval(prep, "decay", seed, &model, ServingMode::Rt, decay)?;
    drop(model);
    let aged_cfg = ModelConfig {
        age_feature: true,
        ..base_cfg
    };
    let aged = r.fit(prep, "afra-age-feature", seed, &aged_cfg, &tc, None)?;
    let served = RerankConfig {
        strategy: Strategy::AgeFeature,
        ..RerankConfig::default()
    };
    r.eval(prep, "age-feature", seed, &aged, ServingMode::Rt, served)?;
    Ok(())
}

fn table3_claims(r: &Runner, seeds: &[u64]) -> Vec<Claim> {
    let decay = seeds
        .iter()
        .map(|&s| {
            let (f0, f1) = (r.get("none", s, "freshness", 30, ALL), r.get("decay", s, "freshness", 30, ALL));
            let (r0, r1) = (r.get("none", s, "recall", 30, ALL), r.get("decay", s, "recall", 30, ALL));
            let drop = -relative(r1, r0);
            check(
                s,
                &[
                    ("freshness_none", f0),
                    ("freshness_decay", f1),
                    ("recall_none", r0),
                    ("recall_decay", r1),
                    ("recall_drop", drop),
                ],
                f1 < f0 && drop < DECAY_RECALL_TOLERANCE,
            )
        })
        .collect();
    let aged = seeds
        .iter()
        .map(|&s| {
            let (f0, f1) = (r.get("none", s, "freshness", 30, ALL), r.get("age-feature", s, "freshness", 30, ALL));
            check(s, &[("freshness_none", f0), ("freshness_age_feature", f1)], f1 < f0)
        })
        .collect();
    vec![
        Claim::new(
            "decay-freshens",
            "decay re-ranking lowers freshness@30 while recall@30 drops by less than 20% relative",
            decay,
        ),
        Claim::new("age-feature-freshens", "the age-feature model lowers freshness@30", aged),
    ]
}

fn diversity(r: &mut Runner, prep: &Prepared, seed: u64) -> Result<()> {
    let tc = r.train_cfg(seed, r.cfg.train.loss, r.cfg.train.n_negatives);
    let model_cfg = r.cfg.model.clone();
    let none = RerankConfig::default();
    let model = r.fit(prep, "afra", seed, &model_cfg, &tc, None)?;
    r.eval(prep, "afra-rt", seed, &model, ServingMode::Rt, none)?;
    let log: Vec<Interaction> = prep.train.interactions().copied().collect();
    let pop = Popularity::new(&log, prep.targets.clone());
    r.eval(prep, "popularity", seed, &pop, ServingMode::Rt, none)?;
    let cf = CfKnn::from_log(&log, prep.targets.clone())?;
    r.eval(prep, "cf-knn", seed, &cf, ServingMode::Rt, none)?;
    let emb = EmbeddingKnn::from_model(&model, &prep.dataset.catalog, prep.targets.clone(), pop.counts().to_vec())?;
    r.eval(prep, "emb-knn", seed, &emb, ServingMode::Rt, none)?;
    Ok(())
}

fn diversity_claims(r: &Runner, seeds: &[u64]) -> Vec<Claim> {
    let k = r.cfg.eval.max_k();
    let checks = seeds
        .iter()
        .map(|&s| {
            let run = r.get("afra-rt", s, "inter_list_diversity", k, ALL);
            let temporal = r.get("afra-rt", s, "temporal_diversity", k, ALL);
            check(s, &[("max_run", run), ("temporal", temporal)], run < 2.0)
        })
        .collect();
    vec![Claim::new(
        "short-creator-runs",
        &format!("AFRA-RT's longest same-creator run in the top {k} averages below 2"),
        checks,
    )]
}

#[cfg(test)]
mod tests;
