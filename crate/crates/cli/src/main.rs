use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{anyhow, bail, Context as _, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use afra_core::baselines::{sasrec_config, CfKnn, EmbeddingKnn, Popularity};
use afra_core::datamodel::{generate_synthetic, load_dataset, save_dataset, Interaction};
use afra_core::encoder::{load_checkpoint, save_checkpoint, Model};
use afra_core::experiments::{fit, run_experiment, split_day, EntityOnly, Experiment, Prepared, RunConfig};
use afra_core::metrics::evaluate;
use afra_core::par::Exec;
use afra_core::reranker::{Ranker, ServingMode, Strategy};
use afra_core::trainer::LossKind;

/// Sequential fashion recommendation: data generation, training,
/// evaluation and the desk-scale comparisons.
#[derive(Parser)]
#[command(name = "afra", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset.
    GenData {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Train a model on a dataset directory.
    Train(TrainArgs),
    /// Evaluate a checkpoint or a baseline on a dataset directory.
    Evaluate(EvalArgs),
    /// Run one of the desk-scale comparisons end to end.
    Reproduce {
        #[arg(long, value_parser = parse_experiment)]
        experiment: Experiment,
        #[arg(long)]
        out_dir: PathBuf,
        #[command(flatten)]
        config: ConfigArg,
        /// Comma-separated seeds; one dataset and model set per seed.
        #[arg(long, value_delimiter = ',', default_value = "1,2,3")]
        seeds: Vec<u64>,
    },
}

#[derive(Args)]
struct ConfigArg {
    /// JSON run configuration; missing fields take desk-scale defaults.
    #[arg(long)]
    config: Option<PathBuf>,
}

impl ConfigArg {
    fn load(&self) -> Result<RunConfig> {
        match &self.config {
            Some(p) => RunConfig::load(p).with_context(|| format!("loading config {}", p.display())),
            None => Ok(RunConfig::default()),
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Variant {
    /// All inputs.
    Full,
    /// Item ids only, no context, session or action inputs.
    Sasrec,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    config: ConfigArg,
    #[arg(long)]
    data_dir: PathBuf,
    #[arg(long, value_parser = parse_loss)]
    loss: Option<LossKind>,
    #[arg(long)]
    negatives: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_enum, default_value = "full")]
    variant: Variant,
    /// Train on interactions with the target entity only.
    #[arg(long)]
    outfits_only: bool,
    #[arg(long)]
    out_checkpoint: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum Baseline {
    Popularity,
    CfKnn,
    EmbKnn,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    config: ConfigArg,
    #[arg(long, required_unless_present = "baseline")]
    checkpoint: Option<PathBuf>,
    /// `emb-knn` takes its article embeddings from `--checkpoint`.
    #[arg(long, value_enum)]
    baseline: Option<Baseline>,
    #[arg(long)]
    data_dir: PathBuf,
    #[arg(long, value_parser = parse_mode)]
    mode: Option<ServingMode>,
    #[arg(long, value_delimiter = ',')]
    k: Option<Vec<usize>>,
    #[arg(long, value_parser = parse_strategy)]
    rerank: Option<Strategy>,
    #[arg(long)]
    half_life: Option<f64>,
    /// Feed the checkpoint only interactions with the target entity.
    #[arg(long)]
    outfits_only: bool,
    /// Output path; the JSON report goes here and the CSV next to it.
    #[arg(long)]
    report: PathBuf,
}

fn parse_loss(s: &str) -> std::result::Result<LossKind, String> {
    s.parse().map_err(|e: afra_core::Error| e.to_string())
}

fn parse_mode(s: &str) -> std::result::Result<ServingMode, String> {
    s.parse().map_err(|e: afra_core::Error| e.to_string())
}

fn parse_strategy(s: &str) -> std::result::Result<Strategy, String> {
    s.parse().map_err(|e: afra_core::Error| e.to_string())
}

fn parse_experiment(s: &str) -> std::result::Result<Experiment, String> {
    s.parse().map_err(|e: afra_core::Error| e.to_string())
}

/// Writes through a temporary sibling and a rename.
fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    fs::write(&tmp, bytes).with_context(|| format!("writing {}", tmp.display()))?;
    fs::rename(&tmp, path).with_context(|| format!("renaming to {}", path.display()))?;
    Ok(())
}

fn prepared(cfg: &RunConfig, data_dir: &Path) -> Result<Prepared> {
    let dataset = load_dataset(data_dir).with_context(|| format!("loading dataset from {}", data_dir.display()))?;
    let split = split_day(&cfg.data, &dataset);
    Ok(Prepared::new(dataset, split, cfg.model.target_entity)?)
}

fn gen_data(config: &ConfigArg, seed: u64, out_dir: &Path) -> Result<()> {
    let cfg = config.load()?;
    let ds = generate_synthetic(&cfg.data, seed)?;
    save_dataset(&ds, out_dir).with_context(|| format!("writing dataset to {}", out_dir.display()))?;
    eprintln!(
        "wrote {} items, {} interactions, {} users to {}",
        ds.catalog.len(),
        ds.num_interactions(),
        ds.sequences.len(),
        out_dir.display()
    );
    Ok(())
}

fn train_cmd(a: &TrainArgs) -> Result<()> {
    let mut cfg = a.config.load()?;
    if let Some(l) = a.loss {
        cfg.train.loss = l;
    }
    if let Some(n) = a.negatives {
        cfg.train.n_negatives = n;
    }
    if let Some(e) = a.epochs {
        cfg.train.epochs = e;
    }
    if let Some(s) = a.seed {
        cfg.train.seed = s;
    }
    cfg.validate()?;
    let model_cfg = match a.variant {
        Variant::Full => cfg.model.clone(),
        Variant::Sasrec => sasrec_config(&cfg.model),
    };
    let prep = prepared(&cfg, &a.data_dir)?;
    let only = a.outfits_only.then_some(model_cfg.target_entity);
    let start = Instant::now();
    let (model, logs) = fit(&prep, &model_cfg, &cfg.train, only, Exec::Parallel, |l| {
        eprintln!("epoch {}/{} loss {:.5} ({} ms)", l.epoch + 1, cfg.train.epochs, l.loss, l.wall_ms)
    })?;
    save_checkpoint(&model, &a.out_checkpoint)?;
    let mut log = String::new();
    for l in &logs {
        log.push_str(&serde_json::to_string(l)?);
        log.push('\n');
    }
    let mut log_path = a.out_checkpoint.as_os_str().to_owned();
    log_path.push(".epochs.jsonl");
    write_atomic(Path::new(&log_path), log.as_bytes())?;
    eprintln!("trained in {:.1}s, checkpoint {}", start.elapsed().as_secs_f64(), a.out_checkpoint.display());
    Ok(())
}

fn load_model(path: &Path, prep: &Prepared) -> Result<Model> {
    if !path.exists() {
        bail!("checkpoint {} does not exist", path.display());
    }
    Ok(load_checkpoint(path, &prep.dataset.catalog)?)
}

fn evaluate_cmd(a: &EvalArgs) -> Result<()> {
    let mut cfg = a.config.load()?;
    if let Some(m) = a.mode {
        cfg.eval.mode = m;
    }
    if let Some(k) = &a.k {
        cfg.eval.ks = k.clone();
    }
    if let Some(s) = a.rerank {
        cfg.rerank.strategy = s;
    }
    if let Some(h) = a.half_life {
        cfg.rerank.half_life = h;
    }
    cfg.validate()?;
    let prep = prepared(&cfg, &a.data_dir)?;
    let model = a.checkpoint.as_deref().map(|p| load_model(p, &prep)).transpose()?;
    let log: Vec<Interaction> = prep.train.interactions().copied().collect();
    let popularity = || Popularity::new(&log, prep.targets.clone());
    let catalog = &prep.dataset.catalog;
    let ranker: Box<dyn Ranker + '_> = match (a.baseline, &model) {
        (Some(Baseline::Popularity), _) => Box::new(popularity()),
        (Some(Baseline::CfKnn), _) => Box::new(CfKnn::from_log(&log, prep.targets.clone())?),
        (Some(Baseline::EmbKnn), Some(m)) => {
            Box::new(EmbeddingKnn::from_model(m, catalog, prep.targets.clone(), popularity().counts().to_vec())?)
        }
        (Some(Baseline::EmbKnn), None) => bail!("emb-knn needs --checkpoint for its article embeddings"),
        (None, Some(m)) if a.outfits_only => Box::new(EntityOnly {
            inner: m,
            catalog,
            entity: m.config.target_entity,
        }),
        (None, Some(m)) => Box::new(m),
        (None, None) => unreachable!("clap requires --checkpoint or --baseline"),
    };
    if ranker.targets().ids() != prep.targets.ids() {
        bail!("the checkpoint's target items do not match the dataset");
    }
    let e = evaluate(ranker.as_ref(), catalog, &prep.cases, &cfg.eval, &cfg.rerank, Exec::Parallel)?;
    write_atomic(&a.report, serde_json::to_string_pretty(&e.report)?.as_bytes())?;
    write_atomic(&a.report.with_extension("csv"), e.report.to_csv().as_bytes())?;
    let r5 = e.report.get("recall", cfg.eval.ks[0], "all");
    eprintln!(
        "{} cases, recall@{} {}",
        prep.cases.len(),
        cfg.eval.ks[0],
        r5.map_or_else(|| "-".into(), |v| format!("{v:.4}"))
    );
    Ok(())
}

fn reproduce(which: Experiment, out_dir: &Path, config: &ConfigArg, seeds: &[u64]) -> Result<()> {
    let cfg = config.load()?;
    let start = Instant::now();
    let mut progress = |msg: &str| eprintln!("[{:>7.1}s] {msg}", start.elapsed().as_secs_f64());
    let report = run_experiment(which, &cfg, seeds, Exec::Parallel, &mut progress)?;
    let base = out_dir.join(which.as_str());
    write_atomic(&base.with_extension("json"), serde_json::to_string_pretty(&report)?.as_bytes())?;
    write_atomic(&base.with_extension("csv"), report.to_csv().as_bytes())?;
    let summary = report.summary();
    write_atomic(&base.with_extension("txt"), summary.as_bytes())?;
    print!("{summary}");
    eprintln!("done in {:.1}s", start.elapsed().as_secs_f64());
    Ok(())
}

fn threads_from_env() -> Result<()> {
    let Ok(v) = std::env::var("AFRA_THREADS") else {
        return Ok(());
    };
    let n: usize = v.trim().parse().map_err(|_| anyhow!("AFRA_THREADS must be a positive integer, got `{v}`"))?;
    if n == 0 {
        bail!("AFRA_THREADS must be a positive integer, got `{v}`");
    }
    rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData { config, seed, out_dir } => gen_data(&config, seed, &out_dir),
        Command::Train(a) => train_cmd(&a),
        Command::Evaluate(a) => evaluate_cmd(&a),
        Command::Reproduce {
            experiment,
            out_dir,
            config,
            seeds,
        } => reproduce(experiment, &out_dir, &config, &seeds),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Err(e) = threads_from_env() {
        eprintln!("error: {e:#}");
        return ExitCode::from(2);
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
