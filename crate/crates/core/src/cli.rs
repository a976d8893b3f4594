//! Command-line front end: `train`, `evaluate`, `analyze` and `predict`.

use std::ffi::OsString;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::analysis::{self, AnalysisError, MetricKind};
use crate::data::{
    build_test_candidates, fingerprint_file, leave_one_out_split, parse_genres, parse_ratings,
    DataError, IdMap, RatingFormat, SplitDataset,
};
use crate::eval::{default_threads, evaluate_all, EvalError, MetricsReport, Scorer};
use crate::model::{default_kernels, ModelConfig, ModelError, ModelKind};
use crate::trainer::{Checkpoint, CheckpointError, TrainConfig, TrainError, Trainer};

pub const DATA_DIR_ENV: &str = "GEREC_DATA_DIR";

const MANIFEST: &str = "manifest.json";
const CHECKPOINT: &str = "checkpoint.json";
const CHECKPOINT_LAST: &str = "checkpoint.last.json";
const TRAIN_REPORT: &str = "train_report.jsonl";
const TRAIN_SUMMARY: &str = "train_summary.json";
const METRICS: &str = "metrics.json";
const RANKS: &str = "ranks.csv";
const ID_MAP_DIR: &str = "id_map";
const ANALYSIS_DIR: &str = "analysis";

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Data(String),
    #[error("{0}")]
    Numerical(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Usage(_) => 1,
            Self::Data(_) => 2,
            Self::Numerical(_) => 3,
        }
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        Self::Data(e.to_string())
    }
}

impl From<CheckpointError> for CliError {
    fn from(e: CheckpointError) -> Self {
        Self::Data(e.to_string())
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::Config(_) => Self::Usage(e.to_string()),
            ModelError::Nd(_) => Self::Numerical(e.to_string()),
        }
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        match e {
            EvalError::Model(m) => m.into(),
            other => Self::Data(other.to_string()),
        }
    }
}

impl From<AnalysisError> for CliError {
    fn from(e: AnalysisError) -> Self {
        match e {
            AnalysisError::Edges(_) | AnalysisError::MissingGenres | AnalysisError::NoVariance => {
                Self::Usage(e.to_string())
            }
            AnalysisError::Io { .. } => Self::Data(e.to_string()),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::NonFinite { .. } | TrainError::Nd(_) => Self::Numerical(e.to_string()),
            TrainError::Config(_) => Self::Usage(e.to_string()),
            TrainError::Model(m) => m.into(),
            TrainError::Eval(ev) => ev.into(),
            other => Self::Data(other.to_string()),
        }
    }
}

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |e| CliError::Data(format!("{}: {e}", path.display()))
}

#[derive(Debug, Parser)]
#[command(name = "gerec", version, about = "Gaussian-embedding recommender", args_override_self = true)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
#[allow(clippy::large_enum_variant)] // parsed once per process
pub enum Command {
    /// Train a model and write checkpoints and reports to --out.
    Train(TrainArgs),
    /// Score the leave-one-out test lists with a trained checkpoint.
    Evaluate(EvaluateArgs),
    /// Bucket learned user variances by sparsity (o1) or diversity (o2).
    Analyze(AnalyzeArgs),
    /// Score one (user, item) pair or rank items for a user.
    Predict(PredictArgs),
}

#[derive(Debug, Args)]
pub struct DataArgs {
    /// Ratings file; relative paths also resolve against $GEREC_DATA_DIR.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Ratings layout: ml-1m, ml-100k or csv.
    #[arg(long)]
    pub format: Option<RatingFormat>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub data: DataArgs,
    /// TOML file with any of the flags below; command-line flags win.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub model: Option<ModelKind>,
    /// Embedding dimension.
    #[arg(long)]
    pub d: Option<usize>,
    /// Monte-Carlo samples per entity.
    #[arg(long)]
    pub k: Option<usize>,
    /// Filters per convolution layer.
    #[arg(long)]
    pub t: Option<usize>,
    /// Kernel size per convolution layer, comma separated.
    #[arg(long, value_delimiter = ',')]
    pub kernels: Option<Vec<usize>>,
    #[arg(long)]
    pub mlp_width: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub beta1: Option<f64>,
    #[arg(long)]
    pub beta2: Option<f64>,
    #[arg(long)]
    pub epsilon: Option<f64>,
    /// Sampled negatives per training positive.
    #[arg(long)]
    pub negatives: Option<usize>,
    /// Sampled negatives per test list.
    #[arg(long)]
    pub test_negatives: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub eval_seed: Option<u64>,
    #[arg(long)]
    pub eval_every: Option<usize>,
    #[arg(long)]
    pub patience: Option<usize>,
    #[arg(long)]
    pub threads: Option<usize>,
    /// Continue from checkpoint.last.json in --out.
    #[arg(long)]
    pub resume: bool,
    /// Resume even if the dataset or config changed.
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    /// Training output directory.
    #[arg(long)]
    pub run: PathBuf,
    /// Checkpoint to use instead of <run>/checkpoint.json.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[command(flatten)]
    pub run: RunArgs,
    #[command(flatten)]
    pub data: DataArgs,
    /// Defaults to the training run's evaluation seed.
    #[arg(long)]
    pub eval_seed: Option<u64>,
    /// Also write per-user ranks.
    #[arg(long)]
    pub per_user: bool,
    /// Output directory (defaults to the run directory).
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub threads: Option<usize>,
    /// Skip the dataset/config fingerprint check.
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Args)]
pub struct AnalyzeArgs {
    #[command(flatten)]
    pub run: RunArgs,
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long, default_value = "o1")]
    pub metric: MetricKind,
    /// Item genres (`item::title::genres` or ml-100k `u.item`).
    #[arg(long)]
    pub genres: Option<PathBuf>,
    /// Bucket edges, comma separated and strictly increasing.
    #[arg(long, value_delimiter = ',')]
    pub edges: Option<Vec<f64>>,
    /// Output directory (defaults to <run>/analysis).
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    #[command(flatten)]
    pub run: RunArgs,
    /// Original user id.
    #[arg(long)]
    pub user: String,
    /// Original item id.
    #[arg(long, conflicts_with = "top")]
    pub item: Option<String>,
    /// Print the best N items instead of a single score.
    #[arg(long, requires = "candidates")]
    pub top: Option<usize>,
    /// `all`, or a file with one original item id per line.
    #[arg(long)]
    pub candidates: Option<String>,
    #[arg(long)]
    pub eval_seed: Option<u64>,
}

/// Keys accepted in a `--config` file.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "kebab-case")]
struct TrainFile {
    data: Option<PathBuf>,
    format: Option<RatingFormat>,
    model: Option<ModelKind>,
    d: Option<usize>,
    k: Option<usize>,
    t: Option<usize>,
    kernels: Option<Vec<usize>>,
    mlp_width: Option<usize>,
    epochs: Option<usize>,
    batch_size: Option<usize>,
    lr: Option<f64>,
    beta1: Option<f64>,
    beta2: Option<f64>,
    epsilon: Option<f64>,
    negatives: Option<usize>,
    test_negatives: Option<usize>,
    seed: Option<u64>,
    eval_seed: Option<u64>,
    eval_every: Option<usize>,
    patience: Option<usize>,
    threads: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataSource {
    pub path: PathBuf,
    pub format: RatingFormat,
    pub fingerprint: String,
}

/// Everything needed to reproduce a training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool_version: String,
    pub data: DataSource,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub config_fingerprint: String,
    pub artifacts: Vec<String>,
}

fn resolve_data(path: &Path) -> PathBuf {
    if path.is_relative() && !path.exists() {
        if let Some(dir) = std::env::var_os(DATA_DIR_ENV) {
            return Path::new(&dir).join(path);
        }
    }
    path.to_path_buf()
}

struct Dataset {
    source: DataSource,
    split: SplitDataset,
    users: IdMap,
    items: IdMap,
}

fn load_dataset(path: &Path, format: RatingFormat) -> Result<Dataset, CliError> {
    let path = resolve_data(path);
    let fingerprint = fingerprint_file(&path)?;
    let log = parse_ratings(&path, format)?;
    Ok(Dataset {
        source: DataSource {
            path,
            format,
            fingerprint,
        },
        split: leave_one_out_split(&log),
        users: log.users,
        items: log.items,
    })
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| CliError::Data(e.to_string()))?;
    text.push('\n');
    fs::write(path, text).map_err(io(path))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, CliError> {
    let text = fs::read_to_string(path).map_err(io(path))?;
    serde_json::from_str(&text).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

/// Parses `args` (including the program name) and runs the command,
/// returning the process exit code.
pub fn run_from<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Evaluate(a) => cmd_evaluate(a),
        Command::Analyze(a) => cmd_analyze(a),
        Command::Predict(a) => cmd_predict(a),
    }
}

fn resolve_train(a: &TrainArgs) -> Result<(PathBuf, RatingFormat, ModelKind, ModelConfigDraft, TrainConfig, usize), CliError> {
    let file: TrainFile = match &a.config {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(io(p))?;
            toml::from_str(&text).map_err(|e| CliError::Usage(format!("{}: {e}", p.display())))?
        }
        None => TrainFile::default(),
    };
    let data = a
        .data
        .data
        .clone()
        .or(file.data)
        .ok_or_else(|| CliError::Usage("--data is required".into()))?;
    let format = a.data.format.or(file.format).unwrap_or(RatingFormat::Ml1m);
    let kind = a.model.or(file.model).unwrap_or(ModelKind::Gerec);
    let k = a.k.or(file.k).unwrap_or(9);
    let draft = ModelConfigDraft {
        dim: a.d.or(file.d).unwrap_or(64),
        samples: k,
        filters: a.t.or(file.t).unwrap_or(64),
        kernels: a.kernels.clone().or(file.kernels).unwrap_or_else(|| default_kernels(k)),
        mlp_width: a.mlp_width.or(file.mlp_width).unwrap_or(64),
    };
    let d = TrainConfig::default();
    let train = TrainConfig {
        epochs: a.epochs.or(file.epochs).unwrap_or(d.epochs),
        batch_size: a.batch_size.or(file.batch_size).unwrap_or(d.batch_size),
        learning_rate: a.lr.or(file.lr).unwrap_or(d.learning_rate),
        beta1: a.beta1.or(file.beta1).unwrap_or(d.beta1),
        beta2: a.beta2.or(file.beta2).unwrap_or(d.beta2),
        epsilon: a.epsilon.or(file.epsilon).unwrap_or(d.epsilon),
        negative_ratio: a.negatives.or(file.negatives).unwrap_or(d.negative_ratio),
        test_negatives: a.test_negatives.or(file.test_negatives).unwrap_or(d.test_negatives),
        seed: a.seed.or(file.seed).unwrap_or(d.seed),
        eval_seed: a.eval_seed.or(file.eval_seed).unwrap_or(d.eval_seed),
        eval_every: a.eval_every.or(file.eval_every).unwrap_or(d.eval_every),
        patience: a.patience.or(file.patience).unwrap_or(d.patience),
    };
    let threads = a.threads.or(file.threads).unwrap_or_else(default_threads);
    Ok((data, format, kind, draft, train, threads))
}

struct ModelConfigDraft {
    dim: usize,
    samples: usize,
    filters: usize,
    kernels: Vec<usize>,
    mlp_width: usize,
}

fn cmd_train(a: TrainArgs) -> Result<(), CliError> {
    let (data_path, format, kind, draft, train, threads) = resolve_train(&a)?;
    train.validate()?;
    let ds = load_dataset(&data_path, format)?;
    let model = ModelConfig {
        kind,
        dim: draft.dim,
        samples: draft.samples,
        filters: draft.filters,
        kernels: draft.kernels,
        mlp_width: draft.mlp_width,
        num_users: ds.split.num_users,
        num_items: ds.split.num_items,
    };
    model.validate()?;
    let out = &a.out;
    fs::create_dir_all(out).map_err(io(out))?;
    let fingerprint = crate::trainer::config_fingerprint(&model, &train, Some(&ds.source.fingerprint));
    let manifest = RunManifest {
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
        data: ds.source.clone(),
        model: model.clone(),
        train: train.clone(),
        config_fingerprint: fingerprint.clone(),
        artifacts: [MANIFEST, CHECKPOINT, CHECKPOINT_LAST, TRAIN_REPORT, TRAIN_SUMMARY, METRICS]
            .iter()
            .map(|s| s.to_string())
            .chain(["users.tsv", "items.tsv"].map(|f| format!("{ID_MAP_DIR}/{f}")))
            .collect(),
    };

    let last_path = out.join(CHECKPOINT_LAST);
    let mut trainer = if a.resume && last_path.exists() {
        let last = Checkpoint::load(&last_path)?;
        let mut expected = last.train.clone();
        expected.epochs = train.epochs;
        if !a.force && (last.data_fingerprint.as_deref() != Some(&ds.source.fingerprint) || last.model != model || expected != train) {
            return Err(CliError::Data(format!(
                "{} was produced with a different dataset or configuration (use --force to resume anyway)",
                last_path.display()
            )));
        }
        let best_path = out.join(CHECKPOINT);
        let best = if best_path.exists() { Some(Checkpoint::load(&best_path)?) } else { None };
        let mut t = Trainer::resume(&last, best.as_ref())?;
        t.set_epochs(train.epochs);
        t
    } else {
        if a.resume {
            log::warn!("no {} in {}; starting fresh", CHECKPOINT_LAST, out.display());
        }
        Trainer::new(model, train.clone(), Some(ds.source.fingerprint.clone()))?
    };
    trainer.set_threads(threads);

    write_json(&out.join(MANIFEST), &manifest)?;
    let id_dir = out.join(ID_MAP_DIR);
    fs::create_dir_all(&id_dir).map_err(io(&id_dir))?;
    ds.users.write_tsv(&id_dir.join("users.tsv"))?;
    ds.items.write_tsv(&id_dir.join("items.tsv"))?;

    let report_path = out.join(TRAIN_REPORT);
    let mut report_file = fs::OpenOptions::new()
        .create(true)
        .write(true)
        .append(trainer.epoch() > 0)
        .truncate(trainer.epoch() == 0)
        .open(&report_path)
        .map_err(io(&report_path))?;
    let candidates = build_test_candidates(&ds.split, train.test_negatives, train.eval_seed);
    let best_path = out.join(CHECKPOINT);
    let report = trainer.run(&ds.split, &candidates, |ev| {
        let line = serde_json::to_string(ev.record).expect("records serialize");
        writeln!(report_file, "{line}").map_err(|e| TrainError::Data(DataError::Io {
            path: report_path.clone(),
            source: e,
        }))?;
        if ev.improved {
            ev.trainer.best_checkpoint().save(&best_path)?;
        }
        ev.trainer.checkpoint().save(&last_path)?;
        Ok(())
    })?;
    if !best_path.exists() {
        trainer.best_checkpoint().save(&best_path)?;
    }
    let summary = serde_json::json!({
        "best_epoch": report.best_epoch,
        "best_metrics": report.best_metrics,
        "stopped_early": report.stopped_early,
        "epochs_run": trainer.epoch(),
        "seconds": report.epochs.iter().map(|e| e.seconds).sum::<f64>(),
    });
    write_json(&out.join(TRAIN_SUMMARY), &summary)?;

    let best = trainer.best_model();
    let (metrics, _) = evaluate_all(best, &candidates, train.eval_seed, threads)?;
    let metrics_report = MetricsReport {
        model_kind: best.config().kind,
        config_fingerprint: fingerprint,
        eval_seed: train.eval_seed,
        users: candidates.len(),
        metrics,
        per_user: Vec::new(),
    };
    write_json(&out.join(METRICS), &metrics_report)?;
    println!("best epoch: {}", report.best_epoch.map_or("-".into(), |e| e.to_string()));
    println!("{}", metrics.table());
    Ok(())
}

/// Loads the checkpoint and the dataset for a finished run, checking that
/// they belong together.
fn open_run(run: &RunArgs, data: &DataArgs, force: bool) -> Result<(Checkpoint, Option<RunManifest>, Dataset), CliError> {
    let ck_path = run.checkpoint.clone().unwrap_or_else(|| run.run.join(CHECKPOINT));
    let checkpoint = Checkpoint::load(&ck_path)?;
    let manifest_path = run.run.join(MANIFEST);
    let manifest: Option<RunManifest> = if manifest_path.exists() {
        Some(read_json(&manifest_path)?)
    } else {
        None
    };
    let path = data
        .data
        .clone()
        .or_else(|| manifest.as_ref().map(|m| m.data.path.clone()))
        .ok_or_else(|| CliError::Usage("--data is required (no manifest in the run directory)".into()))?;
    let format = data
        .format
        .or_else(|| manifest.as_ref().map(|m| m.data.format))
        .unwrap_or(RatingFormat::Ml1m);
    let ds = load_dataset(&path, format)?;
    if !force && checkpoint.data_fingerprint.as_deref().is_some_and(|f| f != ds.source.fingerprint) {
        return Err(CliError::Data(format!(
            "{} does not match the dataset the checkpoint was trained on (use --force to override)",
            ds.source.path.display()
        )));
    }
    if let Some(m) = &manifest {
        if !force && m.model != checkpoint.model {
            return Err(CliError::Data(format!(
                "{} does not match the run manifest (use --force to override)",
                ck_path.display()
            )));
        }
    }
    if (checkpoint.model.num_users, checkpoint.model.num_items) != (ds.split.num_users, ds.split.num_items) {
        return Err(CliError::Data(format!(
            "checkpoint expects {} users and {} items, dataset has {} and {}",
            checkpoint.model.num_users, checkpoint.model.num_items, ds.split.num_users, ds.split.num_items
        )));
    }
    Ok((checkpoint, manifest, ds))
}

fn cmd_evaluate(a: EvaluateArgs) -> Result<(), CliError> {
    let (checkpoint, _, ds) = open_run(&a.run, &a.data, a.force)?;
    let model = checkpoint.to_model()?;
    let eval_seed = a.eval_seed.unwrap_or(checkpoint.train.eval_seed);
    let candidates = build_test_candidates(&ds.split, checkpoint.train.test_negatives, eval_seed);
    let threads = a.threads.unwrap_or_else(default_threads);
    let (metrics, per_user) = evaluate_all(&model, &candidates, eval_seed, threads)?;
    let report = MetricsReport {
        model_kind: checkpoint.model.kind,
        config_fingerprint: checkpoint.fingerprint(),
        eval_seed,
        users: per_user.len(),
        metrics,
        per_user,
    };
    let out = a.out.unwrap_or_else(|| a.run.run.clone());
    fs::create_dir_all(&out).map_err(io(&out))?;
    write_json(&out.join(METRICS), &report)?;
    if a.per_user {
        let users = &ds.users;
        let name = |u: usize| users.original(u).unwrap_or_default().to_string();
        report
            .write_ranks_csv(&out.join(RANKS), Some(&name))
            .map_err(CliError::from)?;
    }
    println!("{}", metrics.table());
    Ok(())
}

fn cmd_analyze(a: AnalyzeArgs) -> Result<(), CliError> {
    if a.metric == MetricKind::O2 && a.genres.is_none() {
        return Err(CliError::Usage("--metric o2 needs --genres".into()));
    }
    let (checkpoint, _, ds) = open_run(&a.run, &a.data, a.force)?;
    let model = checkpoint.to_model()?;
    let genres = match &a.genres {
        Some(p) => Some(parse_genres(&resolve_data(p), &ds.items)?),
        None => None,
    };
    let edges = a.edges.unwrap_or_else(|| a.metric.default_edges());
    let buckets = analysis::bucket_report(a.metric, &edges, &model, &ds.split, genres.as_ref())?;
    let out = a.out.unwrap_or_else(|| a.run.run.join(ANALYSIS_DIR));
    fs::create_dir_all(&out).map_err(io(&out))?;
    analysis::write_bucket_csv(&out.join(format!("{}.csv", a.metric)), &buckets)?;
    analysis::write_plot_file(&out.join(format!("{}.dat", a.metric)), &buckets)?;
    println!("{:>6} {:>6} {:>6} {:>12}", "lo", "hi", "count", "variance");
    for b in &buckets {
        println!(
            "{:>6} {:>6} {:>6} {:>12}",
            b.lo,
            b.hi,
            b.members.len(),
            b.mean_variance.map_or("-".into(), |v| format!("{v:.4}"))
        );
    }
    match analysis::trend(&buckets) {
        Some(r) => println!("spearman({}, variance) = {r:.3}", a.metric),
        None => println!("spearman({}, variance) undefined", a.metric),
    }
    Ok(())
}

fn cmd_predict(a: PredictArgs) -> Result<(), CliError> {
    let ck_path = a.run.checkpoint.clone().unwrap_or_else(|| a.run.run.join(CHECKPOINT));
    let checkpoint = Checkpoint::load(&ck_path)?;
    let model = checkpoint.to_model()?;
    let map_dir = a.run.run.join(ID_MAP_DIR);
    let users = IdMap::read_tsv(&map_dir.join("users.tsv"))?;
    let items = IdMap::read_tsv(&map_dir.join("items.tsv"))?;
    let unknown = |kind: &str, id: &str, file: &str| {
        CliError::Data(format!(
            "unknown {kind} id `{id}` (see {})",
            map_dir.join(file).display()
        ))
    };
    let user = users.dense(&a.user).ok_or_else(|| unknown("user", &a.user, "users.tsv"))?;
    let eval_seed = a.eval_seed.unwrap_or(checkpoint.train.eval_seed);

    if let Some(item) = &a.item {
        let i = items.dense(item).ok_or_else(|| unknown("item", item, "items.tsv"))?;
        let score = model.score_candidates(user, &[i], eval_seed)?[0];
        println!("{score:.6}");
        return Ok(());
    }
    let (Some(top), Some(cands)) = (a.top, a.candidates.as_deref()) else {
        return Err(CliError::Usage("give --item, or --top with --candidates".into()));
    };
    let pool: Vec<usize> = if cands == "all" {
        (0..items.len()).collect()
    } else {
        let path = Path::new(cands);
        let text = fs::read_to_string(path).map_err(io(path))?;
        text.lines()
            .map(str::trim)
            .filter(|l| !l.is_empty())
            .map(|id| items.dense(id).ok_or_else(|| unknown("item", id, "items.tsv")))
            .collect::<Result<_, _>>()?
    };
    let scores = model.score_candidates(user, &pool, eval_seed)?;
    let mut ranked: Vec<(usize, f64)> = pool.into_iter().zip(scores).collect();
    ranked.sort_by(|x, y| y.1.total_cmp(&x.1).then(x.0.cmp(&y.0)));
    for (i, s) in ranked.into_iter().take(top) {
        println!("{}\t{s:.6}", items.original(i).unwrap_or_default());
    }
    Ok(())
}
