//! Command-line front end: pretrain, finetune, eval, export, gen-data.
//!
//! Configuration layering: built-in defaults < `--config` file (key = value
//! lines) < explicit flags. The effective configuration is echoed into every
//! checkpoint and report. Exit codes: 0 ok, 1 config error, 2 data error,
//! 3 numeric divergence.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};

use crate::checkpoint::{self, CheckpointConfig};
use crate::data::{
    self, generate_synthetic_corpus, load_csv_dataset, normalize_instance, split, write_manifest,
    Corpus, CsvSchema, DatasetRegistry, Family, FamilySpec, SyntheticSpec, TimeSeriesSample,
};
use crate::embedding::build_token_grid;
use crate::encoder::{init_params, EncoderConfig};
use crate::eval::{accuracy, f1_point_adjusted, m4_metrics, MetricReport};
use crate::heads::{
    anomaly_score, choose_missing_patches, classify, detect, export_representations, finetune,
    forecast, impute, write_representation_files, FinetuneConfig, Representation, TaskKind,
};
use crate::numerics::{NumericsError, ParamSet};
use crate::pretrain::{run_pretraining, PretrainConfig, PretrainError};
use crate::seeding::derive_seed;

pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl CliError {
    fn config(msg: impl ToString) -> Self {
        CliError { code: 1, message: msg.to_string() }
    }
    fn data(msg: impl ToString) -> Self {
        CliError { code: 2, message: msg.to_string() }
    }
    fn numeric(msg: impl ToString) -> Self {
        CliError { code: 3, message: msg.to_string() }
    }
}

impl From<data::DataError> for CliError {
    fn from(e: data::DataError) -> Self {
        CliError::data(e)
    }
}

impl From<checkpoint::CheckpointError> for CliError {
    fn from(e: checkpoint::CheckpointError) -> Self {
        CliError::data(e)
    }
}

impl From<PretrainError> for CliError {
    fn from(e: PretrainError) -> Self {
        match e {
            PretrainError::NonFiniteLoss { .. } => CliError::numeric(e),
            PretrainError::EmptyCorpus => CliError::data(e),
            other => CliError::numeric(other),
        }
    }
}

impl From<NumericsError> for CliError {
    fn from(e: NumericsError) -> Self {
        CliError::numeric(e)
    }
}

impl From<crate::heads::HeadsError> for CliError {
    fn from(e: crate::heads::HeadsError) -> Self {
        CliError::numeric(e)
    }
}

impl From<crate::embedding::EmbeddingError> for CliError {
    fn from(e: crate::embedding::EmbeddingError) -> Self {
        CliError::numeric(e)
    }
}

impl From<crate::eval::EvalError> for CliError {
    fn from(e: crate::eval::EvalError) -> Self {
        CliError::data(e)
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::data(e)
    }
}

/// Log verbosity from TIMESBERT_LOG: error (quietest), info, debug.
#[derive(Clone, Copy, PartialEq, PartialOrd)]
enum LogLevel {
    Error,
    Info,
    Debug,
}

fn log_level() -> Result<LogLevel, CliError> {
    match std::env::var("TIMESBERT_LOG") {
        Err(_) => Ok(LogLevel::Info),
        Ok(v) => match v.as_str() {
            "error" => Ok(LogLevel::Error),
            "info" => Ok(LogLevel::Info),
            "debug" => Ok(LogLevel::Debug),
            other => Err(CliError::config(format!(
                "TIMESBERT_LOG must be error, info, or debug (got {other:?})"
            ))),
        },
    }
}

struct Logger {
    level: LogLevel,
}

impl Logger {
    fn info(&self, msg: &str) {
        if self.level >= LogLevel::Info {
            eprintln!("[info] {msg}");
        }
    }
    fn debug(&self, msg: &str) {
        if self.level >= LogLevel::Debug {
            eprintln!("[debug] {msg}");
        }
    }
}

#[derive(Parser)]
#[command(name = "timesbert", about = "Structured time-series pre-training toolkit")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Pre-train a model with masked patch modeling and functional tokens.
    Pretrain(PretrainArgs),
    /// Fine-tune a pre-trained checkpoint on a downstream task.
    Finetune(FinetuneArgs),
    /// Evaluate a checkpoint on a task's test split.
    Eval(EvalArgs),
    /// Export token representations as a binary matrix plus sidecar.
    Export(ExportArgs),
    /// Generate a synthetic corpus on disk.
    GenData(GenDataArgs),
}

/// Data-source flags shared by all commands that read samples.
#[derive(Args, Clone)]
struct DataArgs {
    /// CSV file or directory of CSV files (one dataset per file).
    #[arg(long)]
    data: Option<PathBuf>,
    /// CSV layout: wide (columns = variates) or long (id,time,variate,value).
    #[arg(long, default_value = "long")]
    csv_schema: String,
    /// Header name of the label column for wide CSV files.
    #[arg(long)]
    label_column: Option<String>,
    /// Synthetic family list, comma separated, used when --data is absent.
    #[arg(long, default_value = "sine-mix,sawtooth")]
    families: String,
    #[arg(long, default_value_t = 3)]
    variates: usize,
    #[arg(long, default_value_t = 96)]
    points: usize,
    /// Samples per synthetic family.
    #[arg(long, default_value_t = 32)]
    samples: usize,
    #[arg(long, default_value_t = 0.05)]
    noise: f64,
    /// Fraction of anomalous points injected into synthetic samples.
    #[arg(long, default_value_t = 0.0)]
    anomaly_fraction: f64,
}

impl DataArgs {
    fn synthetic_spec(&self) -> Result<SyntheticSpec, CliError> {
        let mut families = Vec::new();
        for name in self.families.split(',') {
            let family = Family::parse(name.trim()).map_err(CliError::config)?;
            families.push(FamilySpec {
                family,
                n_variates: self.variates,
                n_points: self.points,
                n_samples: self.samples,
                noise: self.noise,
                anomaly_fraction: self.anomaly_fraction,
            });
        }
        Ok(SyntheticSpec { families })
    }

    fn load(&self, seed: u64, log: &Logger) -> Result<Corpus, CliError> {
        match &self.data {
            None => {
                let spec = self.synthetic_spec()?;
                log.info(&format!(
                    "generating synthetic corpus: {} families x {} samples",
                    spec.families.len(),
                    self.samples
                ));
                Ok(generate_synthetic_corpus(&spec, seed)?)
            }
            Some(path) => {
                let schema = match self.csv_schema.as_str() {
                    "wide" => CsvSchema::Wide { label_column: self.label_column.clone() },
                    "long" => CsvSchema::Long,
                    other => {
                        return Err(CliError::config(format!("unknown csv schema {other:?}")))
                    }
                };
                let mut registry = DatasetRegistry::new();
                let mut samples = Vec::new();
                let files: Vec<PathBuf> = if path.is_dir() {
                    let mut v: Vec<PathBuf> = fs::read_dir(path)?
                        .filter_map(|e| e.ok().map(|e| e.path()))
                        .filter(|p| p.extension().is_some_and(|e| e == "csv"))
                        .collect();
                    v.sort();
                    v
                } else {
                    vec![path.clone()]
                };
                if files.is_empty() {
                    return Err(CliError::data(format!("no csv files under {}", path.display())));
                }
                for f in files {
                    let name = f.file_stem().unwrap_or_default().to_string_lossy().into_owned();
                    let id = registry.register(&name);
                    let loaded = load_csv_dataset(&f, &schema, id)?;
                    log.debug(&format!("loaded {} samples from {}", loaded.len(), f.display()));
                    samples.extend(loaded);
                }
                Ok(Corpus { registry, samples, spec: None, seed })
            }
        }
    }
}

#[derive(Args)]
struct PretrainArgs {
    #[command(flatten)]
    data: DataArgs,
    /// key = value config file; flags override its entries.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Checkpoint output path.
    #[arg(long)]
    out: PathBuf,
    /// Metrics log path (default: <out>.metrics.jsonl).
    #[arg(long)]
    metrics_out: Option<PathBuf>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    patch_len: Option<usize>,
    #[arg(long)]
    d_model: Option<usize>,
    #[arg(long)]
    layers: Option<usize>,
    #[arg(long)]
    heads: Option<usize>,
    #[arg(long)]
    context_len: Option<usize>,
    #[arg(long)]
    mask_ratio: Option<f64>,
    /// Write an intermediate checkpoint every N steps.
    #[arg(long)]
    save_every: Option<usize>,
}

#[derive(Args)]
struct FinetuneArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Pre-trained checkpoint to start from.
    #[arg(long)]
    from: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    task: String,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// Override the task's preset patch length check.
    #[arg(long)]
    patch_len: Option<usize>,
    #[arg(long)]
    mask_ratio: Option<f64>,
    #[arg(long)]
    horizon: Option<usize>,
    #[arg(long)]
    freeze_backbone: Option<bool>,
    /// Report output path (default: <out>.report.jsonl).
    #[arg(long)]
    report_out: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    from: PathBuf,
    #[arg(long)]
    task: String,
    #[arg(long)]
    mask_ratio: Option<f64>,
    #[arg(long)]
    horizon: Option<usize>,
    /// Seasonality used for the forecasting baselines.
    #[arg(long)]
    seasonality: Option<usize>,
    /// Anomaly window length in time points.
    #[arg(long)]
    window: Option<usize>,
    /// Comma-separated threshold quantiles swept for anomaly detection.
    #[arg(long, default_value = "0.90,0.95,0.98,0.99,0.995,0.999")]
    quantile_grid: String,
    /// Report output path; stdout always gets the report too.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ExportArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    from: PathBuf,
    /// Which representation: dom, var, or pooled.
    #[arg(long, default_value = "dom")]
    which: String,
    /// Output prefix; writes <out>.tsbe and <out>.tsv.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct GenDataArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory; one long-format CSV per dataset plus a manifest.
    #[arg(long)]
    out: PathBuf,
}

/// Parses a `key = value` config file; `#` starts a comment.
fn parse_config_file(path: &Path) -> Result<BTreeMap<String, String>, CliError> {
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::config(format!("{}: {e}", path.display())))?;
    let mut map = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(CliError::config(format!(
                "{}: line {}: expected key = value",
                path.display(),
                i + 1
            )));
        };
        map.insert(k.trim().to_string(), v.trim().to_string());
    }
    Ok(map)
}

/// Flag > config file > default.
fn resolve<T: FromStr + ToString>(
    flag: Option<T>,
    file: &BTreeMap<String, String>,
    key: &str,
    default: T,
) -> Result<T, CliError> {
    if let Some(v) = flag {
        return Ok(v);
    }
    match file.get(key) {
        Some(raw) => raw
            .parse()
            .map_err(|_| CliError::config(format!("config key {key}: cannot parse {raw:?}"))),
        None => Ok(default),
    }
}

fn effective_map(pairs: &[(&str, String)]) -> BTreeMap<String, String> {
    pairs.iter().map(|(k, v)| (k.to_string(), v.clone())).collect()
}

fn parse_task(s: &str) -> Result<TaskKind, CliError> {
    match s {
        "classify" => Ok(TaskKind::Classify),
        "impute" => Ok(TaskKind::Impute),
        "anomaly" => Ok(TaskKind::Anomaly),
        "forecast" => Ok(TaskKind::Forecast),
        other => Err(CliError::config(format!(
            "unknown task {other:?} (expected classify|impute|anomaly|forecast)"
        ))),
    }
}

fn write_report(report: &MetricReport, path: Option<&Path>) -> Result<(), CliError> {
    let line = report.to_json_line();
    println!("{line}");
    if let Some(p) = path {
        let mut f = fs::File::create(p)?;
        writeln!(f, "{line}")?;
    }
    Ok(())
}

pub fn run() -> i32 {
    // clap exits 2 on usage errors; unknown flags and bad values are
    // configuration errors here (exit 1), so handle the parse manually.
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    let log = match log_level() {
        Ok(level) => Logger { level },
        Err(e) => {
            eprintln!("error: {}", e.message);
            return e.code;
        }
    };
    let result = match cli.cmd {
        Cmd::Pretrain(args) => cmd_pretrain(args, &log),
        Cmd::Finetune(args) => cmd_finetune(args, &log),
        Cmd::Eval(args) => cmd_eval(args, &log),
        Cmd::Export(args) => cmd_export(args, &log),
        Cmd::GenData(args) => cmd_gen_data(args, &log),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {}", e.message);
            e.code
        }
    }
}

fn cmd_pretrain(args: PretrainArgs, log: &Logger) -> Result<(), CliError> {
    let file = match &args.config {
        Some(p) => parse_config_file(p)?,
        None => BTreeMap::new(),
    };
    let defaults = PretrainConfig::default();
    let seed = resolve(args.seed, &file, "seed", 0)?;
    let mut config = defaults.clone();
    config.encoder.d_model = resolve(args.d_model, &file, "d_model", defaults.encoder.d_model)?;
    config.encoder.n_layers = resolve(args.layers, &file, "layers", defaults.encoder.n_layers)?;
    config.encoder.n_heads = resolve(args.heads, &file, "heads", defaults.encoder.n_heads)?;
    config.encoder.context_len =
        resolve(args.context_len, &file, "context_len", defaults.encoder.context_len)?;
    config.encoder.patch_len =
        resolve(args.patch_len, &file, "patch_len", defaults.encoder.patch_len)?;
    config.mask_ratio = resolve(args.mask_ratio, &file, "mask_ratio", defaults.mask_ratio)?;
    config.batch_size = resolve(args.batch_size, &file, "batch_size", defaults.batch_size)?;
    config.total_steps = resolve(args.steps, &file, "steps", defaults.total_steps)?;
    config.lr_init = resolve(None, &file, "lr_init", defaults.lr_init)?;
    config.lr_final = resolve(None, &file, "lr_final", defaults.lr_final)?;
    config.weight_decay = resolve(None, &file, "weight_decay", defaults.weight_decay)?;
    config.ftp_enabled = resolve(None, &file, "ftp_enabled", defaults.ftp_enabled)?;
    config.encoder.validate().map_err(CliError::config)?;

    let corpus = args.data.load(derive_seed(seed, &[0xDA7A]), log)?;
    let params = init_params(&config.encoder, corpus.n_datasets(), seed);
    log.info(&format!(
        "pre-training: {} samples, {} datasets, {} steps",
        corpus.samples.len(),
        corpus.n_datasets(),
        config.total_steps
    ));

    let effective = effective_map(&[
        ("command", "pretrain".into()),
        ("seed", seed.to_string()),
        ("steps", config.total_steps.to_string()),
        ("batch_size", config.batch_size.to_string()),
        ("mask_ratio", config.mask_ratio.to_string()),
        ("d_model", config.encoder.d_model.to_string()),
        ("layers", config.encoder.n_layers.to_string()),
        ("heads", config.encoder.n_heads.to_string()),
        ("patch_len", config.encoder.patch_len.to_string()),
        ("context_len", config.encoder.context_len.to_string()),
        ("lr_init", config.lr_init.to_string()),
        ("lr_final", config.lr_final.to_string()),
    ]);
    let ckpt_config = CheckpointConfig {
        encoder: config.encoder.clone(),
        registry: corpus.registry.clone(),
        n_classes: None,
        effective: effective.clone(),
    };

    let started = Instant::now();
    let mut clock = move || started.elapsed().as_millis() as u64;
    let out = args.out.clone();
    let hook_config = ckpt_config.clone();
    let mut hook = |step: usize, params: &ParamSet| {
        let path = out.with_extension(format!("step{step}.tsbt"));
        checkpoint::save(&path, &hook_config, params).map_err(|e| e.to_string())
    };
    let outcome = run_pretraining(
        &corpus,
        &config,
        params,
        seed,
        &mut clock,
        args.save_every,
        &mut hook,
    )?;

    checkpoint::save(&args.out, &ckpt_config, &outcome.params)?;
    let metrics_path = args
        .metrics_out
        .unwrap_or_else(|| args.out.with_extension("metrics.jsonl"));
    let mut f = fs::File::create(&metrics_path)?;
    for rec in &outcome.metrics {
        writeln!(f, "{}", serde_json::to_string(rec).expect("metrics record serializes"))?;
    }
    if let (Some(first), Some(last)) = (outcome.metrics.first(), outcome.metrics.last()) {
        log.info(&format!(
            "L_MPM {:.6} -> {:.6}",
            first.loss_mpm, last.loss_mpm
        ));
    }
    log.info(&format!("checkpoint written to {}", args.out.display()));
    Ok(())
}

fn load_and_check(
    from: &Path,
    task: TaskKind,
    patch_override: Option<usize>,
) -> Result<checkpoint::Checkpoint, CliError> {
    let ckpt = checkpoint::load(from)?;
    let expected = patch_override.unwrap_or_else(|| task.preset_patch_len());
    if ckpt.config.encoder.patch_len != expected {
        return Err(CliError::config(format!(
            "checkpoint patch_len {} does not match task patch_len {} (use --patch-len to override)",
            ckpt.config.encoder.patch_len, expected
        )));
    }
    Ok(ckpt)
}

fn cmd_finetune(args: FinetuneArgs, log: &Logger) -> Result<(), CliError> {
    let file = match &args.config {
        Some(p) => parse_config_file(p)?,
        None => BTreeMap::new(),
    };
    let task = parse_task(&args.task)?;
    let seed = resolve(args.seed, &file, "seed", 0)?;
    let ckpt = load_and_check(&args.from, task, args.patch_len)?;
    let cfg = ckpt.config.encoder.clone();

    let corpus = args.data.load(derive_seed(seed, &[0xDA7A]), log)?;
    let parts = split(&corpus, (0.7, 0.15, 0.15), derive_seed(seed, &[0x5137]))?;
    let n_classes = corpus
        .samples
        .iter()
        .filter_map(|s| s.class_label)
        .max()
        .map(|m| m + 1)
        .unwrap_or(2);

    let defaults = FinetuneConfig::new(task);
    let mut fcfg = defaults.clone();
    fcfg.steps = resolve(args.steps, &file, "steps", defaults.steps)?;
    fcfg.batch_size = resolve(args.batch_size, &file, "batch_size", defaults.batch_size)?;
    fcfg.mask_ratio = resolve(args.mask_ratio, &file, "mask_ratio", defaults.mask_ratio)?;
    fcfg.horizon = resolve(args.horizon, &file, "horizon", defaults.horizon)?;
    fcfg.freeze_backbone =
        resolve(args.freeze_backbone, &file, "freeze_backbone", defaults.freeze_backbone)?;
    fcfg.lr = resolve(None, &file, "lr", defaults.lr)?;
    fcfg.n_classes = n_classes;

    log.info(&format!(
        "fine-tuning {} on {} train samples for {} steps",
        args.task,
        parts.train.len(),
        fcfg.steps
    ));
    let outcome = finetune(&corpus, &parts.train, &cfg, ckpt.params, &fcfg, seed)?;

    let effective = effective_map(&[
        ("command", "finetune".into()),
        ("task", args.task.clone()),
        ("seed", seed.to_string()),
        ("steps", fcfg.steps.to_string()),
        ("mask_ratio", fcfg.mask_ratio.to_string()),
        ("horizon", fcfg.horizon.to_string()),
        ("freeze_backbone", fcfg.freeze_backbone.to_string()),
        ("from", args.from.display().to_string()),
    ]);
    let out_config = CheckpointConfig {
        encoder: cfg.clone(),
        registry: corpus.registry.clone(),
        n_classes: (task == TaskKind::Classify).then_some(n_classes),
        effective: effective.clone(),
    };
    checkpoint::save(&args.out, &out_config, &outcome.params)?;

    let mut report = evaluate_task(
        task,
        &outcome.params,
        &cfg,
        &corpus,
        &parts.val,
        &parts.val,
        &EvalSettings {
            mask_ratio: fcfg.mask_ratio,
            horizon: fcfg.horizon,
            seasonality: 1,
            window: 40,
            quantiles: vec![0.90, 0.95, 0.98, 0.99],
            n_classes,
            seed,
        },
    )?;
    report.config.extend(effective);
    let report_path = args
        .report_out
        .unwrap_or_else(|| args.out.with_extension("report.jsonl"));
    write_report(&report, Some(&report_path))?;
    log.info(&format!("task checkpoint written to {}", args.out.display()));
    Ok(())
}

struct EvalSettings {
    mask_ratio: f64,
    horizon: usize,
    seasonality: usize,
    window: usize,
    quantiles: Vec<f64>,
    n_classes: usize,
    seed: u64,
}

/// Computes the task metric over `eval_indices`; `calib_indices` are only
/// used by anomaly detection for threshold selection (never the eval split).
fn evaluate_task(
    task: TaskKind,
    params: &ParamSet,
    cfg: &EncoderConfig,
    corpus: &Corpus,
    calib_indices: &[usize],
    eval_indices: &[usize],
    settings: &EvalSettings,
) -> Result<MetricReport, CliError> {
    if eval_indices.is_empty() {
        return Err(CliError::data("evaluation split is empty"));
    }
    match task {
        TaskKind::Classify => {
            let mut preds = Vec::new();
            let mut labels = Vec::new();
            for &i in eval_indices {
                let s = &corpus.samples[i];
                let Some(label) = s.class_label else { continue };
                let logits = classify(params, cfg, s, settings.n_classes)?;
                let pred = logits
                    .iter()
                    .enumerate()
                    .max_by(|a, b| a.1.total_cmp(b.1))
                    .map(|(k, _)| k)
                    .unwrap_or(0);
                preds.push(pred);
                labels.push(label);
            }
            let acc = accuracy(&preds, &labels)?;
            Ok(MetricReport::new("classify", preds.len())
                .metric("accuracy", acc)
                .config_entry("n_classes", settings.n_classes))
        }
        TaskKind::Impute => {
            let mut total = 0.0;
            let mut n = 0usize;
            for &i in eval_indices {
                let s = &corpus.samples[i];
                let (normalized, _) = normalize_instance(s);
                let grid = build_token_grid(&normalized, cfg.patch_len, false)?.remove(0);
                let missing = choose_missing_patches(
                    &grid,
                    settings.mask_ratio,
                    derive_seed(settings.seed, &[i as u64, 0x1117]),
                );
                let result = impute(params, cfg, s, &missing)?;
                total += result.mse;
                n += 1;
            }
            Ok(MetricReport::new("impute", n)
                .metric("mse", total / n as f64)
                .config_entry("mask_ratio", settings.mask_ratio))
        }
        TaskKind::Anomaly => {
            let scored = |indices: &[usize]| -> Result<(Vec<f64>, Vec<bool>), CliError> {
                let mut scores = Vec::new();
                let mut truth = Vec::new();
                for &i in indices {
                    let s = &corpus.samples[i];
                    let sc = anomaly_score(params, cfg, &s.values, settings.window)?;
                    let labels = s
                        .anomaly_labels
                        .clone()
                        .unwrap_or_else(|| vec![false; sc.len()]);
                    scores.extend(sc);
                    truth.extend(labels);
                }
                Ok((scores, truth))
            };
            let (calib_scores, calib_truth) = scored(calib_indices)?;
            let mut best = (f64::NEG_INFINITY, settings.quantiles[0]);
            for &q in &settings.quantiles {
                let pred = detect(&calib_scores, &calib_scores, q)?;
                let r = f1_point_adjusted(&pred, &calib_truth)?;
                if r.f1 > best.0 {
                    best = (r.f1, q);
                }
            }
            let (eval_scores, eval_truth) = scored(eval_indices)?;
            let pred = detect(&eval_scores, &calib_scores, best.1)?;
            let r = f1_point_adjusted(&pred, &eval_truth)?;
            Ok(MetricReport::new("anomaly", eval_indices.len())
                .metric("precision", r.precision)
                .metric("recall", r.recall)
                .metric("f1", r.f1)
                .config_entry("quantile", best.1)
                .config_entry("window", settings.window))
        }
        TaskKind::Forecast => {
            let h = settings.horizon;
            let mut forecasts = Vec::new();
            let mut actuals = Vec::new();
            let mut insamples = Vec::new();
            let mut naive_forecasts = Vec::new();
            for &i in eval_indices {
                let s = &corpus.samples[i];
                let t = s.len();
                if t <= h {
                    return Err(CliError::data(format!(
                        "sample {} too short for horizon {h}",
                        s.sample_id
                    )));
                }
                let history = TimeSeriesSample {
                    values: s.values.iter().map(|row| row[..t - h].to_vec()).collect(),
                    valid_len: vec![t - h; s.n_variates()],
                    dataset_id: s.dataset_id,
                    class_label: s.class_label,
                    sample_id: s.sample_id.clone(),
                    anomaly_labels: None,
                };
                let pred = forecast(params, cfg, &history, h)?;
                for c in 0..s.n_variates() {
                    forecasts.push(pred[c].clone());
                    actuals.push(s.values[c][t - h..].to_vec());
                    insamples.push(history.values[c].clone());
                    naive_forecasts.push(vec![history.values[c][t - h - 1]; h]);
                }
            }
            let m = m4_metrics(&forecasts, &actuals, &insamples, settings.seasonality)?;
            let naive = m4_metrics(&naive_forecasts, &actuals, &insamples, settings.seasonality)?;
            Ok(MetricReport::new("forecast", eval_indices.len())
                .metric("smape", m.smape)
                .metric("mase", m.mase)
                .metric("owa", m.owa)
                .metric("smape_naive_last", naive.smape)
                .config_entry("horizon", h)
                .config_entry("seasonality", settings.seasonality))
        }
    }
}

fn cmd_eval(args: EvalArgs, log: &Logger) -> Result<(), CliError> {
    let file = match &args.config {
        Some(p) => parse_config_file(p)?,
        None => BTreeMap::new(),
    };
    let task = parse_task(&args.task)?;
    let seed = resolve(args.seed, &file, "seed", 0)?;
    let ckpt = checkpoint::load(&args.from)?;
    let cfg = ckpt.config.encoder.clone();

    let corpus = args.data.load(derive_seed(seed, &[0xDA7A]), log)?;
    let parts = split(&corpus, (0.7, 0.15, 0.15), derive_seed(seed, &[0x5137]))?;
    if parts.test.is_empty() {
        return Err(CliError::data("test split is empty"));
    }
    let quantiles: Result<Vec<f64>, _> = args
        .quantile_grid
        .split(',')
        .map(|s| s.trim().parse::<f64>())
        .collect();
    let quantiles =
        quantiles.map_err(|_| CliError::config("quantile grid must be comma-separated floats"))?;
    let n_classes = ckpt.config.n_classes.unwrap_or_else(|| {
        corpus
            .samples
            .iter()
            .filter_map(|s| s.class_label)
            .max()
            .map(|m| m + 1)
            .unwrap_or(2)
    });
    let settings = EvalSettings {
        mask_ratio: resolve(args.mask_ratio, &file, "mask_ratio", 0.25)?,
        horizon: resolve(args.horizon, &file, "horizon", 2 * cfg.patch_len)?,
        seasonality: resolve(args.seasonality, &file, "seasonality", 1)?,
        window: resolve(args.window, &file, "window", 40)?,
        quantiles,
        n_classes,
        seed,
    };
    log.info(&format!(
        "evaluating {} on {} test samples",
        args.task,
        parts.test.len()
    ));
    let mut report = evaluate_task(
        task,
        &ckpt.params,
        &cfg,
        &corpus,
        &parts.val,
        &parts.test,
        &settings,
    )?;
    report.config.insert("seed".into(), seed.to_string());
    report.config.insert("from".into(), args.from.display().to_string());
    write_report(&report, args.out.as_deref())?;
    Ok(())
}

fn cmd_export(args: ExportArgs, log: &Logger) -> Result<(), CliError> {
    let which = match args.which.as_str() {
        "dom" => Representation::Dom,
        "var" => Representation::Var,
        "pooled" => Representation::Pooled,
        other => return Err(CliError::config(format!("unknown representation {other:?}"))),
    };
    let seed = args.seed.unwrap_or(0);
    let ckpt = checkpoint::load(&args.from)?;
    let corpus = args.data.load(derive_seed(seed, &[0xDA7A]), log)?;
    let reps = export_representations(&ckpt.params, &ckpt.config.encoder, &corpus.samples, which)?;
    let matrix_path = args.out.with_extension("tsbe");
    let sidecar_path = args.out.with_extension("tsv");
    write_representation_files(&reps, &matrix_path, &sidecar_path)?;
    log.info(&format!(
        "wrote {} rows to {}",
        reps.matrix.len(),
        matrix_path.display()
    ));
    Ok(())
}

fn cmd_gen_data(args: GenDataArgs, log: &Logger) -> Result<(), CliError> {
    let seed = args.seed.unwrap_or(0);
    let spec = args.data.synthetic_spec()?;
    let corpus = generate_synthetic_corpus(&spec, seed)?;
    fs::create_dir_all(&args.out)?;
    // one long-format CSV per dataset so the output round-trips through
    // --csv-schema long
    for (id, name) in corpus.registry.names().iter().enumerate() {
        let path = args.out.join(format!("{name}.csv"));
        let mut f = fs::File::create(&path)?;
        let labelled = corpus.samples.iter().any(|s| s.class_label.is_some());
        if labelled {
            writeln!(f, "id,time,variate,value,label")?;
        } else {
            writeln!(f, "id,time,variate,value")?;
        }
        for s in corpus.samples.iter().filter(|s| s.dataset_id == id) {
            for (c, row) in s.values.iter().enumerate() {
                for (t, v) in row.iter().enumerate().take(s.valid_len[c]) {
                    if labelled {
                        writeln!(f, "{},{t},{c},{v},{}", s.sample_id, s.class_label.unwrap_or(0))?;
                    } else {
                        writeln!(f, "{},{t},{c},{v}", s.sample_id)?;
                    }
                }
            }
        }
        log.debug(&format!("wrote {}", path.display()));
    }
    write_manifest(&corpus, &args.out.join("manifest.txt"))?;
    log.info(&format!(
        "generated {} samples across {} datasets in {}",
        corpus.samples.len(),
        corpus.n_datasets(),
        args.out.display()
    ));
    Ok(())
}
