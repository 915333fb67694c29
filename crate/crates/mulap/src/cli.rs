//! Command-line front end: corpus generation, pretraining, probe
//! evaluation, and checkpoint inspection.
//!
//! Exit codes are part of the contract:
//!   0 — success
//!   1 — usage or configuration error
//!   2 — data error (missing or malformed files, bad checkpoints)
//!   3 — numerical failure (non-finite values during training)
//!
//! Precedence everywhere is flag > config file > built-in default.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::backbone::AudioBackbone;
use crate::checkpoint::{self, Checkpoint, CheckpointError};
use crate::config::{ConfigError, RunConfig};
use crate::corpus::{self, CorpusError, LoadedCorpus};
use crate::model::MulapModel;
use crate::objectives::{self, PretrainError, PretrainItem};
use crate::probe::{self, BenchmarkReport, ProbeError, TaskName};
use crate::tensor::TensorError;
use crate::text::{self, Vocabulary};

#[derive(Parser)]
#[command(name = "mulap", version, about = "Music-and-language pretraining workbench")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand)]
pub enum Command {
    /// Generate a synthetic audio corpus with captions and labels.
    GenData(GenDataArgs),
    /// Pretrain the two-branch model on a generated corpus.
    Pretrain(PretrainArgs),
    /// Train frozen-feature probes and write a metric report.
    Probe(ProbeArgs),
    /// Print a checkpoint's configuration and parameter inventory.
    Inspect(InspectArgs),
}

#[derive(Args)]
pub struct GenDataArgs {
    /// Number of tracks to synthesize.
    #[arg(long)]
    pub n: usize,
    /// Corpus seed; same seed, same corpus, byte for byte.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output directory (receives manifest.jsonl and audio/).
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args)]
pub struct PretrainArgs {
    /// JSON run configuration; fields not present use defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Manifest to train on (overrides the config file).
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Final checkpoint path. The best-validation checkpoint is written
    /// next to it with a ".best" suffix, the vocabulary with ".vocab".
    #[arg(long)]
    pub out_checkpoint: PathBuf,
    /// Step log path (TSV); stdout when omitted.
    #[arg(long)]
    pub log: Option<PathBuf>,
    /// Override pretrain.steps.
    #[arg(long)]
    pub steps: Option<usize>,
    /// Override pretrain.seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Override pretrain.batch.
    #[arg(long)]
    pub batch: Option<usize>,
    /// Override pretrain.eval_every.
    #[arg(long)]
    pub eval_every: Option<usize>,
}

#[derive(Args)]
pub struct ProbeArgs {
    /// Checkpoint whose backbone supplies the frozen features.
    #[arg(long, conflicts_with = "random")]
    pub checkpoint: Option<PathBuf>,
    /// Use a freshly initialized backbone instead of a checkpoint.
    #[arg(long)]
    pub random: bool,
    /// JSON run configuration; fields not present use defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Manifest to evaluate on (overrides the config file).
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Comma-separated task list.
    #[arg(long, default_value = "instrument,tags,mood")]
    pub tasks: String,
    /// Report path (JSON); a TSV twin is written with extension .tsv.
    #[arg(long)]
    pub out_report: PathBuf,
    /// Also evaluate a random backbone and report per-metric gaps.
    #[arg(long)]
    pub compare_random: bool,
}

#[derive(Args)]
pub struct InspectArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
}

// ─────────────────────────── Error mapping ─────────────────────────────

/// A fully classified failure: message plus process exit code.
#[derive(Debug)]
pub struct CliError {
    pub message: String,
    pub code: i32,
}

impl CliError {
    pub fn usage(msg: impl Into<String>) -> CliError {
        CliError { message: msg.into(), code: 1 }
    }
    pub fn data(msg: impl Into<String>) -> CliError {
        CliError { message: msg.into(), code: 2 }
    }
    pub fn numerical(msg: impl Into<String>) -> CliError {
        CliError { message: msg.into(), code: 3 }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.message)
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> CliError {
        CliError::usage(e.to_string())
    }
}

impl From<CorpusError> for CliError {
    fn from(e: CorpusError) -> CliError {
        CliError::data(e.to_string())
    }
}

impl From<CheckpointError> for CliError {
    fn from(e: CheckpointError) -> CliError {
        CliError::data(e.to_string())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> CliError {
        CliError::data(e.to_string())
    }
}

impl From<PretrainError> for CliError {
    fn from(e: PretrainError) -> CliError {
        match e {
            PretrainError::Tensor(TensorError::NonFinite { .. }) => {
                CliError::numerical(format!("training aborted: {e}"))
            }
            PretrainError::Contract(_) => CliError::usage(e.to_string()),
            other => CliError::data(other.to_string()),
        }
    }
}

impl From<ProbeError> for CliError {
    fn from(e: ProbeError) -> CliError {
        match e {
            ProbeError::Tensor(TensorError::NonFinite { .. }) => {
                CliError::numerical(format!("probe training aborted: {e}"))
            }
            other => CliError::data(other.to_string()),
        }
    }
}

// ───────────────────────────── Dispatch ────────────────────────────────

/// Print to stdout, tolerating a closed pipe (e.g. `mulap inspect | head`).
fn emit(text: &str) {
    let _ = std::io::stdout().write_all(text.as_bytes());
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::GenData(args) => gen_data(&args),
        Command::Pretrain(args) => pretrain_cmd(&args),
        Command::Probe(args) => probe_cmd(&args),
        Command::Inspect(args) => inspect_cmd(&args),
    }
}

fn gen_data(args: &GenDataArgs) -> Result<(), CliError> {
    if args.n == 0 {
        return Err(CliError::usage("--n must be at least 1"));
    }
    let entries = corpus::generate_corpus(args.n, args.seed, &args.out)?;
    emit(&format!(
        "manifest: {}\ntracks: {}\n",
        args.out.join("manifest.jsonl").display(),
        entries.len()
    ));
    Ok(())
}

/// Resolve the run configuration: file if given, defaults otherwise,
/// command-line overrides last.
fn load_config(path: Option<&Path>) -> Result<RunConfig, CliError> {
    match path {
        Some(p) => Ok(RunConfig::load(p)?),
        None => Ok(RunConfig::default()),
    }
}

fn manifest_path(flag: Option<&Path>, cfg: &RunConfig) -> Result<PathBuf, CliError> {
    flag.map(Path::to_path_buf)
        .or_else(|| cfg.data.manifest.as_ref().map(PathBuf::from))
        .ok_or_else(|| CliError::usage("no manifest given: pass --data or set data.manifest"))
}

/// Corpus entries of one split as pretraining items.
fn split_items(
    corpus: &LoadedCorpus,
    split: &str,
    vocab: &Vocabulary,
    max_len: usize,
) -> Vec<PretrainItem> {
    corpus
        .split_indices(split)
        .into_iter()
        .map(|i| PretrainItem {
            clip: corpus.clips[i].clone(),
            ids: text::tokenize(&corpus.entries[i].caption, vocab, max_len),
        })
        .collect()
}

fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let mut name = path.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(suffix);
    path.with_file_name(name)
}

fn pretrain_cmd(args: &PretrainArgs) -> Result<(), CliError> {
    let mut cfg = load_config(args.config.as_deref())?;
    if let Some(steps) = args.steps {
        cfg.pretrain.steps = steps;
    }
    if let Some(seed) = args.seed {
        cfg.pretrain.seed = seed;
    }
    if let Some(batch) = args.batch {
        cfg.pretrain.batch = batch;
    }
    if let Some(every) = args.eval_every {
        cfg.pretrain.eval_every = every;
    }
    cfg.validate()?;
    let manifest = manifest_path(args.data.as_deref(), &cfg)?;
    let corpus = LoadedCorpus::load(&manifest, cfg.data.max_seconds)?;

    let train_idx = corpus.split_indices("train");
    if train_idx.is_empty() {
        return Err(CliError::data("manifest has no train split"));
    }
    let train_captions: Vec<String> =
        train_idx.iter().map(|&i| corpus.entries[i].caption.clone()).collect();
    let vocab = Vocabulary::build(&train_captions, cfg.model.vocab_size)
        .map_err(|e| CliError::data(e.to_string()))?;
    let train = split_items(&corpus, "train", &vocab, cfg.model.max_len);
    let val = split_items(&corpus, "val", &vocab, cfg.model.max_len);

    let model = MulapModel::new(&cfg.model, cfg.pretrain.seed);
    let outcome = {
        let mut log: Box<dyn Write> = match &args.log {
            Some(path) => Box::new(std::io::BufWriter::new(fs::File::create(path)?)),
            None => Box::new(std::io::stdout().lock()),
        };
        let outcome = objectives::pretrain(&model, &train, &val, &cfg.pretrain, &mut log)?;
        log.flush()?;
        outcome
    };

    checkpoint::save(&args.out_checkpoint, &model, Some(&outcome.optimizer))?;
    let best_path = sibling(&args.out_checkpoint, ".best");
    match outcome.best {
        Some(best) => {
            let ckpt = Checkpoint {
                config: cfg.model.clone(),
                params: best.params,
                optimizer: None,
            };
            fs::write(&best_path, ckpt.encode()?)?;
            eprintln!(
                "best checkpoint from step {} (val total {:.6})",
                best.step, best.val_total
            );
        }
        // No validation pass ran, so "best seen" is the final state.
        None => {
            let ckpt = Checkpoint::from_model(&model, None);
            fs::write(&best_path, ckpt.encode()?)?;
        }
    }
    vocab.save(&sibling(&args.out_checkpoint, ".vocab"))
        .map_err(|e| CliError::data(e.to_string()))?;
    eprintln!(
        "pretrained {} steps; final total loss {:.6}",
        outcome.steps_run, outcome.final_losses.total
    );
    Ok(())
}

fn parse_tasks(list: &str) -> Result<Vec<TaskName>, CliError> {
    let mut tasks = Vec::new();
    for raw in list.split(',') {
        let name = raw.trim();
        if name.is_empty() {
            continue;
        }
        let task = TaskName::parse(name).map_err(|e| CliError::usage(e.to_string()))?;
        if !tasks.contains(&task) {
            tasks.push(task);
        }
    }
    if tasks.is_empty() {
        return Err(CliError::usage("--tasks named no tasks"));
    }
    Ok(tasks)
}

/// Gap rows: pretrained mean minus random mean, per task and metric.
fn report_gap(
    pretrained: &BenchmarkReport,
    random: &BenchmarkReport,
) -> BTreeMap<String, BTreeMap<String, f64>> {
    let mut gap = BTreeMap::new();
    for (task, metrics) in &pretrained.tasks {
        let Some(rand_metrics) = random.tasks.get(task) else { continue };
        let mut per_metric = BTreeMap::new();
        for (name, summary) in metrics {
            if let Some(r) = rand_metrics.get(name) {
                per_metric.insert(name.clone(), summary.mean - r.mean);
            }
        }
        gap.insert(task.clone(), per_metric);
    }
    gap
}

#[derive(Serialize)]
struct ComparisonReport {
    pretrained: BenchmarkReport,
    random: BenchmarkReport,
    gap: BTreeMap<String, BTreeMap<String, f64>>,
}

fn comparison_tsv(report: &ComparisonReport) -> String {
    let mut out = String::from("variant\ttask\tmetric\tper_seed\tmean\n");
    let mut emit = |variant: &str, r: &BenchmarkReport| {
        for (task, metrics) in &r.tasks {
            for (metric, summary) in metrics {
                let seeds = summary
                    .per_seed
                    .iter()
                    .map(|v| format!("{v:.6}"))
                    .collect::<Vec<_>>()
                    .join(",");
                out.push_str(&format!(
                    "{variant}\t{task}\t{metric}\t{seeds}\t{:.6}\n",
                    summary.mean
                ));
            }
        }
    };
    emit("pretrained", &report.pretrained);
    emit("random", &report.random);
    for (task, metrics) in &report.gap {
        for (metric, value) in metrics {
            out.push_str(&format!("gap\t{task}\t{metric}\t-\t{value:.6}\n"));
        }
    }
    out
}

fn probe_cmd(args: &ProbeArgs) -> Result<(), CliError> {
    let cfg = load_config(args.config.as_deref())?;
    let tasks = parse_tasks(&args.tasks)?;
    let manifest = manifest_path(args.data.as_deref(), &cfg)?;
    let corpus = LoadedCorpus::load(&manifest, cfg.data.max_seconds)?;

    let random_backbone = || MulapModel::new(&cfg.model, cfg.pretrain.seed).backbone;
    let backbone: AudioBackbone = match (&args.checkpoint, args.random) {
        (Some(path), false) => checkpoint::load(path)?.build_model()?.backbone,
        (None, true) => random_backbone(),
        (None, false) => {
            return Err(CliError::usage("pass --checkpoint <path> or --random"));
        }
        (Some(_), true) => unreachable!("clap rejects the combination"),
    };

    let report = probe::run_benchmark(&backbone, &corpus, &tasks, &cfg.probe)?;
    let (json, tsv) = if args.compare_random {
        let baseline = probe::run_benchmark(&random_backbone(), &corpus, &tasks, &cfg.probe)?;
        let comparison = ComparisonReport {
            gap: report_gap(&report, &baseline),
            pretrained: report,
            random: baseline,
        };
        let json = serde_json::to_string_pretty(&comparison).expect("report serializes");
        let tsv = comparison_tsv(&comparison);
        (json, tsv)
    } else {
        (report.to_json(), report.to_tsv())
    };
    fs::write(&args.out_report, json.as_bytes())?;
    fs::write(args.out_report.with_extension("tsv"), tsv.as_bytes())?;
    eprintln!("report: {}", args.out_report.display());
    Ok(())
}

fn inspect_cmd(args: &InspectArgs) -> Result<(), CliError> {
    let ckpt = checkpoint::load(&args.checkpoint)?;
    let config = serde_json::to_string_pretty(&ckpt.config).expect("config serializes");
    let mut out = format!("config: {config}\n\nparameters:\n");
    let mut total = 0usize;
    for (name, shape, data) in &ckpt.params {
        let dims = shape.iter().map(|d| d.to_string()).collect::<Vec<_>>().join("x");
        out.push_str(&format!("  {name}  [{dims}]  {}\n", data.len()));
        total += data.len();
    }
    out.push_str(&format!("total parameters: {total}\n"));
    match &ckpt.optimizer {
        Some(state) => out.push_str(&format!("optimizer state: present (t = {})\n", state.t)),
        None => out.push_str("optimizer state: absent\n"),
    }
    emit(&out);
    Ok(())
}
