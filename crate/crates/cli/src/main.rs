use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;
use serde::Serialize;

use nerkit::checkpoint::{load_checkpoint, save_meta, save_ner, Checkpoint};
use nerkit::corpus::{
    gold_set, load_samples, read_predictions, window_samples, write_predictions,
    write_predictions_to, write_samples, CorpusFormat,
};
use nerkit::encoder::{load_embedding_file, EmbeddingStore};
use nerkit::meta::{
    self, build_training_set, read_examples, write_examples, CapturedEpoch, MetaInstance,
};
use nerkit::scorer::render_report;
use nerkit::synth::{self, SynthConfig};
use nerkit::{
    majority_vote, train, union, Execution, MetaModel, ModelKind, NerModel, PredictionSet, Sample,
    SpanConfig, Tagset, TokenEncoder, ToyEncoderParams, TrainConfig,
};

mod config;

use config::{
    config_error, load_file, require_input, resolve_encoder, resolve_training, write_resolved,
    ConfigError, ResolvedTraining, RunFile, TrainingFlags,
};

const DEFAULT_WINDOW: i64 = 100;
const META_DEFAULT_LR: f64 = 0.05;
const META_DEFAULT_EPOCHS: usize = 40;
const META_DEFAULT_PATIENCE: usize = 10;

#[derive(Parser, Debug)]
#[command(
    name = "nerkit",
    version,
    about = "Train, run, combine and score NER models"
)]
struct Cli {
    /// Worker threads for per-sample work (1 disables parallelism)
    #[arg(long, global = true, value_name = "N")]
    jobs: Option<usize>,

    /// Increase log verbosity (-v, -vv)
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a seq, crf or span model
    Train(TrainArgs),
    /// Predict mentions with a trained checkpoint
    Predict(PredictArgs),
    /// Combine prediction files by union or majority vote
    Combine(CombineArgs),
    /// Build the meta classifier's training set from per-epoch predictions
    MetaPrepare(MetaPrepareArgs),
    /// Train the meta classifier
    MetaTrain(MetaTrainArgs),
    /// Filter the union of prediction files with a meta classifier
    MetaFilter(MetaFilterArgs),
    /// Strict micro precision, recall and F1
    Score(ScoreArgs),
    /// Generate a synthetic two-type corpus
    Synth(SynthArgs),
}

#[derive(Args, Debug, Clone, Default)]
struct CorpusFlags {
    /// Corpus format: jsonl or tsv-tokens (default: from the file extension)
    #[arg(long)]
    format: Option<String>,
    /// Characters of document context added on each side
    #[arg(long)]
    window: Option<i64>,
    /// External embedding file (NFEMB1) instead of the toy encoder
    #[arg(long, value_name = "PATH")]
    embeddings: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// TOML config; flags override its values
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// seq, crf (seqcrf) or span (spanpred)
    #[arg(long)]
    model: Option<ModelKind>,
    #[arg(long, value_name = "PATH")]
    train: Option<PathBuf>,
    #[arg(long, value_name = "PATH")]
    validation: Option<PathBuf>,
    /// Output directory
    #[arg(long, short, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Entity types (default: all types in the training and validation gold)
    #[arg(long, value_delimiter = ',')]
    types: Option<Vec<String>>,
    /// Longest candidate span in tokens (span model)
    #[arg(long)]
    max_span_len: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[command(flatten)]
    corpus: CorpusFlags,
    #[command(flatten)]
    training: TrainingFlags,
}

#[derive(Args, Debug)]
struct PredictArgs {
    #[arg(long, value_name = "PATH")]
    checkpoint: PathBuf,
    #[arg(long, value_name = "PATH")]
    input: PathBuf,
    /// Output TSV (default: stdout)
    #[arg(long, short)]
    out: Option<PathBuf>,
    #[command(flatten)]
    corpus: CorpusFlags,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum CombineMode {
    Union,
    Majvote,
}

#[derive(Args, Debug)]
struct CombineArgs {
    #[arg(long, value_enum)]
    mode: CombineMode,
    /// Output TSV (default: stdout)
    #[arg(long, short)]
    out: Option<PathBuf>,
    #[arg(required = true)]
    files: Vec<PathBuf>,
}

#[derive(Args, Debug)]
struct MetaPrepareArgs {
    /// Training run directory, optionally named: NAME=DIR. Repeat per system.
    #[arg(long = "run", required = true, value_name = "[NAME=]DIR")]
    runs: Vec<String>,
    /// Validation corpus the runs predicted on
    #[arg(long, value_name = "PATH")]
    validation: PathBuf,
    /// Training corpus whose gold mentions are added as correct examples
    #[arg(long, value_name = "PATH")]
    train: PathBuf,
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
    #[arg(long, default_value_t = 0.15)]
    holdout: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    format: Option<String>,
}

#[derive(Args, Debug)]
struct MetaTrainArgs {
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// meta-train.jsonl from meta-prepare
    #[arg(long, value_name = "PATH")]
    train: Option<PathBuf>,
    /// meta-heldout.jsonl from meta-prepare
    #[arg(long, value_name = "PATH")]
    validation: Option<PathBuf>,
    #[arg(long, short, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Minimum probability of "correct" to keep a prediction
    #[arg(long)]
    threshold: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Embeddings keyed by rendered text
    #[arg(long, value_name = "PATH")]
    embeddings: Option<PathBuf>,
    #[command(flatten)]
    training: TrainingFlags,
}

#[derive(Args, Debug)]
struct MetaFilterArgs {
    #[arg(long, value_name = "PATH")]
    checkpoint: PathBuf,
    /// Corpus the predictions refer to
    #[arg(long, value_name = "PATH")]
    input: PathBuf,
    /// Prediction files; their union is filtered
    #[arg(long = "pred", required = true, value_name = "PATH")]
    preds: Vec<PathBuf>,
    #[arg(long, short)]
    out: Option<PathBuf>,
    /// Override the checkpoint's threshold
    #[arg(long)]
    threshold: Option<f64>,
    #[arg(long, value_name = "PATH")]
    embeddings: Option<PathBuf>,
    #[arg(long)]
    format: Option<String>,
}

#[derive(Args, Debug)]
struct ScoreArgs {
    /// Gold mentions: a prediction TSV or a corpus file
    #[arg(long, value_name = "PATH")]
    gold: PathBuf,
    #[arg(long, value_name = "PATH")]
    pred: PathBuf,
    /// Add a per-type table
    #[arg(long)]
    per_type: bool,
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[arg(long, short, value_name = "DIR")]
    out: PathBuf,
    #[arg(long, default_value_t = 2000)]
    train: usize,
    #[arg(long, default_value_t = 500)]
    validation: usize,
    #[arg(long, default_value_t = 500)]
    test: usize,
    #[arg(long, default_value_t = 0.1)]
    nested_frac: f64,
    #[arg(long, default_value_t = 0.05)]
    noise: f64,
    #[arg(long, default_value_t = 40)]
    gazetteer_size: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            if err.downcast_ref::<ConfigError>().is_some() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}

fn execution(jobs: Option<usize>) -> Result<Execution> {
    match jobs {
        None => Ok(Execution::default()),
        Some(0) => Err(config_error("--jobs must be at least 1")),
        Some(1) => Ok(Execution::Sequential),
        #[cfg(not(feature = "parallel"))]
        Some(_) => {
            log::warn!("built without the parallel feature; running sequentially");
            Ok(Execution::Sequential)
        }
        #[cfg(feature = "parallel")]
        Some(n) => {
            rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build_global()
                .context("configuring the thread pool")?;
            Ok(Execution::Parallel)
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let exec = execution(cli.jobs)?;
    match cli.command {
        Command::Train(args) => cmd_train(args, exec),
        Command::Predict(args) => cmd_predict(args, exec),
        Command::Combine(args) => cmd_combine(args),
        Command::MetaPrepare(args) => cmd_meta_prepare(args),
        Command::MetaTrain(args) => cmd_meta_train(args, exec),
        Command::MetaFilter(args) => cmd_meta_filter(args, exec),
        Command::Score(args) => cmd_score(args),
        Command::Synth(args) => cmd_synth(args),
    }
}

fn corpus_format(path: &Path, explicit: Option<&str>) -> Result<CorpusFormat> {
    match explicit {
        Some(f) => f
            .parse()
            .map_err(|e: nerkit::Error| config_error(e.to_string())),
        None => Ok(CorpusFormat::from_path(path)),
    }
}

fn read_corpus(path: &Path, format: Option<&str>) -> Result<Vec<Sample>> {
    let format = corpus_format(path, format)?;
    load_samples(path, format).with_context(|| format!("loading {}", path.display()))
}

fn read_store(path: Option<&Path>) -> Result<Option<Arc<EmbeddingStore>>> {
    path.map(|p| {
        if !p.exists() {
            return Err(config_error(format!(
                "embedding file {} does not exist",
                p.display()
            )));
        }
        let store = load_embedding_file(p)
            .with_context(|| format!("loading embeddings {}", p.display()))?;
        Ok(Arc::new(store))
    })
    .transpose()
}

fn write_or_print(preds: &PredictionSet, out: Option<&Path>) -> Result<()> {
    match out {
        Some(path) => {
            if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
                fs::create_dir_all(parent)?;
            }
            write_predictions(preds, path).with_context(|| format!("writing {}", path.display()))
        }
        None => {
            let stdout = io::stdout();
            let mut lock = stdout.lock();
            let written = write_predictions_to(preds, &mut lock)
                .map_err(anyhow::Error::from)
                .and_then(|()| lock.flush().map_err(anyhow::Error::from));
            match written {
                Err(e) if is_broken_pipe(&e) => Ok(()),
                other => other,
            }
        }
    }
}

fn is_broken_pipe(err: &anyhow::Error) -> bool {
    err.chain().any(|e| {
        e.downcast_ref::<io::Error>()
            .is_some_and(|io| io.kind() == io::ErrorKind::BrokenPipe)
    })
}

#[derive(Debug, Serialize)]
struct ResolvedRun {
    model: ModelKind,
    train: PathBuf,
    validation: PathBuf,
    #[serde(skip_serializing_if = "Option::is_none")]
    embeddings: Option<PathBuf>,
    output: PathBuf,
    types: Vec<String>,
    max_span_len: usize,
    window: i64,
    seed: u64,
    training: ResolvedTraining,
    #[serde(skip_serializing_if = "Option::is_none")]
    encoder: Option<nerkit::ToyEncoderConfig>,
}

#[derive(Debug, Serialize)]
struct Summary {
    best_epoch: usize,
    epochs_run: usize,
    stopped_early: bool,
    validation: nerkit::Metrics,
}

fn epoch_file(dir: &Path, epoch: usize) -> PathBuf {
    dir.join("epochs").join(format!("epoch-{epoch:03}.tsv"))
}

fn cmd_train(args: TrainArgs, exec: Execution) -> Result<()> {
    let file: RunFile = load_file(args.config.as_deref())?;
    let model = args
        .model
        .or(file.model)
        .ok_or_else(|| config_error("missing --model (seq, crf or span)"))?;
    if model == ModelKind::Meta {
        return Err(config_error("use meta-train for the meta classifier"));
    }
    let train_path = require_input(&args.train.or(file.train), "training corpus")?;
    let val_path = require_input(&args.validation.or(file.validation), "validation corpus")?;
    let out = args
        .out
        .or(file.output)
        .ok_or_else(|| config_error("missing output directory (--out)"))?;
    let format = args.corpus.format.or(file.format);
    let embeddings = args.corpus.embeddings.or(file.embeddings);
    let window = args.corpus.window.or(file.window).unwrap_or(DEFAULT_WINDOW);
    if window < 0 {
        return Err(config_error("--window must be >= 0"));
    }
    let max_span_len = args
        .max_span_len
        .or(file.max_span_len)
        .unwrap_or(nerkit::span_head::DEFAULT_MAX_SPAN_LEN);
    if max_span_len == 0 {
        return Err(config_error("--max-span-len must be at least 1"));
    }
    let seed = args.seed.or(file.seed).unwrap_or(0);
    let train_config =
        resolve_training(&args.training, &file.training, TrainConfig::default(), seed)?;
    let encoder_config = resolve_encoder(&args.training, &file.encoder);

    let train_set = window_samples(&read_corpus(&train_path, format.as_deref())?, window)?;
    let val_set = window_samples(&read_corpus(&val_path, format.as_deref())?, window)?;
    let tagset = match args.types.or(file.types) {
        Some(types) => Tagset::new(types).map_err(|e| config_error(e.to_string()))?,
        None => {
            let mut all = train_set.clone();
            all.extend(val_set.iter().cloned());
            Tagset::from_samples(&all)?
        }
    };
    let store = read_store(embeddings.as_deref())?;
    let encoder = match &store {
        Some(store) => {
            store.validate(&train_set).context("training embeddings")?;
            store.validate(&val_set).context("validation embeddings")?;
            TokenEncoder::External(store.clone())
        }
        None => TokenEncoder::Toy(
            ToyEncoderParams::new(encoder_config, seed).map_err(|e| config_error(e.to_string()))?,
        ),
    };
    let span_config = SpanConfig {
        max_span_len,
        ..Default::default()
    };
    let init = NerModel::new(model, tagset.clone(), encoder, span_config, seed)?;
    let unusable = init.unusable_gold(&train_set)?;
    if unusable > 0 {
        log::warn!("{unusable} training gold mentions cannot be represented by the {model} model");
    }

    fs::create_dir_all(out.join("epochs"))
        .with_context(|| format!("creating {}", out.display()))?;
    let resolved = ResolvedRun {
        model,
        train: train_path,
        validation: val_path,
        embeddings: embeddings.clone(),
        output: out.clone(),
        types: tagset.entity_types().to_vec(),
        max_span_len,
        window,
        seed,
        training: (&train_config).into(),
        encoder: store.is_none().then_some(encoder_config),
    };
    write_resolved(&resolved, &out)?;

    info!(
        "training {model} on {} samples, validating on {}",
        train_set.len(),
        val_set.len()
    );
    let outcome = train(init, &train_set, &val_set, &train_config, exec)?;

    let mut log = String::from("epoch\ttrain_loss\tP\tR\tF1\tTP\tFP\tFN\n");
    for r in &outcome.records {
        let m = r.validation.metrics.as_ref().expect("entity metrics");
        log.push_str(&format!(
            "{}\t{:.6}\t{:.4}\t{:.4}\t{:.4}\t{}\t{}\t{}\n",
            r.epoch, r.train_loss, m.precision, m.recall, m.f1, m.tp, m.fp, m.fn_
        ));
        write_predictions(&r.validation.predictions, epoch_file(&out, r.epoch))?;
    }
    fs::write(out.join("metrics.tsv"), log)?;
    let best = outcome.best_record();
    let summary = Summary {
        best_epoch: outcome.best_epoch,
        epochs_run: outcome.records.len(),
        stopped_early: outcome.stopped_early,
        validation: best.validation.metrics.expect("entity metrics"),
    };
    fs::write(out.join("summary.toml"), toml::to_string_pretty(&summary)?)?;
    save_ner(&outcome.best, out.join("model.ckpt"))?;
    println!("best epoch {}: {}", summary.best_epoch, summary.validation);
    Ok(())
}

fn cmd_predict(args: PredictArgs, exec: Execution) -> Result<()> {
    let store = read_store(args.corpus.embeddings.as_deref())?;
    let checkpoint = load_checkpoint(&args.checkpoint, store.clone())
        .with_context(|| format!("loading {}", args.checkpoint.display()))?;
    let Checkpoint::Ner(model) = checkpoint else {
        bail!(ConfigError(
            "predict needs a seq, crf or span checkpoint; use meta-filter for meta".into()
        ));
    };
    let window = args.corpus.window.unwrap_or(DEFAULT_WINDOW);
    if window < 0 {
        return Err(config_error("--window must be >= 0"));
    }
    let samples = window_samples(
        &read_corpus(&args.input, args.corpus.format.as_deref())?,
        window,
    )?;
    if let Some(store) = &store {
        store.validate(&samples)?;
    }
    let preds = model.predict_all(&samples, exec)?;
    write_or_print(&preds, args.out.as_deref())
}

fn cmd_combine(args: CombineArgs) -> Result<()> {
    let systems = args
        .files
        .iter()
        .map(|p| read_predictions(p).with_context(|| format!("reading {}", p.display())))
        .collect::<Result<Vec<_>>>()?;
    let combined = match args.mode {
        CombineMode::Union => union(&systems)?,
        CombineMode::Majvote => majority_vote(&systems)?,
    };
    write_or_print(&combined, args.out.as_deref())
}

fn parse_run(spec: &str) -> Result<(String, PathBuf)> {
    let (name, dir) = match spec.split_once('=') {
        Some((n, d)) => (n.to_string(), PathBuf::from(d)),
        None => {
            let dir = PathBuf::from(spec);
            let name = dir
                .file_name()
                .map(|n| n.to_string_lossy().into_owned())
                .unwrap_or_else(|| spec.to_string());
            (name, dir)
        }
    };
    if !dir.join("epochs").is_dir() {
        return Err(config_error(format!(
            "{} has no epochs/ directory from `train`",
            dir.display()
        )));
    }
    Ok((name, dir))
}

fn epoch_files(dir: &Path) -> Result<Vec<(usize, PathBuf)>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir.join("epochs"))? {
        let path = entry?.path();
        let epoch = path
            .file_stem()
            .and_then(|s| s.to_str())
            .and_then(|s| s.strip_prefix("epoch-"))
            .and_then(|s| s.parse::<usize>().ok());
        if let Some(epoch) = epoch {
            out.push((epoch, path));
        }
    }
    out.sort();
    Ok(out)
}

fn cmd_meta_prepare(args: MetaPrepareArgs) -> Result<()> {
    if !(0.0..1.0).contains(&args.holdout) {
        return Err(config_error("--holdout must be in [0, 1)"));
    }
    let validation = read_corpus(&args.validation, args.format.as_deref())?;
    let training = read_corpus(&args.train, args.format.as_deref())?;
    let mut captured_sets = Vec::new();
    for spec in &args.runs {
        let (name, dir) = parse_run(spec)?;
        let files = epoch_files(&dir)?;
        if files.is_empty() {
            return Err(config_error(format!(
                "{} has no epoch prediction files",
                dir.display()
            )));
        }
        for (epoch, path) in files {
            captured_sets.push((name.clone(), epoch, read_predictions(&path)?));
        }
    }
    let captured: Vec<CapturedEpoch<'_>> = captured_sets
        .iter()
        .map(|(source, epoch, preds)| CapturedEpoch {
            source,
            epoch: *epoch,
            predictions: preds,
        })
        .collect();
    let (train_ex, held_ex) =
        build_training_set(&captured, &validation, &training, args.holdout, args.seed)?;
    fs::create_dir_all(&args.out)?;
    write_examples(&train_ex, args.out.join("meta-train.jsonl"))?;
    write_examples(&held_ex, args.out.join("meta-heldout.jsonl"))?;
    println!(
        "{} training and {} held-out meta examples",
        train_ex.len(),
        held_ex.len()
    );
    Ok(())
}

#[derive(Debug, Serialize)]
struct ResolvedMeta {
    train: PathBuf,
    validation: PathBuf,
    #[serde(skip_serializing_if = "Option::is_none")]
    embeddings: Option<PathBuf>,
    output: PathBuf,
    threshold: f64,
    seed: u64,
    training: ResolvedTraining,
    #[serde(skip_serializing_if = "Option::is_none")]
    encoder: Option<nerkit::ToyEncoderConfig>,
}

fn cmd_meta_train(args: MetaTrainArgs, exec: Execution) -> Result<()> {
    let file: RunFile = load_file(args.config.as_deref())?;
    let train_path = require_input(&args.train.or(file.train), "meta training examples")?;
    let val_path = require_input(
        &args.validation.or(file.validation),
        "meta held-out examples",
    )?;
    let out = args
        .out
        .or(file.output)
        .ok_or_else(|| config_error("missing output directory (--out)"))?;
    let seed = args.seed.or(file.seed).unwrap_or(0);
    let threshold = args
        .threshold
        .or(file.threshold)
        .unwrap_or(meta::DEFAULT_THRESHOLD);
    let defaults = TrainConfig {
        learning_rate: META_DEFAULT_LR,
        max_epochs: META_DEFAULT_EPOCHS,
        patience: META_DEFAULT_PATIENCE,
        ..Default::default()
    };
    let train_config = resolve_training(&args.training, &file.training, defaults, seed)?;
    let encoder_config = resolve_encoder(&args.training, &file.encoder);
    let embeddings = args.embeddings.or(file.embeddings);
    let store = read_store(embeddings.as_deref())?;
    let encoder = match &store {
        Some(store) => TokenEncoder::External(store.clone()),
        None => TokenEncoder::Toy(
            ToyEncoderParams::new(encoder_config, seed).map_err(|e| config_error(e.to_string()))?,
        ),
    };
    let model =
        MetaModel::new(encoder, threshold, seed).map_err(|e| config_error(e.to_string()))?;
    let train_in: Vec<MetaInstance> = read_examples(&train_path)?
        .iter()
        .map(MetaInstance::from)
        .collect();
    let val_in: Vec<MetaInstance> = read_examples(&val_path)?
        .iter()
        .map(MetaInstance::from)
        .collect();

    fs::create_dir_all(&out)?;
    write_resolved(
        &ResolvedMeta {
            train: train_path,
            validation: val_path,
            embeddings,
            output: out.clone(),
            threshold,
            seed,
            training: (&train_config).into(),
            encoder: store.is_none().then_some(encoder_config),
        },
        &out,
    )?;
    let outcome = train(model, &train_in, &val_in, &train_config, exec)?;
    let mut log = String::from("epoch\ttrain_loss\taccuracy\n");
    for r in &outcome.records {
        log.push_str(&format!(
            "{}\t{:.6}\t{:.4}\n",
            r.epoch, r.train_loss, r.validation.score
        ));
    }
    fs::write(out.join("metrics.tsv"), log)?;
    save_meta(&outcome.best, out.join("meta.ckpt"))?;
    println!(
        "best epoch {}: held-out accuracy {:.4}",
        outcome.best_epoch,
        outcome.best_record().validation.score
    );
    Ok(())
}

fn cmd_meta_filter(args: MetaFilterArgs, exec: Execution) -> Result<()> {
    let store = read_store(args.embeddings.as_deref())?;
    let checkpoint = load_checkpoint(&args.checkpoint, store)
        .with_context(|| format!("loading {}", args.checkpoint.display()))?;
    let Checkpoint::Meta(mut model) = checkpoint else {
        bail!(ConfigError(
            "meta-filter needs a checkpoint from meta-train".into()
        ));
    };
    if let Some(t) = args.threshold {
        if !(t > 0.0 && t < 1.0) {
            return Err(config_error("--threshold must be in (0, 1)"));
        }
        model.threshold = t;
    }
    let samples = read_corpus(&args.input, args.format.as_deref())?;
    let systems = args
        .preds
        .iter()
        .map(|p| read_predictions(p).with_context(|| format!("reading {}", p.display())))
        .collect::<Result<Vec<_>>>()?;
    let combined = union(&systems)?;
    let kept = meta::meta_filter(&combined, &model, &samples, exec)?;
    info!("kept {} of {} predictions", kept.len(), combined.len());
    write_or_print(&kept, args.out.as_deref())
}

fn read_gold(path: &Path) -> Result<PredictionSet> {
    if !path.exists() {
        return Err(config_error(format!("{} does not exist", path.display())));
    }
    let is_corpus = path
        .extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| matches!(e, "jsonl" | "json" | "conll" | "iob"));
    if is_corpus {
        Ok(gold_set(&read_corpus(path, None)?))
    } else {
        read_predictions(path).with_context(|| format!("reading {}", path.display()))
    }
}

fn cmd_score(args: ScoreArgs) -> Result<()> {
    let gold = read_gold(&args.gold)?;
    if !args.pred.exists() {
        return Err(config_error(format!(
            "{} does not exist",
            args.pred.display()
        )));
    }
    let pred =
        read_predictions(&args.pred).with_context(|| format!("reading {}", args.pred.display()))?;
    print!("{}", render_report(&gold, &pred, args.per_type));
    Ok(())
}

fn cmd_synth(args: SynthArgs) -> Result<()> {
    let config = SynthConfig {
        train: args.train,
        validation: args.validation,
        test: args.test,
        nested_frac: args.nested_frac,
        noise: args.noise,
        gazetteer_size: args.gazetteer_size,
        seed: args.seed,
    };
    let corpus = synth::generate(&config).map_err(|e| config_error(e.to_string()))?;
    fs::create_dir_all(&args.out)?;
    for (name, samples) in [
        ("train", &corpus.train),
        ("validation", &corpus.validation),
        ("test", &corpus.test),
    ] {
        write_samples(samples, args.out.join(format!("{name}.jsonl")))?;
        write_predictions(
            &gold_set(samples),
            args.out.join(format!("{name}.gold.tsv")),
        )?;
    }
    fs::write(
        args.out.join("gazetteer.toml"),
        toml::to_string_pretty(&corpus.gazetteer)?,
    )?;
    write_resolved(&config, &args.out)?;
    println!(
        "wrote {}/{}/{} samples to {}",
        corpus.train.len(),
        corpus.validation.len(),
        corpus.test.len(),
        args.out.display()
    );
    Ok(())
}
