//! `sdrformer` experiment runner: train, eval, decode, report.
//!
//! Settings resolve as flags > JSON config file > defaults. All randomness
//! comes from `--seed` (default 0). Exit codes: 0 success, 1 runtime failure,
//! 2 usage or configuration error.

pub mod config;
pub mod report;

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use sdrformer::data::{self, split_tsv, synthetic_task, tokenize, ParallelCorpus, TaskKind, Vocab};
use sdrformer::metrics::imi;
use sdrformer::model::ModelSize;
use sdrformer::train::{self, desk, Checkpoint, Split, Trainer, Variant};

use config::{DataSpec, ResolvedRun, RunConfig};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const METRICS_FILE: &str = "metrics.csv";
pub const CHECKPOINT_DIR: &str = "checkpoints";
pub const DATA_DIR: &str = "data";

#[derive(Debug)]
pub enum CliError {
    /// Bad flags, config file, or values. Exit code 2.
    Usage(String),
    /// Anything that fails while running. Exit code 1.
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Runtime(_) => 1,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) | CliError::Runtime(m) => f.write_str(m),
        }
    }
}

impl From<sdrformer::Error> for CliError {
    fn from(e: sdrformer::Error) -> Self {
        match e {
            sdrformer::Error::Config(_) => CliError::Usage(e.to_string()),
            _ => CliError::Runtime(e.to_string()),
        }
    }
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::Runtime(format!("{}: {e}", path.display()))
}

#[derive(Debug, Parser)]
#[command(name = "sdrformer", version, about = "Transformer homeostasis experiments")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train one variant and write manifest, metrics CSV, and checkpoints.
    Train(TrainArgs),
    /// Teacher-forced loss, token accuracy, and BLEU of a checkpoint (one JSON line).
    Eval(EvalArgs),
    /// Greedy translation of a text file, one JSON line per input line.
    Decode(DecodeArgs),
    /// Combine run directories into a CSV table and an SVG BLEU plot.
    Report(ReportArgs),
}

fn parse_task(s: &str) -> Result<TaskKind, String> {
    match s {
        "copy" => Ok(TaskKind::Copy),
        "reverse" => Ok(TaskKind::Reverse),
        _ => Err(format!("unknown task {s:?}, expected copy or reverse")),
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    /// JSON config file; its keys match the long flags with `_` for `-`.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Experiment id (defaults to the output directory name).
    #[arg(long)]
    pub id: Option<String>,
    /// Synthetic task: copy or reverse.
    #[arg(long, value_parser = parse_task)]
    pub task: Option<TaskKind>,
    /// Two-column TSV training corpus (source<TAB>target).
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    /// TSV validation corpus encoded with the training vocabulary.
    #[arg(long)]
    pub val_corpus: Option<PathBuf>,
    #[arg(long)]
    pub min_freq: Option<usize>,
    #[arg(long)]
    pub train_pairs: Option<usize>,
    #[arg(long)]
    pub val_pairs: Option<usize>,
    /// Experiment family A-E.
    #[arg(long)]
    pub variant: Option<Variant>,
    /// Sparsity coefficient (kept fraction).
    #[arg(long)]
    pub s: Option<f64>,
    /// Statistics window of attention inserts.
    #[arg(long)]
    pub q_att: Option<usize>,
    /// Statistics window of block-output inserts.
    #[arg(long)]
    pub q_bo: Option<usize>,
    /// Drop probability of dropout inserts.
    #[arg(long)]
    pub insert_dropout: Option<f64>,
    /// Width preset: small, base, or big.
    #[arg(long)]
    pub size: Option<ModelSize>,
    #[arg(long)]
    pub d_model: Option<usize>,
    #[arg(long)]
    pub heads: Option<usize>,
    #[arg(long)]
    pub d_ff: Option<usize>,
    #[arg(long)]
    pub blocks: Option<usize>,
    /// Residual dropout rate.
    #[arg(long)]
    pub dropout: Option<f64>,
    #[arg(long)]
    pub max_len: Option<usize>,
    #[arg(long)]
    pub insert_cross_attention: Option<bool>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub steps: Option<u64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Epochs between checkpoint evaluations.
    #[arg(long)]
    pub checkpoint_interval: Option<u64>,
    /// Epochs between metric rows (0: checkpoint epochs only).
    #[arg(long)]
    pub eval_interval: Option<u64>,
}

impl TrainArgs {
    pub fn flags(&self) -> RunConfig {
        RunConfig {
            task: self.task,
            corpus: self.corpus.clone(),
            val_corpus: self.val_corpus.clone(),
            min_freq: self.min_freq,
            train_pairs: self.train_pairs,
            val_pairs: self.val_pairs,
            variant: self.variant,
            s: self.s,
            q_att: self.q_att,
            q_bo: self.q_bo,
            insert_dropout: self.insert_dropout,
            size: self.size,
            d_model: self.d_model,
            heads: self.heads,
            d_ff: self.d_ff,
            blocks: self.blocks,
            dropout: self.dropout,
            max_len: self.max_len,
            insert_cross_attention: self.insert_cross_attention,
            lr: self.lr,
            steps: self.steps,
            batch_size: self.batch_size,
            seed: self.seed,
            checkpoint_interval: self.checkpoint_interval,
            eval_interval: self.eval_interval,
        }
    }

    /// Flags over file over defaults.
    pub fn resolve(&self) -> Result<ResolvedRun, CliError> {
        let file = match &self.config {
            Some(p) => RunConfig::from_file(p)?,
            None => RunConfig::default(),
        };
        config::resolve(&file.overlay(self.flags()))
    }
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// TSV corpus to score.
    #[arg(long)]
    pub data: PathBuf,
}

#[derive(Debug, Args)]
pub struct DecodeArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Text file, one source sentence per line.
    #[arg(long)]
    pub input: PathBuf,
    /// Maximum generated tokens (defaults to the model's max_len).
    #[arg(long)]
    pub max_len: Option<usize>,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Run directories, or directories containing them.
    #[arg(required = true)]
    pub runs: Vec<PathBuf>,
    /// Directory for report.csv and bleu.svg.
    #[arg(long)]
    pub out: PathBuf,
}

/// Final metrics stored in the manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinalMetrics {
    pub steps: u64,
    pub epochs: u64,
    pub train_loss: Option<f64>,
    pub train_bleu: Option<f64>,
    pub val_loss: Option<f64>,
    pub val_bleu: Option<f64>,
    pub train_imi: Option<f64>,
    pub val_imi: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub experiment_id: String,
    pub config: ResolvedRun,
    /// SHA-256 over both vocabularies and the encoded train/val pairs.
    pub corpus_fingerprint: String,
    pub started_at: String,
    pub finished_at: String,
    pub final_metrics: FinalMetrics,
}

/// One row of `metrics.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub epoch: u64,
    pub split: String,
    pub loss: f64,
    pub bleu: f64,
    pub imi_running: Option<f64>,
    pub wall_time_s: f64,
}

/// Parses `args` (including the program name) and runs; returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    let stdout = std::io::stdout();
    let mut out = stdout.lock();
    match dispatch(cli.command, &mut out) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn dispatch(cmd: Command, out: &mut dyn Write) -> Result<(), CliError> {
    match cmd {
        Command::Train(a) => cmd_train(&a, out),
        Command::Eval(a) => cmd_eval(&a, out),
        Command::Decode(a) => cmd_decode(&a, out),
        Command::Report(a) => cmd_report(&a, out),
    }
}

fn read_tsv(path: &Path, vocab: Option<(&Vocab, &Vocab)>, min_freq: usize) -> Result<ParallelCorpus, CliError> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    let (src, tgt) = split_tsv(&text).map_err(|e| io_err(path, e))?;
    let corpus = match vocab {
        Some((s, t)) => ParallelCorpus::from_lines_with_vocab(&src, &tgt, s.clone(), t.clone()),
        None => ParallelCorpus::from_lines(&src, &tgt, min_freq),
    };
    corpus.map_err(|e| io_err(path, e))
}

/// `(train, val)` for a resolved run. Without a validation file the training
/// corpus doubles as validation.
pub fn load_data(spec: &DataSpec, seed: u64) -> Result<(ParallelCorpus, ParallelCorpus), CliError> {
    match spec {
        DataSpec::Synthetic {
            task,
            train_pairs,
            val_pairs,
        } => {
            if *train_pairs == 0 || *val_pairs == 0 {
                return Err(CliError::Usage("`train_pairs` and `val_pairs` must be at least 1".into()));
            }
            let gen = |n, s| synthetic_task(*task, desk::SYMBOLS, 1..=desk::MAX_LEN, n, s);
            Ok((gen(*train_pairs, seed)?, gen(*val_pairs, seed ^ 0x5eed_0f_7a11)?))
        }
        DataSpec::Files { train, val, min_freq } => {
            let tr = read_tsv(train, None, *min_freq)?;
            let va = match val {
                Some(v) => read_tsv(v, Some((&tr.src_vocab, &tr.tgt_vocab)), *min_freq)?,
                None => tr.clone(),
            };
            Ok((tr, va))
        }
    }
}

/// Stable content hash of both splits.
pub fn fingerprint(train: &ParallelCorpus, val: &ParallelCorpus) -> String {
    let mut h = Sha256::new();
    h.update(train.src_vocab.to_lines());
    h.update([0]);
    h.update(train.tgt_vocab.to_lines());
    for (tag, c) in [(b'T', train), (b'V', val)] {
        h.update([tag]);
        for (s, t) in &c.pairs {
            for x in s.iter().chain([&u32::MAX]).chain(t) {
                h.update(x.to_le_bytes());
            }
            h.update(u32::MAX.to_le_bytes());
        }
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

fn write_tsv(path: &Path, c: &ParallelCorpus) -> Result<(), CliError> {
    let mut s = String::new();
    for (a, b) in &c.pairs {
        let words = |ids: &[u32], v: &Vocab| ids.iter().map(|&i| v.token(i)).collect::<Vec<_>>().join(" ");
        s.push_str(&words(a, &c.src_vocab));
        s.push('\t');
        s.push_str(&words(b, &c.tgt_vocab));
        s.push('\n');
    }
    fs::write(path, s).map_err(|e| io_err(path, e))
}

fn write_metrics(path: &Path, state: &train::TrainState) -> Result<(), CliError> {
    let err = |e: csv::Error| io_err(path, e);
    let mut w = csv::Writer::from_path(path).map_err(err)?;
    for r in &state.records {
        w.serialize(MetricsRow {
            epoch: r.epoch,
            split: r.split.name().to_string(),
            loss: r.loss,
            bleu: r.bleu,
            imi_running: r.imi_running,
            wall_time_s: r.wall_time_s,
        })
        .map_err(err)?;
    }
    w.flush().map_err(|e| io_err(path, e))
}

pub fn cmd_train(args: &TrainArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let mut resolved = args.resolve()?;
    let (tr, va) = load_data(&resolved.data, resolved.experiment.seed)?;
    resolved.experiment.model.src_vocab = tr.src_vocab.len();
    resolved.experiment.model.tgt_vocab = tr.tgt_vocab.len();
    resolved.experiment.validate()?;

    let dir = &args.out;
    if dir.join(MANIFEST_FILE).exists() {
        return Err(CliError::Runtime(format!(
            "{} already holds a run; choose another --out",
            dir.display()
        )));
    }
    fs::create_dir_all(dir.join(DATA_DIR)).map_err(|e| io_err(dir, e))?;
    let id = args.id.clone().unwrap_or_else(|| {
        dir.file_name()
            .map_or_else(|| "run".to_string(), |n| n.to_string_lossy().into_owned())
    });
    let started_at = chrono::Utc::now().to_rfc3339();
    write_tsv(&dir.join(DATA_DIR).join("train.tsv"), &tr)?;
    write_tsv(&dir.join(DATA_DIR).join("val.tsv"), &va)?;

    let outcome = train::train(resolved.experiment.clone(), &tr, &va)?;
    write_metrics(&dir.join(METRICS_FILE), &outcome.state)?;
    outcome.checkpoints.save_dir(&dir.join(CHECKPOINT_DIR))?;

    let last = |split: Split| outcome.state.series(split).last().map(|r| (r.loss, r.bleu));
    let final_metrics = FinalMetrics {
        steps: outcome.state.step,
        epochs: outcome.state.epoch,
        train_loss: last(Split::Train).map(|x| x.0),
        train_bleu: last(Split::Train).map(|x| x.1),
        val_loss: last(Split::Val).map(|x| x.0),
        val_bleu: last(Split::Val).map(|x| x.1),
        train_imi: imi(&outcome.train_bleu).ok(),
        val_imi: imi(&outcome.val_bleu).ok(),
    };
    let manifest = RunManifest {
        experiment_id: id,
        config: resolved,
        corpus_fingerprint: fingerprint(&tr, &va),
        started_at,
        finished_at: chrono::Utc::now().to_rfc3339(),
        final_metrics,
    };
    let path = dir.join(MANIFEST_FILE);
    let json = serde_json::to_string_pretty(&manifest).map_err(|e| io_err(&path, e))?;
    fs::write(&path, json + "\n").map_err(|e| io_err(&path, e))?;
    writeln!(out, "{}", serde_json::to_string(&manifest.final_metrics).expect("serializable"))
        .map_err(|e| CliError::Runtime(e.to_string()))
}

fn load_trainer(path: &Path) -> Result<(Trainer, Vocab, Vocab), CliError> {
    let ckpt = Checkpoint::load(path)?;
    let t = Trainer::from_checkpoint(&ckpt).map_err(|e| CliError::Runtime(e.to_string()))?;
    let (s, v) = t
        .vocab()
        .cloned()
        .ok_or_else(|| CliError::Runtime("checkpoint error: no vocabulary stored".into()))?;
    Ok((t, s, v))
}

#[derive(Serialize)]
struct EvalLine<'a> {
    checkpoint: &'a str,
    pairs: usize,
    loss: f64,
    token_accuracy: f64,
    bleu: f64,
}

pub fn cmd_eval(args: &EvalArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let (mut t, sv, tv) = load_trainer(&args.checkpoint)?;
    let corpus = read_tsv(&args.data, Some((&sv, &tv)), data::DEFAULT_MIN_FREQ)?;
    let e = t.evaluate(&corpus)?;
    let line = EvalLine {
        checkpoint: &args.checkpoint.to_string_lossy(),
        pairs: corpus.len(),
        loss: e.loss,
        token_accuracy: e.token_accuracy,
        bleu: e.bleu,
    };
    writeln!(out, "{}", serde_json::to_string(&line).expect("serializable"))
        .map_err(|e| CliError::Runtime(e.to_string()))
}

#[derive(Serialize)]
struct DecodeLine<'a> {
    line: usize,
    source: &'a str,
    output: String,
}

pub fn cmd_decode(args: &DecodeArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let (mut t, sv, tv) = load_trainer(&args.checkpoint)?;
    let max_len = args.max_len.unwrap_or(t.config().model.max_len);
    let text = fs::read_to_string(&args.input).map_err(|e| io_err(&args.input, e))?;
    for (i, line) in text.lines().enumerate() {
        let tokens = tokenize(line);
        let output = if tokens.is_empty() {
            String::new()
        } else {
            let ids = sv.encode(&tokens);
            let hyp = t.model_mut().greedy_decode(&[ids], max_len)?;
            tv.decode(&hyp[0])
        };
        let l = DecodeLine {
            line: i + 1,
            source: line,
            output,
        };
        writeln!(out, "{}", serde_json::to_string(&l).expect("serializable"))
            .map_err(|e| CliError::Runtime(e.to_string()))?;
    }
    Ok(())
}

pub fn cmd_report(args: &ReportArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let dirs = report::find_runs(&args.runs)?;
    let runs = dirs.iter().map(|d| report::summarise(d)).collect::<Result<Vec<_>, _>>()?;
    fs::create_dir_all(&args.out).map_err(|e| io_err(&args.out, e))?;
    let csv_path = args.out.join("report.csv");
    let svg_path = args.out.join("bleu.svg");
    report::write_csv(&runs, &csv_path)?;
    fs::write(&svg_path, report::render_svg(&runs)).map_err(|e| io_err(&svg_path, e))?;
    writeln!(out, "{}", csv_path.display()).map_err(|e| CliError::Runtime(e.to_string()))?;
    writeln!(out, "{}", svg_path.display()).map_err(|e| CliError::Runtime(e.to_string()))
}
