//! Flag/file/default resolution for `train`.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use sdrformer::data::TaskKind;
use sdrformer::model::{ModelSize, TransformerConfig};
use sdrformer::train::{desk, ExperimentConfig, Variant};

use crate::CliError;

/// Every setting `train` accepts. Flags and the JSON config file both produce
/// one of these; unset fields fall through to the next layer.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub task: Option<TaskKind>,
    pub corpus: Option<PathBuf>,
    pub val_corpus: Option<PathBuf>,
    pub min_freq: Option<usize>,
    pub train_pairs: Option<usize>,
    pub val_pairs: Option<usize>,
    pub variant: Option<Variant>,
    pub s: Option<f64>,
    pub q_att: Option<usize>,
    pub q_bo: Option<usize>,
    pub insert_dropout: Option<f64>,
    pub size: Option<ModelSize>,
    pub d_model: Option<usize>,
    pub heads: Option<usize>,
    pub d_ff: Option<usize>,
    pub blocks: Option<usize>,
    pub dropout: Option<f64>,
    pub max_len: Option<usize>,
    pub insert_cross_attention: Option<bool>,
    pub lr: Option<f64>,
    pub steps: Option<u64>,
    pub batch_size: Option<usize>,
    pub seed: Option<u64>,
    pub checkpoint_interval: Option<u64>,
    pub eval_interval: Option<u64>,
}

macro_rules! overlay {
    ($base:expr, $top:expr, $($f:ident),*) => {
        RunConfig { $($f: $top.$f.or($base.$f)),* }
    };
}

impl RunConfig {
    /// `top` wins wherever it is set.
    pub fn overlay(self, top: RunConfig) -> RunConfig {
        overlay!(
            self, top, task, corpus, val_corpus, min_freq, train_pairs, val_pairs, variant, s, q_att,
            q_bo, insert_dropout, size, d_model, heads, d_ff, blocks, dropout, max_len,
            insert_cross_attention, lr, steps, batch_size, seed, checkpoint_interval, eval_interval
        )
    }

    pub fn from_file(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        serde_json::from_str(&text)
            .map_err(|e| CliError::Usage(format!("invalid config {}: {e}", path.display())))
    }
}

/// Where the training pairs come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSpec {
    Synthetic {
        task: TaskKind,
        train_pairs: usize,
        val_pairs: usize,
    },
    Files {
        train: PathBuf,
        val: Option<PathBuf>,
        min_freq: usize,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResolvedRun {
    pub data: DataSpec,
    pub experiment: ExperimentConfig,
}

fn usage(key: &str, msg: impl std::fmt::Display) -> CliError {
    CliError::Usage(format!("invalid value for `{key}`: {msg}"))
}

/// Applies defaults to a merged config. Vocabulary sizes are filled in later
/// from the loaded corpus.
pub fn resolve(rc: &RunConfig) -> Result<ResolvedRun, CliError> {
    if rc.task.is_some() && rc.corpus.is_some() {
        return Err(CliError::Usage("`task` and `corpus` are mutually exclusive".into()));
    }
    if rc.val_corpus.is_some() && rc.corpus.is_none() {
        return Err(CliError::Usage("`val_corpus` requires `corpus`".into()));
    }
    let data = match &rc.corpus {
        Some(path) => DataSpec::Files {
            train: path.clone(),
            val: rc.val_corpus.clone(),
            min_freq: rc.min_freq.unwrap_or(sdrformer::data::DEFAULT_MIN_FREQ),
        },
        None => DataSpec::Synthetic {
            task: rc.task.unwrap_or(TaskKind::Copy),
            train_pairs: rc.train_pairs.unwrap_or(desk::TRAIN_PAIRS),
            val_pairs: rc.val_pairs.unwrap_or(desk::VAL_PAIRS),
        },
    };
    let mut model = match rc.size {
        Some(size) => TransformerConfig::preset(size, 0, 0),
        None => desk::model(0, 0),
    };
    if let Some(v) = rc.d_model {
        model.d_model = v;
    }
    if let Some(v) = rc.heads {
        model.heads = v;
    }
    if let Some(v) = rc.d_ff {
        model.d_ff = v;
    }
    if let Some(v) = rc.blocks {
        model.n_blocks = v;
    }
    if let Some(v) = rc.dropout {
        model.dropout_rate = v;
    }
    if let Some(v) = rc.max_len {
        model.max_len = v;
    }
    if let Some(v) = rc.insert_cross_attention {
        model.insert_cross_attention = v;
    }
    let mut e = ExperimentConfig::new(rc.variant.unwrap_or(Variant::A), model);
    e.s = rc.s.unwrap_or(desk::S);
    e.q_att = rc.q_att.unwrap_or(desk::Q_ATT);
    e.q_bo = rc.q_bo.unwrap_or(desk::Q_BO);
    e.insert_dropout = rc.insert_dropout.unwrap_or(e.insert_dropout);
    e.lr = rc.lr.unwrap_or(e.lr);
    e.steps = rc.steps.unwrap_or(desk::STEPS);
    e.batch_size = rc.batch_size.unwrap_or(desk::BATCH_SIZE);
    e.seed = rc.seed.unwrap_or(0);
    e.checkpoint_interval_epochs = rc.checkpoint_interval.unwrap_or(e.checkpoint_interval_epochs);
    e.eval_interval_epochs = rc.eval_interval.unwrap_or(e.eval_interval_epochs);
    let e = e.resolved();
    check_keys(&e)?;
    Ok(ResolvedRun { data, experiment: e })
}

/// Range checks that name the offending key; the rest is left to
/// `ExperimentConfig::validate` once vocabularies are known.
fn check_keys(e: &ExperimentConfig) -> Result<(), CliError> {
    if !(e.s > 0.0 && e.s < 1.0) {
        return Err(usage("s", format!("{} is outside (0, 1)", e.s)));
    }
    if e.q_att == 0 {
        return Err(usage("q_att", "must be at least 1"));
    }
    if e.q_bo == 0 {
        return Err(usage("q_bo", "must be at least 1"));
    }
    if !(0.0..1.0).contains(&e.insert_dropout) {
        return Err(usage("insert_dropout", format!("{} is outside [0, 1)", e.insert_dropout)));
    }
    if !(e.lr > 0.0 && e.lr.is_finite()) {
        return Err(usage("lr", format!("{} is not a positive number", e.lr)));
    }
    if e.batch_size == 0 {
        return Err(usage("batch_size", "must be at least 1"));
    }
    let m = &e.model;
    if m.heads == 0 || m.d_model % m.heads != 0 {
        return Err(usage("heads", format!("d_model {} is not divisible by {}", m.d_model, m.heads)));
    }
    if m.d_model == 0 || m.d_model % 2 != 0 {
        return Err(usage("d_model", format!("{} must be even and positive", m.d_model)));
    }
    if m.d_ff == 0 {
        return Err(usage("d_ff", "must be at least 1"));
    }
    if m.n_blocks == 0 {
        return Err(usage("blocks", "must be at least 1"));
    }
    if m.max_len == 0 {
        return Err(usage("max_len", "must be at least 1"));
    }
    if !(0.0..1.0).contains(&m.dropout_rate) {
        return Err(usage("dropout", format!("{} is outside [0, 1)", m.dropout_rate)));
    }
    Ok(())
}
