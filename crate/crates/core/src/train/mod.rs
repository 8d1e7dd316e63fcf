//! Training loop, evaluation, and the five-slot checkpoint policy.

mod adam;
mod checkpoint;

pub use adam::Adam;
pub use checkpoint::{Checkpoint, OptimizerState, RngState, MAGIC, VERSION};

use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{batch_iterator, Batch, ParallelCorpus, Vocab, EOS, PAD};
use crate::error::{Error, Result};
use crate::homeostasis::HomeostasisConfig;
use crate::metrics::{bleu, imi, MetricSeries};
use crate::model::{ForwardCtx, Seq2Seq, TransformerConfig};

pub const DEFAULT_LR: f64 = 1e-4;
pub const DEFAULT_BATCH_SIZE: usize = 64;
pub const DEFAULT_CHECKPOINT_INTERVAL: u64 = 30;
pub const DEFAULT_S: f64 = 0.5;
pub const DEFAULT_Q: usize = 256;
pub const DEFAULT_INSERT_DROPOUT: f64 = 0.1;

/// Experiment families: which mechanism sits at each insert point.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Variant {
    /// Plain transformer.
    A,
    /// RFB-kWTA in attention, dropout at the block output.
    B,
    /// Dropout at both points.
    C,
    /// Smart Inhibition at both points.
    D,
    /// RFB-kWTA in attention, Smart Inhibition at the block output.
    E,
}

impl Variant {
    pub const ALL: [Variant; 5] = [Variant::A, Variant::B, Variant::C, Variant::D, Variant::E];

    /// `(attention insert, block-output insert)`.
    pub fn inserts(self, s: f64, q_att: usize, q_bo: usize, p: f64) -> (HomeostasisConfig, HomeostasisConfig) {
        match self {
            Variant::A => (HomeostasisConfig::none(), HomeostasisConfig::none()),
            Variant::B => (HomeostasisConfig::rfb_kwta(s, q_att), HomeostasisConfig::dropout(p)),
            Variant::C => (HomeostasisConfig::dropout(p), HomeostasisConfig::dropout(p)),
            Variant::D => (
                HomeostasisConfig::smart_inhibition(s, q_att),
                HomeostasisConfig::smart_inhibition(s, q_bo),
            ),
            Variant::E => (
                HomeostasisConfig::rfb_kwta(s, q_att),
                HomeostasisConfig::smart_inhibition(s, q_bo),
            ),
        }
    }

    pub fn letter(self) -> char {
        match self {
            Variant::A => 'A',
            Variant::B => 'B',
            Variant::C => 'C',
            Variant::D => 'D',
            Variant::E => 'E',
        }
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "A" => Ok(Variant::A),
            "B" => Ok(Variant::B),
            "C" => Ok(Variant::C),
            "D" => Ok(Variant::D),
            "E" => Ok(Variant::E),
            _ => Err(Error::Config(format!("unknown variant {s:?}, expected one of A-E"))),
        }
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.letter())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub variant: Variant,
    /// Architecture. Its insert fields are overwritten from the variant by
    /// [`ExperimentConfig::resolved`].
    pub model: TransformerConfig,
    pub s: f64,
    pub q_att: usize,
    pub q_bo: usize,
    /// Keep-complement probability of dropout inserts.
    pub insert_dropout: f64,
    pub lr: f64,
    pub steps: u64,
    pub batch_size: usize,
    pub seed: u64,
    pub checkpoint_interval_epochs: u64,
    /// Record metrics every this many epochs; 0 records only at checkpoint epochs.
    pub eval_interval_epochs: u64,
}

impl ExperimentConfig {
    pub fn new(variant: Variant, model: TransformerConfig) -> Self {
        Self {
            variant,
            model,
            s: DEFAULT_S,
            q_att: DEFAULT_Q,
            q_bo: DEFAULT_Q,
            insert_dropout: DEFAULT_INSERT_DROPOUT,
            lr: DEFAULT_LR,
            steps: 0,
            batch_size: DEFAULT_BATCH_SIZE,
            seed: 0,
            checkpoint_interval_epochs: DEFAULT_CHECKPOINT_INTERVAL,
            eval_interval_epochs: 1,
        }
        .resolved()
    }

    /// Copy with the model's insert points set from the variant.
    pub fn resolved(mut self) -> Self {
        let (attn, out) = self.variant.inserts(self.s, self.q_att, self.q_bo, self.insert_dropout);
        self.model.attn_insert = attn;
        self.model.block_out_insert = out;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(Error::Config(m));
        if !(self.s > 0.0 && self.s < 1.0) {
            return err(format!("s must lie in (0, 1), got {}", self.s));
        }
        if self.q_att == 0 || self.q_bo == 0 {
            return err("q_att and q_bo must be at least 1".into());
        }
        if !(0.0..1.0).contains(&self.insert_dropout) {
            return err(format!("insert_dropout must lie in [0, 1), got {}", self.insert_dropout));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return err(format!("lr must be positive, got {}", self.lr));
        }
        if self.batch_size == 0 {
            return err("batch_size must be at least 1".into());
        }
        let expected = self.clone().resolved();
        if expected.model != self.model {
            return err(format!("model inserts do not match variant {}", self.variant));
        }
        self.model.validate()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
        }
    }
}

/// One metrics row per split per recorded epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: u64,
    pub step: u64,
    pub split: Split,
    pub loss: f64,
    pub bleu: f64,
    pub imi_running: Option<f64>,
    pub wall_time_s: f64,
}

/// Mutable training progress, saved in every checkpoint.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub step: u64,
    /// Completed epochs.
    pub epoch: u64,
    pub batch_in_epoch: usize,
    pub step_losses: Vec<f64>,
    pub records: Vec<EpochRecord>,
    /// Best values for the four metric slots, in [`Slot::ALL`] order.
    pub best: [Option<f64>; 4],
    pub last_save_step: Option<u64>,
    pub wall_time_s: f64,
}

impl TrainState {
    pub fn series(&self, split: Split) -> Vec<&EpochRecord> {
        self.records.iter().filter(|r| r.split == split).collect()
    }

    pub fn bleu_series(&self, split: Split) -> MetricSeries {
        MetricSeries::new(self.series(split).iter().map(|r| r.bleu).collect())
            .expect("recorded BLEU values are finite")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Slot {
    BestTrainLoss,
    BestValLoss,
    BestTrainBleu,
    BestValBleu,
    Last,
}

impl Slot {
    pub const ALL: [Slot; 5] = [
        Slot::BestTrainLoss,
        Slot::BestValLoss,
        Slot::BestTrainBleu,
        Slot::BestValBleu,
        Slot::Last,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Slot::BestTrainLoss => "best_train_loss",
            Slot::BestValLoss => "best_val_loss",
            Slot::BestTrainBleu => "best_train_bleu",
            Slot::BestValBleu => "best_val_bleu",
            Slot::Last => "last_epoch",
        }
    }

    pub fn file_name(self) -> String {
        format!("{}.ckpt", self.name())
    }

    fn criterion(self) -> Option<(Split, bool)> {
        match self {
            Slot::BestTrainLoss => Some((Split::Train, false)),
            Slot::BestValLoss => Some((Split::Val, false)),
            Slot::BestTrainBleu => Some((Split::Train, true)),
            Slot::BestValBleu => Some((Split::Val, true)),
            Slot::Last => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SavedCheckpoint {
    pub step: u64,
    pub epoch: u64,
    pub metric: Option<f64>,
    pub checkpoint: Checkpoint,
}

/// Five snapshots, each replaced only when its criterion improves.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct CheckpointSet {
    slots: [Option<SavedCheckpoint>; 5],
}

impl CheckpointSet {
    pub fn get(&self, slot: Slot) -> Option<&SavedCheckpoint> {
        self.slots[slot as usize].as_ref()
    }

    pub fn filled(&self) -> usize {
        self.slots.iter().flatten().count()
    }

    /// Writes every filled slot as `<slot>.ckpt` under `dir`.
    pub fn save_dir(&self, dir: &Path) -> Result<Vec<PathBuf>> {
        fs::create_dir_all(dir)?;
        let mut out = Vec::new();
        for slot in Slot::ALL {
            if let Some(s) = self.get(slot) {
                let p = dir.join(slot.file_name());
                s.checkpoint.save(&p)?;
                out.push(p);
            }
        }
        Ok(out)
    }
}

/// Teacher-forced loss and accuracy plus greedy-decode BLEU.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub loss: f64,
    pub token_accuracy: f64,
    pub bleu: f64,
}

pub struct StepOutcome {
    pub loss: f64,
    pub epoch_finished: bool,
}

pub struct Trainer {
    cfg: ExperimentConfig,
    model: Seq2Seq,
    opt: Adam,
    rng: ChaCha8Rng,
    state: TrainState,
    checkpoints: CheckpointSet,
    vocab: Option<(Vocab, Vocab)>,
    clock: Instant,
}

fn epoch_seed(seed: u64, epoch: u64) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ epoch.wrapping_add(1).wrapping_mul(0xD1B5_4A32_D192_ED03)
}

fn training_rng(seed: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    rng
}

impl Trainer {
    pub fn new(cfg: ExperimentConfig) -> Result<Self> {
        let cfg = cfg.resolved();
        cfg.validate()?;
        let model = Seq2Seq::new(cfg.model.clone(), cfg.seed)?;
        let opt = Adam::new(cfg.lr, model.params());
        Ok(Self {
            rng: training_rng(cfg.seed),
            cfg,
            model,
            opt,
            state: TrainState::default(),
            checkpoints: CheckpointSet::default(),
            vocab: None,
            clock: Instant::now(),
        })
    }

    /// Rebuilds a trainer from a checkpoint's own config.
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let mut t = Self::new(ckpt.config.clone())?;
        t.restore(ckpt)?;
        Ok(t)
    }

    /// Loads weights, optimizer, caches, RNG, and progress; shapes must match.
    pub fn restore(&mut self, ckpt: &Checkpoint) -> Result<()> {
        let params = self.model.params();
        if ckpt.weights.len() != params.len() {
            return Err(Error::Checkpoint(format!(
                "shape mismatch: checkpoint has {} weight arrays, model has {}",
                ckpt.weights.len(),
                params.len()
            )));
        }
        for ((name, t), (_, p)) in ckpt.weights.iter().zip(params.iter()) {
            if *name != p.name || t.shape() != p.value.shape() {
                return Err(Error::Checkpoint(format!(
                    "shape mismatch: checkpoint {name} {:?} vs model {} {:?}",
                    t.shape(),
                    p.name,
                    p.value.shape()
                )));
            }
        }
        let o = &ckpt.optimizer;
        let opt = Adam::from_parts(self.cfg.lr, o.t, o.m.clone(), o.v.clone(), params)?;
        let expected: Vec<String> = self.model.caches().into_iter().map(|(n, _)| n).collect();
        let got: Vec<&String> = ckpt.caches.iter().map(|(n, _)| n).collect();
        if expected.iter().collect::<Vec<_>>() != got {
            return Err(Error::Checkpoint("statistics caches do not match the model's insert points".into()));
        }
        for (name, cache) in &ckpt.caches {
            self.model.set_cache(name, cache.clone())?;
        }
        for ((_, t), p) in ckpt.weights.iter().zip(self.model.params_mut().iter_mut()) {
            p.value = t.clone();
        }
        self.opt = opt;
        self.rng = ckpt.rng.restore();
        self.state = ckpt.state.clone();
        if ckpt.vocab.is_some() {
            self.vocab = ckpt.vocab.clone();
        }
        self.clock = Instant::now();
        Ok(())
    }

    pub fn snapshot(&self) -> Checkpoint {
        let (m, v) = self.opt.moments();
        let mut state = self.state.clone();
        state.wall_time_s = self.wall_time();
        Checkpoint {
            config: self.cfg.clone(),
            weights: self
                .model
                .params()
                .iter()
                .map(|(_, p)| (p.name.clone(), p.value.clone()))
                .collect(),
            optimizer: OptimizerState {
                t: self.opt.steps_taken(),
                m: m.to_vec(),
                v: v.to_vec(),
            },
            caches: self
                .model
                .caches()
                .into_iter()
                .map(|(n, c)| (n, c.clone()))
                .collect(),
            rng: RngState::capture(&self.rng),
            state,
            vocab: self.vocab.clone(),
        }
    }

    pub fn set_vocab(&mut self, src: Vocab, tgt: Vocab) {
        self.vocab = Some((src, tgt));
    }

    pub fn vocab(&self) -> Option<&(Vocab, Vocab)> {
        self.vocab.as_ref()
    }

    pub fn config(&self) -> &ExperimentConfig {
        &self.cfg
    }

    pub fn model(&self) -> &Seq2Seq {
        &self.model
    }

    pub fn model_mut(&mut self) -> &mut Seq2Seq {
        &mut self.model
    }

    pub fn state(&self) -> &TrainState {
        &self.state
    }

    pub fn checkpoints(&self) -> &CheckpointSet {
        &self.checkpoints
    }

    fn wall_time(&self) -> f64 {
        self.state.wall_time_s + self.clock.elapsed().as_secs_f64()
    }

    fn check_corpus(&self, corpus: &ParallelCorpus) -> Result<()> {
        if corpus.is_empty() {
            return Err(Error::InvalidInput("corpus is empty".into()));
        }
        let m = &self.cfg.model;
        if corpus.src_vocab.len() > m.src_vocab || corpus.tgt_vocab.len() > m.tgt_vocab {
            return Err(Error::Config(format!(
                "corpus vocabularies ({}, {}) exceed the model's ({}, {})",
                corpus.src_vocab.len(),
                corpus.tgt_vocab.len(),
                m.src_vocab,
                m.tgt_vocab
            )));
        }
        Ok(())
    }

    fn batches_per_epoch(&self, corpus: &ParallelCorpus) -> usize {
        corpus.len().div_ceil(self.cfg.batch_size)
    }

    /// One optimizer step on the next batch of the current epoch.
    pub fn step(&mut self, train: &ParallelCorpus) -> Result<StepOutcome> {
        let per_epoch = self.batches_per_epoch(train);
        let seed = epoch_seed(self.cfg.seed, self.state.epoch);
        let batch = batch_iterator(train, self.cfg.batch_size, self.cfg.model.max_len, Some(seed))?
            .nth(self.state.batch_in_epoch)
            .ok_or_else(|| Error::InvalidInput("epoch position past the end of the corpus".into()))?;
        let step = self.state.step;
        let (loss, grads) = {
            let mut ctx = ForwardCtx {
                training: true,
                rng: &mut self.rng,
            };
            let (g, l) = self.model.loss(&batch, &mut ctx)?;
            let loss = g.value(l).data()[0];
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss {
                    step,
                    diagnostics: self.norm_report(),
                });
            }
            (loss, g.backward(l)?)
        };
        self.opt.step(self.model.params_mut(), &grads);
        self.state.step += 1;
        self.state.step_losses.push(loss);
        self.state.batch_in_epoch += 1;
        let epoch_finished = self.state.batch_in_epoch == per_epoch;
        if epoch_finished {
            self.state.batch_in_epoch = 0;
            self.state.epoch += 1;
        }
        Ok(StepOutcome { loss, epoch_finished })
    }

    fn norm_report(&self) -> String {
        self.model
            .params()
            .iter()
            .map(|(_, p)| format!("{}={:.4e}", p.name, p.value.norm()))
            .collect::<Vec<_>>()
            .join(", ")
    }

    /// Trains until `target_step`, recording metrics and saving at epoch marks.
    pub fn run_until(&mut self, target_step: u64, train: &ParallelCorpus, val: &ParallelCorpus) -> Result<()> {
        self.check_corpus(train)?;
        self.check_corpus(val)?;
        while self.state.step < target_step {
            if self.step(train)?.epoch_finished {
                let e = self.state.epoch;
                let due = |every: u64| every > 0 && e % every == 0;
                let save = due(self.cfg.checkpoint_interval_epochs);
                if save || due(self.cfg.eval_interval_epochs) {
                    self.record_metrics(train, val)?;
                }
                if save {
                    self.save_point();
                }
            }
        }
        Ok(())
    }

    /// Final save point at the current step, with metrics if any steps ran
    /// since they were last recorded.
    pub fn finish(&mut self, train: &ParallelCorpus, val: &ParallelCorpus) -> Result<()> {
        if self.state.last_save_step == Some(self.state.step) {
            return Ok(());
        }
        let recorded = self.state.records.last().map(|r| r.step);
        if self.state.step > 0 && recorded != Some(self.state.step) {
            self.record_metrics(train, val)?;
        }
        self.save_point();
        Ok(())
    }

    /// Mean training loss over the most recent epoch's worth of steps.
    fn recent_train_loss(&self, per_epoch: usize) -> f64 {
        let l = &self.state.step_losses;
        let n = per_epoch.min(l.len()).max(1);
        l[l.len().saturating_sub(n)..].iter().sum::<f64>() / n as f64
    }

    fn record_metrics(&mut self, train: &ParallelCorpus, val: &ParallelCorpus) -> Result<()> {
        let train_loss = self.recent_train_loss(self.batches_per_epoch(train));
        let train_bleu = self.bleu(train)?;
        let v = self.evaluate(val)?;
        for (split, loss, b) in [(Split::Train, train_loss, train_bleu), (Split::Val, v.loss, v.bleu)] {
            let mut values: Vec<f64> = self.state.series(split).iter().map(|r| r.bleu).collect();
            values.push(b);
            let imi_running = MetricSeries::new(values).ok().and_then(|s| imi(&s).ok());
            self.state.records.push(EpochRecord {
                epoch: self.state.epoch,
                step: self.state.step,
                split,
                loss,
                bleu: b,
                imi_running,
                wall_time_s: self.wall_time(),
            });
        }
        Ok(())
    }

    fn save_point(&mut self) {
        let step = self.state.step;
        let latest = |split: Split, bleu_metric: bool| {
            self.state
                .records
                .iter()
                .rev()
                .find(|r| r.split == split && r.step == step)
                .map(|r| if bleu_metric { r.bleu } else { r.loss })
        };
        let mut improved = Vec::new();
        for (i, slot) in Slot::ALL.iter().enumerate().take(4) {
            let (split, higher) = slot.criterion().expect("metric slot");
            if let Some(v) = latest(split, higher) {
                let better = match self.state.best[i] {
                    None => true,
                    Some(b) => (higher && v > b) || (!higher && v < b),
                };
                if better {
                    improved.push((i, v));
                }
            }
        }
        for &(i, v) in &improved {
            self.state.best[i] = Some(v);
        }
        self.state.last_save_step = Some(step);
        let ckpt = self.snapshot();
        let saved = |metric| SavedCheckpoint {
            step,
            epoch: self.state.epoch,
            metric,
            checkpoint: ckpt.clone(),
        };
        for &(i, v) in &improved {
            self.checkpoints.slots[i] = Some(saved(Some(v)));
        }
        self.checkpoints.slots[Slot::Last as usize] = Some(saved(None));
    }

    fn eval_batches<'c>(&self, corpus: &'c ParallelCorpus) -> Result<impl Iterator<Item = Batch> + 'c> {
        batch_iterator(corpus, self.cfg.batch_size, self.cfg.model.max_len, None)
    }

    /// Teacher-forced loss and token accuracy in eval mode.
    pub fn teacher_forced(&mut self, corpus: &ParallelCorpus) -> Result<(f64, f64)> {
        self.check_corpus(corpus)?;
        let vocab = self.cfg.model.tgt_vocab;
        let (mut loss_sum, mut correct, mut total) = (0.0, 0usize, 0usize);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for batch in self.eval_batches(corpus)? {
            let mut ctx = ForwardCtx {
                training: false,
                rng: &mut rng,
            };
            let n = batch.target_tokens();
            let (g, l, logits) = self.model.loss_and_logits(&batch, &mut ctx)?;
            loss_sum += g.value(l).data()[0] * n as f64;
            let logits = g.value(logits).data();
            for (row, &t) in batch.tgt_out.iter().enumerate() {
                if t == PAD {
                    continue;
                }
                let r = &logits[row * vocab..(row + 1) * vocab];
                let best = r
                    .iter()
                    .enumerate()
                    .fold(0, |b, (i, &x)| if x > r[b] { i } else { b });
                correct += usize::from(best as u32 == t);
            }
            total += n;
        }
        Ok((loss_sum / total as f64, correct as f64 / total as f64))
    }

    /// Corpus BLEU of greedy decodes against the (truncated) references.
    pub fn bleu(&mut self, corpus: &ParallelCorpus) -> Result<f64> {
        let (hyps, refs) = self.decode_corpus(corpus)?;
        bleu(&hyps, &refs)
    }

    /// Greedy decodes (EOS stripped) and references for a corpus.
    pub fn decode_corpus(&mut self, corpus: &ParallelCorpus) -> Result<(Vec<Vec<u32>>, Vec<Vec<u32>>)> {
        self.check_corpus(corpus)?;
        let max_len = self.cfg.model.max_len;
        let refs: Vec<Vec<u32>> = corpus
            .pairs
            .iter()
            .map(|(_, t)| t[..t.len().min(max_len)].to_vec())
            .collect();
        let decode_len = (refs.iter().map(Vec::len).max().unwrap_or(0) + 1).min(max_len);
        let mut hyps = Vec::with_capacity(refs.len());
        for chunk in corpus.pairs.chunks(self.cfg.batch_size) {
            let srcs: Vec<Vec<u32>> = chunk.iter().map(|(s, _)| s.clone()).collect();
            for mut h in self.model.greedy_decode(&srcs, decode_len)? {
                if h.last() == Some(&EOS) {
                    h.pop();
                }
                hyps.push(h);
            }
        }
        Ok((hyps, refs))
    }

    pub fn evaluate(&mut self, corpus: &ParallelCorpus) -> Result<Evaluation> {
        let (loss, token_accuracy) = self.teacher_forced(corpus)?;
        let bleu = self.bleu(corpus)?;
        Ok(Evaluation {
            loss,
            token_accuracy,
            bleu,
        })
    }
}

/// Desk-scale copy/reverse task settings: 12 content symbols (16 ids with the
/// reserved ones), lengths 1..=10.
pub mod desk {
    use super::*;
    use crate::data::{synthetic_task, TaskKind};

    pub const SYMBOLS: usize = 12;
    pub const MAX_LEN: usize = 10;
    pub const TRAIN_PAIRS: usize = 1000;
    pub const VAL_PAIRS: usize = 100;
    pub const STEPS: u64 = 2000;
    pub const BATCH_SIZE: usize = 32;
    pub const S: f64 = 0.9;
    pub const Q_ATT: usize = 256;
    pub const Q_BO: usize = 16;

    pub fn model(src_vocab: usize, tgt_vocab: usize) -> TransformerConfig {
        let mut m = TransformerConfig::new(32, 2, 128, 2, src_vocab, tgt_vocab);
        m.max_len = MAX_LEN;
        m
    }

    pub fn experiment(variant: Variant, seed: u64) -> ExperimentConfig {
        let vocab = SYMBOLS + crate::data::RESERVED.len();
        let mut c = ExperimentConfig::new(variant, model(vocab, vocab));
        c.s = S;
        c.q_att = Q_ATT;
        c.q_bo = Q_BO;
        c.steps = STEPS;
        c.batch_size = BATCH_SIZE;
        c.seed = seed;
        c.resolved()
    }

    /// `(train, val)` corpora; the validation split uses a derived seed.
    pub fn corpora(kind: TaskKind, seed: u64) -> Result<(ParallelCorpus, ParallelCorpus)> {
        Ok((
            synthetic_task(kind, SYMBOLS, 1..=MAX_LEN, TRAIN_PAIRS, seed)?,
            synthetic_task(kind, SYMBOLS, 1..=MAX_LEN, VAL_PAIRS, seed ^ 0x5eed_0f_7a11)?,
        ))
    }
}

/// Result of [`train`].
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoints: CheckpointSet,
    pub train_bleu: MetricSeries,
    pub val_bleu: MetricSeries,
    pub state: TrainState,
}

/// Runs `cfg.steps` optimizer steps from a fresh model, then a final save point.
pub fn train(cfg: ExperimentConfig, train: &ParallelCorpus, val: &ParallelCorpus) -> Result<TrainOutcome> {
    let steps = cfg.steps;
    let mut t = Trainer::new(cfg)?;
    t.set_vocab(train.src_vocab.clone(), train.tgt_vocab.clone());
    t.run_until(steps, train, val)?;
    t.finish(train, val)?;
    Ok(TrainOutcome {
        checkpoints: t.checkpoints.clone(),
        train_bleu: t.state.bleu_series(Split::Train),
        val_bleu: t.state.bleu_series(Split::Val),
        state: t.state.clone(),
    })
}

#[cfg(test)]
mod tests;
