use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::homeostasis::HomeostasisConfig;

/// Divisor applied to attention scores.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionScale {
    /// `1 / √D_h`.
    #[default]
    SqrtHeadDim,
    /// `1 / D`.
    ModelDim,
}

/// Width presets of the small / base / big models.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelSize {
    Small,
    Base,
    Big,
}

impl ModelSize {
    /// `(d_model, heads, d_ff, n_blocks)`.
    pub fn dims(self) -> (usize, usize, usize, usize) {
        match self {
            ModelSize::Small => (256, 4, 1024, 6),
            ModelSize::Base => (512, 8, 2048, 6),
            ModelSize::Big => (1024, 16, 4096, 6),
        }
    }

    /// Reported parameter count of the reference models.
    pub fn reference_parameters(self) -> f64 {
        match self {
            ModelSize::Small => 23.1e6,
            ModelSize::Base => 68.3e6,
            ModelSize::Big => 224.6e6,
        }
    }
}

impl std::str::FromStr for ModelSize {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "small" => Ok(Self::Small),
            "base" => Ok(Self::Base),
            "big" => Ok(Self::Big),
            _ => Err(Error::Config(format!("unknown model size {s:?}"))),
        }
    }
}

/// Word-level vocabulary sizes of an English→German Multi30k setup; with
/// untied source/target embeddings and output layer they reproduce the reported
/// parameter counts of all three presets.
pub const MULTI30K_SRC_VOCAB: usize = 10_000;
pub const MULTI30K_TGT_VOCAB: usize = 18_550;

pub const DEFAULT_DROPOUT: f64 = 0.1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TransformerConfig {
    pub d_model: usize,
    pub heads: usize,
    pub d_ff: usize,
    pub n_blocks: usize,
    /// Residual dropout on embeddings and sublayer outputs.
    pub dropout_rate: f64,
    pub attn_insert: HomeostasisConfig,
    pub block_out_insert: HomeostasisConfig,
    /// Also apply `attn_insert` to decoder cross-attention.
    #[serde(default = "default_true")]
    pub insert_cross_attention: bool,
    pub src_vocab: usize,
    pub tgt_vocab: usize,
    pub max_len: usize,
    #[serde(default)]
    pub attention_scale: AttentionScale,
}

fn default_true() -> bool {
    true
}

impl TransformerConfig {
    pub fn new(
        d_model: usize,
        heads: usize,
        d_ff: usize,
        n_blocks: usize,
        src_vocab: usize,
        tgt_vocab: usize,
    ) -> Self {
        Self {
            d_model,
            heads,
            d_ff,
            n_blocks,
            dropout_rate: 0.0,
            attn_insert: HomeostasisConfig::none(),
            block_out_insert: HomeostasisConfig::none(),
            insert_cross_attention: true,
            src_vocab,
            tgt_vocab,
            max_len: 256,
            attention_scale: AttentionScale::SqrtHeadDim,
        }
    }

    pub fn preset(size: ModelSize, src_vocab: usize, tgt_vocab: usize) -> Self {
        let (d, h, ff, n) = size.dims();
        Self {
            dropout_rate: DEFAULT_DROPOUT,
            ..Self::new(d, h, ff, n, src_vocab, tgt_vocab)
        }
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.heads.max(1)
    }

    pub fn score_scale(&self) -> f64 {
        match self.attention_scale {
            AttentionScale::SqrtHeadDim => 1.0 / (self.head_dim() as f64).sqrt(),
            AttentionScale::ModelDim => 1.0 / self.d_model as f64,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(Error::Config(m));
        if self.d_model == 0 || self.heads == 0 || self.d_model % self.heads != 0 {
            return err(format!(
                "d_model ({}) must be a positive multiple of heads ({})",
                self.d_model, self.heads
            ));
        }
        if self.d_model % 2 != 0 {
            return err(format!("d_model must be even, got {}", self.d_model));
        }
        if self.n_blocks == 0 {
            return err("n_blocks must be at least 1".into());
        }
        if self.d_ff == 0 || self.max_len == 0 {
            return err("d_ff and max_len must be positive".into());
        }
        if self.src_vocab <= crate::data::UNK as usize || self.tgt_vocab <= crate::data::UNK as usize {
            return err("vocabularies must extend past the reserved ids".into());
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return err(format!("dropout_rate must lie in [0, 1), got {}", self.dropout_rate));
        }
        self.attn_insert.validate()?;
        self.block_out_insert.validate()?;
        Ok(())
    }

    /// Closed-form parameter count of the model this config builds.
    pub fn parameter_count(&self) -> usize {
        let (d, ff, n) = (self.d_model, self.d_ff, self.n_blocks);
        let attn = 4 * d * d + 4 * d;
        let ffn = 2 * d * ff + ff + d;
        let norm = 2 * d;
        let encoder = n * (attn + ffn + 2 * norm);
        let decoder = n * (2 * attn + ffn + 3 * norm);
        let embeddings = (self.src_vocab + self.tgt_vocab) * d;
        let generator = d * self.tgt_vocab + self.tgt_vocab;
        encoder + decoder + embeddings + generator
    }
}
