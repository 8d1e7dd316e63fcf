//! Sequence-to-sequence transformer with homeostatic sparsity inserts.
//!
//! Two injection points per block accept a [`homeostasis::HomeostasisConfig`]:
//! the per-head attention output (before head concatenation) and the block
//! output after the final residual connection. Available mechanisms are plain
//! kWTA, RFB-kWTA (rare-feature boosted kWTA), Smart Inhibition (statistics-driven
//! Bernoulli masking) and inverted dropout.
//!
//! - [`sparsity`]: exact-k winner selection and its gradient contract
//! - [`stats_cache`]: FIFO window of per-step activation counts
//! - [`homeostasis`]: the insert layers
//! - [`model`]: encoder-decoder transformer and greedy decoding
//! - [`data`]: corpora, vocabularies, batching, synthetic tasks
//! - [`metrics`]: corpus BLEU and the IMI memorisation index
//! - [`train`]: Adam training loop, evaluation, checkpoints

pub mod autograd;
pub mod data;
pub mod error;
pub mod homeostasis;
pub mod metrics;
pub mod model;
pub mod sparsity;
pub mod stats_cache;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::Tensor;
