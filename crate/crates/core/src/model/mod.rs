//! Post-norm encoder-decoder transformer with two insert points per block.

mod attention;
mod config;

pub use attention::{attention_mask, positional_encoding, scaled_attention};
pub use config::{
    AttentionScale, ModelSize, TransformerConfig, DEFAULT_DROPOUT, MULTI30K_SRC_VOCAB,
    MULTI30K_TGT_VOCAB,
};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autograd::{AttentionSpec, Graph, ParamId, ParamStore, Var};
use crate::data::{Batch, BOS, EOS, PAD};
use crate::error::{invalid, Error, Result};
use crate::homeostasis::{dropout_multipliers, HomeostasisConfig, InsertLayer};
use crate::stats_cache::StatsCache;
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
struct AttentionWeights {
    wq: ParamId,
    bq: ParamId,
    wk: ParamId,
    bk: ParamId,
    wv: ParamId,
    bv: ParamId,
    wo: ParamId,
    bo: ParamId,
}

#[derive(Debug, Clone)]
struct FeedForwardWeights {
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

#[derive(Debug, Clone)]
struct NormWeights {
    gain: ParamId,
    bias: ParamId,
}

#[derive(Debug, Clone)]
struct EncoderBlock {
    self_attn: AttentionWeights,
    norm1: NormWeights,
    ffn: FeedForwardWeights,
    norm2: NormWeights,
}

#[derive(Debug, Clone)]
struct DecoderBlock {
    self_attn: AttentionWeights,
    norm1: NormWeights,
    cross_attn: AttentionWeights,
    norm2: NormWeights,
    ffn: FeedForwardWeights,
    norm3: NormWeights,
}

#[derive(Debug, Clone)]
struct Weights {
    src_embed: ParamId,
    tgt_embed: ParamId,
    encoder: Vec<EncoderBlock>,
    decoder: Vec<DecoderBlock>,
    gen_w: ParamId,
    gen_b: ParamId,
}

/// Insert layers, one per attention instance and one per block output.
#[derive(Debug, Clone, PartialEq)]
struct Inserts {
    enc_self: Vec<InsertLayer>,
    enc_out: Vec<InsertLayer>,
    dec_self: Vec<InsertLayer>,
    dec_cross: Vec<InsertLayer>,
    dec_out: Vec<InsertLayer>,
}

impl Inserts {
    fn named(&self) -> Vec<(String, &InsertLayer)> {
        let groups = [
            ("encoder.self_attn", &self.enc_self),
            ("encoder.block_out", &self.enc_out),
            ("decoder.self_attn", &self.dec_self),
            ("decoder.cross_attn", &self.dec_cross),
            ("decoder.block_out", &self.dec_out),
        ];
        groups
            .into_iter()
            .flat_map(|(name, layers)| {
                layers
                    .iter()
                    .enumerate()
                    .map(move |(i, l)| (format!("{name}.{i}"), l))
            })
            .collect()
    }

    fn named_mut(&mut self) -> Vec<(String, &mut InsertLayer)> {
        let groups = [
            ("encoder.self_attn", &mut self.enc_self),
            ("encoder.block_out", &mut self.enc_out),
            ("decoder.self_attn", &mut self.dec_self),
            ("decoder.cross_attn", &mut self.dec_cross),
            ("decoder.block_out", &mut self.dec_out),
        ];
        groups
            .into_iter()
            .flat_map(|(name, layers)| {
                layers
                    .iter_mut()
                    .enumerate()
                    .map(move |(i, l)| (format!("{name}.{i}"), l))
            })
            .collect()
    }
}

/// Mode and randomness of one forward pass.
pub struct ForwardCtx<'r> {
    pub training: bool,
    pub rng: &'r mut ChaCha8Rng,
}

/// Token ids plus validity masks for one padded batch.
#[derive(Debug, Clone, Copy)]
pub struct SeqBatch<'a> {
    pub batch: usize,
    pub src_len: usize,
    pub tgt_len: usize,
    pub src: &'a [u32],
    pub src_valid: &'a [bool],
    pub tgt_in: &'a [u32],
    pub tgt_valid: &'a [bool],
}

/// Read-only pieces the forward functions need alongside the mutable inserts.
struct Parts<'a> {
    cfg: &'a TransformerConfig,
    w: &'a Weights,
    pe: &'a Tensor,
}

pub struct Seq2Seq {
    config: TransformerConfig,
    params: ParamStore,
    weights: Weights,
    inserts: Inserts,
    pe: Tensor,
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], bound: f64) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(-bound..bound))
}

fn add_linear(
    params: &mut ParamStore,
    rng: &mut ChaCha8Rng,
    name: &str,
    fan_in: usize,
    fan_out: usize,
) -> (ParamId, ParamId) {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let w = params.add(format!("{name}.weight"), uniform(rng, &[fan_in, fan_out], bound));
    let b = params.add(format!("{name}.bias"), uniform(rng, &[fan_out], bound));
    (w, b)
}

fn add_attention(params: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, d: usize) -> AttentionWeights {
    let (wq, bq) = add_linear(params, rng, &format!("{name}.q"), d, d);
    let (wk, bk) = add_linear(params, rng, &format!("{name}.k"), d, d);
    let (wv, bv) = add_linear(params, rng, &format!("{name}.v"), d, d);
    let (wo, bo) = add_linear(params, rng, &format!("{name}.out"), d, d);
    AttentionWeights {
        wq,
        bq,
        wk,
        bk,
        wv,
        bv,
        wo,
        bo,
    }
}

fn add_ffn(params: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, d: usize, ff: usize) -> FeedForwardWeights {
    let (w1, b1) = add_linear(params, rng, &format!("{name}.1"), d, ff);
    let (w2, b2) = add_linear(params, rng, &format!("{name}.2"), ff, d);
    FeedForwardWeights { w1, b1, w2, b2 }
}

fn new_norm(params: &mut ParamStore, name: &str, d: usize) -> NormWeights {
    NormWeights {
        gain: params.add(format!("{name}.gain"), Tensor::filled(&[d], 1.0)),
        bias: params.add(format!("{name}.bias"), Tensor::zeros(&[d])),
    }
}

impl Seq2Seq {
    /// Builds a model with weights drawn from `seed`.
    pub fn new(config: TransformerConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (d, ff) = (config.d_model, config.d_ff);
        let mut params = ParamStore::new();
        let emb_bound = 1.0 / (d as f64).sqrt();
        let src_embed = params.add("src_embed", uniform(&mut rng, &[config.src_vocab, d], emb_bound));
        let tgt_embed = params.add("tgt_embed", uniform(&mut rng, &[config.tgt_vocab, d], emb_bound));
        let encoder = (0..config.n_blocks)
            .map(|i| {
                let p = format!("encoder.{i}");
                EncoderBlock {
                    self_attn: add_attention(&mut params, &mut rng, &format!("{p}.self_attn"), d),
                    norm1: new_norm(&mut params, &format!("{p}.norm1"), d),
                    ffn: add_ffn(&mut params, &mut rng, &format!("{p}.ffn"), d, ff),
                    norm2: new_norm(&mut params, &format!("{p}.norm2"), d),
                }
            })
            .collect();
        let decoder = (0..config.n_blocks)
            .map(|i| {
                let p = format!("decoder.{i}");
                DecoderBlock {
                    self_attn: add_attention(&mut params, &mut rng, &format!("{p}.self_attn"), d),
                    norm1: new_norm(&mut params, &format!("{p}.norm1"), d),
                    cross_attn: add_attention(&mut params, &mut rng, &format!("{p}.cross_attn"), d),
                    norm2: new_norm(&mut params, &format!("{p}.norm2"), d),
                    ffn: add_ffn(&mut params, &mut rng, &format!("{p}.ffn"), d, ff),
                    norm3: new_norm(&mut params, &format!("{p}.norm3"), d),
                }
            })
            .collect();
        let (gen_w, gen_b) = add_linear(&mut params, &mut rng, "generator", d, config.tgt_vocab);
        let weights = Weights {
            src_embed,
            tgt_embed,
            encoder,
            decoder,
            gen_w,
            gen_b,
        };
        let inserts = Self::build_inserts(&config)?;
        let pe = positional_encoding(config.max_len + 1, d)?;
        Ok(Self {
            config,
            params,
            weights,
            inserts,
            pe,
        })
    }

    fn build_inserts(cfg: &TransformerConfig) -> Result<Inserts> {
        let (h, dh, d, n) = (cfg.heads, cfg.head_dim(), cfg.d_model, cfg.n_blocks);
        let attn = || InsertLayer::new(cfg.attn_insert, h, dh);
        let out = || InsertLayer::new(cfg.block_out_insert, 1, d);
        let cross_cfg = if cfg.insert_cross_attention {
            cfg.attn_insert
        } else {
            HomeostasisConfig::none()
        };
        Ok(Inserts {
            enc_self: (0..n).map(|_| attn()).collect::<Result<_>>()?,
            enc_out: (0..n).map(|_| out()).collect::<Result<_>>()?,
            dec_self: (0..n).map(|_| attn()).collect::<Result<_>>()?,
            dec_cross: (0..n)
                .map(|_| InsertLayer::new(cross_cfg, h, dh))
                .collect::<Result<_>>()?,
            dec_out: (0..n).map(|_| out()).collect::<Result<_>>()?,
        })
    }

    pub fn config(&self) -> &TransformerConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn num_parameters(&self) -> usize {
        self.params.num_scalars()
    }

    /// Statistics caches keyed by insert-point name (`decoder.self_attn.0`, …).
    pub fn caches(&self) -> Vec<(String, &StatsCache)> {
        self.inserts
            .named()
            .into_iter()
            .filter_map(|(n, l)| l.cache().map(|c| (n, c)))
            .collect()
    }

    pub fn set_cache(&mut self, name: &str, cache: StatsCache) -> Result<()> {
        let mut layers = self.inserts.named_mut();
        let layer = layers
            .iter_mut()
            .find(|(n, _)| n == name)
            .ok_or_else(|| Error::Checkpoint(format!("no insert point named {name}")))?;
        layer.1.set_cache(cache)
    }

    /// Runs the full model and returns the graph plus `(B·L_tgt, vocab)` logits.
    pub fn forward<'a>(&'a mut self, batch: SeqBatch<'_>, ctx: &mut ForwardCtx<'_>) -> Result<(Graph<'a>, Var)> {
        check_batch(&self.config, &batch)?;
        let parts = Parts {
            cfg: &self.config,
            w: &self.weights,
            pe: &self.pe,
        };
        let mut g = Graph::new(&self.params);
        let memory = encode(&mut g, &parts, &mut self.inserts, &batch, ctx)?;
        let dec = decode(&mut g, &parts, &mut self.inserts, memory, &batch, ctx)?;
        let logits = generator(&mut g, &parts, dec)?;
        Ok((g, logits))
    }

    /// Teacher-forced mean cross-entropy over non-pad targets.
    pub fn loss<'a>(&'a mut self, batch: &Batch, ctx: &mut ForwardCtx<'_>) -> Result<(Graph<'a>, Var)> {
        let (g, loss, _) = self.loss_and_logits(batch, ctx)?;
        Ok((g, loss))
    }

    /// Like [`Seq2Seq::loss`], also returning the `(B·L_tgt, vocab)` logits.
    pub fn loss_and_logits<'a>(
        &'a mut self,
        batch: &Batch,
        ctx: &mut ForwardCtx<'_>,
    ) -> Result<(Graph<'a>, Var, Var)> {
        let src_valid = batch.src_mask();
        let tgt_valid = batch.tgt_in.iter().map(|&t| t != PAD).collect::<Vec<_>>();
        let sb = SeqBatch {
            batch: batch.size,
            src_len: batch.src_len,
            tgt_len: batch.tgt_len,
            src: &batch.src,
            src_valid: &src_valid,
            tgt_in: &batch.tgt_in,
            tgt_valid: &tgt_valid,
        };
        let (mut g, logits) = self.forward(sb, ctx)?;
        let targets = batch
            .tgt_out
            .iter()
            .map(|&t| (t != PAD).then_some(t as usize))
            .collect();
        let loss = g.cross_entropy(logits, targets)?;
        Ok((g, loss, logits))
    }

    /// Autoregressive argmax decoding in eval mode. Each output holds the
    /// generated tokens, ending with EOS when one was produced within `max_len`.
    pub fn greedy_decode(&mut self, sources: &[Vec<u32>], max_len: usize) -> Result<Vec<Vec<u32>>> {
        if sources.is_empty() || max_len == 0 {
            return Ok(vec![Vec::new(); sources.len()]);
        }
        if max_len > self.config.max_len {
            return Err(invalid(format!(
                "decode length {max_len} exceeds the model's max_len {}",
                self.config.max_len
            )));
        }
        let b = sources.len();
        let src_len = sources.iter().map(|s| s.len().min(self.config.max_len)).max().unwrap_or(1).max(1);
        let mut src = vec![PAD; b * src_len];
        let mut src_valid = vec![false; b * src_len];
        for (r, s) in sources.iter().enumerate() {
            let s = &s[..s.len().min(self.config.max_len)];
            if s.is_empty() {
                return Err(invalid(format!("source {r} is empty")));
            }
            src[r * src_len..r * src_len + s.len()].copy_from_slice(s);
            src_valid[r * src_len..r * src_len + s.len()].fill(true);
        }
        // Eval mode never draws from the generator; it only satisfies the context type.
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut ctx = ForwardCtx {
            training: false,
            rng: &mut rng,
        };
        let enc_batch = SeqBatch {
            batch: b,
            src_len,
            tgt_len: 1,
            src: &src,
            src_valid: &src_valid,
            tgt_in: &vec![BOS; b],
            tgt_valid: &vec![true; b],
        };
        check_batch(&self.config, &enc_batch)?;
        let parts = Parts {
            cfg: &self.config,
            w: &self.weights,
            pe: &self.pe,
        };
        let memory = {
            let mut g = Graph::new(&self.params);
            let m = encode(&mut g, &parts, &mut self.inserts, &enc_batch, &mut ctx)?;
            g.value(m).clone()
        };
        let vocab = self.config.tgt_vocab;
        let mut prefix: Vec<Vec<u32>> = vec![vec![BOS]; b];
        let mut done = vec![false; b];
        for step in 0..max_len {
            let len = step + 1;
            let tgt_in: Vec<u32> = prefix.iter().flat_map(|p| p.iter().copied()).collect();
            let tgt_valid = vec![true; b * len];
            let batch = SeqBatch {
                tgt_len: len,
                tgt_in: &tgt_in,
                tgt_valid: &tgt_valid,
                ..enc_batch
            };
            let mut g = Graph::new(&self.params);
            let mem = g.input(memory.clone());
            let dec = decode(&mut g, &parts, &mut self.inserts, mem, &batch, &mut ctx)?;
            let logits = generator(&mut g, &parts, dec)?;
            let lv = g.value(logits).data();
            for r in 0..b {
                let row = &lv[(r * len + len - 1) * vocab..(r * len + len) * vocab];
                let next = if done[r] {
                    PAD
                } else {
                    argmax(row) as u32
                };
                prefix[r].push(next);
                if next == EOS {
                    done[r] = true;
                }
            }
            if done.iter().all(|&d| d) {
                break;
            }
        }
        Ok(prefix
            .into_iter()
            .map(|p| p.into_iter().skip(1).filter(|&t| t != PAD).collect())
            .collect())
    }
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

fn check_batch(cfg: &TransformerConfig, b: &SeqBatch<'_>) -> Result<()> {
    if b.batch == 0 {
        return Err(invalid("empty batch"));
    }
    if b.src.len() != b.batch * b.src_len
        || b.src_valid.len() != b.src.len()
        || b.tgt_in.len() != b.batch * b.tgt_len
        || b.tgt_valid.len() != b.tgt_in.len()
    {
        return Err(invalid("batch buffers do not match the declared shape"));
    }
    if b.src_len > cfg.max_len + 1 || b.tgt_len > cfg.max_len + 1 {
        return Err(invalid(format!(
            "sequence length exceeds max_len {}",
            cfg.max_len
        )));
    }
    if let Some(&t) = b.src.iter().find(|&&t| t as usize >= cfg.src_vocab) {
        return Err(invalid(format!("source token id {t} out of range")));
    }
    if let Some(&t) = b.tgt_in.iter().find(|&&t| t as usize >= cfg.tgt_vocab) {
        return Err(invalid(format!("target token id {t} out of range")));
    }
    Ok(())
}

fn residual_dropout(g: &mut Graph, x: Var, rate: f64, ctx: &mut ForwardCtx<'_>) -> Result<Var> {
    if !ctx.training || rate == 0.0 {
        return Ok(x);
    }
    let m = dropout_multipliers(g.value(x).len(), rate, ctx.rng)?;
    g.mul_const(x, m)
}

fn apply_insert(
    g: &mut Graph,
    layer: &mut InsertLayer,
    x: Var,
    view: &[usize],
    ctx: &mut ForwardCtx<'_>,
) -> Result<Var> {
    if layer.config().mechanism == crate::homeostasis::Mechanism::None {
        return Ok(x);
    }
    let t = g.value(x).clone().reshape(view.to_vec())?;
    match layer.multipliers(&t, ctx.training, ctx.rng)? {
        Some(m) => g.mul_const(x, m),
        None => Ok(x),
    }
}

fn embed(
    g: &mut Graph,
    parts: &Parts<'_>,
    table: ParamId,
    ids: &[u32],
    batch: usize,
    len: usize,
    ctx: &mut ForwardCtx<'_>,
) -> Result<Var> {
    let d = parts.cfg.d_model;
    let t = g.param(table);
    let e = g.embedding(t, ids.iter().map(|&i| i as usize).collect(), (d as f64).sqrt())?;
    let pe = &parts.pe.data()[..len * d];
    let mut pos = Vec::with_capacity(batch * len * d);
    for _ in 0..batch {
        pos.extend_from_slice(pe);
    }
    let p = g.input(Tensor::new(vec![batch * len, d], pos)?);
    let x = g.add(e, p)?;
    residual_dropout(g, x, parts.cfg.dropout_rate, ctx)
}

#[allow(clippy::too_many_arguments)]
fn attention_block(
    g: &mut Graph,
    parts: &Parts<'_>,
    w: &AttentionWeights,
    insert: &mut InsertLayer,
    xq: Var,
    xkv: Var,
    batch: usize,
    q_len: usize,
    k_len: usize,
    allowed: Vec<bool>,
    ctx: &mut ForwardCtx<'_>,
) -> Result<Var> {
    let cfg = parts.cfg;
    let lin = |g: &mut Graph, x: Var, wi: ParamId, bi: ParamId| {
        let (wv, bv) = (g.param(wi), g.param(bi));
        g.linear(x, wv, Some(bv))
    };
    let q = lin(g, xq, w.wq, w.bq)?;
    let k = lin(g, xkv, w.wk, w.bk)?;
    let v = lin(g, xkv, w.wv, w.bv)?;
    let spec = AttentionSpec {
        batch,
        heads: cfg.heads,
        head_dim: cfg.head_dim(),
        q_len,
        k_len,
        scale: cfg.score_scale(),
        allowed,
    };
    let sa = g.attention(q, k, v, spec)?;
    let sa = apply_insert(g, insert, sa, &[batch, q_len, cfg.heads, cfg.head_dim()], ctx)?;
    lin(g, sa, w.wo, w.bo)
}

fn feed_forward(g: &mut Graph, w: &FeedForwardWeights, x: Var) -> Result<Var> {
    let (w1, b1, w2, b2) = (g.param(w.w1), g.param(w.b1), g.param(w.w2), g.param(w.b2));
    let h = g.linear(x, w1, Some(b1))?;
    let h = g.relu(h);
    g.linear(h, w2, Some(b2))
}

/// `norm(x + dropout(sub))`.
fn add_norm(
    g: &mut Graph,
    parts: &Parts<'_>,
    norm: &NormWeights,
    x: Var,
    sub: Var,
    ctx: &mut ForwardCtx<'_>,
) -> Result<Var> {
    let sub = residual_dropout(g, sub, parts.cfg.dropout_rate, ctx)?;
    let s = g.add(x, sub)?;
    let (gain, bias) = (g.param(norm.gain), g.param(norm.bias));
    g.layer_norm(s, gain, bias)
}

fn encode(
    g: &mut Graph,
    parts: &Parts<'_>,
    inserts: &mut Inserts,
    b: &SeqBatch<'_>,
    ctx: &mut ForwardCtx<'_>,
) -> Result<Var> {
    let (n, l, d) = (b.batch, b.src_len, parts.cfg.d_model);
    let mut x = embed(g, parts, parts.w.src_embed, b.src, n, l, ctx)?;
    for (i, blk) in parts.w.encoder.iter().enumerate() {
        let allowed = attention_mask(n, l, l, Some(b.src_valid), false);
        let a = attention_block(g, parts, &blk.self_attn, &mut inserts.enc_self[i], x, x, n, l, l, allowed, ctx)?;
        let x1 = add_norm(g, parts, &blk.norm1, x, a, ctx)?;
        let f = feed_forward(g, &blk.ffn, x1)?;
        let x2 = add_norm(g, parts, &blk.norm2, x1, f, ctx)?;
        x = apply_insert(g, &mut inserts.enc_out[i], x2, &[n, l, d], ctx)?;
    }
    Ok(x)
}

fn decode(
    g: &mut Graph,
    parts: &Parts<'_>,
    inserts: &mut Inserts,
    memory: Var,
    b: &SeqBatch<'_>,
    ctx: &mut ForwardCtx<'_>,
) -> Result<Var> {
    let (n, ls, lt, d) = (b.batch, b.src_len, b.tgt_len, parts.cfg.d_model);
    let mut x = embed(g, parts, parts.w.tgt_embed, b.tgt_in, n, lt, ctx)?;
    for (i, blk) in parts.w.decoder.iter().enumerate() {
        let causal = attention_mask(n, lt, lt, Some(b.tgt_valid), true);
        let a = attention_block(g, parts, &blk.self_attn, &mut inserts.dec_self[i], x, x, n, lt, lt, causal, ctx)?;
        let x1 = add_norm(g, parts, &blk.norm1, x, a, ctx)?;
        let cross = attention_mask(n, lt, ls, Some(b.src_valid), false);
        let c = attention_block(g, parts, &blk.cross_attn, &mut inserts.dec_cross[i], x1, memory, n, lt, ls, cross, ctx)?;
        let x2 = add_norm(g, parts, &blk.norm2, x1, c, ctx)?;
        let f = feed_forward(g, &blk.ffn, x2)?;
        let x3 = add_norm(g, parts, &blk.norm3, x2, f, ctx)?;
        x = apply_insert(g, &mut inserts.dec_out[i], x3, &[n, lt, d], ctx)?;
    }
    Ok(x)
}

fn generator(g: &mut Graph, parts: &Parts<'_>, x: Var) -> Result<Var> {
    let (w, b) = (g.param(parts.w.gen_w), g.param(parts.w.gen_b));
    g.linear(x, w, Some(b))
}
