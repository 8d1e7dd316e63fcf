//! Positional encoding and a standalone scaled dot-product attention.

use crate::autograd::{attention_forward, AttentionSpec};
use crate::error::{invalid, Result};
use crate::tensor::Tensor;

/// Sinusoidal table `PE[p, 2i] = sin(p / 10000^(2i/D))`, `PE[p, 2i+1] = cos(…)`.
pub fn positional_encoding(len: usize, d: usize) -> Result<Tensor> {
    if len == 0 || d == 0 || d % 2 != 0 {
        return Err(invalid(format!(
            "positional encoding needs positive length and even width, got ({len}, {d})"
        )));
    }
    let mut pe = Tensor::zeros(&[len, d]);
    for p in 0..len {
        for i in 0..d / 2 {
            let angle = p as f64 / 10000f64.powf(2.0 * i as f64 / d as f64);
            pe.set(&[p, 2 * i], angle.sin());
            pe.set(&[p, 2 * i + 1], angle.cos());
        }
    }
    Ok(pe)
}

/// Builds the `allowed` table for [`AttentionSpec`] from key padding and causality.
pub fn attention_mask(
    batch: usize,
    q_len: usize,
    k_len: usize,
    key_valid: Option<&[bool]>,
    causal: bool,
) -> Vec<bool> {
    let mut allowed = vec![true; batch * q_len * k_len];
    for b in 0..batch {
        for i in 0..q_len {
            for j in 0..k_len {
                let valid = key_valid.map_or(true, |m| m[b * k_len + j]);
                allowed[(b * q_len + i) * k_len + j] = valid && (!causal || j <= i);
            }
        }
    }
    allowed
}

/// `(B, H, L, D_h)` → `(B, L, H, D_h)`.
fn heads_to_rows(t: &Tensor) -> Vec<f64> {
    let [b, h, l, d] = [t.shape()[0], t.shape()[1], t.shape()[2], t.shape()[3]];
    let mut out = vec![0.0; t.len()];
    for bi in 0..b {
        for hi in 0..h {
            for li in 0..l {
                let src = ((bi * h + hi) * l + li) * d;
                let dst = ((bi * l + li) * h + hi) * d;
                out[dst..dst + d].copy_from_slice(&t.data()[src..src + d]);
            }
        }
    }
    out
}

/// Softmax(QKᵀ/√D_h)·V for head-major inputs `(B, H, L, D_h)`.
///
/// `key_valid` is an optional `(B, L_k)` padding mask. The result is laid out
/// as `(B, L_q, H, D_h)`, the tensor the attention insert operates on.
pub fn scaled_attention(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    causal: bool,
    key_valid: Option<&[bool]>,
) -> Result<Tensor> {
    if q.rank() != 4 || k.rank() != 4 || v.rank() != 4 {
        return Err(invalid("attention inputs must be (B, H, L, D_h)"));
    }
    let [b, h, lq, d] = [q.shape()[0], q.shape()[1], q.shape()[2], q.shape()[3]];
    let lk = k.shape()[2];
    if k.shape() != v.shape() || k.shape()[0] != b || k.shape()[1] != h || k.shape()[3] != d {
        return Err(invalid(format!(
            "inconsistent attention shapes {:?} {:?} {:?}",
            q.shape(),
            k.shape(),
            v.shape()
        )));
    }
    if key_valid.is_some_and(|m| m.len() != b * lk) {
        return Err(invalid("key padding mask must be (B, L_k)"));
    }
    let spec = AttentionSpec {
        batch: b,
        heads: h,
        head_dim: d,
        q_len: lq,
        k_len: lk,
        scale: 1.0 / (d as f64).sqrt(),
        allowed: attention_mask(b, lq, lk, key_valid, causal),
    };
    let (out, _) = attention_forward(&heads_to_rows(q), &heads_to_rows(k), &heads_to_rows(v), &spec)?;
    Tensor::new(vec![b, lq, h, d], out)
}
