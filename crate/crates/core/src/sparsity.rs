//! k-winners-take-all selection over the last axis of a tensor.
//!
//! A slice of length `n` keeps its `k = round(s·n)` largest values (clamped to at
//! least one); everything else is zeroed. Selection is by signed value and ties
//! go to the lower index, so the result is identical to a stable descending sort.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::tensor::Tensor;

/// Kept fraction `s` of a kWTA layer, strictly inside (0, 1).
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
#[serde(try_from = "f64", into = "f64")]
pub struct SparsityCoefficient(f64);

impl SparsityCoefficient {
    pub fn new(s: f64) -> Result<Self> {
        if s.is_finite() && s > 0.0 && s < 1.0 {
            Ok(Self(s))
        } else {
            Err(invalid(format!("sparsity coefficient must lie in (0, 1), got {s}")))
        }
    }

    pub fn value(self) -> f64 {
        self.0
    }

    /// Number of winners for a slice of length `n`: `round(s·n)` half away from
    /// zero, clamped to `1..=n`.
    pub fn winners(self, n: usize) -> usize {
        let k = (self.0 * n as f64).round() as usize;
        k.clamp(1, n.max(1))
    }
}

impl TryFrom<f64> for SparsityCoefficient {
    type Error = crate::Error;

    fn try_from(s: f64) -> Result<Self> {
        Self::new(s)
    }
}

impl From<SparsityCoefficient> for f64 {
    fn from(s: SparsityCoefficient) -> f64 {
        s.0
    }
}

/// Binary keep-mask with the shape of the tensor it was computed from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SparsityMask {
    shape: Vec<usize>,
    bits: Vec<u8>,
}

impl SparsityMask {
    pub fn new(shape: Vec<usize>, bits: Vec<u8>) -> Result<Self> {
        if shape.iter().product::<usize>() != bits.len() {
            return Err(invalid("mask shape does not match bit count"));
        }
        if bits.iter().any(|&b| b > 1) {
            return Err(invalid("mask bits must be 0 or 1"));
        }
        Ok(Self { shape, bits })
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self {
            shape: shape.to_vec(),
            bits: vec![1; shape.iter().product()],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn bits(&self) -> &[u8] {
        &self.bits
    }

    pub fn count_ones(&self) -> usize {
        self.bits.iter().map(|&b| b as usize).sum()
    }

    /// Popcount of every last-axis slice.
    pub fn ones_per_slice(&self) -> Vec<usize> {
        let n = self.shape.last().copied().unwrap_or(1).max(1);
        self.bits
            .chunks(n)
            .map(|c| c.iter().map(|&b| b as usize).sum())
            .collect()
    }

    /// The mask as `0.0 / 1.0` multipliers.
    pub fn to_f64(&self) -> Vec<f64> {
        self.bits.iter().map(|&b| b as f64).collect()
    }

    pub fn into_bits(self) -> Vec<u8> {
        self.bits
    }
}

/// Strict total order used for winner selection: larger value first, then lower index.
#[inline]
fn winner_order(x: &[f64], a: usize, b: usize) -> Ordering {
    x[b].partial_cmp(&x[a]).unwrap_or(Ordering::Equal).then(a.cmp(&b))
}

/// Writes the kWTA mask of `x` into `out`, reusing `scratch` for the index buffer.
pub(crate) fn select_winners(x: &[f64], k: usize, out: &mut [u8], scratch: &mut Vec<usize>) {
    let n = x.len();
    out.fill(0);
    if k >= n {
        out.fill(1);
        return;
    }
    scratch.clear();
    scratch.extend(0..n);
    // (value desc, index asc) is a strict total order, so partial selection picks
    // exactly the set a full stable sort would.
    scratch.select_nth_unstable_by(k - 1, |&a, &b| winner_order(x, a, b));
    for &i in &scratch[..k] {
        out[i] = 1;
    }
}

fn check_finite(x: &[f64]) -> Result<()> {
    match x.iter().position(|v| !v.is_finite()) {
        Some(i) => Err(invalid(format!("non-finite value at index {i}"))),
        None => Ok(()),
    }
}

/// kWTA mask of a single vector.
pub fn kwta_mask(x: &[f64], s: SparsityCoefficient) -> Result<SparsityMask> {
    if x.is_empty() {
        return Err(invalid("kWTA needs a non-empty vector"));
    }
    check_finite(x)?;
    let mut bits = vec![0u8; x.len()];
    select_winners(x, s.winners(x.len()), &mut bits, &mut Vec::new());
    Ok(SparsityMask {
        shape: vec![x.len()],
        bits,
    })
}

/// kWTA mask of every last-axis slice of `scores`.
pub fn kwta_mask_tensor(scores: &Tensor, s: SparsityCoefficient) -> Result<SparsityMask> {
    if scores.rank() == 0 || scores.last_dim() == 0 {
        return Err(invalid("kWTA needs a tensor with a non-empty last axis"));
    }
    check_finite(scores.data())?;
    let n = scores.last_dim();
    let k = s.winners(n);
    let mut bits = vec![0u8; scores.len()];
    let mut scratch = Vec::with_capacity(n);
    for (x, out) in scores.data().chunks(n).zip(bits.chunks_mut(n)) {
        select_winners(x, k, out, &mut scratch);
    }
    Ok(SparsityMask {
        shape: scores.shape().to_vec(),
        bits,
    })
}

/// Applies kWTA to every last-axis slice of `x`, returning `x ⊙ mask` and the mask.
pub fn kwta_apply(x: &Tensor, s: SparsityCoefficient) -> Result<(Tensor, SparsityMask)> {
    let mask = kwta_mask_tensor(x, s)?;
    let out = apply_mask(x, &mask)?;
    Ok((out, mask))
}

/// `x ⊙ mask`.
pub fn apply_mask(x: &Tensor, mask: &SparsityMask) -> Result<Tensor> {
    if x.shape() != mask.shape() {
        return Err(invalid(format!(
            "mask shape {:?} does not match tensor shape {:?}",
            mask.shape(),
            x.shape()
        )));
    }
    let data = x
        .data()
        .iter()
        .zip(mask.bits())
        .map(|(&v, &b)| if b == 1 { v } else { 0.0 })
        .collect();
    Tensor::new(x.shape().to_vec(), data)
}

/// Backward pass of `x ⊙ m` with the mask frozen: `upstream ⊙ mask`.
pub fn kwta_gradient(upstream: &Tensor, mask: &SparsityMask) -> Result<Tensor> {
    apply_mask(upstream, mask)
}
