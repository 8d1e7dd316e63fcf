//! FIFO window of per-step activation counts.
//!
//! Each training step contributes one frame of `heads × features` counts (how
//! often each feature survived the mask across batch and sequence positions).
//! The cache keeps the last `capacity` frames and exposes their elementwise sum.

use crate::error::{invalid, Error, Result};
use crate::tensor::Tensor;

/// Per-head, per-feature nonnegative counts laid out as `heads × features`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HeadCounts {
    heads: usize,
    features: usize,
    values: Vec<u64>,
}

/// Sum of the retained frames of a [`StatsCache`].
pub type AggregatedStats = HeadCounts;

impl HeadCounts {
    pub fn new(heads: usize, features: usize, values: Vec<u64>) -> Result<Self> {
        if heads * features != values.len() {
            return Err(invalid(format!(
                "expected {heads}×{features} counts, got {}",
                values.len()
            )));
        }
        Ok(Self {
            heads,
            features,
            values,
        })
    }

    pub fn zeros(heads: usize, features: usize) -> Self {
        Self {
            heads,
            features,
            values: vec![0; heads * features],
        }
    }

    pub fn heads(&self) -> usize {
        self.heads
    }

    pub fn features(&self) -> usize {
        self.features
    }

    pub fn values(&self) -> &[u64] {
        &self.values
    }

    pub fn head(&self, h: usize) -> &[u64] {
        &self.values[h * self.features..(h + 1) * self.features]
    }

    pub fn total(&self) -> u64 {
        self.values.iter().sum()
    }
}

fn accumulate(bits: impl Iterator<Item = u8>, heads: usize, features: usize) -> HeadCounts {
    let width = heads * features;
    let mut values = vec![0u64; width];
    for (i, b) in bits.enumerate() {
        values[i % width] += b as u64;
    }
    HeadCounts {
        heads,
        features,
        values,
    }
}

/// Sums a binary mask over every axis except the trailing `(heads, features)` pair.
///
/// `mask` has shape `(B, L, H, F)` for attention or `(B, L, F)` with `heads = 1`
/// at a block output; only the last axis and the head count are used to split it.
pub fn reduce_mask(mask: &Tensor, heads: usize) -> Result<HeadCounts> {
    let features = mask.last_dim();
    if heads == 0 || features == 0 || mask.len() % (heads * features) != 0 {
        return Err(invalid(format!(
            "mask of shape {:?} cannot be split into {heads} heads",
            mask.shape()
        )));
    }
    if let Some(v) = mask.data().iter().find(|&&v| v != 0.0 && v != 1.0) {
        return Err(invalid(format!("mask must be binary, found {v}")));
    }
    Ok(accumulate(
        mask.data().iter().map(|&v| v as u8),
        heads,
        features,
    ))
}

/// Same reduction for masks already known to be binary.
pub(crate) fn reduce_bits(bits: &[u8], heads: usize, features: usize) -> HeadCounts {
    debug_assert_eq!(bits.len() % (heads * features), 0);
    accumulate(bits.iter().copied(), heads, features)
}

/// Ring buffer of the `capacity` most recent count frames.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StatsCache {
    heads: usize,
    capacity: usize,
    features: usize,
    frames: Vec<u64>,
    cursor: usize,
    fill: usize,
    totals: Vec<u64>,
}

impl StatsCache {
    pub fn new(heads: usize, capacity: usize, features: usize) -> Result<Self> {
        if heads == 0 || capacity == 0 || features == 0 {
            return Err(invalid(format!(
                "stats cache dimensions must be positive (heads {heads}, capacity {capacity}, features {features})"
            )));
        }
        Ok(Self {
            heads,
            capacity,
            features,
            frames: vec![0; heads * capacity * features],
            cursor: 0,
            fill: 0,
            totals: vec![0; heads * features],
        })
    }

    pub fn heads(&self) -> usize {
        self.heads
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn features(&self) -> usize {
        self.features
    }

    pub fn fill(&self) -> usize {
        self.fill
    }

    pub fn cursor(&self) -> usize {
        self.cursor
    }

    pub fn is_empty(&self) -> bool {
        self.fill == 0
    }

    fn frame_len(&self) -> usize {
        self.heads * self.features
    }

    pub fn push(&mut self, counts: &HeadCounts) -> Result<()> {
        if counts.heads != self.heads || counts.features != self.features {
            return Err(invalid(format!(
                "counts of shape ({}, {}) do not fit cache ({}, {})",
                counts.heads, counts.features, self.heads, self.features
            )));
        }
        let w = self.frame_len();
        let slot = &mut self.frames[self.cursor * w..(self.cursor + 1) * w];
        for ((total, old), &new) in self.totals.iter_mut().zip(slot.iter_mut()).zip(&counts.values) {
            // Slots beyond `fill` are still zero, so this is exact before wrap-around too.
            *total = *total - *old + new;
            *old = new;
        }
        self.cursor = (self.cursor + 1) % self.capacity;
        self.fill = (self.fill + 1).min(self.capacity);
        Ok(())
    }

    /// Elementwise sum of the retained frames; zeros for an empty cache.
    pub fn aggregate(&self) -> AggregatedStats {
        HeadCounts {
            heads: self.heads,
            features: self.features,
            values: self.totals.clone(),
        }
    }

    /// Retained frames, oldest first.
    pub fn frames(&self) -> Vec<HeadCounts> {
        let w = self.frame_len();
        let start = if self.fill < self.capacity { 0 } else { self.cursor };
        (0..self.fill)
            .map(|i| {
                let slot = (start + i) % self.capacity;
                HeadCounts {
                    heads: self.heads,
                    features: self.features,
                    values: self.frames[slot * w..(slot + 1) * w].to_vec(),
                }
            })
            .collect()
    }

    /// Serializes as a little-endian header `[heads, capacity, features, cursor, fill]`
    /// (u64 each) followed by all `capacity × heads × features` frame counts.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(8 * (5 + self.frames.len()));
        for v in [self.heads, self.capacity, self.features, self.cursor, self.fill] {
            out.extend_from_slice(&(v as u64).to_le_bytes());
        }
        for v in &self.frames {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Checkpoint(format!("stats cache: {m}"));
        if bytes.len() < 40 || bytes.len() % 8 != 0 {
            return Err(bad("truncated header"));
        }
        let words: Vec<u64> = bytes
            .chunks_exact(8)
            .map(|c| u64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let [heads, capacity, features, cursor, fill] =
            [0, 1, 2, 3, 4].map(|i| words[i] as usize);
        let mut cache = Self::new(heads, capacity, features).map_err(|e| bad(&e.to_string()))?;
        if words.len() != 5 + cache.frames.len() {
            return Err(bad("frame data length does not match header"));
        }
        if cursor >= capacity || fill > capacity || (fill < capacity && cursor != fill) {
            return Err(bad("inconsistent cursor/fill"));
        }
        cache.frames.copy_from_slice(&words[5..]);
        cache.cursor = cursor;
        cache.fill = fill;
        let w = cache.frame_len();
        for slot in cache.frames.chunks(w) {
            for (t, v) in cache.totals.iter_mut().zip(slot) {
                *t += v;
            }
        }
        Ok(cache)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::collections::VecDeque;

    fn frame(v: &[u64]) -> HeadCounts {
        HeadCounts::new(1, v.len(), v.to_vec()).unwrap()
    }

    fn random_frame(rng: &mut ChaCha8Rng, h: usize, f: usize) -> HeadCounts {
        HeadCounts::new(h, f, (0..h * f).map(|_| rng.gen_range(0..50)).collect()).unwrap()
    }

    fn list_sum(frames: &[HeadCounts]) -> Vec<u64> {
        let mut s = vec![0; frames.first().map_or(0, |f| f.values.len())];
        for fr in frames {
            for (a, b) in s.iter_mut().zip(&fr.values) {
                *a += b;
            }
        }
        s
    }

    #[test]
    fn reduce_all_ones() {
        let m = Tensor::filled(&[2, 2, 1, 2], 1.0);
        assert_eq!(reduce_mask(&m, 1).unwrap().values(), &[4, 4]);
    }

    #[test]
    fn reduce_all_zeros() {
        let m = Tensor::zeros(&[3, 2, 2, 5]);
        assert!(reduce_mask(&m, 2).unwrap().values().iter().all(|&v| v == 0));
    }

    #[test]
    fn reduce_matches_quadruple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (b, l, h, f) = (3, 5, 2, 4);
        let m = Tensor::from_fn(&[b, l, h, f], |_| rng.gen_range(0..2) as f64);
        let mut expect = vec![0u64; h * f];
        for bi in 0..b {
            for li in 0..l {
                for hi in 0..h {
                    for fi in 0..f {
                        expect[hi * f + fi] += m.get(&[bi, li, hi, fi]) as u64;
                    }
                }
            }
        }
        assert_eq!(reduce_mask(&m, h).unwrap().values(), expect.as_slice());
    }

    #[test]
    fn reduce_rejects_non_binary() {
        let m = Tensor::new(vec![1, 1, 1, 2], vec![1.0, 0.5]).unwrap();
        assert!(reduce_mask(&m, 1).is_err());
    }

    #[test]
    fn fifo_evicts_oldest() {
        let mut c = StatsCache::new(1, 2, 2).unwrap();
        c.push(&frame(&[1, 0])).unwrap();
        c.push(&frame(&[0, 2])).unwrap();
        c.push(&frame(&[3, 3])).unwrap();
        assert_eq!(c.frames(), vec![frame(&[0, 2]), frame(&[3, 3])]);
        assert_eq!(c.aggregate().values(), &[3, 5]);
        assert_eq!(c.fill(), 2);
    }

    #[test]
    fn single_push_and_empty_aggregate() {
        let mut c = StatsCache::new(1, 4, 3).unwrap();
        assert_eq!(c.aggregate().values(), &[0, 0, 0]);
        c.push(&frame(&[1, 2, 3])).unwrap();
        assert_eq!(c.fill(), 1);
        assert_eq!(c.aggregate().values(), &[1, 2, 3]);
    }

    #[test]
    fn two_frames_sum() {
        let mut c = StatsCache::new(1, 4, 2).unwrap();
        c.push(&frame(&[1, 2])).unwrap();
        c.push(&frame(&[3, 4])).unwrap();
        assert_eq!(c.aggregate().values(), &[4, 6]);
    }

    #[test]
    fn nineteen_pushes_into_sixteen_slots() {
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        let mut c = StatsCache::new(2, 16, 3).unwrap();
        let frames: Vec<_> = (0..19).map(|_| random_frame(&mut rng, 2, 3)).collect();
        for f in &frames {
            c.push(f).unwrap();
        }
        assert_eq!(c.aggregate().values(), list_sum(&frames[3..]).as_slice());
    }

    #[test]
    fn eight_frames_fill_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut c = StatsCache::new(3, 8, 4).unwrap();
        let frames: Vec<_> = (0..8).map(|_| random_frame(&mut rng, 3, 4)).collect();
        for f in &frames {
            c.push(f).unwrap();
        }
        assert_eq!(c.fill(), 8);
        assert_eq!(c.aggregate().values(), list_sum(&frames).as_slice());
    }

    #[test]
    fn push_rejects_wrong_shape() {
        let mut c = StatsCache::new(2, 4, 3).unwrap();
        assert!(c.push(&frame(&[1, 2, 3])).is_err());
    }

    #[test]
    fn byte_roundtrip_and_corruption() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut c = StatsCache::new(2, 5, 3).unwrap();
        for _ in 0..7 {
            c.push(&random_frame(&mut rng, 2, 3)).unwrap();
        }
        let bytes = c.to_bytes();
        assert_eq!(StatsCache::from_bytes(&bytes).unwrap(), c);
        assert!(StatsCache::from_bytes(&bytes[..bytes.len() - 8]).is_err());
    }

    proptest! {
        #[test]
        fn matches_list_reference(cap in 1usize..12, pushes in 0usize..40, seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut c = StatsCache::new(2, cap, 3).unwrap();
            let mut reference: VecDeque<HeadCounts> = VecDeque::new();
            for _ in 0..pushes {
                let f = random_frame(&mut rng, 2, 3);
                c.push(&f).unwrap();
                reference.push_back(f);
                if reference.len() > cap {
                    reference.pop_front();
                }
                let expect = if reference.is_empty() {
                    vec![0; 6]
                } else {
                    list_sum(reference.make_contiguous())
                };
                let agg = c.aggregate();
                prop_assert_eq!(agg.values(), expect.as_slice());
                prop_assert!(c.fill() <= cap);
            }
        }
    }
}
