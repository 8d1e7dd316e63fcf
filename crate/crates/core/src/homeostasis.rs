//! Homeostatic insert layers: plain kWTA, RFB-kWTA, Smart Inhibition and dropout.
//!
//! Every layer maps an activation tensor to `x ⊙ mask`. The stateful ones read
//! a [`StatsCache`] of past masks to decide the current mask and, in training
//! mode, push the new mask's counts once the output has been computed.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::sparsity::{select_winners, SparsityCoefficient, SparsityMask};
use crate::stats_cache::{reduce_bits, AggregatedStats, StatsCache};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mechanism {
    None,
    Kwta,
    RfbKwta,
    SmartInhibition,
    Dropout,
}

impl Mechanism {
    pub fn uses_cache(self) -> bool {
        matches!(self, Mechanism::RfbKwta | Mechanism::SmartInhibition)
    }
}

/// Which sorted sequence the RFB normaliser `v` is read from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BoostReference {
    /// k-th largest boost numerator `max − t̄ + min`.
    #[default]
    Numerator,
    /// k-th largest aggregated count `t̄`.
    Statistics,
}

/// Whether Smart Inhibition favours rarely or frequently active features.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InhibitionDirection {
    #[default]
    Rarity,
    Frequency,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HomeostasisConfig {
    pub mechanism: Mechanism,
    /// Kept fraction.
    pub s: f64,
    /// Stats cache capacity in steps.
    pub q: usize,
    /// Upper keep probability.
    pub a: f64,
    /// Lower keep probability; only enters through `a − b`.
    pub b: f64,
    pub gamma: f64,
    /// Median tolerance before recentering.
    pub delta: f64,
    pub dropout_p: f64,
    pub boost_reference: BoostReference,
    pub direction: InhibitionDirection,
}

impl Default for HomeostasisConfig {
    fn default() -> Self {
        Self {
            mechanism: Mechanism::None,
            s: 0.5,
            q: 256,
            a: 0.99,
            b: 0.01,
            gamma: 0.83,
            delta: 0.05,
            dropout_p: 0.1,
            boost_reference: BoostReference::Numerator,
            direction: InhibitionDirection::Rarity,
        }
    }
}

impl HomeostasisConfig {
    pub fn none() -> Self {
        Self::default()
    }

    pub fn with_mechanism(mechanism: Mechanism) -> Self {
        Self {
            mechanism,
            ..Self::default()
        }
    }

    pub fn kwta(s: f64) -> Self {
        Self {
            mechanism: Mechanism::Kwta,
            s,
            ..Self::default()
        }
    }

    pub fn rfb_kwta(s: f64, q: usize) -> Self {
        Self {
            mechanism: Mechanism::RfbKwta,
            s,
            q,
            ..Self::default()
        }
    }

    pub fn smart_inhibition(s: f64, q: usize) -> Self {
        Self {
            mechanism: Mechanism::SmartInhibition,
            s,
            q,
            ..Self::default()
        }
    }

    pub fn dropout(p: f64) -> Self {
        Self {
            mechanism: Mechanism::Dropout,
            dropout_p: p,
            ..Self::default()
        }
    }

    pub fn sparsity(&self) -> Result<SparsityCoefficient> {
        SparsityCoefficient::new(self.s)
    }

    pub fn validate(&self) -> Result<()> {
        let cfg = |m: String| Err(Error::Config(m));
        match self.mechanism {
            Mechanism::None => return Ok(()),
            Mechanism::Dropout => {
                if !(0.0..1.0).contains(&self.dropout_p) {
                    return cfg(format!("dropout_p must lie in [0, 1), got {}", self.dropout_p));
                }
                return Ok(());
            }
            _ => {}
        }
        if !(self.s > 0.0 && self.s < 1.0) {
            return cfg(format!("s must lie in (0, 1), got {}", self.s));
        }
        if self.mechanism.uses_cache() && self.q == 0 {
            return cfg("q must be at least 1".into());
        }
        if self.mechanism == Mechanism::SmartInhibition {
            if !(0.0 < self.b && self.b < self.a && self.a < 1.0) {
                return cfg(format!(
                    "need 0 < b < a < 1, got a = {}, b = {}",
                    self.a, self.b
                ));
            }
            if !(self.gamma > 0.0) {
                return cfg(format!("gamma must be positive, got {}", self.gamma));
            }
            if !(self.delta >= 0.0) {
                return cfg(format!("delta must be nonnegative, got {}", self.delta));
            }
        }
        Ok(())
    }
}

/// Per-head, per-feature multipliers used to steer RFB-kWTA winner selection.
#[derive(Debug, Clone, PartialEq)]
pub struct BoostFactors {
    pub heads: usize,
    pub features: usize,
    pub values: Vec<f64>,
    /// Heads whose normaliser was zero and fell back to unit factors.
    pub degenerate: Vec<bool>,
}

impl BoostFactors {
    pub fn head(&self, h: usize) -> &[f64] {
        &self.values[h * self.features..(h + 1) * self.features]
    }

    pub fn any_degenerate(&self) -> bool {
        self.degenerate.iter().any(|&d| d)
    }
}

fn kth_largest(values: &mut [f64], k: usize) -> f64 {
    let (_, v, _) = values.select_nth_unstable_by(k - 1, |a, b| b.total_cmp(a));
    *v
}

/// Rare-feature boost factors `(max t̄ − t̄ + min t̄) / v`, computed per head.
pub fn boost_factors(
    stats: &AggregatedStats,
    s: SparsityCoefficient,
    reference: BoostReference,
) -> Result<BoostFactors> {
    let f = stats.features();
    if f < 2 {
        return Err(invalid("boost factors need at least two features"));
    }
    let k = s.winners(f);
    let mut values = Vec::with_capacity(stats.values().len());
    let mut degenerate = Vec::with_capacity(stats.heads());
    let mut scratch = Vec::with_capacity(f);
    for h in 0..stats.heads() {
        let t = stats.head(h);
        let max = *t.iter().max().unwrap();
        let min = *t.iter().min().unwrap();
        if max == min {
            values.extend(std::iter::repeat(1.0).take(f));
            degenerate.push(false);
            continue;
        }
        let numer: Vec<f64> = t.iter().map(|&x| (max - x + min) as f64).collect();
        scratch.clear();
        match reference {
            BoostReference::Numerator => scratch.extend_from_slice(&numer),
            BoostReference::Statistics => scratch.extend(t.iter().map(|&x| x as f64)),
        }
        let v = kth_largest(&mut scratch, k);
        if v == 0.0 {
            values.extend(std::iter::repeat(1.0).take(f));
            degenerate.push(true);
        } else {
            values.extend(numer.iter().map(|n| n / v));
            degenerate.push(false);
        }
    }
    Ok(BoostFactors {
        heads: stats.heads(),
        features: f,
        values,
        degenerate,
    })
}

/// Keep probabilities `((a − b)·r)^γ` from min-max normalised rarity `r`, per head.
///
/// Heads whose statistics are all equal get a uniform keep probability of `s`.
pub fn inhibition_probs(stats: &AggregatedStats, cfg: &HomeostasisConfig) -> Vec<f64> {
    let f = stats.features();
    let mut p = Vec::with_capacity(stats.values().len());
    for h in 0..stats.heads() {
        let t = stats.head(h);
        let max = *t.iter().max().unwrap_or(&0);
        let min = *t.iter().min().unwrap_or(&0);
        if max == min {
            p.extend(std::iter::repeat(cfg.s).take(f));
            continue;
        }
        let span = (max - min) as f64;
        p.extend(t.iter().map(|&x| {
            let r = match cfg.direction {
                InhibitionDirection::Rarity => (max - x) as f64 / span,
                InhibitionDirection::Frequency => (x - min) as f64 / span,
            };
            ((cfg.a - cfg.b) * r).powf(cfg.gamma)
        }));
    }
    p
}

/// Median with even-length lists averaging the two central order statistics.
pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Shifts `p` so its median equals `s` whenever it drifts by more than `delta`,
/// clamping the result to valid probabilities.
pub fn median_adjust(p: &[f64], s: f64, delta: f64) -> Vec<f64> {
    if p.is_empty() {
        return Vec::new();
    }
    let m = median(p);
    if (m - s).abs() > delta {
        let shift = s - m;
        p.iter().map(|x| (x + shift).clamp(0.0, 1.0)).collect()
    } else {
        p.to_vec()
    }
}

fn check_layout(x: &Tensor, heads: usize, features: usize) -> Result<()> {
    let rank = x.rank();
    let heads_ok = heads == 1 || (rank >= 2 && x.shape()[rank - 2] == heads);
    if rank == 0 || x.last_dim() != features || !heads_ok {
        return Err(invalid(format!(
            "tensor of shape {:?} does not match statistics layout ({heads}, {features})",
            x.shape()
        )));
    }
    Ok(())
}

fn check_cache(x: &Tensor, cache: &StatsCache) -> Result<()> {
    check_layout(x, cache.heads(), cache.features())
}

/// Winner mask of RFB-kWTA: kWTA over `x` scaled by the boost factors.
pub fn rfb_kwta_mask(
    x: &Tensor,
    cache: &StatsCache,
    cfg: &HomeostasisConfig,
) -> Result<(SparsityMask, BoostFactors)> {
    check_cache(x, cache)?;
    let s = cfg.sparsity()?;
    let factors = boost_factors(&cache.aggregate(), s, cfg.boost_reference)?;
    let n = cache.features();
    let width = cache.heads() * n;
    let k = s.winners(n);
    let mut bits = vec![0u8; x.len()];
    let mut boosted = vec![0.0; n];
    let mut scratch = Vec::with_capacity(n);
    for (row, (xs, out)) in x.data().chunks(n).zip(bits.chunks_mut(n)).enumerate() {
        let h = (row * n % width) / n;
        for ((b, &v), &g) in boosted.iter_mut().zip(xs).zip(factors.head(h)) {
            *b = v * g;
        }
        if let Some(i) = boosted.iter().position(|v| !v.is_finite()) {
            return Err(invalid(format!("non-finite activation at feature {i}")));
        }
        select_winners(&boosted, k, out, &mut scratch);
    }
    Ok((SparsityMask::new(x.shape().to_vec(), bits)?, factors))
}

/// RFB-kWTA forward: winners chosen on boosted activations, original values kept.
pub fn rfb_kwta_forward(
    x: &Tensor,
    cache: &mut StatsCache,
    cfg: &HomeostasisConfig,
    training: bool,
) -> Result<Tensor> {
    let (mask, _) = rfb_kwta_mask(x, cache, cfg)?;
    let out = crate::sparsity::apply_mask(x, &mask)?;
    if training {
        cache.push(&reduce_bits(mask.bits(), cache.heads(), cache.features()))?;
    }
    Ok(out)
}

/// Keep probabilities for the next Smart Inhibition mask.
pub fn smart_inhibition_probs(cache: &StatsCache, cfg: &HomeostasisConfig) -> Vec<f64> {
    let p = inhibition_probs(&cache.aggregate(), cfg);
    p.chunks(cache.features())
        .flat_map(|head| median_adjust(head, cfg.s, cfg.delta))
        .collect()
}

/// Samples a Bernoulli mask with `probs` tiled over every leading axis of `shape`.
pub fn sample_tiled_mask<R: Rng + ?Sized>(
    shape: &[usize],
    probs: &[f64],
    rng: &mut R,
) -> SparsityMask {
    let n: usize = shape.iter().product();
    let w = probs.len();
    let bits = (0..n)
        .map(|i| (rng.gen::<f64>() < probs[i % w]) as u8)
        .collect();
    SparsityMask::new(shape.to_vec(), bits).expect("sampled bits are binary")
}

/// Smart Inhibition forward. Identity in eval mode.
pub fn smart_inhibition_forward<R: Rng + ?Sized>(
    x: &Tensor,
    cache: &mut StatsCache,
    cfg: &HomeostasisConfig,
    training: bool,
    rng: &mut R,
) -> Result<Tensor> {
    check_cache(x, cache)?;
    if !training {
        return Ok(x.clone());
    }
    let probs = smart_inhibition_probs(cache, cfg);
    let mask = sample_tiled_mask(x.shape(), &probs, rng);
    let out = crate::sparsity::apply_mask(x, &mask)?;
    cache.push(&reduce_bits(mask.bits(), cache.heads(), cache.features()))?;
    Ok(out)
}

/// Inverted-dropout multipliers: `0` with probability `p`, else `1 / (1 − p)`.
pub fn dropout_multipliers<R: Rng + ?Sized>(n: usize, p: f64, rng: &mut R) -> Result<Vec<f64>> {
    if !(0.0..1.0).contains(&p) {
        return Err(invalid(format!("dropout probability must lie in [0, 1), got {p}")));
    }
    let scale = 1.0 / (1.0 - p);
    Ok((0..n)
        .map(|_| if rng.gen::<f64>() >= p { scale } else { 0.0 })
        .collect())
}

/// Classical inverted dropout. Identity in eval mode.
pub fn dropout_forward<R: Rng + ?Sized>(
    x: &Tensor,
    p: f64,
    training: bool,
    rng: &mut R,
) -> Result<Tensor> {
    if !(0.0..1.0).contains(&p) {
        return Err(invalid(format!("dropout probability must lie in [0, 1), got {p}")));
    }
    if !training || p == 0.0 {
        return Ok(x.clone());
    }
    let m = dropout_multipliers(x.len(), p, rng)?;
    Tensor::new(
        x.shape().to_vec(),
        x.data().iter().zip(&m).map(|(a, b)| a * b).collect(),
    )
}

/// A configured insert point: the mechanism plus the statistics it owns.
#[derive(Debug, Clone, PartialEq)]
pub struct InsertLayer {
    cfg: HomeostasisConfig,
    heads: usize,
    features: usize,
    cache: Option<StatsCache>,
}

impl InsertLayer {
    pub fn new(cfg: HomeostasisConfig, heads: usize, features: usize) -> Result<Self> {
        cfg.validate()?;
        let cache = if cfg.mechanism.uses_cache() {
            Some(StatsCache::new(heads, cfg.q, features)?)
        } else {
            None
        };
        if cfg.mechanism == Mechanism::RfbKwta && features < 2 {
            return Err(Error::Config("RFB-kWTA needs at least two features".into()));
        }
        Ok(Self {
            cfg,
            heads,
            features,
            cache,
        })
    }

    pub fn config(&self) -> &HomeostasisConfig {
        &self.cfg
    }

    pub fn cache(&self) -> Option<&StatsCache> {
        self.cache.as_ref()
    }

    pub fn set_cache(&mut self, cache: StatsCache) -> Result<()> {
        if !self.cfg.mechanism.uses_cache() {
            return Err(Error::Checkpoint("insert layer has no statistics cache".into()));
        }
        if (cache.heads(), cache.capacity(), cache.features())
            != (self.heads, self.cfg.q, self.features)
        {
            return Err(Error::Checkpoint(format!(
                "cache shape ({}, {}, {}) does not match layer ({}, {}, {})",
                cache.heads(),
                cache.capacity(),
                cache.features(),
                self.heads,
                self.cfg.q,
                self.features
            )));
        }
        self.cache = Some(cache);
        Ok(())
    }

    /// Multipliers to apply to `x`, or `None` for identity. Pushes this step's
    /// counts into the cache in training mode.
    pub fn multipliers<R: Rng + ?Sized>(
        &mut self,
        x: &Tensor,
        training: bool,
        rng: &mut R,
    ) -> Result<Option<Vec<f64>>> {
        match self.cfg.mechanism {
            Mechanism::None => Ok(None),
            Mechanism::Kwta => {
                check_layout(x, self.heads, self.features)?;
                let mask = crate::sparsity::kwta_mask_tensor(x, self.cfg.sparsity()?)?;
                Ok(Some(mask.to_f64()))
            }
            Mechanism::RfbKwta => {
                let cache = self.cache.as_mut().expect("rfb layer owns a cache");
                let (mask, _) = rfb_kwta_mask(x, cache, &self.cfg)?;
                if training {
                    cache.push(&reduce_bits(mask.bits(), self.heads, self.features))?;
                }
                Ok(Some(mask.to_f64()))
            }
            Mechanism::SmartInhibition => {
                check_layout(x, self.heads, self.features)?;
                if !training {
                    return Ok(None);
                }
                let cache = self.cache.as_mut().expect("smart inhibition owns a cache");
                let probs = smart_inhibition_probs(cache, &self.cfg);
                let mask = sample_tiled_mask(x.shape(), &probs, rng);
                cache.push(&reduce_bits(mask.bits(), self.heads, self.features))?;
                Ok(Some(mask.to_f64()))
            }
            Mechanism::Dropout => {
                if !training || self.cfg.dropout_p == 0.0 {
                    return Ok(None);
                }
                Ok(Some(dropout_multipliers(x.len(), self.cfg.dropout_p, rng)?))
            }
        }
    }
}
