//! Corpus BLEU-4 and the IMI memorisation-speed index.

use std::collections::HashMap;
use std::hash::Hash;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

pub const MAX_ORDER: usize = 4;

/// Corpus-level n-gram statistics behind a BLEU score.
#[derive(Debug, Clone, PartialEq)]
pub struct BleuStats {
    /// Clipped matches per order 1..=4.
    pub matches: [u64; MAX_ORDER],
    /// Hypothesis n-gram totals per order 1..=4.
    pub totals: [u64; MAX_ORDER],
    pub hyp_len: u64,
    pub ref_len: u64,
}

impl BleuStats {
    pub fn precision(&self, order: usize) -> f64 {
        let i = order - 1;
        if self.totals[i] == 0 {
            0.0
        } else {
            self.matches[i] as f64 / self.totals[i] as f64
        }
    }

    pub fn brevity_penalty(&self) -> f64 {
        if self.hyp_len == 0 {
            0.0
        } else if self.hyp_len >= self.ref_len {
            1.0
        } else {
            (1.0 - self.ref_len as f64 / self.hyp_len as f64).exp()
        }
    }

    /// Geometric mean of the four precisions times the brevity penalty; zero if
    /// any precision is zero.
    pub fn score(&self) -> f64 {
        if self.matches.iter().any(|&m| m == 0) {
            return 0.0;
        }
        let log_mean = (1..=MAX_ORDER)
            .map(|n| self.precision(n).ln())
            .sum::<f64>()
            / MAX_ORDER as f64;
        self.brevity_penalty() * log_mean.exp()
    }
}

fn ngram_counts<T: Eq + Hash>(tokens: &[T], n: usize) -> HashMap<&[T], u64> {
    let mut m = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *m.entry(w).or_insert(0) += 1;
        }
    }
    m
}

pub fn bleu_stats<T: Eq + Hash>(hypotheses: &[Vec<T>], references: &[Vec<T>]) -> Result<BleuStats> {
    if hypotheses.is_empty() {
        return Err(invalid("BLEU needs a non-empty corpus"));
    }
    if hypotheses.len() != references.len() {
        return Err(invalid(format!(
            "{} hypotheses but {} references",
            hypotheses.len(),
            references.len()
        )));
    }
    let mut stats = BleuStats {
        matches: [0; MAX_ORDER],
        totals: [0; MAX_ORDER],
        hyp_len: 0,
        ref_len: 0,
    };
    for (hyp, reference) in hypotheses.iter().zip(references) {
        stats.hyp_len += hyp.len() as u64;
        stats.ref_len += reference.len() as u64;
        for n in 1..=MAX_ORDER {
            let h = ngram_counts(hyp, n);
            let r = ngram_counts(reference, n);
            stats.totals[n - 1] += h.values().sum::<u64>();
            stats.matches[n - 1] += h
                .iter()
                .map(|(g, &c)| c.min(r.get(g).copied().unwrap_or(0)))
                .sum::<u64>();
        }
    }
    Ok(stats)
}

/// Corpus BLEU-4 with clipped counts, single reference and no smoothing.
pub fn bleu<T: Eq + Hash>(hypotheses: &[Vec<T>], references: &[Vec<T>]) -> Result<f64> {
    Ok(bleu_stats(hypotheses, references)?.score())
}

/// Per-epoch values `f_1..f_E` of a metric.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricSeries(Vec<f64>);

impl MetricSeries {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(invalid("metric series values must be finite"));
        }
        Ok(Self(values))
    }

    pub fn push(&mut self, v: f64) {
        self.0.push(v);
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn last(&self) -> Option<f64> {
        self.0.last().copied()
    }

    pub fn max(&self) -> Option<f64> {
        self.0.iter().copied().reduce(f64::max)
    }
}

/// Trapezoidal area under the per-epoch curve over that of an always-1 model:
/// `Σ (f_{i+1} + f_i) / (2(E − 1))`.
pub fn imi(series: &MetricSeries) -> Result<f64> {
    let f = series.values();
    if f.len() < 2 {
        return Err(invalid(format!("IMI needs at least two epochs, got {}", f.len())));
    }
    let area: f64 = f.windows(2).map(|w| w[0] + w[1]).sum();
    Ok(area / (2.0 * (f.len() - 1) as f64))
}
