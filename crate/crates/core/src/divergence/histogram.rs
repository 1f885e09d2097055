//! Smoothed-histogram estimate of `D_KL(p‖q)`.
//!
//! Bins are uniform per dimension. Only bins holding T1 samples contribute;
//! for those, `q̂ = (n + α) / (J₂ + μ)` where `n` is the T2 count, `α = 1`
//! exactly when `n = 0`, and `μ` counts T1-support bins that T2 never hits.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use super::{EstimatorKind, EstimatorParams, KldEstimate};
use crate::dataset::Dataset;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistogramConfig {
    pub bins_per_dim: Vec<usize>,
    /// `(lo, hi)` per dimension. Samples outside clamp into the edge bins.
    pub edges: Vec<(f64, f64)>,
    /// Quantization step that each dimension's bin width must not undercut.
    #[serde(default)]
    pub min_steps: Vec<Option<f64>>,
}

impl HistogramConfig {
    pub fn new(bins_per_dim: Vec<usize>, edges: Vec<(f64, f64)>) -> Result<Self> {
        let d = bins_per_dim.len();
        let cfg = HistogramConfig { bins_per_dim, edges, min_steps: vec![None; d] };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Bins spanning each dimension's range in `t1`.
    pub fn from_data(t1: &Dataset, bins_per_dim: Vec<usize>) -> Result<Self> {
        if bins_per_dim.len() != t1.dim() {
            return Err(Error::DimensionMismatch { expected: t1.dim(), got: bins_per_dim.len() });
        }
        if t1.is_empty() {
            return Err(Error::EmptyColumn);
        }
        let edges = (0..t1.dim())
            .map(|c| {
                let col = t1.column(c);
                let lo = col.iter().copied().fold(f64::INFINITY, f64::min);
                let hi = col.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                // a constant column gets a unit-wide single span
                if hi > lo {
                    (lo, hi)
                } else {
                    (lo - 0.5, lo + 0.5)
                }
            })
            .collect();
        Self::new(bins_per_dim, edges)
    }

    /// Require bin widths of no less than `steps[i]` on each constrained dimension.
    pub fn with_min_steps(mut self, steps: Vec<Option<f64>>) -> Result<Self> {
        if steps.len() != self.dim() {
            return Err(Error::DimensionMismatch { expected: self.dim(), got: steps.len() });
        }
        self.min_steps = steps;
        self.validate()?;
        Ok(self)
    }

    pub fn dim(&self) -> usize {
        self.bins_per_dim.len()
    }

    pub fn width(&self, d: usize) -> f64 {
        let (lo, hi) = self.edges[d];
        (hi - lo) / self.bins_per_dim[d] as f64
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.bins_per_dim.len();
        if d == 0 || self.edges.len() != d {
            return Err(Error::DimensionMismatch { expected: d, got: self.edges.len() });
        }
        if !self.min_steps.is_empty() && self.min_steps.len() != d {
            return Err(Error::DimensionMismatch { expected: d, got: self.min_steps.len() });
        }
        let mut total: u64 = 1;
        for i in 0..d {
            let (lo, hi) = self.edges[i];
            if self.bins_per_dim[i] == 0 || !(hi > lo) || !lo.is_finite() || !hi.is_finite() {
                return Err(Error::InvalidArgument(format!("dimension {i}: need bins ≥ 1 and lo < hi")));
            }
            total = total
                .checked_mul(self.bins_per_dim[i] as u64)
                .ok_or_else(|| Error::InvalidArgument("histogram has too many bins to index".into()))?;
            if let Some(Some(step)) = self.min_steps.get(i) {
                let w = self.width(i);
                // relative slack for widths that equal the step up to roundoff
                if w < step * (1.0 - 1e-12) {
                    return Err(Error::BinsFinerThanQuantization { dim: i, bin_width: w, step: *step });
                }
            }
        }
        Ok(())
    }

    /// Mixed-radix key of the bin containing `z`.
    pub fn key(&self, z: &[f64]) -> u64 {
        let mut key = 0u64;
        for (i, &v) in z.iter().enumerate() {
            let n = self.bins_per_dim[i];
            let (lo, _) = self.edges[i];
            let raw = ((v - lo) / self.width(i)).floor();
            let b = if raw <= 0.0 || raw.is_nan() { 0 } else { (raw as usize).min(n - 1) };
            key = key * n as u64 + b as u64;
        }
        key
    }
}

/// T1 bin counts, reusable across candidate T2 sets.
#[derive(Debug, Clone)]
pub struct HistogramReference {
    config: HistogramConfig,
    /// Support bins of T1 in key order with their counts.
    support: Vec<(u64, usize)>,
    slot: HashMap<u64, usize>,
    j1: usize,
}

impl HistogramReference {
    pub fn new(t1: &Dataset, config: HistogramConfig) -> Result<Self> {
        config.validate()?;
        if t1.dim() != config.dim() {
            return Err(Error::DimensionMismatch { expected: config.dim(), got: t1.dim() });
        }
        if t1.is_empty() {
            return Err(Error::EmptyColumn);
        }
        let mut counts: BTreeMap<u64, usize> = BTreeMap::new();
        for z in t1.rows() {
            *counts.entry(config.key(z)).or_default() += 1;
        }
        let support: Vec<(u64, usize)> = counts.into_iter().collect();
        let slot = support.iter().enumerate().map(|(i, (k, _))| (*k, i)).collect();
        Ok(HistogramReference { config, support, slot, j1: t1.len() })
    }

    pub fn config(&self) -> &HistogramConfig {
        &self.config
    }

    pub fn support_size(&self) -> usize {
        self.support.len()
    }

    /// T2 counts on the T1 support, in support order.
    pub fn q_counts(&self, t2: &Dataset) -> Result<Vec<usize>> {
        if t2.dim() != self.config.dim() {
            return Err(Error::DimensionMismatch { expected: self.config.dim(), got: t2.dim() });
        }
        let mut counts = vec![0usize; self.support.len()];
        for z in t2.rows() {
            if let Some(&i) = self.slot.get(&self.config.key(z)) {
                counts[i] += 1;
            }
        }
        Ok(counts)
    }

    /// Smoothed `q̂` per support bin.
    pub fn q_hat(&self, t2: &Dataset) -> Result<Vec<f64>> {
        let counts = self.q_counts(t2)?;
        let mu = counts.iter().filter(|&&n| n == 0).count();
        let denom = (t2.len() + mu) as f64;
        Ok(counts.iter().map(|&n| if n == 0 { 1.0 } else { n as f64 } / denom).collect())
    }

    pub fn estimate(&self, t2: &Dataset) -> Result<KldEstimate> {
        let counts = self.q_counts(t2)?;
        let mu = counts.iter().filter(|&&n| n == 0).count();
        let j1 = self.j1 as f64;
        let denom = (t2.len() + mu) as f64;
        let mut value = 0.0;
        for ((_, np), &nq) in self.support.iter().zip(&counts) {
            let p = *np as f64 / j1;
            let q = (nq + usize::from(nq == 0)) as f64 / denom;
            value += p * (p / q).ln();
        }
        Ok(KldEstimate {
            value,
            kind: EstimatorKind::Histogram,
            j1: self.j1,
            j2: t2.len(),
            params: EstimatorParams::Histogram {
                bins_per_dim: self.config.bins_per_dim.clone(),
                support_bins: self.support.len(),
                mu,
            },
        })
    }
}

/// One-shot smoothed-histogram divergence estimate.
pub fn kld_histogram_smoothed(t1: &Dataset, t2: &Dataset, config: &HistogramConfig) -> Result<KldEstimate> {
    HistogramReference::new(t1, config.clone())?.estimate(t2)
}
