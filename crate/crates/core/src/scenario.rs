//! The two pendulum setups: which features are searched, their bit bounds,
//! and estimator settings that respect the coarsest candidate grid.

use serde::{Deserialize, Serialize};

use crate::allocator::{EstimatorChoice, FeasibleConstraint, ReservedFeature};
use crate::dataset::Dataset;
use crate::divergence::{HistogramConfig, KnnConfig};
use crate::error::{Error, Result};
use crate::quantizer::QuantizerBank;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScenarioKind {
    /// `m`, `l` fixed at 10 bits inside the budget; `r, θ, v, q` searched over 3..=9.
    PendulumMain,
    /// `r, θ, v, q` fixed at 10 bits outside the budget; `m`, `l` searched over 1..=7.
    PendulumMlExtension,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub kind: ScenarioKind,
    pub lo: u32,
    pub hi: u32,
    pub reserved: Vec<ReservedFeature>,
    /// Histogram bins per input feature, then one entry for the output.
    pub histogram_bins: Vec<usize>,
    /// `None` picks `k = ⌊√J⌋`.
    pub knn_k: Option<usize>,
    pub knn_seed: u64,
}

impl Scenario {
    pub fn main() -> Self {
        Scenario {
            kind: ScenarioKind::PendulumMain,
            lo: 3,
            hi: 9,
            reserved: (0..2).map(|feature| ReservedFeature { feature, bits: 10, counted: true }).collect(),
            histogram_bins: vec![8, 8, 8, 8, 8, 8, 16],
            knn_k: None,
            knn_seed: 0,
        }
    }

    pub fn ml_extension() -> Self {
        Scenario {
            kind: ScenarioKind::PendulumMlExtension,
            lo: 1,
            hi: 7,
            reserved: (2..6).map(|feature| ReservedFeature { feature, bits: 10, counted: false }).collect(),
            histogram_bins: vec![2, 2, 8, 8, 8, 8, 16],
            knn_k: None,
            knn_seed: 0,
        }
    }

    pub fn of(kind: ScenarioKind) -> Self {
        match kind {
            ScenarioKind::PendulumMain => Self::main(),
            ScenarioKind::PendulumMlExtension => Self::ml_extension(),
        }
    }

    pub fn constraint(&self, r_sum: u32) -> FeasibleConstraint {
        FeasibleConstraint { lo: self.lo, hi: self.hi, sum: r_sum, reserved: self.reserved.clone() }
    }

    /// Depth used when a full-resolution reference allocation is needed.
    pub fn max_bits(&self, n_features: usize) -> Vec<u32> {
        let mut bits = vec![self.hi; n_features];
        for r in &self.reserved {
            bits[r.feature] = r.bits;
        }
        bits
    }

    /// Coarsest depth any candidate can give each feature.
    pub fn min_bits(&self, n_features: usize) -> Vec<u32> {
        let mut bits = vec![self.lo; n_features];
        for r in &self.reserved {
            bits[r.feature] = r.bits;
        }
        bits
    }

    /// Histogram over `[x, y]`: input edges follow the quantizer ranges, the
    /// output spans its `t1` range, and no input bin is finer than the
    /// coarsest candidate quantizer step.
    pub fn histogram_config(&self, t1: &Dataset, bank: &QuantizerBank) -> Result<HistogramConfig> {
        let n = bank.len();
        if t1.dim() != n + 1 || self.histogram_bins.len() != n + 1 {
            return Err(Error::DimensionMismatch { expected: n + 1, got: self.histogram_bins.len() });
        }
        let coarse = bank.with_bits(&self.min_bits(n))?;
        let mut edges: Vec<(f64, f64)> = bank.specs().iter().map(|s| (s.min(), s.max())).collect();
        let y = t1.column(n);
        let lo = y.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = y.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        edges.push(if hi > lo { (lo, hi) } else { (lo - 0.5, lo + 0.5) });
        let mut steps: Vec<Option<f64>> = coarse.specs().iter().map(|s| Some(s.step())).collect();
        steps.push(None);
        HistogramConfig::new(self.histogram_bins.clone(), edges)?.with_min_steps(steps)
    }

    pub fn knn_config(&self, t1: &Dataset) -> KnnConfig {
        let mut cfg = match self.knn_k {
            Some(k) => KnnConfig::new(k),
            None => KnnConfig::sqrt_rule(t1.len()),
        };
        cfg.seed = self.knn_seed;
        cfg
    }

    pub fn estimator(
        &self,
        kind: crate::divergence::EstimatorKind,
        t1: &Dataset,
        bank: &QuantizerBank,
    ) -> Result<EstimatorChoice> {
        Ok(match kind {
            crate::divergence::EstimatorKind::Histogram => EstimatorChoice::Histogram(self.histogram_config(t1, bank)?),
            crate::divergence::EstimatorKind::Knn => EstimatorChoice::Knn(self.knn_config(t1)),
        })
    }
}
