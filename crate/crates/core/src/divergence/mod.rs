//! Non-parametric estimates of `D_KL(p‖q)` between a reference sample set
//! `T1 ~ p` and a candidate sample set `T2 ~ q`.

mod histogram;
mod kdtree;
mod knn;

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

pub use histogram::{kld_histogram_smoothed, HistogramConfig, HistogramReference};
pub use kdtree::KdTree;
pub use knn::{kld_knn, knn_radius, KnnConfig, KnnReference};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EstimatorKind {
    Histogram,
    Knn,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum EstimatorParams {
    Histogram { bins_per_dim: Vec<usize>, support_bins: usize, mu: usize },
    Knn { k: usize, standardized: bool },
}

/// A divergence value in nats plus what produced it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KldEstimate {
    pub value: f64,
    pub kind: EstimatorKind,
    pub j1: usize,
    pub j2: usize,
    pub params: EstimatorParams,
}

/// `ln` of the unit `d`-ball volume, via `V_d = V_{d−2} · 2π / d`.
fn ln_unit_ball(d: usize) -> f64 {
    let mut ln_v = if d % 2 == 0 { 0.0 } else { 2f64.ln() };
    let mut k = if d % 2 == 0 { 2 } else { 3 };
    while k <= d {
        ln_v += (2.0 * PI / k as f64).ln();
        k += 2;
    }
    ln_v
}

pub(crate) fn ln_ball_volume(d: usize, radius: f64) -> f64 {
    ln_unit_ball(d) + d as f64 * radius.ln()
}

/// Volume of a `d`-dimensional Euclidean ball, `π^{d/2} / Γ(d/2 + 1) · radius^d`.
pub fn ball_volume(d: usize, radius: f64) -> f64 {
    if radius == 0.0 {
        return 0.0;
    }
    ln_ball_volume(d, radius).exp()
}
