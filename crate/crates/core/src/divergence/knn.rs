//! k-nearest-neighbour plug-in estimate of `D_KL(p‖q)`.
//!
//! For each `z_j ∈ T1`, `p̂(z_j) = k / ((J₁ − 1) · V_d(R_p))` with `R_p` the distance
//! to the k-th neighbour in `T1 \ {z_j}`, and `q̂(z_j) = k / (J₂ · V_d(R_q))` with
//! `R_q` the distance to the k-th neighbour in `T2`. The estimate is the mean of
//! `log(p̂ / q̂)` over `T1`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::kdtree::KdTree;
use super::{ln_ball_volume, EstimatorKind, EstimatorParams, KldEstimate};
use crate::dataset::Dataset;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KnnConfig {
    pub k: usize,
    /// Scale every dimension by the T1 mean and standard deviation before measuring distance.
    pub standardize: bool,
    /// Jitter half-width as a fraction of each dimension's T1 range.
    pub jitter: f64,
    pub seed: u64,
}

impl KnnConfig {
    pub fn new(k: usize) -> Self {
        KnnConfig { k, standardize: true, jitter: 1e-10, seed: 0 }
    }

    /// `k = ⌊√J⌋`, the customary choice.
    pub fn sqrt_rule(j: usize) -> Self {
        Self::new(((j as f64).sqrt().floor() as usize).max(1))
    }
}

/// Distance from `query` to its k-th nearest neighbour in `dataset`.
///
/// With `exclude_self`, one point exactly equal to `query` (if present) is skipped.
pub fn knn_radius(query: &[f64], dataset: &Dataset, k: usize, exclude_self: bool) -> Result<f64> {
    if query.len() != dataset.dim() {
        return Err(Error::DimensionMismatch { expected: dataset.dim(), got: query.len() });
    }
    let exclude = if exclude_self { dataset.rows().position(|r| r == query) } else { None };
    let available = dataset.len() - usize::from(exclude.is_some());
    if k == 0 || k > available {
        return Err(Error::KOutOfRange { k, max: available });
    }
    let tree = KdTree::build(dataset.as_slice(), dataset.dim());
    tree.kth_distance(query, k, exclude).ok_or(Error::KOutOfRange { k, max: available })
}

/// Per-dimension affine map applied to both sample sets.
#[derive(Debug, Clone)]
struct Transform {
    shift: Vec<f64>,
    scale: Vec<f64>,
    jitter: Vec<f64>,
}

impl Transform {
    fn fit(t1: &Dataset, cfg: &KnnConfig) -> Self {
        let d = t1.dim();
        let n = t1.len() as f64;
        let mut shift = vec![0.0; d];
        let mut scale = vec![1.0; d];
        let mut jitter = vec![0.0; d];
        for c in 0..d {
            let col = t1.column(c);
            let mean = col.iter().sum::<f64>() / n;
            let var = col.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            if cfg.standardize && var > 0.0 {
                shift[c] = mean;
                scale[c] = 1.0 / var.sqrt();
            }
            let (lo, hi) = col.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
            // constant columns get a unit-range jitter
            let range = if hi > lo { (hi - lo) * scale[c] } else { 1.0 };
            jitter[c] = cfg.jitter * range;
        }
        Transform { shift, scale, jitter }
    }

    fn apply(&self, ds: &Dataset, rng: &mut ChaCha8Rng) -> Vec<f64> {
        let d = ds.dim();
        let mut out = Vec::with_capacity(ds.as_slice().len());
        for r in ds.rows() {
            for c in 0..d {
                let mut v = (r[c] - self.shift[c]) * self.scale[c];
                if self.jitter[c] > 0.0 {
                    v += rng.random_range(-self.jitter[c]..=self.jitter[c]);
                }
                out.push(v);
            }
        }
        out
    }
}

/// The T1 half of the estimator, reusable across many candidate T2 sets.
#[derive(Debug)]
pub struct KnnReference {
    cfg: KnnConfig,
    dim: usize,
    transform: Transform,
    points: Vec<f64>,
    /// `ln R_p(z_j)` for every T1 sample.
    ln_rp: Vec<f64>,
}

impl KnnReference {
    pub fn new(t1: &Dataset, cfg: KnnConfig) -> Result<Self> {
        let j1 = t1.len();
        if j1 < 2 || cfg.k == 0 || cfg.k > j1 - 1 {
            return Err(Error::KOutOfRange { k: cfg.k, max: j1.saturating_sub(1) });
        }
        if t1.as_slice().iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite);
        }
        let transform = Transform::fit(t1, &cfg);
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let points = transform.apply(t1, &mut rng);
        let dim = t1.dim();
        let tree = KdTree::build(&points, dim);
        let mut ln_rp = Vec::with_capacity(j1);
        for j in 0..j1 {
            let q = &points[j * dim..(j + 1) * dim];
            let r = tree.kth_distance(q, cfg.k, Some(j)).ok_or(Error::KOutOfRange { k: cfg.k, max: j1 - 1 })?;
            if r <= 0.0 {
                return Err(Error::DuplicateCollapse { index: j });
            }
            ln_rp.push(r.ln());
        }
        Ok(KnnReference { cfg, dim, transform, points, ln_rp })
    }

    pub fn config(&self) -> &KnnConfig {
        &self.cfg
    }

    fn q_radii(&self, t2: &Dataset) -> Result<Vec<f64>> {
        if t2.dim() != self.dim {
            return Err(Error::DimensionMismatch { expected: self.dim, got: t2.dim() });
        }
        if self.cfg.k > t2.len() {
            return Err(Error::KOutOfRange { k: self.cfg.k, max: t2.len() });
        }
        if t2.as_slice().iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed);
        rng.set_stream(1);
        let pts2 = self.transform.apply(t2, &mut rng);
        let tree = KdTree::build(&pts2, self.dim);
        let d = self.dim;
        let mut ln_rq = Vec::with_capacity(self.ln_rp.len());
        for j in 0..self.ln_rp.len() {
            let q = &self.points[j * d..(j + 1) * d];
            let r =
                tree.kth_distance(q, self.cfg.k, None).ok_or(Error::KOutOfRange { k: self.cfg.k, max: t2.len() })?;
            if r <= 0.0 {
                return Err(Error::DuplicateCollapse { index: j });
            }
            ln_rq.push(r.ln());
        }
        Ok(ln_rq)
    }

    /// Volume-cancelled form: `d · mean(ln R_q − ln R_p) + ln(J₂ / (J₁ − 1))`.
    pub fn estimate(&self, t2: &Dataset) -> Result<KldEstimate> {
        let ln_rq = self.q_radii(t2)?;
        let j1 = self.ln_rp.len();
        let mean = self.ln_rp.iter().zip(&ln_rq).map(|(p, q)| q - p).sum::<f64>() / j1 as f64;
        let value = self.dim as f64 * mean + (t2.len() as f64 / (j1 - 1) as f64).ln();
        Ok(self.wrap(value, t2.len()))
    }

    /// Explicit form: mean of `ln p̂(z_j) − ln q̂(z_j)` with ball volumes kept.
    pub fn estimate_explicit(&self, t2: &Dataset) -> Result<KldEstimate> {
        let ln_rq = self.q_radii(t2)?;
        let (j1, j2, k, d) = (self.ln_rp.len() as f64, t2.len() as f64, self.cfg.k as f64, self.dim);
        let mut acc = 0.0;
        for (lp, lq) in self.ln_rp.iter().zip(&ln_rq) {
            let ln_p = (k / (j1 - 1.0)).ln() - ln_ball_volume(d, lp.exp());
            let ln_q = (k / j2).ln() - ln_ball_volume(d, lq.exp());
            acc += ln_p - ln_q;
        }
        Ok(self.wrap(acc / j1, t2.len()))
    }

    fn wrap(&self, value: f64, j2: usize) -> KldEstimate {
        KldEstimate {
            value,
            kind: EstimatorKind::Knn,
            j1: self.ln_rp.len(),
            j2,
            params: EstimatorParams::Knn { k: self.cfg.k, standardized: self.cfg.standardize },
        }
    }
}

/// One-shot kNN divergence estimate.
pub fn kld_knn(t1: &Dataset, t2: &Dataset, cfg: KnnConfig) -> Result<KldEstimate> {
    if t1.dim() != t2.dim() {
        return Err(Error::DimensionMismatch { expected: t1.dim(), got: t2.dim() });
    }
    KnnReference::new(t1, cfg)?.estimate(t2)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::{Distribution, StandardNormal};

    fn normal(n: usize, mean: f64, seed: u64) -> Dataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let v: Vec<f64> = (0..n)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                mean + z
            })
            .collect();
        Dataset::from_column("x", &v)
    }

    #[test]
    fn radius_small_cases() {
        let ds = Dataset::from_column("x", &[0.0, 1.0, 3.0]);
        assert_eq!(knn_radius(&[0.0], &ds, 1, true).unwrap(), 1.0);
        assert_eq!(knn_radius(&[0.0], &ds, 2, true).unwrap(), 3.0);
        assert_eq!(knn_radius(&[0.0], &ds, 1, false).unwrap(), 0.0);
        assert!(matches!(knn_radius(&[0.0], &ds, 3, true), Err(Error::KOutOfRange { .. })));
        assert!(knn_radius(&[0.0, 1.0], &ds, 1, true).is_err());
    }

    #[test]
    fn radius_matches_exhaustive_sort_on_grid() {
        let rows: Vec<Vec<f64>> = (0..100).map(|i| vec![(i % 10) as f64, (i / 10) as f64]).collect();
        let ds = Dataset::from_rows(&["a", "b"], &rows).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..20 {
            let q = [rng.random_range(-1.0..10.0), rng.random_range(-1.0..10.0)];
            let mut d: Vec<f64> = rows.iter().map(|r| ((r[0] - q[0]).powi(2) + (r[1] - q[1]).powi(2)).sqrt()).collect();
            d.sort_by(f64::total_cmp);
            for k in [1, 2, 7, 50, 100] {
                assert_eq!(knn_radius(&q, &ds, k, false).unwrap(), d[k - 1]);
            }
        }
    }

    #[test]
    fn same_distribution_is_near_zero() {
        let est = kld_knn(&normal(10_000, 0.0, 1), &normal(10_000, 0.0, 2), KnnConfig::new(100)).unwrap();
        assert!(est.value.abs() < 0.05, "{}", est.value);
    }

    #[test]
    fn shifted_gaussian_near_analytic() {
        let est = kld_knn(&normal(10_000, 0.0, 1), &normal(10_000, 1.0, 2), KnnConfig::new(100)).unwrap();
        assert!((est.value - 0.5).abs() < 0.1, "{}", est.value);
    }

    #[test]
    fn cancelled_and_explicit_forms_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let rows = |rng: &mut ChaCha8Rng, s: f64| -> Vec<Vec<f64>> {
            (0..400).map(|_| (0..3).map(|_| s * rng.random_range(-1.0..1.0)).collect()).collect()
        };
        let t1 = Dataset::from_rows(&["a", "b", "c"], &rows(&mut rng, 1.0)).unwrap();
        let t2 = Dataset::from_rows(&["a", "b", "c"], &rows(&mut rng, 1.3)).unwrap();
        let r = KnnReference::new(&t1, KnnConfig::new(20)).unwrap();
        let a = r.estimate(&t2).unwrap().value;
        let b = r.estimate_explicit(&t2).unwrap().value;
        assert!((a - b).abs() <= 1e-10 * a.abs().max(1.0), "{a} vs {b}");
    }

    #[test]
    fn permutation_invariant() {
        let t1 = normal(500, 0.0, 3);
        let t2 = normal(500, 0.4, 4);
        let mut rev: Vec<f64> = t2.as_slice().to_vec();
        rev.reverse();
        let cfg = KnnConfig { jitter: 0.0, ..KnnConfig::new(10) };
        let a = kld_knn(&t1, &t2, cfg).unwrap().value;
        let b = kld_knn(&t1, &Dataset::from_column("x", &rev), cfg).unwrap().value;
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn duplicates_survive_through_jitter() {
        let t1 = Dataset::from_column("x", &[1.0; 50]);
        let est = kld_knn(&t1, &t1, KnnConfig::new(5)).unwrap();
        assert!(est.value.is_finite());
        let no_jitter = KnnConfig { jitter: 0.0, ..KnnConfig::new(5) };
        assert!(matches!(kld_knn(&t1, &t1, no_jitter), Err(Error::DuplicateCollapse { .. })));
    }

    #[test]
    fn k_bounds() {
        let t1 = normal(10, 0.0, 1);
        assert!(kld_knn(&t1, &t1, KnnConfig::new(10)).is_err());
        assert!(kld_knn(&t1, &normal(5, 0.0, 2), KnnConfig::new(6)).is_err());
        assert!(kld_knn(&t1, &t1, KnnConfig::new(9)).is_ok());
    }

    #[test]
    fn reference_sample_size_accepted() {
        assert_eq!(KnnConfig::sqrt_rule(40_000).k, 200);
    }
}
