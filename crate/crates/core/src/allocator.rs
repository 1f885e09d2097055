//! Integer bit allocation under a sum-rate budget.
//!
//! Candidates are enumerated exhaustively and scored by one of four rules:
//! equal sharing, summed quantization MSE, or the divergence between the
//! reference input-output distribution and the one induced by quantizing the
//! controller inputs (histogram or kNN estimate). Lower scores win and ties go
//! to the lexicographically smallest allocation.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::divergence::{HistogramConfig, HistogramReference, KldEstimate, KnnConfig, KnnReference};
use crate::error::{Error, Result};
use crate::mlu::MlpModel;
use crate::quantizer::QuantizerBank;

/// Bits for the searched features, plus the bits already committed elsewhere in the budget.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct RateAllocation {
    pub bits: Vec<u32>,
    #[serde(default)]
    pub reserved_bits: u32,
}

impl RateAllocation {
    pub fn new(bits: Vec<u32>, reserved_bits: u32) -> Self {
        RateAllocation { bits, reserved_bits }
    }

    pub fn searched_sum(&self) -> u32 {
        self.bits.iter().sum()
    }

    /// Total bits charged against the budget.
    pub fn total(&self) -> u32 {
        self.searched_sum() + self.reserved_bits
    }
}

impl fmt::Display for RateAllocation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.bits.iter().map(u32::to_string).collect();
        write!(f, "[{}]", parts.join(","))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChannelBudget {
    pub bandwidth_hz: f64,
    pub snr_linear: f64,
    pub symbol_interval_s: f64,
}

/// Bits per symbol interval on a band-limited AWGN channel: `⌊B · log₂(1 + γ) · T_s⌋`.
pub fn r_sum_from_budget(budget: &ChannelBudget) -> Result<u32> {
    let ChannelBudget { bandwidth_hz, snr_linear, symbol_interval_s } = *budget;
    let all = [bandwidth_hz, snr_linear, symbol_interval_s];
    if all.iter().any(|v| !v.is_finite() || *v <= 0.0) {
        return Err(Error::InvalidArgument(format!("channel quantities must be positive: {budget:?}")));
    }
    let bits = bandwidth_hz * (1.0 + snr_linear).log2() * symbol_interval_s;
    // absorb roundoff just below an integer (e.g. 4600 · 1 · 0.01)
    let nearest = bits.round();
    let floored = if (bits - nearest).abs() < 1e-9 * nearest.max(1.0) { nearest } else { bits.floor() };
    if floored > f64::from(u32::MAX) {
        return Err(Error::InvalidArgument("budget overflows".into()));
    }
    Ok(floored as u32)
}

/// All integer vectors with `lo ≤ Rᵢ ≤ hi` and `Σ Rᵢ = sum_bits`, in lexicographic order.
pub fn enumerate_feasible(n: usize, sum_bits: u32, lo: u32, hi: u32) -> Vec<RateAllocation> {
    let mut out = Vec::new();
    if n == 0 || lo > hi {
        return out;
    }
    let mut cur = Vec::with_capacity(n);
    fill(n, sum_bits, lo, hi, &mut cur, &mut out);
    out
}

fn fill(n: usize, remaining: u32, lo: u32, hi: u32, cur: &mut Vec<u32>, out: &mut Vec<RateAllocation>) {
    let left = (n - cur.len()) as u32;
    if left == 0 {
        if remaining == 0 {
            out.push(RateAllocation::new(cur.clone(), 0));
        }
        return;
    }
    for b in lo..=hi {
        let rest = left - 1;
        if b > remaining {
            break;
        }
        let after = remaining - b;
        if after < rest * lo || after > rest * hi {
            continue;
        }
        cur.push(b);
        fill(n, after, lo, hi, cur, out);
        cur.pop();
    }
}

/// Every searched feature gets `⌊(r_sum − reserved) / n⌋` bits.
pub fn equal_share(r_sum: u32, n: usize, reserved_bits: u32) -> Result<RateAllocation> {
    if n == 0 {
        return Err(Error::InvalidArgument("no features to share bits among".into()));
    }
    if r_sum <= reserved_bits {
        return Err(Error::InvalidArgument(format!("budget {r_sum} does not exceed reserved {reserved_bits}")));
    }
    let each = (r_sum - reserved_bits) / n as u32;
    if each == 0 {
        return Err(Error::InvalidArgument(format!("budget {r_sum} leaves zero bits per feature")));
    }
    Ok(RateAllocation::new(vec![each; n], reserved_bits))
}

/// A feature quantized at a fixed depth outside the search.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReservedFeature {
    pub feature: usize,
    pub bits: u32,
    /// Whether these bits are charged against the sum-rate budget.
    #[serde(default = "yes")]
    pub counted: bool,
}

fn yes() -> bool {
    true
}

/// Feasible-set constraints: per-feature bounds, the total budget and the fixed features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeasibleConstraint {
    pub lo: u32,
    pub hi: u32,
    /// Total budget, including counted reserved bits.
    pub sum: u32,
    #[serde(default)]
    pub reserved: Vec<ReservedFeature>,
}

impl FeasibleConstraint {
    pub fn reserved_bits(&self) -> u32 {
        self.reserved.iter().filter(|r| r.counted).map(|r| r.bits).sum()
    }

    /// Searched feature indices, in feature order.
    pub fn searched(&self, n_features: usize) -> Vec<usize> {
        (0..n_features).filter(|i| !self.reserved.iter().any(|r| r.feature == *i)).collect()
    }

    pub fn with_sum(&self, sum: u32) -> Self {
        FeasibleConstraint { sum, ..self.clone() }
    }

    pub fn enumerate(&self, n_features: usize) -> Vec<RateAllocation> {
        let reserved = self.reserved_bits();
        let Some(avail) = self.sum.checked_sub(reserved) else { return Vec::new() };
        let mut all = enumerate_feasible(self.searched(n_features).len(), avail, self.lo, self.hi);
        for a in &mut all {
            a.reserved_bits = reserved;
        }
        all
    }

    pub fn contains(&self, a: &RateAllocation, n_features: usize) -> bool {
        a.bits.len() == self.searched(n_features).len()
            && a.bits.iter().all(|&b| b >= self.lo && b <= self.hi)
            && a.reserved_bits == self.reserved_bits()
            && a.total() == self.sum
    }

    /// Per-feature depths for all `n_features`, reserved ones filled in.
    pub fn expand(&self, a: &RateAllocation, n_features: usize) -> Result<Vec<u32>> {
        let searched = self.searched(n_features);
        if a.bits.len() != searched.len() {
            return Err(Error::DimensionMismatch { expected: searched.len(), got: a.bits.len() });
        }
        let mut full = vec![0; n_features];
        for r in &self.reserved {
            if r.feature >= n_features {
                return Err(Error::DimensionMismatch { expected: n_features, got: r.feature + 1 });
            }
            full[r.feature] = r.bits;
        }
        for (&f, &b) in searched.iter().zip(&a.bits) {
            full[f] = b;
        }
        Ok(full)
    }

    pub fn validate(&self, n_features: usize) -> Result<()> {
        if self.lo == 0 || self.lo > self.hi {
            return Err(Error::InvalidArgument(format!("need 1 ≤ lo ≤ hi, got {}..{}", self.lo, self.hi)));
        }
        if let Some(r) = self.reserved.iter().find(|r| r.feature >= n_features || r.bits == 0) {
            return Err(Error::InvalidArgument(format!("bad reserved feature {r:?}")));
        }
        if self.searched(n_features).is_empty() {
            return Err(Error::InvalidArgument("every feature is reserved".into()));
        }
        Ok(())
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Criterion {
    KldHist,
    KldKnn,
    Mse,
    Equal,
}

impl Criterion {
    pub const ALL: [Criterion; 4] = [Criterion::KldHist, Criterion::KldKnn, Criterion::Mse, Criterion::Equal];

    pub fn name(&self) -> &'static str {
        match self {
            Criterion::KldHist => "kld_hist",
            Criterion::KldKnn => "kld_knn",
            Criterion::Mse => "mse",
            Criterion::Equal => "equal",
        }
    }
}

impl fmt::Display for Criterion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Criterion {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Criterion::ALL.into_iter().find(|c| c.name() == s).ok_or_else(|| {
            Error::InvalidArgument(format!("unknown method {s:?} (expected kld_hist, kld_knn, mse or equal)"))
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AllocationScore {
    pub allocation: RateAllocation,
    pub score: f64,
    pub criterion: Criterion,
}

/// Every scored candidate, in enumeration order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreTable {
    pub criterion: Criterion,
    pub entries: Vec<AllocationScore>,
}

impl ScoreTable {
    /// Minimum score; ties go to the lexicographically smallest bits.
    pub fn best(&self) -> Option<&AllocationScore> {
        self.entries
            .iter()
            .min_by(|a, b| a.score.total_cmp(&b.score).then_with(|| a.allocation.bits.cmp(&b.allocation.bits)))
    }

    /// Entries sorted best-first.
    pub fn ranked(&self) -> Vec<&AllocationScore> {
        let mut v: Vec<&AllocationScore> = self.entries.iter().collect();
        v.sort_by(|a, b| a.score.total_cmp(&b.score).then_with(|| a.allocation.bits.cmp(&b.allocation.bits)));
        v
    }

    /// CSV with columns `R1..RN, criterion, score, rank` (rank 1 = selected).
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let n = self.entries.first().map_or(0, |e| e.allocation.bits.len());
        let mut wr = csv::Writer::from_writer(w);
        let mut header: Vec<String> = (1..=n).map(|i| format!("R{i}")).collect();
        header.extend(["criterion", "score", "rank"].map(String::from));
        wr.write_record(&header)?;
        for (rank, e) in self.ranked().into_iter().enumerate() {
            let mut rec: Vec<String> = e.allocation.bits.iter().map(u32::to_string).collect();
            rec.push(e.criterion.to_string());
            rec.push(format!("{:?}", e.score));
            rec.push((rank + 1).to_string());
            wr.write_record(&rec)?;
        }
        wr.flush()?;
        Ok(())
    }
}

fn input_dim(t1: &Dataset, bank: &QuantizerBank) -> Result<usize> {
    let n = bank.len();
    if t1.dim() < n {
        return Err(Error::DimensionMismatch { expected: n, got: t1.dim() });
    }
    Ok(n)
}

/// Quantize the input columns of `t1` at `bits` and recompute the controller output.
///
/// `t1` rows are `[x, y]` with `x` the bank's features; the result has the same
/// shape and row order.
pub fn build_t2(t1: &Dataset, bits: &[u32], bank: &QuantizerBank, mlu: &MlpModel) -> Result<Dataset> {
    let n = input_dim(t1, bank)?;
    if t1.dim() != n + 1 || mlu.input_dim() != n {
        return Err(Error::DimensionMismatch { expected: n + 1, got: t1.dim() });
    }
    let q = bank.with_bits(bits)?;
    let mut data = Vec::with_capacity(t1.as_slice().len());
    let mut x = vec![0.0; n];
    for row in t1.rows() {
        x.copy_from_slice(&row[..n]);
        q.quantize_in_place(&mut x)?;
        let y = mlu.predict(&x);
        data.extend_from_slice(&x);
        data.push(y);
    }
    Dataset::new(t1.labels().to_vec(), data)
}

/// Per-feature quantization MSE of the input columns of `t1` at `bits`.
pub fn feature_mse(t1: &Dataset, bits: &[u32], bank: &QuantizerBank) -> Result<Vec<f64>> {
    let n = input_dim(t1, bank)?;
    let q = bank.with_bits(bits)?;
    (0..n).map(|i| crate::quantizer::quantization_mse(&q.specs()[i], &t1.column(i))).collect()
}

/// Score every candidate by the summed quantization MSE of its searched features.
pub fn mse_allocation(
    t1: &Dataset,
    bank: &QuantizerBank,
    constraint: &FeasibleConstraint,
    feasible: &[RateAllocation],
) -> Result<ScoreTable> {
    if feasible.is_empty() {
        return Err(Error::EmptyFeasibleSet);
    }
    let n = input_dim(t1, bank)?;
    let searched = constraint.searched(n);
    let columns: Vec<Vec<f64>> = searched.iter().map(|&f| t1.column(f)).collect();
    // σ² depends only on (feature, bits); memoize across candidates
    let mut cache: std::collections::HashMap<(usize, u32), f64> = std::collections::HashMap::new();
    let mut entries = Vec::with_capacity(feasible.len());
    for a in feasible {
        if a.bits.len() != searched.len() {
            return Err(Error::DimensionMismatch { expected: searched.len(), got: a.bits.len() });
        }
        let mut score = 0.0;
        for (k, (&f, &b)) in searched.iter().zip(&a.bits).enumerate() {
            let v = match cache.get(&(f, b)) {
                Some(v) => *v,
                None => {
                    let v = crate::quantizer::quantization_mse(&bank.specs()[f].with_bits(b)?, &columns[k])?;
                    cache.insert((f, b), v);
                    v
                }
            };
            score += v;
        }
        entries.push(AllocationScore { allocation: a.clone(), score, criterion: Criterion::Mse });
    }
    Ok(ScoreTable { criterion: Criterion::Mse, entries })
}

/// Divergence estimator choice for [`kld_allocation`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "estimator", rename_all = "lowercase")]
pub enum EstimatorChoice {
    Histogram(HistogramConfig),
    Knn(KnnConfig),
}

/// The T1 side of a divergence estimate, prepared once and reused for every candidate.
#[derive(Debug)]
pub enum KldScorer {
    Histogram(HistogramReference),
    Knn(KnnReference),
}

impl KldScorer {
    pub fn new(t1: &Dataset, estimator: &EstimatorChoice) -> Result<Self> {
        Ok(match estimator {
            EstimatorChoice::Histogram(cfg) => KldScorer::Histogram(HistogramReference::new(t1, cfg.clone())?),
            EstimatorChoice::Knn(cfg) => KldScorer::Knn(KnnReference::new(t1, *cfg)?),
        })
    }

    pub fn criterion(&self) -> Criterion {
        match self {
            KldScorer::Histogram(_) => Criterion::KldHist,
            KldScorer::Knn(_) => Criterion::KldKnn,
        }
    }

    pub fn estimate(&self, t2: &Dataset) -> Result<KldEstimate> {
        match self {
            KldScorer::Histogram(h) => h.estimate(t2),
            KldScorer::Knn(k) => k.estimate(t2),
        }
    }
}

/// Score every candidate by the estimated divergence between `T1` and its `T2`.
pub fn kld_allocation(
    t1: &Dataset,
    mlu: &MlpModel,
    bank: &QuantizerBank,
    constraint: &FeasibleConstraint,
    feasible: &[RateAllocation],
    scorer: &KldScorer,
) -> Result<ScoreTable> {
    if feasible.is_empty() {
        return Err(Error::EmptyFeasibleSet);
    }
    let n = input_dim(t1, bank)?;
    // candidates are independent; collect keeps enumeration order
    let entries = feasible
        .par_iter()
        .map(|a| {
            let wrap = |e: Error| Error::Candidate { allocation: a.bits.clone(), source: Box::new(e) };
            let bits = constraint.expand(a, n).map_err(wrap)?;
            let t2 = build_t2(t1, &bits, bank, mlu).map_err(wrap)?;
            let est = scorer.estimate(&t2).map_err(wrap)?;
            if !est.value.is_finite() {
                return Err(wrap(Error::NonFinite));
            }
            log::trace!("{} {a}: {:.6}", scorer.criterion(), est.value);
            Ok(AllocationScore { allocation: a.clone(), score: est.value, criterion: scorer.criterion() })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ScoreTable { criterion: scorer.criterion(), entries })
}
