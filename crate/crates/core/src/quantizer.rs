//! Uniform scalar quantization with data-derived ranges.
//!
//! Every feature gets its own mid-rise quantizer with `2^bits` equal-width
//! bins spanning `[min, max]`. Reconstruction levels are the bin centres.
//! Inputs outside the range clamp to the nearest extreme level, and a value
//! sitting exactly on an interior bin boundary belongs to the upper bin.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Largest bit depth accepted by a quantizer.
pub const MAX_BITS: u32 = 30;

/// A single-feature uniform quantizer.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "SpecRepr", into = "SpecRepr")]
pub struct QuantizerSpec {
    feature_index: usize,
    min: f64,
    max: f64,
    bits: u32,
    step: f64,
}

#[derive(Serialize, Deserialize)]
struct SpecRepr {
    feature: usize,
    min: f64,
    max: f64,
    bits: u32,
}

impl TryFrom<SpecRepr> for QuantizerSpec {
    type Error = Error;

    fn try_from(r: SpecRepr) -> Result<Self> {
        QuantizerSpec::new(r.feature, r.min, r.max, r.bits)
    }
}

impl From<QuantizerSpec> for SpecRepr {
    fn from(s: QuantizerSpec) -> Self {
        SpecRepr { feature: s.feature_index, min: s.min, max: s.max, bits: s.bits }
    }
}

impl QuantizerSpec {
    pub fn new(feature_index: usize, min: f64, max: f64, bits: u32) -> Result<Self> {
        if !min.is_finite() || !max.is_finite() {
            return Err(Error::NonFinite);
        }
        if max <= min {
            return Err(Error::DegenerateRange { min, max });
        }
        if bits == 0 || bits > MAX_BITS {
            return Err(Error::InvalidArgument(format!("bits must be in 1..={MAX_BITS}, got {bits}")));
        }
        let step = (max - min) / f64::from(1u32 << bits);
        Ok(QuantizerSpec { feature_index, min, max, bits, step })
    }

    /// Same range, different depth.
    pub fn with_bits(&self, bits: u32) -> Result<Self> {
        Self::new(self.feature_index, self.min, self.max, bits)
    }

    pub fn feature_index(&self) -> usize {
        self.feature_index
    }

    pub fn min(&self) -> f64 {
        self.min
    }

    pub fn max(&self) -> f64 {
        self.max
    }

    pub fn bits(&self) -> u32 {
        self.bits
    }

    pub fn step(&self) -> f64 {
        self.step
    }

    pub fn levels(&self) -> usize {
        1usize << self.bits
    }

    /// Bin index of `x`, clamped to the valid range.
    pub fn bin_index(&self, x: f64) -> usize {
        let raw = ((x - self.min) / self.step).floor();
        if raw <= 0.0 {
            0
        } else {
            (raw as usize).min(self.levels() - 1)
        }
    }

    pub fn level(&self, index: usize) -> f64 {
        self.min + (index as f64 + 0.5) * self.step
    }

    /// Reconstruction levels in increasing order.
    pub fn reconstruction_levels(&self) -> Vec<f64> {
        (0..self.levels()).map(|i| self.level(i)).collect()
    }

    /// Quantize without the finiteness check. NaN maps to the first level.
    #[inline]
    pub fn quantize_unchecked(&self, x: f64) -> f64 {
        self.level(self.bin_index(x))
    }

    pub fn quantize(&self, x: f64) -> Result<f64> {
        if !x.is_finite() {
            return Err(Error::NonFinite);
        }
        Ok(self.quantize_unchecked(x))
    }
}

/// Fit a quantizer range to the extremes of `samples`.
pub fn fit_quantizer(samples: &[f64], bits: u32) -> Result<QuantizerSpec> {
    fit_feature(0, samples, bits)
}

pub(crate) fn fit_feature(feature_index: usize, samples: &[f64], bits: u32) -> Result<QuantizerSpec> {
    let (min, max) = column_range(samples)?;
    if max == min {
        return Err(Error::DegenerateRange { min, max });
    }
    QuantizerSpec::new(feature_index, min, max, bits)
}

fn column_range(samples: &[f64]) -> Result<(f64, f64)> {
    if samples.is_empty() {
        return Err(Error::EmptyColumn);
    }
    let mut min = f64::INFINITY;
    let mut max = f64::NEG_INFINITY;
    for &x in samples {
        if !x.is_finite() {
            return Err(Error::NonFinite);
        }
        min = min.min(x);
        max = max.max(x);
    }
    Ok((min, max))
}

/// Free-function form of [`QuantizerSpec::quantize`].
pub fn quantize(spec: &QuantizerSpec, x: f64) -> Result<f64> {
    spec.quantize(x)
}

/// Mean squared quantization error of `spec` over `samples`.
pub fn quantization_mse(spec: &QuantizerSpec, samples: &[f64]) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::EmptyColumn);
    }
    let mut acc = 0.0;
    for &x in samples {
        let e = x - spec.quantize(x)?;
        acc += e * e;
    }
    Ok(acc / samples.len() as f64)
}

/// One quantizer per input feature, in feature order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct QuantizerBank {
    specs: Vec<QuantizerSpec>,
}

impl QuantizerBank {
    pub fn new(specs: Vec<QuantizerSpec>) -> Result<Self> {
        for (i, s) in specs.iter().enumerate() {
            if s.feature_index != i {
                return Err(Error::InvalidArgument(format!(
                    "quantizer {i} is tagged with feature {}",
                    s.feature_index
                )));
            }
        }
        Ok(QuantizerBank { specs })
    }

    /// Fit one quantizer per column, ranges taken from the column extremes.
    pub fn fit<'a, I>(columns: I, bits: &[u32]) -> Result<Self>
    where
        I: IntoIterator<Item = &'a [f64]>,
    {
        let mut specs = Vec::with_capacity(bits.len());
        for (i, col) in columns.into_iter().enumerate() {
            let b = *bits.get(i).ok_or(Error::DimensionMismatch { expected: bits.len(), got: i + 1 })?;
            specs.push(fit_feature(i, col, b)?);
        }
        if specs.len() != bits.len() {
            return Err(Error::DimensionMismatch { expected: bits.len(), got: specs.len() });
        }
        Ok(QuantizerBank { specs })
    }

    pub fn specs(&self) -> &[QuantizerSpec] {
        &self.specs
    }

    pub fn len(&self) -> usize {
        self.specs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.specs.is_empty()
    }

    pub fn bits(&self) -> Vec<u32> {
        self.specs.iter().map(|s| s.bits).collect()
    }

    /// Keep every range, replace the depths.
    pub fn with_bits(&self, bits: &[u32]) -> Result<Self> {
        if bits.len() != self.specs.len() {
            return Err(Error::DimensionMismatch { expected: self.specs.len(), got: bits.len() });
        }
        let specs = self.specs.iter().zip(bits).map(|(s, &b)| s.with_bits(b)).collect::<Result<Vec<_>>>()?;
        Ok(QuantizerBank { specs })
    }

    /// Quantize a full feature vector in place.
    pub fn quantize_in_place(&self, x: &mut [f64]) -> Result<()> {
        if x.len() < self.specs.len() {
            return Err(Error::DimensionMismatch { expected: self.specs.len(), got: x.len() });
        }
        for (v, s) in x.iter_mut().zip(&self.specs) {
            *v = s.quantize(*v)?;
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let bank: QuantizerBank = serde_json::from_str(s)?;
        QuantizerBank::new(bank.specs)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn one_bit_unit_range() {
        let s = fit_quantizer(&[0.0, 1.0], 1).unwrap();
        assert_eq!(s.min(), 0.0);
        assert_eq!(s.max(), 1.0);
        assert_eq!(s.step(), 0.5);
        assert_eq!(s.reconstruction_levels(), vec![0.25, 0.75]);
        assert_eq!(s.quantize(0.1).unwrap(), 0.25);
        assert_eq!(s.quantize(7.0).unwrap(), 0.75);
        assert_eq!(s.quantize(-3.0).unwrap(), 0.25);
    }

    #[test]
    fn theta_range_step() {
        let s = fit_quantizer(&[-0.1, 0.1], 6).unwrap();
        assert!((s.step() - 0.003125).abs() < 1e-15);
        assert_eq!(s.levels(), 64);
    }

    #[test]
    fn degenerate_and_empty() {
        assert!(matches!(fit_quantizer(&[5.0], 4), Err(Error::DegenerateRange { .. })));
        assert!(matches!(fit_quantizer(&[], 4), Err(Error::EmptyColumn)));
        assert!(QuantizerSpec::new(0, 0.0, 1.0, 0).is_err());
    }

    #[test]
    fn three_bit_midpoint() {
        let s = QuantizerSpec::new(0, 0.0, 1.0, 3).unwrap();
        assert_eq!(s.bin_index(0.5), 4);
        assert_eq!(s.quantize(0.5).unwrap(), 0.5625);
        // boundary goes up
        assert_eq!(s.bin_index(0.25), 2);
        assert_eq!(s.bin_index(1.0), 7);
    }

    #[test]
    fn non_finite_rejected() {
        let s = QuantizerSpec::new(0, 0.0, 1.0, 3).unwrap();
        assert!(matches!(s.quantize(f64::NAN), Err(Error::NonFinite)));
        assert!(matches!(s.quantize(f64::INFINITY), Err(Error::NonFinite)));
    }

    #[test]
    fn mse_zero_on_levels() {
        let s = QuantizerSpec::new(0, -2.0, 2.0, 4).unwrap();
        let samples = s.reconstruction_levels();
        assert_eq!(quantization_mse(&s, &samples).unwrap(), 0.0);
        assert!(quantization_mse(&s, &[]).is_err());
    }

    #[test]
    fn mse_can_increase_on_adversarial_sets() {
        // Mass concentrated near a coarse level: a finer grid moves it further away.
        let mut samples = vec![0.0, 1.0];
        samples.extend(std::iter::repeat_n(0.74, 100));
        let coarse = fit_quantizer(&samples, 1).unwrap();
        let fine = coarse.with_bits(2).unwrap();
        assert!(quantization_mse(&fine, &samples).unwrap() > quantization_mse(&coarse, &samples).unwrap());
    }

    #[test]
    fn bank_json_round_trip() {
        let cols: Vec<Vec<f64>> = vec![vec![0.1, 2.0], vec![0.2, 0.5], vec![-1.0, 3.0]];
        let bank = QuantizerBank::fit(cols.iter().map(|c| c.as_slice()), &[10, 10, 6]).unwrap();
        let json = bank.to_json().unwrap();
        assert!(json.contains("\"feature\": 2"));
        let back = QuantizerBank::from_json(&json).unwrap();
        assert_eq!(back, bank);
        assert!(QuantizerBank::from_json(r#"[{"feature":0,"min":1.0,"max":1.0,"bits":3}]"#).is_err());
        assert!(QuantizerBank::from_json(r#"[{"feature":1,"min":0.0,"max":1.0,"bits":3}]"#).is_err());
    }

    #[test]
    fn bank_rebits_and_quantizes() {
        let cols: Vec<Vec<f64>> = vec![vec![0.0, 1.0], vec![0.0, 8.0]];
        let bank = QuantizerBank::fit(cols.iter().map(|c| c.as_slice()), &[1, 1]).unwrap();
        let b3 = bank.with_bits(&[3, 2]).unwrap();
        assert_eq!(b3.bits(), vec![3, 2]);
        let mut x = [0.5, 5.0];
        b3.quantize_in_place(&mut x).unwrap();
        assert_eq!(x, [0.5625, 5.0]);
        assert!(bank.with_bits(&[3]).is_err());
    }

    proptest! {
        #[test]
        fn idempotent_bounded_monotone(
            min in -100.0f64..100.0,
            width in 1e-3f64..50.0,
            bits in 1u32..12,
            a in -200.0f64..200.0,
            b in -200.0f64..200.0,
        ) {
            let s = QuantizerSpec::new(0, min, min + width, bits).unwrap();
            let qa = s.quantize(a).unwrap();
            prop_assert_eq!(s.quantize(qa).unwrap(), qa);
            if a >= s.min() && a <= s.max() {
                prop_assert!((a - qa).abs() <= s.step() / 2.0 * (1.0 + 1e-9));
            }
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            prop_assert!(s.quantize(lo).unwrap() <= s.quantize(hi).unwrap());
        }
    }
}
