//! Log2-magnitude histograms, range-window coverage, and quantization error.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bundle::{quantize_values, BundleError, QuantReport, Tensor};
use crate::format::{range_window, Codec, FormatSpec};

#[derive(Debug, Error)]
pub enum AnalysisError {
    #[error("non-finite value at index {0}")]
    NonFiniteInput(usize),
    #[error(transparent)]
    Bundle(#[from] BundleError),
}

/// `floor(log2|v|)` of a finite nonzero f32, from its exponent bits.
pub fn log2_bin(v: f32) -> i32 {
    let bits = v.to_bits() & 0x7FFF_FFFF;
    let biased = (bits >> 23) as i32;
    if biased == 0 {
        -149 + (31 - bits.leading_zeros() as i32)
    } else {
        biased - 127
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorStats {
    pub max_mag: f32,
    /// `None` when every element is zero.
    pub min_nonzero_mag: Option<f32>,
    pub zero_count: u64,
    pub negative_count: u64,
    pub total_count: u64,
    /// Bin `k` counts nonzero elements with `2^k <= |v| < 2^(k+1)`.
    pub log2_hist: BTreeMap<i32, u64>,
}

impl Default for TensorStats {
    fn default() -> Self {
        TensorStats {
            max_mag: 0.0,
            min_nonzero_mag: None,
            zero_count: 0,
            negative_count: 0,
            total_count: 0,
            log2_hist: BTreeMap::new(),
        }
    }
}

impl TensorStats {
    pub fn from_values(values: &[f32]) -> Result<Self, AnalysisError> {
        let mut stats = TensorStats::default();
        for (i, &v) in values.iter().enumerate() {
            if !v.is_finite() {
                return Err(AnalysisError::NonFiniteInput(i));
            }
            stats.push(v);
        }
        Ok(stats)
    }

    fn push(&mut self, v: f32) {
        self.total_count += 1;
        if v < 0.0 {
            self.negative_count += 1;
        }
        let mag = v.abs();
        if mag == 0.0 {
            self.zero_count += 1;
            return;
        }
        self.max_mag = self.max_mag.max(mag);
        self.min_nonzero_mag = Some(self.min_nonzero_mag.map_or(mag, |m| m.min(mag)));
        *self.log2_hist.entry(log2_bin(mag)).or_insert(0) += 1;
    }

    /// Combines statistics of two disjoint element sets.
    pub fn merge(&self, other: &TensorStats) -> TensorStats {
        let mut hist = self.log2_hist.clone();
        for (&k, &c) in &other.log2_hist {
            *hist.entry(k).or_insert(0) += c;
        }
        TensorStats {
            max_mag: self.max_mag.max(other.max_mag),
            min_nonzero_mag: match (self.min_nonzero_mag, other.min_nonzero_mag) {
                (Some(a), Some(b)) => Some(a.min(b)),
                (a, b) => a.or(b),
            },
            zero_count: self.zero_count + other.zero_count,
            negative_count: self.negative_count + other.negative_count,
            total_count: self.total_count + other.total_count,
            log2_hist: hist,
        }
    }

    pub fn nonzero_count(&self) -> u64 {
        self.total_count - self.zero_count
    }

    pub fn is_nonnegative(&self) -> bool {
        self.negative_count == 0
    }
}

pub fn tensor_stats(t: &Tensor) -> Result<TensorStats, AnalysisError> {
    TensorStats::from_values(t.as_fp32()?)
}

/// Where the nonzero elements of a tensor fall relative to a range window.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Coverage {
    pub below_window: u64,
    pub in_denorm: u64,
    pub in_norm: u64,
    pub above_window: u64,
    /// Reported separately; not part of the fraction denominators.
    pub zero_count: u64,
}

impl Coverage {
    pub fn nonzero_count(&self) -> u64 {
        self.below_window + self.in_denorm + self.in_norm + self.above_window
    }

    fn frac(&self, count: u64) -> f64 {
        match self.nonzero_count() {
            0 => 0.0,
            n => count as f64 / n as f64,
        }
    }

    pub fn below_window_frac(&self) -> f64 {
        self.frac(self.below_window)
    }

    pub fn in_denorm_frac(&self) -> f64 {
        self.frac(self.in_denorm)
    }

    pub fn in_norm_frac(&self) -> f64 {
        self.frac(self.in_norm)
    }

    pub fn above_window_frac(&self) -> f64 {
        self.frac(self.above_window)
    }
}

/// Coverage from the histogram alone.
///
/// The window edges `min_subnormal` and `min_normal` are powers of two, so they
/// coincide with bin edges and the below/denorm/norm split is exact. The only
/// ambiguous bin is the one holding `max`; it counts as above the window only
/// when the whole bin lies above `max`, which with a power-of-two bin never
/// happens for that bin, so its elements count as in-norm.
pub fn coverage(stats: &TensorStats, fmt: FormatSpec) -> Coverage {
    let window = range_window(fmt);
    let z = i32::from(fmt.fraction_bits());
    let min_normal_exp = 1 - fmt.bias();
    let min_sub_exp = min_normal_exp - z;
    let mut cov = Coverage {
        below_window: 0,
        in_denorm: 0,
        in_norm: 0,
        above_window: 0,
        zero_count: stats.zero_count,
    };
    for (&k, &count) in &stats.log2_hist {
        let lower_edge = 2f64.powi(k);
        if k < min_sub_exp {
            cov.below_window += count;
        } else if k < min_normal_exp {
            cov.in_denorm += count;
        } else if lower_edge > window.max {
            cov.above_window += count;
        } else {
            cov.in_norm += count;
        }
    }
    cov
}

/// Coverage by exact comparison of every element against the window.
pub fn coverage_exact(values: &[f32], fmt: FormatSpec) -> Coverage {
    let window = range_window(fmt);
    let mut cov = Coverage {
        below_window: 0,
        in_denorm: 0,
        in_norm: 0,
        above_window: 0,
        zero_count: 0,
    };
    for &v in values {
        let mag = f64::from(v.abs());
        if mag == 0.0 {
            cov.zero_count += 1;
        } else if mag < window.min_subnormal {
            cov.below_window += 1;
        } else if mag < window.min_normal {
            cov.in_denorm += 1;
        } else if mag <= window.max {
            cov.in_norm += 1;
        } else {
            cov.above_window += 1;
        }
    }
    cov
}

/// Error of `dequantize(quantize(t))` against `t`.
pub fn error_metrics(t: &Tensor, fmt: FormatSpec) -> Result<QuantReport, AnalysisError> {
    let values = t.as_fp32()?;
    error_metrics_values(values, fmt)
}

pub fn error_metrics_values(values: &[f32], fmt: FormatSpec) -> Result<QuantReport, AnalysisError> {
    if let Some(i) = values.iter().position(|v| !v.is_finite()) {
        return Err(AnalysisError::NonFiniteInput(i));
    }
    let (_, report) = quantize_values(values, &Codec::new(fmt)).map_err(BundleError::from)?;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fmt(x: u8, y: u8, z: u8, b: i32) -> FormatSpec {
        FormatSpec::from_fields(x, y, z, b).unwrap()
    }

    #[test]
    fn stats_hand_counted() {
        let s = TensorStats::from_values(&[1.0, -2.0, 0.0]).unwrap();
        assert_eq!(s.max_mag, 2.0);
        assert_eq!(s.min_nonzero_mag, Some(1.0));
        assert_eq!(s.zero_count, 1);
        assert_eq!(s.negative_count, 1);
        assert_eq!(s.total_count, 3);
        assert_eq!(s.log2_hist, BTreeMap::from([(0, 1), (1, 1)]));
    }

    #[test]
    fn stats_single_bin() {
        let s = TensorStats::from_values(&[0.75; 10]).unwrap();
        assert_eq!(s.log2_hist, BTreeMap::from([(-1, 10)]));
    }

    #[test]
    fn stats_reject_nan() {
        assert!(matches!(
            TensorStats::from_values(&[1.0, f32::INFINITY]),
            Err(AnalysisError::NonFiniteInput(1))
        ));
    }

    #[test]
    fn log2_bin_subnormal() {
        assert_eq!(log2_bin(f32::from_bits(1)), -149);
        assert_eq!(log2_bin(f32::MIN_POSITIVE), -126);
        assert_eq!(log2_bin(-3.0), 1);
    }

    #[test]
    fn coverage_examples() {
        let values = [0.001f32, 0.5, 100.0];
        let s = TensorStats::from_values(&values).unwrap();
        let c = coverage(&s, fmt(1, 4, 3, 7));
        assert_eq!(c.below_window, 1);
        assert_eq!(c.below_window_frac(), 1.0 / 3.0);
        assert_eq!(c, coverage_exact(&values, fmt(1, 4, 3, 7)));
    }

    #[test]
    fn coverage_of_covering_window() {
        let s = TensorStats::from_values(&[0.01, 0.2, -1.5, 3.0]).unwrap();
        let c = coverage(&s, fmt(1, 4, 3, 7));
        assert_eq!(c.below_window + c.above_window, 0);
    }

    #[test]
    fn coverage_above_window() {
        let values = [1.0f32, 500.0, 1000.0];
        let f = fmt(1, 4, 3, 7);
        // 500 shares the bin [256, 512) with the max 480, 1000 does not
        let c = coverage(&TensorStats::from_values(&values).unwrap(), f);
        assert_eq!((c.in_norm, c.above_window), (2, 1));
        let exact = coverage_exact(&values, f);
        assert_eq!((exact.in_norm, exact.above_window), (1, 2));
    }

    #[test]
    fn metrics_on_tie() {
        let r = error_metrics_values(&[1.0625], fmt(1, 4, 3, 7)).unwrap();
        assert_eq!(r.max_abs_err, 0.0625);
    }

    #[test]
    fn metrics_on_representable() {
        let r = error_metrics_values(&[1.0, 0.5, -480.0], fmt(1, 4, 3, 7)).unwrap();
        assert_eq!(r.mse, 0.0);
        assert!(r.sqnr_db.is_infinite() && r.sqnr_db > 0.0);
    }
}
