//! Standard normal helpers and Kolmogorov–Smirnov distances.

use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};

pub fn normal_cdf(x: f64) -> f64 {
    Normal::standard().cdf(x)
}

/// Inverse of [`normal_cdf`] on `(0, 1)`.
pub fn normal_quantile(prob: f64) -> Result<f64> {
    if !(prob > 0.0 && prob < 1.0) {
        return Err(Error::InvalidArgument(format!("probability {prob} outside (0, 1)")));
    }
    Ok(Normal::standard().inverse_cdf(prob))
}

/// Two-sided critical value `z_{1−α/2}` for a confidence level `1 − α`.
pub fn two_sided_z(level: f64) -> Result<f64> {
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::InvalidArgument(format!("level {level} outside (0, 1)")));
    }
    normal_quantile(1.0 - (1.0 - level) / 2.0)
}

#[derive(Debug, Clone, Copy)]
pub enum KsReference<'a> {
    StandardNormal,
    Sample(&'a [f64]),
}

fn sorted(values: &[f64]) -> Vec<f64> {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    v
}

/// Sup-distance between the empirical CDF of `a` and the reference CDF.
pub fn ks_distance(a: &[f64], reference: KsReference<'_>) -> Result<f64> {
    if a.is_empty() {
        return Err(Error::EmptySample);
    }
    let a = sorted(a);
    match reference {
        KsReference::StandardNormal => {
            let n = a.len() as f64;
            let mut d: f64 = 0.0;
            for (i, &x) in a.iter().enumerate() {
                let cdf = normal_cdf(x);
                d = d.max((i + 1) as f64 / n - cdf).max(cdf - i as f64 / n);
            }
            Ok(d.min(1.0))
        }
        KsReference::Sample(b) => {
            if b.is_empty() {
                return Err(Error::EmptySample);
            }
            let b = sorted(b);
            let (na, nb) = (a.len() as f64, b.len() as f64);
            let (mut i, mut j) = (0, 0);
            let mut d: f64 = 0.0;
            while i < a.len() && j < b.len() {
                let x = a[i].min(b[j]);
                while i < a.len() && a[i] <= x {
                    i += 1;
                }
                while j < b.len() && b[j] <= x {
                    j += 1;
                }
                d = d.max((i as f64 / na - j as f64 / nb).abs());
            }
            Ok(d)
        }
    }
}

/// Sample quantile with linear interpolation between order statistics.
pub fn quantile(values: &[f64], prob: f64) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::EmptySample);
    }
    let v = sorted(values);
    let h = prob.clamp(0.0, 1.0) * (v.len() - 1) as f64;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    Ok(v[lo] + (h - lo as f64) * (v[hi] - v[lo]))
}

/// Mean and unbiased variance.
pub fn mean_variance(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var)
}
