//! Gaussianity checks for sampled margins: QQ pairs against a fitted
//! normal and a histogram with the fitted density per bin.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DiagnosticsError {
    #[error("quantile level {0} outside (0, 1)")]
    Domain(f64),
    #[error("sample variance is zero")]
    DegenerateVariance,
    #[error("need at least 2 samples, got {0}")]
    TooFewSamples(usize),
    #[error("samples contain a non-finite value")]
    NonFinite,
}

/// Standard normal CDF.
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x / std::f64::consts::SQRT_2)
}

pub fn normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

/// `Φ⁻¹(q)`: Acklam's rational approximation, then one Halley step against
/// the erfc-based CDF.
pub fn inverse_normal_cdf(q: f64) -> Result<f64, DiagnosticsError> {
    if !(q > 0.0 && q < 1.0) {
        return Err(DiagnosticsError::Domain(q));
    }
    const A: [f64; 6] = [
        -3.969683028665376e1,
        2.209460984245205e2,
        -2.759285104469687e2,
        1.383577518672690e2,
        -3.066479806614716e1,
        2.506628277459239,
    ];
    const B: [f64; 5] =
        [-5.447609879822406e1, 1.615858368580409e2, -1.556989798598866e2, 6.680131188771972e1, -1.328068155288572e1];
    const C: [f64; 6] = [
        -7.784894002430293e-3,
        -3.223964580411365e-1,
        -2.400758277161838,
        -2.549732539343734,
        4.374664141464968,
        2.938163982698783,
    ];
    const D: [f64; 4] = [7.784695709041462e-3, 3.224671290700398e-1, 2.445134137142996, 3.754408661907416];
    const LOW: f64 = 0.02425;

    let tail = |p: f64| {
        let r = (-2.0 * p.ln()).sqrt();
        (((((C[0] * r + C[1]) * r + C[2]) * r + C[3]) * r + C[4]) * r + C[5])
            / ((((D[0] * r + D[1]) * r + D[2]) * r + D[3]) * r + 1.0)
    };
    let x = if q < LOW {
        tail(q)
    } else if q > 1.0 - LOW {
        -tail(1.0 - q)
    } else {
        let s = q - 0.5;
        let r = s * s;
        (((((A[0] * r + A[1]) * r + A[2]) * r + A[3]) * r + A[4]) * r + A[5]) * s
            / (((((B[0] * r + B[1]) * r + B[2]) * r + B[3]) * r + B[4]) * r + 1.0)
    };
    // Residual in whichever tail is smaller keeps precision for q near 1.
    let e = if q > 0.5 { (1.0 - q) - 0.5 * libm::erfc(x / std::f64::consts::SQRT_2) } else { normal_cdf(x) - q };
    let u = e * (2.0 * std::f64::consts::PI).sqrt() * (0.5 * x * x).exp();
    Ok(x - u / (1.0 + 0.5 * x * u))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QQData {
    /// `(theoretical, observed)`, sorted by the theoretical quantile.
    pub pairs: Vec<(f64, f64)>,
    pub slope: f64,
    pub intercept: f64,
    pub r_squared: f64,
    pub mean: f64,
    pub std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistogramBin {
    pub left: f64,
    pub right: f64,
    pub count: usize,
    /// Observed density `count / (n · width)`.
    pub density: f64,
    /// Fitted normal density at the bin center.
    pub normal_density: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarginDiagnosis {
    pub qq: QQData,
    pub histogram: Vec<HistogramBin>,
}

fn mean_std(samples: &[f64]) -> (f64, f64) {
    let n = samples.len() as f64;
    let mean = samples[0] + samples.iter().map(|v| v - samples[0]).sum::<f64>() / n;
    let var = samples.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

fn check(samples: &[f64]) -> Result<(f64, f64), DiagnosticsError> {
    if samples.len() < 2 {
        return Err(DiagnosticsError::TooFewSamples(samples.len()));
    }
    if samples.iter().any(|v| !v.is_finite()) {
        return Err(DiagnosticsError::NonFinite);
    }
    let (mean, std) = mean_std(samples);
    if std == 0.0 {
        return Err(DiagnosticsError::DegenerateVariance);
    }
    Ok((mean, std))
}

/// QQ pairs at Hazen positions `(r − 0.5)/K`, with theoretical quantiles
/// mapped through the fitted normal, plus a least-squares line.
pub fn qq_data(samples: &[f64]) -> Result<QQData, DiagnosticsError> {
    let (mean, std) = check(samples)?;
    let k = samples.len();
    let mut sorted = samples.to_vec();
    sorted.sort_by(f64::total_cmp);
    let pairs: Vec<(f64, f64)> = sorted
        .iter()
        .enumerate()
        .map(|(r, &obs)| Ok((inverse_normal_cdf((r as f64 + 0.5) / k as f64)? * std + mean, obs)))
        .collect::<Result<_, DiagnosticsError>>()?;

    let n = k as f64;
    let mx = pairs.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pairs.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = pairs.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = pairs.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let syy: f64 = pairs.iter().map(|p| (p.1 - my).powi(2)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let r_squared = (sxy * sxy / (sxx * syy)).clamp(0.0, 1.0);
    Ok(QQData { pairs, slope, intercept, r_squared, mean, std })
}

/// Histogram with Freedman–Diaconis bin width; falls back to Sturges' bin
/// count when the interquartile range is zero.
pub fn histogram(samples: &[f64]) -> Result<Vec<HistogramBin>, DiagnosticsError> {
    let (mean, std) = check(samples)?;
    let mut sorted = samples.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    let (lo, hi) = (sorted[0], sorted[n - 1]);
    let iqr = quantile(&sorted, 0.75) - quantile(&sorted, 0.25);
    let bins = if iqr > 0.0 {
        let width = 2.0 * iqr / (n as f64).cbrt();
        (((hi - lo) / width).ceil() as usize).max(1)
    } else {
        ((n as f64).log2().ceil() as usize + 1).max(1)
    };
    let width = (hi - lo) / bins as f64;
    let mut counts = vec![0usize; bins];
    for &v in &sorted {
        let b = if width > 0.0 { (((v - lo) / width) as usize).min(bins - 1) } else { 0 };
        counts[b] += 1;
    }
    Ok(counts
        .into_iter()
        .enumerate()
        .map(|(b, count)| {
            let left = lo + b as f64 * width;
            let right = if b + 1 == bins { hi } else { lo + (b + 1) as f64 * width };
            let center = 0.5 * (left + right);
            HistogramBin {
                left,
                right,
                count,
                density: if width > 0.0 { count as f64 / (n as f64 * width) } else { 0.0 },
                normal_density: normal_pdf((center - mean) / std) / std,
            }
        })
        .collect())
}

/// Linear-interpolated quantile of sorted data.
fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

pub fn diagnose_margin(samples: &[f64]) -> Result<MarginDiagnosis, DiagnosticsError> {
    Ok(MarginDiagnosis { qq: qq_data(samples)?, histogram: histogram(samples)? })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn median_and_domain() {
        assert_eq!(inverse_normal_cdf(0.5).unwrap(), 0.0);
        for q in [0.0, 1.0, -0.1, 1.5, f64::NAN] {
            assert!(inverse_normal_cdf(q).is_err());
        }
    }

    #[test]
    fn round_trips_through_cdf() {
        for q in [1e-10, 1e-4, 0.01, 0.2, 0.7, 0.99, 1.0 - 1e-6] {
            let x = inverse_normal_cdf(q).unwrap();
            assert!((normal_cdf(x) - q).abs() <= 1e-12 * q.max(1e-3), "{q}");
        }
    }

    #[test]
    fn constant_samples_are_degenerate() {
        assert_eq!(diagnose_margin(&[0.3; 10]), Err(DiagnosticsError::DegenerateVariance));
        assert_eq!(qq_data(&[1.0]), Err(DiagnosticsError::TooFewSamples(1)));
    }

    #[test]
    fn histogram_counts_everything() {
        let s: Vec<f64> = (0..97).map(|i| ((i * 37) % 97) as f64 / 7.0).collect();
        let h = histogram(&s).unwrap();
        assert_eq!(h.iter().map(|b| b.count).sum::<usize>(), 97);
        let area: f64 = h.iter().map(|b| b.density * (b.right - b.left)).sum();
        assert!((area - 1.0).abs() < 1e-12);
    }
}
