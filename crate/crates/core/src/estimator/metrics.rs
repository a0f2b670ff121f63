use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::dist::{variance_factor, HuberParams};
use crate::error::{check_dim, domain, Result};
use crate::io::CalibrationBin;

/// Default PCKh threshold as a fraction of the normalization scale.
pub const PCKH_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LandmarkMetrics {
    pub nme: f64,
    pub pckh: f64,
}

/// NME and PCKh over all samples and keypoints.
///
/// `predictions[i]` and `targets[i]` hold `K·d` keypoint-major coordinates;
/// `scale[i]` normalizes every keypoint error of sample `i`.
pub fn evaluate_metrics(
    predictions: &[Vec<f64>],
    targets: &[Vec<f64>],
    scale: &[f64],
    dim: usize,
    threshold: f64,
) -> Result<LandmarkMetrics> {
    check_dim(predictions.len(), targets.len())?;
    check_dim(predictions.len(), scale.len())?;
    if predictions.is_empty() || dim == 0 {
        return domain("no predictions to evaluate");
    }
    let mut sum = 0.0;
    let mut hits = 0usize;
    let mut count = 0usize;
    for ((p, t), &s) in predictions.iter().zip(targets).zip(scale) {
        check_dim(t.len(), p.len())?;
        if !(s > 0.0) || p.len() % dim != 0 {
            return domain("normalization scale must be positive and rows whole keypoints");
        }
        for (pk, tk) in p.chunks(dim).zip(t.chunks(dim)) {
            let e = pk.iter().zip(tk).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            sum += e / s;
            if e <= threshold * s {
                hits += 1;
            }
            count += 1;
        }
    }
    Ok(LandmarkMetrics {
        nme: sum / count as f64,
        pckh: hits as f64 / count as f64,
    })
}

/// `√(α(δ,d)·tr(Λ⁻¹))` with `Λ = A²`: the root of the exact expected squared error.
pub fn expected_error(p: &HuberParams) -> Result<f64> {
    let alpha = variance_factor(p.dim(), p.delta())?;
    let tr = p.a().eigen().values.iter().map(|l| 1.0 / (l * l)).sum::<f64>();
    Ok((alpha * tr).sqrt())
}

/// Sorts by expected error and groups consecutive runs of `bin_size` samples.
///
/// Each bin reports the root mean square of its expected errors and of its
/// observed error norms, so a calibrated model lands on the identity line.
/// The last bin takes any remainder.
pub fn calibration_bins(expected: &[f64], error_norms: &[f64], bin_size: usize) -> Result<Vec<CalibrationBin>> {
    check_dim(expected.len(), error_norms.len())?;
    if expected.is_empty() {
        return domain("calibration needs at least one sample");
    }
    if bin_size == 0 {
        return domain("bin_size must be at least 1");
    }
    let mut order: Vec<usize> = (0..expected.len()).collect();
    order.sort_by(|&a, &b| expected[a].total_cmp(&expected[b]).then(a.cmp(&b)));
    let n_bins = (expected.len() / bin_size).max(1);
    let mut bins = Vec::with_capacity(n_bins);
    for b in 0..n_bins {
        let lo = b * bin_size;
        let hi = if b + 1 == n_bins { expected.len() } else { lo + bin_size };
        let idx = &order[lo..hi];
        let rms = |v: &[f64]| (idx.iter().map(|&i| v[i] * v[i]).sum::<f64>() / idx.len() as f64).sqrt();
        bins.push(CalibrationBin {
            expected: rms(expected),
            empirical: rms(error_norms),
            count: idx.len(),
        });
    }
    Ok(bins)
}

/// Calibration curve for Huber predictions against observed error vectors.
pub fn calibration_curve(
    predicted: &[HuberParams],
    errors: &[DVector<f64>],
    bin_size: usize,
) -> Result<Vec<CalibrationBin>> {
    check_dim(predicted.len(), errors.len())?;
    let expected = predicted.iter().map(expected_error).collect::<Result<Vec<_>>>()?;
    let norms: Vec<f64> = errors.iter().map(|e| e.norm()).collect();
    calibration_bins(&expected, &norms, bin_size)
}

pub fn median(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}
