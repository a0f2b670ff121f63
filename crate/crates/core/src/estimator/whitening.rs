use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::dist::{to_canonical, HuberParams, MomentForm};
use crate::error::{check_dim, domain, Error, Result};
use crate::spd::{matrix_to_rows, SpdMatrix};

/// Per-keypoint affine map `y ↦ L(y − s)` with `L = Σ^{-1/2}` symmetric.
#[derive(Debug, Clone)]
pub struct WhiteningTransform {
    dim: usize,
    shift: Vec<DVector<f64>>,
    linear: Vec<SpdMatrix>,
    inverse: Vec<DMatrix<f64>>,
}

#[derive(Serialize)]
struct KeypointJson {
    shift: Vec<f64>,
    linear: Vec<Vec<f64>>,
}

impl Serialize for WhiteningTransform {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        let blocks: Vec<KeypointJson> = self
            .shift
            .iter()
            .zip(&self.linear)
            .map(|(sh, l)| KeypointJson {
                shift: sh.as_slice().to_vec(),
                linear: matrix_to_rows(l.matrix()),
            })
            .collect();
        blocks.serialize(s)
    }
}

impl WhiteningTransform {
    /// Fits on rows of `K·d` keypoint-major targets.
    pub fn fit(targets: &[Vec<f64>], keypoints: usize, dim: usize) -> Result<Self> {
        let n = targets.len();
        if n < dim + 1 {
            return Err(Error::Degenerate(format!("need at least {} samples, got {n}", dim + 1)));
        }
        for t in targets {
            check_dim(keypoints * dim, t.len())?;
        }
        let mut shift = Vec::with_capacity(keypoints);
        let mut linear = Vec::with_capacity(keypoints);
        let mut inverse = Vec::with_capacity(keypoints);
        for k in 0..keypoints {
            let block = |t: &Vec<f64>| DVector::from_column_slice(&t[k * dim..(k + 1) * dim]);
            let mean = targets.iter().map(block).fold(DVector::zeros(dim), |a, b| a + b) / n as f64;
            let mut cov = DMatrix::zeros(dim, dim);
            for t in targets {
                let c = block(t) - &mean;
                cov += &c * c.transpose();
            }
            cov /= n as f64;
            let scale = cov.trace().abs().max(f64::MIN_POSITIVE);
            let cov = SpdMatrix::new(cov)
                .map_err(|_| Error::Degenerate(format!("keypoint {k}: covariance is singular")))?;
            if cov.min_eigenvalue() <= 1e-12 * scale {
                return Err(Error::Degenerate(format!("keypoint {k}: covariance is singular")));
            }
            inverse.push(cov.sqrt().matrix().clone());
            linear.push(cov.map_spectrum(|l| 1.0 / l.sqrt())?);
            shift.push(mean);
        }
        Ok(WhiteningTransform { dim, shift, linear, inverse })
    }

    pub fn keypoints(&self) -> usize {
        self.shift.len()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn linear(&self, k: usize) -> &SpdMatrix {
        &self.linear[k]
    }

    pub fn shift(&self, k: usize) -> &DVector<f64> {
        &self.shift[k]
    }

    pub fn apply(&self, target: &[f64]) -> Result<Vec<f64>> {
        self.map(target, |k, y| self.linear[k].matrix() * (y - &self.shift[k]))
    }

    pub fn invert(&self, whitened: &[f64]) -> Result<Vec<f64>> {
        self.map(whitened, |k, y| &self.inverse[k] * y + &self.shift[k])
    }

    /// `L_k⁻¹ y + s_k` for one keypoint.
    pub fn invert_block(&self, k: usize, whitened: &DVector<f64>) -> DVector<f64> {
        &self.inverse[k] * whitened + &self.shift[k]
    }

    fn map(&self, v: &[f64], f: impl Fn(usize, DVector<f64>) -> DVector<f64>) -> Result<Vec<f64>> {
        let d = self.dim;
        check_dim(self.keypoints() * d, v.len())?;
        let mut out = Vec::with_capacity(v.len());
        for k in 0..self.keypoints() {
            out.extend_from_slice(f(k, DVector::from_column_slice(&v[k * d..(k + 1) * d])).as_slice());
        }
        Ok(out)
    }

    /// `ln|L_k|`, the log-Jacobian of the map for keypoint `k`.
    pub fn log_det(&self, k: usize) -> f64 {
        self.linear[k].log_det()
    }

    /// Moves a whitened-frame distribution back to the original frame:
    /// `Λ = L A² L`, `μ = s + L⁻¹ μ_w`.
    pub fn unwhiten_params(&self, k: usize, whitened: &HuberParams) -> Result<HuberParams> {
        if k >= self.keypoints() {
            return domain(format!("keypoint {k} out of range"));
        }
        check_dim(self.dim, whitened.dim())?;
        let l = self.linear[k].matrix();
        let a2 = whitened.a().square();
        let lambda = SpdMatrix::new(l * a2.matrix() * l)?;
        let mu = &self.inverse[k] * whitened.mean() + &self.shift[k];
        to_canonical(&MomentForm::new(mu, lambda, whitened.delta())?)
    }
}
