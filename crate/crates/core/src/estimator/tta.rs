use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::dist::{to_canonical, HuberParams, MomentForm};
use crate::error::{check_dim, domain, Error, Result};
use crate::fusion::{fuse, FusionProblem};
use crate::spd::SpdMatrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TtaMode {
    Probabilistic,
    Mean,
}

/// `y = M z + o`, taking mirrored-frame points `z` to the original frame.
#[derive(Debug, Clone)]
pub struct MirrorMap {
    pub linear: DMatrix<f64>,
    pub offset: DVector<f64>,
}

impl MirrorMap {
    /// Reflection of coordinate `axis` about `x_axis = center`.
    pub fn reflection(dim: usize, axis: usize, center: f64) -> Result<Self> {
        if axis >= dim {
            return domain(format!("axis {axis} out of range for dimension {dim}"));
        }
        let mut linear = DMatrix::identity(dim, dim);
        linear[(axis, axis)] = -1.0;
        let mut offset = DVector::zeros(dim);
        offset[axis] = 2.0 * center;
        Ok(MirrorMap { linear, offset })
    }

    /// The mirrored-frame distribution expressed in the original frame:
    /// `Λ_y = M⁻ᵀ Λ M⁻¹`, `μ_y = M μ + o`.
    pub fn transform_params(&self, p: &HuberParams) -> Result<HuberParams> {
        check_dim(p.dim(), self.linear.nrows())?;
        check_dim(p.dim(), self.linear.ncols())?;
        check_dim(p.dim(), self.offset.len())?;
        let m_inv = self
            .linear
            .clone()
            .try_inverse()
            .ok_or_else(|| Error::Domain("mirror map is singular".into()))?;
        if !m_inv.iter().all(|v| v.is_finite()) {
            return domain("mirror map is singular");
        }
        let lambda = p.a().square();
        let lambda_y = m_inv.transpose() * lambda.matrix() * &m_inv;
        let lambda_y = (&lambda_y + lambda_y.transpose()) * 0.5;
        let mu_y = &self.linear * p.mean() + &self.offset;
        to_canonical(&MomentForm::new(mu_y, SpdMatrix::new(lambda_y)?, p.delta())?)
    }
}

/// Fuses a prediction with a prediction made in a mirrored frame.
pub fn tta_fuse(
    original: &HuberParams,
    mirrored: &HuberParams,
    map: &MirrorMap,
    mode: TtaMode,
) -> Result<DVector<f64>> {
    let back = map.transform_params(mirrored)?;
    match mode {
        TtaMode::Mean => Ok((original.mean() + back.mean()) * 0.5),
        TtaMode::Probabilistic => Ok(fuse(&FusionProblem::new(vec![original.clone(), back])?)?.y_star),
    }
}
