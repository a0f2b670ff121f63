//! Probabilistic regression losses over `(ν, A)` and over raw head outputs.
//!
//! Every family has the shape `−ln|A| + φ(‖A y − ν‖)` (plus an optional
//! normalizing constant):
//!
//! | family      | φ(r)                       |
//! |-------------|----------------------------|
//! | huber       | `h_δ(r)`                   |
//! | gauss       | `r²/2`                     |
//! | laplace     | `r`                        |
//! | charbonnier | `√(r² + 1) − 1`            |
//!
//! Gradients with respect to `A` are reported as the symmetric part, since
//! `A` ranges over symmetric matrices.

use std::collections::HashMap;
use std::sync::{Mutex, OnceLock};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use libm::lgamma as ln_gamma;

use crate::dist::{self, huber, ln_sphere_area, log_normalizing_constant};
use crate::error::{check_dim, domain, Error, Result};
use crate::quadrature;
use crate::spd::{build_spd, sym_to_vec, tri_len, RemapConfig, SpdMatrix, SymMatrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Family {
    Huber,
    Gauss,
    Laplace,
    Charbonnier,
}

impl Family {
    pub const ALL: [Family; 4] = [Family::Huber, Family::Gauss, Family::Laplace, Family::Charbonnier];

    pub fn name(self) -> &'static str {
        match self {
            Family::Huber => "huber",
            Family::Gauss => "gauss",
            Family::Laplace => "laplace",
            Family::Charbonnier => "charbonnier",
        }
    }

    /// `φ(r)`.
    pub fn data_term(self, r: f64, delta: f64) -> f64 {
        match self {
            Family::Huber => huber(r, delta),
            Family::Gauss => 0.5 * r * r,
            Family::Laplace => r,
            Family::Charbonnier => (r * r + 1.0).sqrt() - 1.0,
        }
    }

    /// `φ'(r)/r`, the weight multiplying the residual in every gradient.
    ///
    /// At `r = 0` the laplace family uses the zero subgradient.
    pub fn data_weight(self, r: f64, delta: f64) -> f64 {
        match self {
            Family::Huber => {
                if r <= delta {
                    1.0
                } else {
                    delta / r
                }
            }
            Family::Gauss => 1.0,
            Family::Laplace => {
                if r > 0.0 {
                    1.0 / r
                } else {
                    0.0
                }
            }
            Family::Charbonnier => 1.0 / (r * r + 1.0).sqrt(),
        }
    }

    /// `ln ∫_{ℝ^d} exp(−φ(‖z‖)) dz`.
    pub fn log_normalizer(self, d: usize, delta: f64) -> Result<f64> {
        if d == 0 {
            return domain("dimension must be at least 1");
        }
        Ok(match self {
            Family::Huber => log_normalizing_constant(d, delta)?,
            Family::Gauss => 0.5 * d as f64 * (2.0 * std::f64::consts::PI).ln(),
            Family::Laplace => ln_sphere_area(d) + ln_gamma(d as f64),
            Family::Charbonnier => ln_sphere_area(d) + charbonnier_ln_moment(d as u32 - 1),
        })
    }

    /// Second-moment factor: `E[(y−μ)(y−μ)ᵀ] = factor·(AᵀA)⁻¹`.
    pub fn variance_factor(self, d: usize, delta: f64) -> Result<f64> {
        if d == 0 {
            return domain("dimension must be at least 1");
        }
        let n = d as u32;
        Ok(match self {
            Family::Huber => dist::variance_factor(d, delta)?,
            Family::Gauss => 1.0,
            // Γ(d+2) / (d Γ(d))
            Family::Laplace => d as f64 + 1.0,
            Family::Charbonnier => {
                (charbonnier_ln_moment(n + 1) - charbonnier_ln_moment(n - 1) - (d as f64).ln()).exp()
            }
        })
    }
}

/// `ln ∫_0^∞ r^n exp(1 − √(r²+1)) dr`, computed once per order.
fn charbonnier_ln_moment(n: u32) -> f64 {
    static CACHE: OnceLock<Mutex<HashMap<u32, f64>>> = OnceLock::new();
    let cache = CACHE.get_or_init(|| Mutex::new(HashMap::new()));
    if let Some(v) = cache.lock().unwrap().get(&n) {
        return *v;
    }
    let nf = n as f64;
    let f = |r: f64| {
        if r == 0.0 && n == 0 {
            1.0
        } else {
            (nf * r.ln() + 1.0 - (r * r + 1.0).sqrt()).exp()
        }
    };
    let peak = nf.max(1.0);
    let end = 2.0 * nf + 120.0;
    let v = quadrature::integrate(f, 0.0, peak, 1e-13)
        + quadrature::integrate(f, peak, end, 1e-13);
    let ln_v = v.ln();
    cache.lock().unwrap().insert(n, ln_v);
    ln_v
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CovarianceMode {
    Identity,
    Diagonal,
    Full,
}

impl CovarianceMode {
    pub const ALL: [CovarianceMode; 3] = [CovarianceMode::Identity, CovarianceMode::Diagonal, CovarianceMode::Full];

    pub fn name(self) -> &'static str {
        match self {
            CovarianceMode::Identity => "identity",
            CovarianceMode::Diagonal => "diagonal",
            CovarianceMode::Full => "full",
        }
    }
}

/// Whether the location block of a raw output is read as `ν` or as `μ`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Parameterization {
    #[serde(rename = "nu")]
    Nu,
    #[serde(rename = "mu")]
    Mu,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossConfig {
    #[serde(default = "default_family")]
    pub family: Family,
    #[serde(default = "default_mode")]
    pub mode: CovarianceMode,
    #[serde(default = "default_delta")]
    pub delta: f64,
    #[serde(default = "default_theta")]
    pub theta: f64,
    #[serde(default = "default_param")]
    pub parameterization: Parameterization,
    #[serde(default = "default_normalizer")]
    pub normalizer: bool,
}

fn default_family() -> Family {
    Family::Huber
}
fn default_mode() -> CovarianceMode {
    CovarianceMode::Full
}
fn default_delta() -> f64 {
    dist::DEFAULT_DELTA
}
fn default_theta() -> f64 {
    0.1
}
fn default_param() -> Parameterization {
    Parameterization::Nu
}
fn default_normalizer() -> bool {
    true
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            family: default_family(),
            mode: default_mode(),
            delta: default_delta(),
            theta: default_theta(),
            parameterization: default_param(),
            normalizer: default_normalizer(),
        }
    }
}

impl LossConfig {
    pub fn new(family: Family, mode: CovarianceMode) -> Self {
        LossConfig {
            family,
            mode,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.delta > 0.0 && self.delta.is_finite()) {
            return domain(format!("delta must be positive and finite, got {}", self.delta));
        }
        RemapConfig::with_theta(self.theta).map(|_| ())
    }

    pub fn remap(&self) -> RemapConfig {
        RemapConfig {
            theta: self.theta,
            ..Default::default()
        }
    }
}

fn residual(y: &DVector<f64>, nu: &DVector<f64>, a: &DMatrix<f64>) -> DVector<f64> {
    a * y - nu
}

/// `−ln|A| + φ(‖Ay − ν‖)`, plus the family's log normalizer if requested.
pub fn nll(
    family: Family,
    y: &DVector<f64>,
    nu: &DVector<f64>,
    a: &SpdMatrix,
    delta: f64,
    include_normalizer: bool,
) -> Result<f64> {
    check_dim(a.dim(), y.len())?;
    check_dim(a.dim(), nu.len())?;
    let r = residual(y, nu, a.matrix()).norm();
    let mut loss = -a.log_det() + family.data_term(r, delta);
    if include_normalizer {
        loss += family.log_normalizer(a.dim(), delta)?;
    }
    Ok(loss)
}

pub fn huber_nll(y: &DVector<f64>, nu: &DVector<f64>, a: &SpdMatrix, delta: f64, include_normalizer: bool) -> Result<f64> {
    nll(Family::Huber, y, nu, a, delta, include_normalizer)
}

pub fn gauss_nll(y: &DVector<f64>, nu: &DVector<f64>, a: &SpdMatrix, include_normalizer: bool) -> Result<f64> {
    nll(Family::Gauss, y, nu, a, 1.0, include_normalizer)
}

pub fn laplace_nll(y: &DVector<f64>, nu: &DVector<f64>, a: &SpdMatrix, include_normalizer: bool) -> Result<f64> {
    nll(Family::Laplace, y, nu, a, 1.0, include_normalizer)
}

pub fn charbonnier_nll(y: &DVector<f64>, nu: &DVector<f64>, a: &SpdMatrix, include_normalizer: bool) -> Result<f64> {
    nll(Family::Charbonnier, y, nu, a, 1.0, include_normalizer)
}

/// Gradient of a loss with respect to `(ν, A)`.
#[derive(Debug, Clone)]
pub struct NuAGrad {
    pub nu: DVector<f64>,
    /// Symmetric part of `∂L/∂A`.
    pub a: SymMatrix,
}

/// Analytic `(∂L/∂ν, ∂L/∂A)`.
///
/// With `r = Ay − ν` and `w = φ'(‖r‖)/‖r‖`:
/// `∂L/∂ν = −w r` and `∂L/∂A = sym(w r yᵀ) − A⁻¹`.
pub fn grad_nu_a(family: Family, y: &DVector<f64>, nu: &DVector<f64>, a: &SpdMatrix, delta: f64) -> Result<NuAGrad> {
    check_dim(a.dim(), y.len())?;
    check_dim(a.dim(), nu.len())?;
    let r = residual(y, nu, a.matrix());
    let w = family.data_weight(r.norm(), delta);
    let g_nu = &r * -w;
    let outer = &r * y.transpose() * w;
    let g_a = SymMatrix::symmetrize(&(outer - a.inverse()));
    Ok(NuAGrad { nu: g_nu, a: g_a })
}

/// Raw head outputs for `keypoints` independent targets of dimension `dim`.
#[derive(Debug, Clone, PartialEq)]
pub struct RawOutput {
    pub values: Vec<f64>,
    pub keypoints: usize,
    pub dim: usize,
}

/// Raw entries per keypoint: `d` in identity mode, `d + d(d+1)/2` otherwise.
pub fn raw_len(dim: usize, mode: CovarianceMode) -> usize {
    match mode {
        CovarianceMode::Identity => dim,
        CovarianceMode::Diagonal | CovarianceMode::Full => dim + tri_len(dim),
    }
}

impl RawOutput {
    pub fn new(values: Vec<f64>, keypoints: usize, dim: usize, mode: CovarianceMode) -> Result<Self> {
        if keypoints == 0 || dim == 0 {
            return domain("need at least one keypoint of dimension >= 1");
        }
        check_dim(keypoints * raw_len(dim, mode), values.len())?;
        Ok(RawOutput { values, keypoints, dim })
    }

    pub fn chunk(&self, k: usize) -> &[f64] {
        let m = self.values.len() / self.keypoints;
        &self.values[k * m..(k + 1) * m]
    }
}

/// Distribution parameters decoded from one keypoint's raw entries.
#[derive(Debug, Clone)]
pub struct Decoded {
    pub nu: DVector<f64>,
    pub a: SpdMatrix,
}

impl Decoded {
    pub fn mean(&self) -> DVector<f64> {
        self.a.inverse() * &self.nu
    }
}

fn masked_spd_input(raw: &[f64], dim: usize, mode: CovarianceMode) -> Vec<f64> {
    let mut v = raw[dim..].to_vec();
    if mode == CovarianceMode::Diagonal {
        let mut k = 0;
        for i in 0..dim {
            for j in i..dim {
                if i != j {
                    v[k] = 0.0;
                }
                k += 1;
            }
        }
    }
    v
}

/// The map `q`: raw entries of one keypoint to `(ν, A)`.
pub fn decode(raw: &[f64], dim: usize, cfg: &LossConfig) -> Result<Decoded> {
    check_dim(raw_len(dim, cfg.mode), raw.len())?;
    let loc = DVector::from_column_slice(&raw[..dim]);
    if cfg.mode == CovarianceMode::Identity {
        return Ok(Decoded { nu: loc, a: SpdMatrix::identity(dim) });
    }
    let build = build_spd(&masked_spd_input(raw, dim, cfg.mode), &cfg.remap())?;
    let nu = match cfg.parameterization {
        Parameterization::Nu => loc,
        Parameterization::Mu => build.spd.matrix() * loc,
    };
    Ok(Decoded { nu, a: build.spd })
}

fn keypoint_loss(raw: &[f64], y: &DVector<f64>, cfg: &LossConfig, grad: &mut [f64]) -> Result<f64> {
    let dim = y.len();
    let loc = DVector::from_column_slice(&raw[..dim]);
    let normalizer = if cfg.normalizer {
        cfg.family.log_normalizer(dim, cfg.delta)?
    } else {
        0.0
    };

    if cfg.mode == CovarianceMode::Identity {
        let r = y - &loc;
        let rho = r.norm();
        let w = cfg.family.data_weight(rho, cfg.delta);
        for i in 0..dim {
            grad[i] = -w * r[i];
        }
        return Ok(cfg.family.data_term(rho, cfg.delta) + normalizer);
    }

    let build = build_spd(&masked_spd_input(raw, dim, cfg.mode), &cfg.remap())?;
    let a = &build.spd;
    let nu = match cfg.parameterization {
        Parameterization::Nu => loc.clone(),
        Parameterization::Mu => a.matrix() * &loc,
    };
    let r = residual(y, &nu, a.matrix());
    let rho = r.norm();
    let w = cfg.family.data_weight(rho, cfg.delta);
    let loss = -a.log_det() + cfg.family.data_term(rho, cfg.delta) + normalizer;

    let g_nu = &r * -w;
    let mut outer = &r * y.transpose() * w;
    let g_loc = match cfg.parameterization {
        Parameterization::Nu => g_nu,
        Parameterization::Mu => {
            // ν = Aμ adds ∂L/∂ν μᵀ to the A-gradient
            outer += &g_nu * loc.transpose();
            a.matrix() * &g_nu
        }
    };
    let g_b = build.backward_with_log_det(&SymMatrix::symmetrize(&outer))?;
    grad[..dim].copy_from_slice(g_loc.as_slice());
    let gv = sym_to_vec(&g_b);
    let mut k = 0;
    for i in 0..dim {
        for j in i..dim {
            grad[dim + k] = if cfg.mode == CovarianceMode::Diagonal && i != j {
                0.0
            } else {
                gv[k]
            };
            k += 1;
        }
    }
    Ok(loss)
}

/// Total loss over keypoints and its gradient with respect to every raw entry.
///
/// `targets` holds the `K·d` target coordinates, keypoint-major. Keypoints are
/// summed in ascending order.
pub fn loss_from_raw(raw: &RawOutput, targets: &[f64], cfg: &LossConfig) -> Result<(f64, Vec<f64>)> {
    cfg.validate()?;
    let mut grad = vec![0.0; raw.values.len()];
    let total = loss_from_raw_slice(&raw.values, raw.keypoints, raw.dim, targets, cfg, &mut grad)?;
    Ok((total, grad))
}

/// Slice form of [`loss_from_raw`] writing the gradient into `grad`.
pub fn loss_from_raw_slice(
    raw: &[f64],
    keypoints: usize,
    dim: usize,
    targets: &[f64],
    cfg: &LossConfig,
    grad: &mut [f64],
) -> Result<f64> {
    let per = raw_len(dim, cfg.mode);
    check_dim(keypoints * per, raw.len())?;
    check_dim(keypoints * dim, targets.len())?;
    check_dim(raw.len(), grad.len())?;
    let mut total = 0.0;
    for k in 0..keypoints {
        let y = DVector::from_column_slice(&targets[k * dim..(k + 1) * dim]);
        total += keypoint_loss(&raw[k * per..(k + 1) * per], &y, cfg, &mut grad[k * per..(k + 1) * per])?;
    }
    if !total.is_finite() {
        return Err(Error::Numeric(format!("loss is not finite: {total}")));
    }
    Ok(total)
}

/// Which parts of the loss a convexity probe evaluates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SegmentTerms {
    Full,
    DeterminantOnly,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConvexityReport {
    /// Largest `f(t_k) − (f(t_{k−1}) + f(t_{k+1}))/2` over interior points, floored at 0.
    pub max_violation: f64,
    pub samples: usize,
}

/// Probes midpoint convexity of the loss along the segment between two
/// `(ν, A)` points, both required to have every eigenvalue of `A` above `θ`.
pub fn check_convexity_segment(
    cfg: &LossConfig,
    y: &DVector<f64>,
    endpoint1: (&DVector<f64>, &SpdMatrix),
    endpoint2: (&DVector<f64>, &SpdMatrix),
    samples: usize,
    terms: SegmentTerms,
) -> Result<ConvexityReport> {
    cfg.validate()?;
    if samples < 3 {
        return domain("need at least 3 samples along the segment");
    }
    for (i, (_, a)) in [endpoint1, endpoint2].iter().enumerate() {
        if a.min_eigenvalue() <= cfg.theta {
            return Err(Error::Precondition(format!(
                "endpoint {} has eigenvalue {} <= theta {}",
                i + 1,
                a.min_eigenvalue(),
                cfg.theta
            )));
        }
    }
    let (nu1, a1) = endpoint1;
    let (nu2, a2) = endpoint2;
    let mut values = Vec::with_capacity(samples);
    for k in 0..samples {
        let t = k as f64 / (samples - 1) as f64;
        let nu = nu1 * (1.0 - t) + nu2 * t;
        let a = SpdMatrix::new(a1.matrix() * (1.0 - t) + a2.matrix() * t)?;
        let v = match terms {
            SegmentTerms::Full => nll(cfg.family, y, &nu, &a, cfg.delta, false)?,
            SegmentTerms::DeterminantOnly => -a.log_det(),
        };
        values.push(v);
    }
    let max_violation = values
        .windows(3)
        .map(|w| w[1] - 0.5 * (w[0] + w[2]))
        .fold(0.0, f64::max);
    Ok(ConvexityReport { max_violation, samples })
}
