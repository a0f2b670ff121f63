//! Symmetric and symmetric positive definite matrices.
//!
//! An unconstrained vector of length `d(d+1)/2` is mapped to a symmetric
//! matrix `B` by an isometric vectorization (diagonal entries verbatim,
//! off-diagonal entries scaled by `1/√2`, upper triangle in row-major order).
//! `B` is diagonalized with cyclic Jacobi rotations and every eigenvalue is
//! passed through the remap
//!
//! ```text
//! g(λ) = λ                   if λ > θ
//!      = θ·exp(λ/θ − 1)      otherwise
//! ```
//!
//! giving `A = Q diag(g(λ)) Qᵀ`, which is positive definite for every finite
//! input and equivariant under rotations of the input. Gradients flow back
//! through the eigendecomposition with the divided-difference matrix `K`,
//! whose entries all lie in `[0, 1]`.

use std::fmt;

use nalgebra::{DMatrix, DVector};

use crate::error::{check_dim, domain, Error, Result};

const JACOBI_MAX_SWEEPS: usize = 50;
const JACOBI_REL_TOL: f64 = 1e-13;
/// Largest dimension the dense Jacobi solver is meant for.
pub const MAX_DIM: usize = 16;

/// Number of free entries of a symmetric `d × d` matrix.
pub fn tri_len(d: usize) -> usize {
    d * (d + 1) / 2
}

/// Inverse of [`tri_len`]; fails if `len` is not a triangular number.
pub fn tri_dim(len: usize) -> Result<usize> {
    let mut d = 0;
    while tri_len(d) < len {
        d += 1;
    }
    if tri_len(d) != len || d == 0 {
        return domain(format!("length {len} is not d(d+1)/2 for any d >= 1"));
    }
    Ok(d)
}

/// A real symmetric matrix with exactly symmetric storage.
#[derive(Clone, PartialEq)]
pub struct SymMatrix(DMatrix<f64>);

impl SymMatrix {
    /// Wraps `m`, rejecting non-square or asymmetric input.
    ///
    /// Entries that differ from their transpose by at most `1e-12` relative to
    /// the largest entry are treated as rounding and averaged.
    pub fn new(m: DMatrix<f64>) -> Result<Self> {
        if !m.is_square() {
            return domain(format!("matrix is {}x{}, not square", m.nrows(), m.ncols()));
        }
        if m.iter().any(|x| !x.is_finite()) {
            return domain("matrix has non-finite entries");
        }
        let scale = m.amax().max(f64::MIN_POSITIVE);
        let n = m.nrows();
        for i in 0..n {
            for j in (i + 1)..n {
                if (m[(i, j)] - m[(j, i)]).abs() > 1e-12 * scale {
                    return domain(format!(
                        "matrix is not symmetric at ({i},{j}): {} vs {}",
                        m[(i, j)],
                        m[(j, i)]
                    ));
                }
            }
        }
        Ok(Self::symmetrize(&m))
    }

    /// The symmetric part `(M + Mᵀ)/2` of a square matrix.
    pub fn symmetrize(m: &DMatrix<f64>) -> Self {
        let mut s = (m + m.transpose()) * 0.5;
        let n = s.nrows();
        for i in 0..n {
            for j in (i + 1)..n {
                s[(j, i)] = s[(i, j)];
            }
        }
        SymMatrix(s)
    }

    pub fn zeros(d: usize) -> Self {
        SymMatrix(DMatrix::zeros(d, d))
    }

    pub fn identity(d: usize) -> Self {
        SymMatrix(DMatrix::identity(d, d))
    }

    pub fn from_diagonal(diag: &[f64]) -> Self {
        SymMatrix(DMatrix::from_diagonal(&DVector::from_column_slice(diag)))
    }

    pub fn dim(&self) -> usize {
        self.0.nrows()
    }

    pub fn as_matrix(&self) -> &DMatrix<f64> {
        &self.0
    }

    pub fn into_matrix(self) -> DMatrix<f64> {
        self.0
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.0.norm()
    }

    /// Row-major nested rows, the layout used in JSON documents.
    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        matrix_to_rows(&self.0)
    }
}

impl fmt::Debug for SymMatrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_tuple("SymMatrix").field(&self.to_rows()).finish()
    }
}

pub fn matrix_to_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows())
        .map(|i| (0..m.ncols()).map(|j| m[(i, j)]).collect())
        .collect()
}

/// Maps `v` (upper triangle, row-major) to a symmetric matrix.
///
/// Off-diagonal entries are divided by `√2`, which makes the map an isometry
/// between the Euclidean norm of `v` and the Frobenius norm of the result.
pub fn vec_to_sym(v: &[f64]) -> Result<SymMatrix> {
    let d = tri_dim(v.len())?;
    let mut m = DMatrix::zeros(d, d);
    let mut k = 0;
    for i in 0..d {
        for j in i..d {
            if i == j {
                m[(i, i)] = v[k];
            } else {
                let x = v[k] / std::f64::consts::SQRT_2;
                m[(i, j)] = x;
                m[(j, i)] = x;
            }
            k += 1;
        }
    }
    Ok(SymMatrix(m))
}

/// Inverse of [`vec_to_sym`].
///
/// Applied to a symmetric gradient `∂L/∂B` it also yields the gradient with
/// respect to the vector, since the map is linear and isometric.
pub fn sym_to_vec(b: &SymMatrix) -> Vec<f64> {
    let d = b.dim();
    let mut v = Vec::with_capacity(tri_len(d));
    for i in 0..d {
        for j in i..d {
            if i == j {
                v.push(b.0[(i, i)]);
            } else {
                v.push(b.0[(i, j)] * std::f64::consts::SQRT_2);
            }
        }
    }
    v
}

/// Eigendecomposition `B = Q diag(values) Qᵀ` of a symmetric matrix.
///
/// Columns of `vectors` are the eigenvectors. Values are ascending and each
/// eigenvector has its largest-magnitude component positive.
#[derive(Debug, Clone)]
pub struct SymEigen {
    pub values: DVector<f64>,
    pub vectors: DMatrix<f64>,
}

impl SymEigen {
    pub fn dim(&self) -> usize {
        self.values.len()
    }

    /// `Q diag(f(λ)) Qᵀ`, exactly symmetric.
    pub fn compose(&self, f: impl Fn(f64) -> f64) -> DMatrix<f64> {
        let d = self.dim();
        let mut scaled = self.vectors.clone();
        for j in 0..d {
            let s = f(self.values[j]);
            scaled.column_mut(j).scale_mut(s);
        }
        let m = scaled * self.vectors.transpose();
        SymMatrix::symmetrize(&m).0
    }

    pub fn reconstruct(&self) -> DMatrix<f64> {
        self.compose(|x| x)
    }
}

/// Cyclic Jacobi eigensolver for symmetric matrices.
///
/// Sweeps stop once the off-diagonal Frobenius mass drops below
/// `1e-13·‖B‖_F`; failing that within 50 sweeps is reported as
/// [`Error::Numeric`].
pub fn sym_eig(b: &SymMatrix) -> Result<SymEigen> {
    let n = b.dim();
    let mut a = b.0.clone();
    let mut v = DMatrix::<f64>::identity(n, n);
    let tol = JACOBI_REL_TOL * b.frobenius_norm();

    let off_norm = |a: &DMatrix<f64>| {
        let mut s = 0.0;
        for p in 0..n {
            for q in (p + 1)..n {
                s += 2.0 * a[(p, q)] * a[(p, q)];
            }
        }
        s.sqrt()
    };

    let mut converged = false;
    for _ in 0..=JACOBI_MAX_SWEEPS {
        if off_norm(&a) <= tol {
            converged = true;
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = a[(p, q)];
                if apq == 0.0 {
                    continue;
                }
                let theta = (a[(q, q)] - a[(p, p)]) / (2.0 * apq);
                let t = if theta.abs() > 1e150 {
                    0.5 / theta
                } else {
                    theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt())
                };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a[(k, p)];
                    let akq = a[(k, q)];
                    a[(k, p)] = c * akp - s * akq;
                    a[(k, q)] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[(p, k)];
                    let aqk = a[(q, k)];
                    a[(p, k)] = c * apk - s * aqk;
                    a[(q, k)] = s * apk + c * aqk;
                }
                a[(p, q)] = 0.0;
                a[(q, p)] = 0.0;
                for k in 0..n {
                    let vkp = v[(k, p)];
                    let vkq = v[(k, q)];
                    v[(k, p)] = c * vkp - s * vkq;
                    v[(k, q)] = s * vkp + c * vkq;
                }
            }
        }
    }
    if !converged {
        return Err(Error::Numeric(format!(
            "Jacobi eigensolver did not converge in {JACOBI_MAX_SWEEPS} sweeps"
        )));
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a[(i, i)].total_cmp(&a[(j, j)]));
    let values = DVector::from_iterator(n, order.iter().map(|&i| a[(i, i)]));
    let mut vectors = DMatrix::zeros(n, n);
    for (dst, &src) in order.iter().enumerate() {
        let mut col = v.column(src).clone_owned();
        let mut pivot = 0;
        for k in 1..n {
            if col[k].abs() > col[pivot].abs() {
                pivot = k;
            }
        }
        if col[pivot] < 0.0 {
            col.neg_mut();
        }
        vectors.set_column(dst, &col);
    }
    Ok(SymEigen { values, vectors })
}

/// Settings of the eigenvalue remap.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RemapConfig {
    /// Precision floor: eigenvalues above it pass through unchanged.
    pub theta: f64,
    /// Relative gap below which two eigenvalues count as tied in `K`.
    pub eig_tie_tol: f64,
}

impl Default for RemapConfig {
    fn default() -> Self {
        RemapConfig {
            theta: 0.1,
            eig_tie_tol: 1e-8,
        }
    }
}

impl RemapConfig {
    pub fn with_theta(theta: f64) -> Result<Self> {
        let cfg = RemapConfig {
            theta,
            ..Default::default()
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.theta > 0.0 && self.theta.is_finite()) {
            return domain(format!("theta must be positive and finite, got {}", self.theta));
        }
        if !(self.eig_tie_tol > 0.0) {
            return domain(format!("eig_tie_tol must be positive, got {}", self.eig_tie_tol));
        }
        Ok(())
    }
}

/// `g(λ)`: identity above `theta`, `θ·exp(λ/θ − 1)` at or below it.
pub fn remap_eigenvalue(lambda: f64, theta: f64) -> f64 {
    if lambda > theta {
        lambda
    } else {
        theta * (lambda / theta - 1.0).exp()
    }
}

/// `g'(λ)`, always in `(0, 1]`.
pub fn remap_derivative(lambda: f64, theta: f64) -> f64 {
    if lambda > theta {
        1.0
    } else {
        (lambda / theta - 1.0).exp()
    }
}

/// Inverse of [`remap_eigenvalue`] on `(0, ∞)`.
pub fn unmap_eigenvalue(value: f64, theta: f64) -> f64 {
    if value > theta {
        value
    } else {
        theta * (1.0 + (value / theta).ln())
    }
}

/// The divided-difference matrix `K(λ, g)` for ascending eigenvalues.
pub fn divided_differences(values: &DVector<f64>, cfg: &RemapConfig) -> DMatrix<f64> {
    let d = values.len();
    let theta = cfg.theta;
    DMatrix::from_fn(d, d, |i, j| {
        let (li, lj) = (values[i], values[j]);
        let gap = li - lj;
        let scale = 1f64.max(li.abs()).max(lj.abs());
        if i == j || gap.abs() <= cfg.eig_tie_tol * scale {
            return remap_derivative(0.5 * (li + lj), theta);
        }
        if li <= theta && lj <= theta {
            // both on the exponential branch; expm1 avoids cancellation
            remap_eigenvalue(lj, theta) * (gap / theta).exp_m1() / gap
        } else {
            (remap_eigenvalue(li, theta) - remap_eigenvalue(lj, theta)) / gap
        }
    })
}

/// A symmetric positive definite matrix together with its eigenpairs.
#[derive(Clone)]
pub struct SpdMatrix {
    matrix: DMatrix<f64>,
    eigen: SymEigen,
}

impl SpdMatrix {
    /// Validates symmetry and strict positivity of every eigenvalue.
    pub fn new(m: DMatrix<f64>) -> Result<Self> {
        let sym = SymMatrix::new(m)?;
        let eigen = sym_eig(&sym)?;
        if eigen.values.iter().any(|&l| l <= 0.0 || !l.is_finite()) {
            return domain(format!(
                "matrix is not positive definite (smallest eigenvalue {})",
                eigen.values.min()
            ));
        }
        Ok(SpdMatrix {
            matrix: sym.0,
            eigen,
        })
    }

    /// Assembles `Q diag(values) Qᵀ`; values must be positive and ascending.
    pub fn from_eigen(eigen: SymEigen) -> Result<Self> {
        if eigen.values.iter().any(|&l| l <= 0.0 || !l.is_finite()) {
            return domain("eigenvalues must be positive and finite");
        }
        let matrix = eigen.reconstruct();
        Ok(SpdMatrix { matrix, eigen })
    }

    pub fn identity(d: usize) -> Self {
        SpdMatrix {
            matrix: DMatrix::identity(d, d),
            eigen: SymEigen {
                values: DVector::from_element(d, 1.0),
                vectors: DMatrix::identity(d, d),
            },
        }
    }

    pub fn from_diagonal(diag: &[f64]) -> Result<Self> {
        Self::new(DMatrix::from_diagonal(&DVector::from_column_slice(diag)))
    }

    pub fn dim(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    pub fn eigen(&self) -> &SymEigen {
        &self.eigen
    }

    pub fn min_eigenvalue(&self) -> f64 {
        self.eigen.values[0]
    }

    pub fn log_det(&self) -> f64 {
        self.eigen.values.iter().map(|l| l.ln()).sum()
    }

    pub fn inverse(&self) -> DMatrix<f64> {
        self.eigen.compose(|l| 1.0 / l)
    }

    pub fn trace_inverse(&self) -> f64 {
        self.eigen.values.iter().map(|l| 1.0 / l).sum()
    }

    /// Applies a positive function to the spectrum.
    pub fn map_spectrum(&self, f: impl Fn(f64) -> f64) -> Result<SpdMatrix> {
        let values = self.eigen.values.map(&f);
        // f is expected to be increasing; re-sort otherwise
        let sorted = values.as_slice().windows(2).all(|w| w[0] <= w[1]);
        if !sorted {
            return SpdMatrix::new(self.eigen.compose(f));
        }
        SpdMatrix::from_eigen(SymEigen {
            values,
            vectors: self.eigen.vectors.clone(),
        })
    }

    /// The symmetric positive definite square root.
    pub fn sqrt(&self) -> SpdMatrix {
        self.map_spectrum(f64::sqrt)
            .expect("square root of positive spectrum is positive")
    }

    pub fn square(&self) -> SpdMatrix {
        self.map_spectrum(|l| l * l)
            .expect("square of positive spectrum is positive")
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        matrix_to_rows(&self.matrix)
    }
}

impl fmt::Debug for SpdMatrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("SpdMatrix")
            .field("matrix", &self.to_rows())
            .field("eigenvalues", &self.eigen.values.as_slice())
            .finish()
    }
}

impl PartialEq for SpdMatrix {
    fn eq(&self, other: &Self) -> bool {
        self.matrix == other.matrix
    }
}

/// Everything produced on the way from a raw vector to `A`; kept for the
/// backward pass.
#[derive(Debug, Clone)]
pub struct SpdBuild {
    pub sym: SymMatrix,
    /// Eigenpairs of `B` (before the remap).
    pub eigen: SymEigen,
    /// `g(λ)` for each eigenvalue of `B`.
    pub remapped: DVector<f64>,
    pub spd: SpdMatrix,
    pub cfg: RemapConfig,
}

impl SpdBuild {
    /// Pulls a symmetric gradient `∂L/∂A` back to `∂L/∂B`.
    pub fn backward(&self, dl_da: &SymMatrix) -> Result<SymMatrix> {
        backward_with_eigen(&self.eigen, dl_da, &self.cfg)
    }

    /// `∂ ln|A| / ∂B = Q diag(g'(λ)/g(λ)) Qᵀ`.
    ///
    /// Evaluated in the eigenbasis, where `g'/g = min(1/λ, 1/θ)`, so `A⁻¹` is
    /// never formed and eigenvalues deep in the exponential branch stay exact.
    pub fn log_det_gradient(&self) -> SymMatrix {
        let theta = self.cfg.theta;
        SymMatrix(self.eigen.compose(|l| if l > theta { 1.0 / l } else { 1.0 / theta }))
    }

    /// Backward pass for `L = F(A) − ln|A|` given only `∂F/∂A`.
    pub fn backward_with_log_det(&self, df_da: &SymMatrix) -> Result<SymMatrix> {
        let data = self.backward(df_da)?;
        Ok(SymMatrix(data.0 - self.log_det_gradient().0))
    }
}

/// Builds `A = Q diag(g(λ)) Qᵀ` from the raw vector `v`.
pub fn build_spd(v: &[f64], cfg: &RemapConfig) -> Result<SpdBuild> {
    cfg.validate()?;
    if v.iter().any(|x| !x.is_finite()) {
        return domain("raw vector has non-finite entries");
    }
    let sym = vec_to_sym(v)?;
    build_spd_from_sym(sym, cfg)
}

pub fn build_spd_from_sym(sym: SymMatrix, cfg: &RemapConfig) -> Result<SpdBuild> {
    let eigen = sym_eig(&sym)?;
    let remapped = eigen.values.map(|l| remap_eigenvalue(l, cfg.theta));
    if remapped.iter().any(|&g| g <= f64::MIN_POSITIVE) {
        return Err(Error::Numeric(format!(
            "remapped eigenvalue underflows: min eigenvalue {} with theta {}",
            eigen.values.min(),
            cfg.theta
        )));
    }
    let spd = SpdMatrix::from_eigen(SymEigen {
        values: remapped.clone(),
        vectors: eigen.vectors.clone(),
    })?;
    Ok(SpdBuild {
        sym,
        eigen,
        remapped,
        spd,
        cfg: *cfg,
    })
}

/// `∂L/∂B = Q (Qᵀ (∂L/∂A) Q ∘ K) Qᵀ` for `A = G(B)`.
pub fn backward_through_remap(
    b: &SymMatrix,
    dl_da: &SymMatrix,
    cfg: &RemapConfig,
) -> Result<SymMatrix> {
    cfg.validate()?;
    let eigen = sym_eig(b)?;
    backward_with_eigen(&eigen, dl_da, cfg)
}

fn backward_with_eigen(eigen: &SymEigen, dl_da: &SymMatrix, cfg: &RemapConfig) -> Result<SymMatrix> {
    check_dim(eigen.dim(), dl_da.dim())?;
    let q = &eigen.vectors;
    let k = divided_differences(&eigen.values, cfg);
    let inner = (q.transpose() * dl_da.as_matrix() * q).component_mul(&k);
    Ok(SymMatrix::symmetrize(&(q * inner * q.transpose())))
}
