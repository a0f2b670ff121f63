//! Central finite-difference checks of every analytic gradient.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{domain, Result};
use crate::losses::{decode, grad_nu_a, loss_from_raw_slice, nll, raw_len, CovarianceMode, Family, LossConfig, Parameterization};
use crate::spd::{backward_through_remap, build_spd, sym_to_vec, tri_len, vec_to_sym, RemapConfig, SpdMatrix, SymMatrix};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GradcheckConfig {
    pub trials: usize,
    pub seed: u64,
    pub step: f64,
    pub tolerance: f64,
    pub degenerate_tolerance: f64,
    /// Scales every analytic gradient by `1 + corrupt`; for testing the harness.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub corrupt: Option<f64>,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        GradcheckConfig {
            trials: 200,
            seed: 0,
            step: 1e-6,
            tolerance: 1e-5,
            degenerate_tolerance: 1e-4,
            corrupt: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckResult {
    pub name: String,
    pub trials: usize,
    pub worst_relative_error: f64,
    pub tolerance: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub checks: Vec<CheckResult>,
    pub passed: bool,
}

/// `‖a − b‖∞ / max(‖a‖∞, ‖b‖∞)`, or the absolute gap when both are below `1e-12`.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let gap = analytic.iter().zip(numeric).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    let scale = analytic.iter().chain(numeric).map(|v| v.abs()).fold(0.0, f64::max);
    if scale < 1e-12 {
        gap
    } else {
        gap / scale
    }
}

/// Central differences of `f` at `x` along every coordinate.
pub fn numeric_gradient(f: impl Fn(&[f64]) -> Result<f64>, x: &[f64], h: f64) -> Result<Vec<f64>> {
    let mut xp = x.to_vec();
    let mut out = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        xp[i] = x[i] + h;
        let up = f(&xp)?;
        xp[i] = x[i] - h;
        let down = f(&xp)?;
        xp[i] = x[i];
        out.push((up - down) / (2.0 * h));
    }
    Ok(out)
}

fn random_orthogonal(rng: &mut ChaCha8Rng, d: usize) -> DMatrix<f64> {
    let g = DMatrix::from_fn(d, d, |_, _| rng.sample::<f64, _>(StandardNormal));
    g.qr().q()
}

fn random_spd(rng: &mut ChaCha8Rng, d: usize, lo: f64, hi: f64) -> SpdMatrix {
    let q = random_orthogonal(rng, d);
    let l = DVector::from_fn(d, |_, _| rng.random_range(lo..hi));
    let m = &q * DMatrix::from_diagonal(&l) * q.transpose();
    SpdMatrix::new((&m + m.transpose()) * 0.5).expect("well-conditioned by construction")
}

fn gaussian_vec(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| scale * rng.sample::<f64, _>(StandardNormal)).collect()
}

/// Packs `(ν, A)` as `ν` followed by the upper triangle of `A`.
fn pack(nu: &DVector<f64>, a: &DMatrix<f64>) -> Vec<f64> {
    let d = nu.len();
    let mut v = nu.as_slice().to_vec();
    for i in 0..d {
        for j in i..d {
            v.push(a[(i, j)]);
        }
    }
    v
}

fn unpack(v: &[f64], d: usize) -> (DVector<f64>, DMatrix<f64>) {
    let nu = DVector::from_column_slice(&v[..d]);
    let mut a = DMatrix::zeros(d, d);
    let mut k = d;
    for i in 0..d {
        for j in i..d {
            a[(i, j)] = v[k];
            a[(j, i)] = v[k];
            k += 1;
        }
    }
    (nu, a)
}

struct Tracker {
    name: String,
    trials: usize,
    worst: f64,
    tolerance: f64,
}

impl Tracker {
    fn new(name: impl Into<String>, tolerance: f64) -> Self {
        Tracker { name: name.into(), trials: 0, worst: 0.0, tolerance }
    }

    fn record(&mut self, analytic: &[f64], numeric: &[f64]) {
        self.trials += 1;
        let e = relative_error(analytic, numeric);
        if e.is_nan() || e > self.worst {
            self.worst = if e.is_nan() { f64::INFINITY } else { e };
        }
    }

    fn finish(self) -> CheckResult {
        CheckResult {
            passed: self.worst <= self.tolerance,
            name: self.name,
            trials: self.trials,
            worst_relative_error: self.worst,
            tolerance: self.tolerance,
        }
    }
}

fn corrupt(v: &mut [f64], c: Option<f64>) {
    if let Some(c) = c {
        v.iter_mut().for_each(|x| *x *= 1.0 + c);
    }
}

fn check_nu_a(cfg: &GradcheckConfig, family: Family, rng: &mut ChaCha8Rng) -> Result<CheckResult> {
    let mut t = Tracker::new(format!("grad_nu_a/{}", family.name()), cfg.tolerance);
    while t.trials < cfg.trials {
        let d = rng.random_range(1..=4);
        let delta = rng.random_range(0.3..3.0);
        let a = random_spd(rng, d, 0.3, 3.0);
        let nu = DVector::from_vec(gaussian_vec(rng, d, 1.0));
        let y = DVector::from_vec(gaussian_vec(rng, d, 2.0));
        let r = (a.matrix() * &y - &nu).norm();
        if r < 1e-2 || (r - delta).abs() < 1e-4 {
            continue;
        }
        let g = grad_nu_a(family, &y, &nu, &a, delta)?;
        // a symmetric-pair perturbation of an off-diagonal entry moves two entries
        let mut g_a = g.a.as_matrix().clone();
        for i in 0..d {
            for j in 0..d {
                if i != j {
                    g_a[(i, j)] *= 2.0;
                }
            }
        }
        let mut analytic = pack(&g.nu, &g_a);
        corrupt(&mut analytic, cfg.corrupt);
        let f = |v: &[f64]| {
            let (nu, a) = unpack(v, d);
            nll(family, &y, &nu, &SpdMatrix::new(a)?, delta, false)
        };
        let numeric = numeric_gradient(f, &pack(&nu, a.matrix()), cfg.step)?;
        t.record(&analytic, &numeric);
    }
    Ok(t.finish())
}

fn check_raw(cfg: &GradcheckConfig, family: Family, rng: &mut ChaCha8Rng) -> Result<CheckResult> {
    let mut t = Tracker::new(format!("loss_from_raw/{}", family.name()), cfg.tolerance);
    let modes = [CovarianceMode::Full, CovarianceMode::Diagonal, CovarianceMode::Identity];
    let mut attempt = 0usize;
    while t.trials < cfg.trials {
        attempt += 1;
        let mode = if attempt % 2 == 0 { CovarianceMode::Full } else { modes[(attempt / 2) % 3] };
        let param = if attempt % 4 == 1 { Parameterization::Mu } else { Parameterization::Nu };
        let loss = LossConfig {
            family,
            mode,
            delta: rng.random_range(0.3..3.0),
            theta: 0.1,
            parameterization: param,
            normalizer: false,
        };
        let k = rng.random_range(1..=2);
        let d = rng.random_range(1..=3);
        let per = raw_len(d, mode);
        let raw = gaussian_vec(rng, k * per, 1.0);
        let y = gaussian_vec(rng, k * d, 1.5);
        let mut smooth = true;
        for kp in 0..k {
            let dec = decode(&raw[kp * per..(kp + 1) * per], d, &loss)?;
            let yk = DVector::from_column_slice(&y[kp * d..(kp + 1) * d]);
            let r = (dec.a.matrix() * yk - dec.nu).norm();
            smooth &= r > 1e-2 && (r - loss.delta).abs() > 1e-4;
            smooth &= dec.a.eigen().values.iter().all(|&l| l > 1e-3);
        }
        if !smooth {
            continue;
        }
        let mut analytic = vec![0.0; raw.len()];
        loss_from_raw_slice(&raw, k, d, &y, &loss, &mut analytic)?;
        corrupt(&mut analytic, cfg.corrupt);
        let f = |v: &[f64]| {
            let mut scratch = vec![0.0; v.len()];
            loss_from_raw_slice(v, k, d, &y, &loss, &mut scratch)
        };
        let numeric = numeric_gradient(f, &raw, cfg.step)?;
        t.record(&analytic, &numeric);
    }
    Ok(t.finish())
}

fn pairing(g: &SymMatrix, a: &DMatrix<f64>) -> f64 {
    g.as_matrix().component_mul(a).sum()
}

fn check_backward(cfg: &GradcheckConfig, rng: &mut ChaCha8Rng, degenerate: bool) -> Result<CheckResult> {
    let (name, tol) = if degenerate {
        ("spd_backward/degenerate", cfg.degenerate_tolerance)
    } else {
        ("spd_backward", cfg.tolerance)
    };
    let mut t = Tracker::new(name, tol);
    let remap = RemapConfig::default();
    for trial in 0..cfg.trials {
        let d = rng.random_range(2..=4);
        let b = if degenerate {
            let gaps = [1e-12, 1e-10, 1e-8, 1e-6];
            let base = rng.random_range(-0.3..0.5);
            let mut l: Vec<f64> = (0..d).map(|_| rng.random_range(-0.3..0.5)).collect();
            l[0] = base;
            l[1] = base + gaps[trial % gaps.len()];
            let q = random_orthogonal(rng, d);
            let m = &q * DMatrix::from_diagonal(&DVector::from_vec(l)) * q.transpose();
            SymMatrix::symmetrize(&m)
        } else {
            vec_to_sym(&gaussian_vec(rng, tri_len(d), 0.3))?
        };
        let g = SymMatrix::symmetrize(&DMatrix::from_fn(d, d, |_, _| rng.sample::<f64, _>(StandardNormal)));
        let mut analytic = sym_to_vec(&backward_through_remap(&b, &g, &remap)?);
        corrupt(&mut analytic, cfg.corrupt);
        let f = |v: &[f64]| Ok(pairing(&g, build_spd(v, &remap)?.spd.matrix()));
        let numeric = numeric_gradient(f, &sym_to_vec(&b), cfg.step)?;
        t.record(&analytic, &numeric);
    }
    Ok(t.finish())
}

/// Runs every check with `trials` random configurations each.
pub fn run_gradcheck(cfg: &GradcheckConfig) -> Result<GradcheckReport> {
    if cfg.trials == 0 {
        return domain("trials must be at least 1");
    }
    if !(cfg.step > 0.0) {
        return domain("step must be positive");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut checks = Vec::new();
    for family in Family::ALL {
        checks.push(check_nu_a(cfg, family, &mut rng)?);
    }
    for family in Family::ALL {
        checks.push(check_raw(cfg, family, &mut rng)?);
    }
    checks.push(check_backward(cfg, &mut rng, false)?);
    checks.push(check_backward(cfg, &mut rng, true)?);
    let passed = checks.iter().all(|c| c.passed);
    Ok(GradcheckReport { checks, passed })
}
