use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::metrics::{calibration_bins, evaluate_metrics, median, LandmarkMetrics, PCKH_THRESHOLD};
use super::whitening::WhiteningTransform;
use super::SyntheticDataset;
use crate::dist::HuberParams;
use crate::error::{check_dim, domain, Error, Result};
use crate::io::CalibrationBin;
use crate::losses::{decode, loss_from_raw_slice, raw_len, CovarianceMode, Decoded, Family, LossConfig};
use crate::spd::{build_spd, matrix_to_rows, sym_to_vec, tri_len, SpdMatrix, SymMatrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Schedule {
    Constant,
    Cosine,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerConfig {
    pub learning_rate: f64,
    pub steps: usize,
    pub schedule: Schedule,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Held-out NLL is recorded every this many steps; `0` disables it.
    pub checkpoint_every: usize,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            learning_rate: 1e-2,
            steps: 2000,
            schedule: Schedule::Cosine,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            checkpoint_every: 250,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return domain("learning_rate must be positive");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return domain("beta1 and beta2 must lie in [0, 1)");
        }
        if !(self.epsilon > 0.0) {
            return domain("epsilon must be positive");
        }
        Ok(())
    }

    fn rate(&self, step: usize) -> f64 {
        match self.schedule {
            Schedule::Constant => self.learning_rate,
            Schedule::Cosine => {
                let t = step as f64 / self.steps.max(1) as f64;
                0.5 * self.learning_rate * (1.0 + (std::f64::consts::PI * t).cos())
            }
        }
    }
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    fn new(n: usize) -> Self {
        Adam { m: vec![0.0; n], v: vec![0.0; n], t: 0 }
    }

    fn step(&mut self, cfg: &OptimizerConfig, lr: f64, params: &mut [f64], grad: &[f64]) {
        self.t += 1;
        let c1 = 1.0 - cfg.beta1.powi(self.t);
        let c2 = 1.0 - cfg.beta2.powi(self.t);
        for i in 0..params.len() {
            self.m[i] = cfg.beta1 * self.m[i] + (1.0 - cfg.beta1) * grad[i];
            self.v[i] = cfg.beta2 * self.v[i] + (1.0 - cfg.beta2) * grad[i] * grad[i];
            params[i] -= lr * (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + cfg.epsilon);
        }
    }
}

/// Diagonal positions of a `d × d` matrix inside its packed upper triangle.
fn diagonal_slots(d: usize) -> impl Iterator<Item = usize> {
    (0..d).scan(0usize, move |k, i| {
        let at = *k;
        *k += d - i;
        Some(at)
    })
}

/// Linear head plus the whitening it was trained under.
#[derive(Debug, Clone, Serialize)]
pub struct FittedModel {
    pub loss: LossConfig,
    pub keypoints: usize,
    pub dim: usize,
    /// Rows are raw outputs, columns are inputs followed by the bias.
    #[serde(serialize_with = "serialize_matrix")]
    pub weights: DMatrix<f64>,
    pub whitening: WhiteningTransform,
}

fn serialize_matrix<S: serde::Serializer>(m: &DMatrix<f64>, s: S) -> std::result::Result<S::Ok, S::Error> {
    matrix_to_rows(m).serialize(s)
}

/// One keypoint prediction in the original target frame.
#[derive(Debug, Clone)]
pub struct Prediction {
    pub mean: DVector<f64>,
    /// `Λ = L A² L`; the covariance is `factor·Λ⁻¹`.
    pub precision: SpdMatrix,
}

impl FittedModel {
    fn raw(&self, x: &[f64]) -> Vec<f64> {
        let p = self.weights.ncols() - 1;
        (0..self.weights.nrows())
            .map(|r| {
                let mut acc = self.weights[(r, p)];
                for (j, xj) in x.iter().enumerate() {
                    acc += self.weights[(r, j)] * xj;
                }
                acc
            })
            .collect()
    }

    /// Decoded `(ν, A)` per keypoint in the whitened frame.
    pub fn predict_whitened(&self, x: &[f64]) -> Result<Vec<Decoded>> {
        check_dim(self.weights.ncols() - 1, x.len())?;
        let raw = self.raw(x);
        let per = raw_len(self.dim, self.loss.mode);
        (0..self.keypoints)
            .map(|k| decode(&raw[k * per..(k + 1) * per], self.dim, &self.loss))
            .collect()
    }

    pub fn predict(&self, x: &[f64]) -> Result<Vec<Prediction>> {
        self.predict_whitened(x)?
            .into_iter()
            .enumerate()
            .map(|(k, dec)| {
                let l = self.whitening.linear(k).matrix();
                let mean_w = dec.mean();
                let mean = self.whitening.invert_block(k, &mean_w);
                let a2 = dec.a.square();
                let precision = SpdMatrix::new(l * a2.matrix() * l)?;
                Ok(Prediction { mean, precision })
            })
            .collect()
    }

    /// Predicted distribution in the original frame, for the huber family.
    pub fn predict_params(&self, x: &[f64]) -> Result<Vec<HuberParams>> {
        if self.loss.family != Family::Huber {
            return domain("only huber-family models predict Huber distributions");
        }
        self.predict_whitened(x)?
            .into_iter()
            .enumerate()
            .map(|(k, dec)| {
                let w = HuberParams::new(dec.nu, dec.a, self.loss.delta)?;
                self.whitening.unwhiten_params(k, &w)
            })
            .collect()
    }

    /// Per-sample NLL in the original frame, normalizers included.
    pub fn nll(&self, x: &[f64], target: &[f64]) -> Result<f64> {
        let raw = self.raw(x);
        let yw = self.whitening.apply(target)?;
        let cfg = LossConfig { normalizer: true, ..self.loss };
        let mut grad = vec![0.0; raw.len()];
        let lw = loss_from_raw_slice(&raw, self.keypoints, self.dim, &yw, &cfg, &mut grad)?;
        let jac: f64 = (0..self.keypoints).map(|k| self.whitening.log_det(k)).sum();
        Ok(lw - jac)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub step: usize,
    pub train_loss: f64,
    pub test_nll: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct FitReport {
    pub family: Family,
    pub mode: CovarianceMode,
    /// Mean training NLL (normalizers included) before each step, then at the end.
    pub loss_trace: Vec<f64>,
    pub checkpoints: Vec<Checkpoint>,
    pub test_nll: f64,
    pub test_mean_error: f64,
    pub nme: f64,
    pub pckh: f64,
    /// Median over test keypoints of the distance from the predicted mean to the noiseless target.
    pub median_location_error: f64,
    pub calibration: Vec<CalibrationBin>,
    pub model: FittedModel,
}

fn augmented(x: &[f64]) -> Vec<f64> {
    let mut v = x.to_vec();
    v.push(1.0);
    v
}

struct Objective<'a> {
    xs: Vec<Vec<f64>>,
    ys: Vec<Vec<f64>>,
    keypoints: usize,
    dim: usize,
    cfg: &'a LossConfig,
}

impl Objective<'_> {
    /// Mean loss (without normalizers) and its gradient over the weights, row-major.
    fn eval(&self, w: &DMatrix<f64>, grad: &mut [f64]) -> Result<f64> {
        let (rows, cols) = w.shape();
        grad.iter_mut().for_each(|g| *g = 0.0);
        let mut raw = vec![0.0; rows];
        let mut g_raw = vec![0.0; rows];
        let mut total = 0.0;
        for (x, y) in self.xs.iter().zip(&self.ys) {
            for (r, out) in raw.iter_mut().enumerate() {
                *out = (0..cols).map(|j| w[(r, j)] * x[j]).sum();
            }
            total += loss_from_raw_slice(&raw, self.keypoints, self.dim, y, self.cfg, &mut g_raw)?;
            for r in 0..rows {
                let gr = g_raw[r];
                if gr != 0.0 {
                    for j in 0..cols {
                        grad[r * cols + j] += gr * x[j];
                    }
                }
            }
        }
        let n = self.xs.len() as f64;
        grad.iter_mut().for_each(|g| *g /= n);
        Ok(total / n)
    }
}

/// Full-batch Adam fit of a linear head on the whitened training targets,
/// followed by test-set evaluation.
pub fn fit(
    data: &SyntheticDataset,
    loss: &LossConfig,
    opt: &OptimizerConfig,
    calibration_bin_size: usize,
) -> Result<FitReport> {
    loss.validate()?;
    opt.validate()?;
    let (kp, d, p) = (data.config.keypoints, data.config.dim, data.config.inputs);
    let whitening = WhiteningTransform::fit(&data.train.targets, kp, d)?;
    let train_cfg = LossConfig { normalizer: false, ..*loss };
    let objective = Objective {
        xs: data.train.inputs.iter().map(|x| augmented(x)).collect(),
        ys: data.train.targets.iter().map(|t| whitening.apply(t)).collect::<Result<_>>()?,
        keypoints: kp,
        dim: d,
        cfg: &train_cfg,
    };
    let offset: f64 = kp as f64 * loss.family.log_normalizer(d, loss.delta)?
        - (0..kp).map(|k| whitening.log_det(k)).sum::<f64>();

    let per = raw_len(d, loss.mode);
    let mut weights = DMatrix::zeros(kp * per, p + 1);
    if loss.mode != CovarianceMode::Identity {
        for k in 0..kp {
            for slot in diagonal_slots(d) {
                weights[(k * per + d + slot, p)] = 1.0;
            }
        }
    }
    let mut model = FittedModel {
        loss: *loss,
        keypoints: kp,
        dim: d,
        weights,
        whitening,
    };

    let n_params = kp * per * (p + 1);
    let mut params = vec![0.0; n_params];
    let mut grad = vec![0.0; n_params];
    let mut adam = Adam::new(n_params);
    let mut trace = Vec::with_capacity(opt.steps + 1);
    let mut checkpoints = Vec::new();
    let to_params = |w: &DMatrix<f64>, out: &mut [f64]| {
        for r in 0..w.nrows() {
            for c in 0..w.ncols() {
                out[r * w.ncols() + c] = w[(r, c)];
            }
        }
    };
    to_params(&model.weights, &mut params);

    for step in 0..=opt.steps {
        let value = objective
            .eval(&model.weights, &mut grad)
            .map_err(|e| Error::Numeric(format!("divergence at step {step}: {e}")))?;
        if !value.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::Numeric(format!("divergence at step {step}: loss {value}")));
        }
        trace.push(value + offset);
        if opt.checkpoint_every > 0 && (step % opt.checkpoint_every == 0 || step == opt.steps) {
            checkpoints.push(Checkpoint {
                step,
                train_loss: value + offset,
                test_nll: mean_test_nll(&model, data)?,
            });
        }
        if step == opt.steps {
            break;
        }
        adam.step(opt, opt.rate(step), &mut params, &grad);
        let cols = p + 1;
        for r in 0..model.weights.nrows() {
            for c in 0..cols {
                model.weights[(r, c)] = params[r * cols + c];
            }
        }
    }

    evaluate(model, data, trace, checkpoints, calibration_bin_size)
}

fn mean_test_nll(model: &FittedModel, data: &SyntheticDataset) -> Result<f64> {
    let mut s = 0.0;
    for (x, t) in data.test.inputs.iter().zip(&data.test.targets) {
        s += model.nll(x, t)?;
    }
    Ok(s / data.test.len() as f64)
}

fn evaluate(
    model: FittedModel,
    data: &SyntheticDataset,
    loss_trace: Vec<f64>,
    checkpoints: Vec<Checkpoint>,
    bin_size: usize,
) -> Result<FitReport> {
    let d = model.dim;
    let factor = model.loss.family.variance_factor(d, model.loss.delta)?;
    let mut means = Vec::with_capacity(data.test.len());
    let mut expected = Vec::new();
    let mut err_norms = Vec::new();
    let mut loc_err = Vec::new();
    for i in 0..data.test.len() {
        let preds = model.predict(&data.test.inputs[i])?;
        let mut row = Vec::with_capacity(model.keypoints * d);
        for (k, pr) in preds.iter().enumerate() {
            let t = &data.test.targets[i][k * d..(k + 1) * d];
            let c = &data.test.clean_targets[i][k * d..(k + 1) * d];
            let diff = |v: &[f64]| pr.mean.iter().zip(v).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            err_norms.push(diff(t));
            loc_err.push(diff(c));
            expected.push((factor * pr.precision.trace_inverse()).sqrt());
            row.extend_from_slice(pr.mean.as_slice());
        }
        means.push(row);
    }
    let LandmarkMetrics { nme, pckh } = evaluate_metrics(
        &means,
        &data.test.targets,
        &data.test.normalization_scale,
        d,
        PCKH_THRESHOLD,
    )?;
    let calibration = calibration_bins(&expected, &err_norms, bin_size)?;
    Ok(FitReport {
        family: model.loss.family,
        mode: model.loss.mode,
        loss_trace,
        checkpoints,
        test_nll: mean_test_nll(&model, data)?,
        test_mean_error: err_norms.iter().sum::<f64>() / err_norms.len() as f64,
        nme,
        pckh,
        median_location_error: median(&loc_err),
        calibration,
        model,
    })
}

/// Maximum-likelihood Huber fit of `(ν, A)` to a sample.
#[derive(Debug, Clone)]
pub struct DistributionFit {
    pub params: HuberParams,
    /// Mean NLL per sample in the original frame, normalizer included.
    pub nll: f64,
    pub loss_trace: Vec<f64>,
}

const CHUNK: usize = 4096;

/// Fits `(ν, A)` by Adam through the SPD parameterization on whitened data.
///
/// Partial sums are formed over fixed chunks and added in chunk order, so the
/// result does not depend on the thread count.
pub fn fit_distribution(
    samples: &[DVector<f64>],
    delta: f64,
    theta: f64,
    opt: &OptimizerConfig,
) -> Result<DistributionFit> {
    opt.validate()?;
    let d = samples.first().map(|s| s.len()).ok_or_else(|| Error::Degenerate("empty sample".into()))?;
    let cfg = LossConfig {
        family: Family::Huber,
        mode: CovarianceMode::Full,
        delta,
        theta,
        ..Default::default()
    };
    cfg.validate()?;
    let rows: Vec<Vec<f64>> = samples.iter().map(|s| s.as_slice().to_vec()).collect();
    for r in &rows {
        check_dim(d, r.len())?;
    }
    let whitening = WhiteningTransform::fit(&rows, 1, d)?;
    let ys: Vec<DVector<f64>> = rows
        .iter()
        .map(|r| whitening.apply(r).map(DVector::from_vec))
        .collect::<Result<_>>()?;
    let n = ys.len() as f64;
    let offset = cfg.family.log_normalizer(d, delta)? - whitening.log_det(0);

    let mut params = vec![0.0; d + tri_len(d)];
    for slot in diagonal_slots(d) {
        params[d + slot] = 1.0;
    }
    let mut adam = Adam::new(params.len());
    let mut trace = Vec::with_capacity(opt.steps + 1);
    let remap = cfg.remap();

    let eval = |params: &[f64]| -> Result<(f64, Vec<f64>)> {
        let nu = DVector::from_column_slice(&params[..d]);
        let build = build_spd(&params[d..], &remap)?;
        let a = build.spd.matrix();
        let partial: Vec<(f64, DVector<f64>, DMatrix<f64>)> = ys
            .par_chunks(CHUNK)
            .map(|chunk| {
                let mut loss = 0.0;
                let mut s_r = DVector::zeros(d);
                let mut s_ry = DMatrix::zeros(d, d);
                for y in chunk {
                    let r = a * y - &nu;
                    let rho = r.norm();
                    let w = cfg.family.data_weight(rho, delta);
                    loss += cfg.family.data_term(rho, delta);
                    s_r += &r * w;
                    s_ry += &r * y.transpose() * w;
                }
                (loss, s_r, s_ry)
            })
            .collect();
        let mut loss = 0.0;
        let mut s_r = DVector::zeros(d);
        let mut s_ry = DMatrix::zeros(d, d);
        for (l, r, ry) in partial {
            loss += l;
            s_r += r;
            s_ry += ry;
        }
        let value = loss / n - build.spd.log_det();
        let g_b = build.backward_with_log_det(&SymMatrix::symmetrize(&(s_ry / n)))?;
        let mut grad = (-s_r / n).as_slice().to_vec();
        grad.extend(sym_to_vec(&g_b));
        Ok((value, grad))
    };

    for step in 0..=opt.steps {
        let (value, grad) = eval(&params)?;
        if !value.is_finite() {
            return Err(Error::Numeric(format!("divergence at step {step}")));
        }
        trace.push(value + offset);
        if step == opt.steps {
            break;
        }
        adam.step(opt, opt.rate(step), &mut params, &grad);
    }

    let build = build_spd(&params[d..], &remap)?;
    let white = HuberParams::new(DVector::from_column_slice(&params[..d]), build.spd, delta)?;
    let params_orig = whitening.unwhiten_params(0, &white)?;
    Ok(DistributionFit {
        params: params_orig,
        nll: *trace.last().expect("at least one evaluation"),
        loss_trace: trace,
    })
}
