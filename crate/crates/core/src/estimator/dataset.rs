use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::dist::{sample_standard_radius, variance_factor};
use crate::error::{check_dim, domain, Result};
use crate::io::matrix_from_rows;
use crate::spd::SpdMatrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NoiseFamily {
    Gauss,
    Huber,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NoiseConfig {
    pub family: NoiseFamily,
    /// Threshold of the Huber noise law.
    pub delta: f64,
    /// Noise covariance per keypoint; `None` means `0.1·I`.
    pub covariance: Option<Vec<Vec<f64>>>,
    /// Multiplies every noise draw; `0` gives noiseless targets.
    pub scale: f64,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        NoiseConfig {
            family: NoiseFamily::Huber,
            delta: 1.0,
            covariance: None,
            scale: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    pub n_train: usize,
    pub n_test: usize,
    /// Input features per sample, not counting the bias.
    pub inputs: usize,
    pub keypoints: usize,
    pub dim: usize,
    /// Standard deviation of the entries of the true weight matrix.
    pub weight_scale: f64,
    pub noise: NoiseConfig,
    pub outlier_fraction: f64,
    /// Outliers are uniform on `[−R, R]^d`.
    pub outlier_range: f64,
    /// Per-sample normalization scales are uniform on `[0.5, 1.5]` times this.
    pub normalization_scale: f64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            n_train: 1000,
            n_test: 1000,
            inputs: 4,
            keypoints: 1,
            dim: 2,
            weight_scale: 1.0,
            noise: NoiseConfig::default(),
            outlier_fraction: 0.1,
            outlier_range: 10.0,
            normalization_scale: 1.0,
        }
    }
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_train == 0 || self.n_test == 0 {
            return domain("n_train and n_test must be at least 1");
        }
        if self.keypoints == 0 || self.dim == 0 {
            return domain("keypoints and dim must be at least 1");
        }
        if !(0.0..1.0).contains(&self.outlier_fraction) {
            return domain(format!("outlier_fraction must lie in [0, 1), got {}", self.outlier_fraction));
        }
        if !(self.outlier_range > 0.0 && self.outlier_range.is_finite()) {
            return domain("outlier_range must be positive");
        }
        if !(self.normalization_scale > 0.0 && self.normalization_scale.is_finite()) {
            return domain("normalization_scale must be positive");
        }
        if !(self.noise.scale >= 0.0 && self.noise.scale.is_finite()) {
            return domain("noise scale must be non-negative");
        }
        if !(self.weight_scale >= 0.0 && self.weight_scale.is_finite()) {
            return domain("weight_scale must be non-negative");
        }
        if !(self.noise.delta > 0.0 && self.noise.delta.is_finite()) {
            return domain("noise delta must be positive");
        }
        self.noise_covariance().map(|_| ())
    }

    pub fn noise_covariance(&self) -> Result<SpdMatrix> {
        match &self.noise.covariance {
            None => SpdMatrix::from_diagonal(&vec![0.1; self.dim]),
            Some(rows) => {
                let m = matrix_from_rows(rows)?;
                check_dim(self.dim, m.nrows())?;
                SpdMatrix::new(m)
            }
        }
    }
}

/// One block of samples. Rows are samples; targets are keypoint-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Split {
    pub inputs: Vec<Vec<f64>>,
    pub targets: Vec<Vec<f64>>,
    /// `W_true·x` before noise and outlier replacement.
    pub clean_targets: Vec<Vec<f64>>,
    pub normalization_scale: Vec<f64>,
    pub outlier: Vec<Vec<bool>>,
}

impl Split {
    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrueGenerator {
    /// `(K·d) × p`.
    pub w_true: Vec<Vec<f64>>,
    pub noise: NoiseConfig,
    pub outlier_fraction: f64,
    pub outlier_range: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticDataset {
    pub config: DatasetConfig,
    pub seed: u64,
    pub generator: TrueGenerator,
    pub train: Split,
    pub test: Split,
}

struct NoiseDraw {
    /// Maps a standard draw to one with the configured covariance.
    transform: DMatrix<f64>,
    family: NoiseFamily,
    delta: f64,
}

impl NoiseDraw {
    fn new(cfg: &DatasetConfig) -> Result<Self> {
        let cov = cfg.noise_covariance()?;
        let mut transform = cov.sqrt().matrix().clone() * cfg.noise.scale;
        if cfg.noise.family == NoiseFamily::Huber {
            // a standard Huber draw has covariance α·I
            transform /= variance_factor(cfg.dim, cfg.noise.delta)?.sqrt();
        }
        Ok(NoiseDraw {
            transform,
            family: cfg.noise.family,
            delta: cfg.noise.delta,
        })
    }

    fn draw(&self, rng: &mut ChaCha8Rng) -> DVector<f64> {
        let d = self.transform.nrows();
        let g = DVector::from_fn(d, |_, _| rng.sample::<f64, _>(StandardNormal));
        let z = match self.family {
            NoiseFamily::Gauss => g,
            NoiseFamily::Huber => {
                let n = g.norm().max(f64::MIN_POSITIVE);
                let r = sample_standard_radius(d, self.delta, rng.random::<f64>());
                g * (r / n)
            }
        };
        &self.transform * z
    }
}

fn generate_split(cfg: &DatasetConfig, w: &DMatrix<f64>, noise: &NoiseDraw, n: usize, rng: &mut ChaCha8Rng) -> Split {
    let (p, k, d) = (cfg.inputs, cfg.keypoints, cfg.dim);
    let mut split = Split {
        inputs: Vec::with_capacity(n),
        targets: Vec::with_capacity(n),
        clean_targets: Vec::with_capacity(n),
        normalization_scale: Vec::with_capacity(n),
        outlier: Vec::with_capacity(n),
    };
    for _ in 0..n {
        let x = DVector::from_fn(p, |_, _| rng.sample::<f64, _>(StandardNormal));
        let clean = w * &x;
        let mut target = clean.clone();
        let mut flags = Vec::with_capacity(k);
        for kp in 0..k {
            let e = noise.draw(rng);
            let is_outlier = rng.random::<f64>() < cfg.outlier_fraction;
            for j in 0..d {
                let i = kp * d + j;
                target[i] = if is_outlier {
                    rng.random_range(-cfg.outlier_range..=cfg.outlier_range)
                } else {
                    clean[i] + e[j]
                };
            }
            flags.push(is_outlier);
        }
        let scale = cfg.normalization_scale * (0.5 + rng.random::<f64>());
        split.inputs.push(x.as_slice().to_vec());
        split.targets.push(target.as_slice().to_vec());
        split.clean_targets.push(clean.as_slice().to_vec());
        split.normalization_scale.push(scale);
        split.outlier.push(flags);
    }
    split
}

/// Draws a dataset; identical `(config, seed)` give identical datasets.
pub fn generate(config: &DatasetConfig, seed: u64) -> Result<SyntheticDataset> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rows = config.keypoints * config.dim;
    let w = DMatrix::from_fn(rows, config.inputs, |_, _| {
        config.weight_scale * rng.sample::<f64, _>(StandardNormal)
    });
    let noise = NoiseDraw::new(config)?;
    let train = generate_split(config, &w, &noise, config.n_train, &mut rng);
    let test = generate_split(config, &w, &noise, config.n_test, &mut rng);
    Ok(SyntheticDataset {
        config: config.clone(),
        seed,
        generator: TrueGenerator {
            w_true: crate::spd::matrix_to_rows(&w),
            noise: config.noise.clone(),
            outlier_fraction: config.outlier_fraction,
            outlier_range: config.outlier_range,
        },
        train,
        test,
    })
}
