use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::dataset::{generate, DatasetConfig};
use super::fit::{fit, FitReport, OptimizerConfig};
use crate::error::{domain, Error, Result};
use crate::losses::{CovarianceMode, Family, LossConfig, Parameterization};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub dataset: DatasetConfig,
    pub optimizer: OptimizerConfig,
    pub delta: f64,
    pub theta: f64,
    pub parameterization: Parameterization,
    pub families: Vec<Family>,
    pub modes: Vec<CovarianceMode>,
    pub calibration_bin_size: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            dataset: DatasetConfig::default(),
            optimizer: OptimizerConfig::default(),
            delta: 1.0,
            theta: 0.1,
            parameterization: Parameterization::Nu,
            families: Family::ALL.to_vec(),
            modes: CovarianceMode::ALL.to_vec(),
            calibration_bin_size: 100,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.dataset.validate()?;
        self.optimizer.validate()?;
        if self.families.is_empty() || self.modes.is_empty() {
            return domain("families and modes must be non-empty");
        }
        if self.calibration_bin_size == 0 {
            return domain("calibration_bin_size must be at least 1");
        }
        self.loss(Family::Huber, CovarianceMode::Full).validate()
    }

    pub fn loss(&self, family: Family, mode: CovarianceMode) -> LossConfig {
        LossConfig {
            family,
            mode,
            delta: self.delta,
            theta: self.theta,
            parameterization: self.parameterization,
            normalizer: true,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
#[serde(tag = "status", rename_all = "lowercase")]
pub enum RunOutcome {
    Ok { report: Box<FitReport> },
    Failed { family: Family, mode: CovarianceMode, error: String },
}

/// One row of the comparison table; metric fields are `None` for failed runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableRow {
    pub family: Family,
    pub mode: CovarianceMode,
    pub status: String,
    pub test_nll: Option<f64>,
    pub mean_error: Option<f64>,
    pub nme: Option<f64>,
    pub pckh: Option<f64>,
    pub median_location_error: Option<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct ExperimentReport {
    pub seed: u64,
    pub table: Vec<TableRow>,
    pub runs: Vec<RunOutcome>,
}

impl ExperimentReport {
    pub fn report(&self, family: Family, mode: CovarianceMode) -> Option<&FitReport> {
        self.runs.iter().find_map(|r| match r {
            RunOutcome::Ok { report } if report.family == family && report.mode == mode => Some(report.as_ref()),
            _ => None,
        })
    }
}

/// Fits every family × mode pair on one dataset. Runs execute in parallel and
/// are reported in grid order.
pub fn run_experiment(cfg: &ExperimentConfig, seed: u64, allow_partial: bool) -> Result<ExperimentReport> {
    cfg.validate()?;
    let data = generate(&cfg.dataset, seed)?;
    let grid: Vec<(Family, CovarianceMode)> = cfg
        .families
        .iter()
        .flat_map(|&f| cfg.modes.iter().map(move |&m| (f, m)))
        .collect();
    let results: Vec<(Family, CovarianceMode, Result<FitReport>)> = grid
        .par_iter()
        .map(|&(f, m)| (f, m, fit(&data, &cfg.loss(f, m), &cfg.optimizer, cfg.calibration_bin_size)))
        .collect();

    let mut table = Vec::with_capacity(results.len());
    let mut runs = Vec::with_capacity(results.len());
    for (family, mode, res) in results {
        match res {
            Ok(r) => {
                table.push(TableRow {
                    family,
                    mode,
                    status: "ok".into(),
                    test_nll: Some(r.test_nll),
                    mean_error: Some(r.test_mean_error),
                    nme: Some(r.nme),
                    pckh: Some(r.pckh),
                    median_location_error: Some(r.median_location_error),
                });
                runs.push(RunOutcome::Ok { report: Box::new(r) });
            }
            Err(e) => {
                if !allow_partial {
                    return Err(Error::Numeric(format!("{} / {} failed: {e}", family.name(), mode.name())));
                }
                table.push(TableRow {
                    family,
                    mode,
                    status: "failed".into(),
                    test_nll: None,
                    mean_error: None,
                    nme: None,
                    pckh: None,
                    median_location_error: None,
                });
                runs.push(RunOutcome::Failed { family, mode, error: e.to_string() });
            }
        }
    }
    Ok(ExperimentReport { seed, table, runs })
}
