//! Synthetic regression experiments.
//!
//! A linear head maps inputs to raw outputs; [`crate::losses`] turns raw
//! outputs into a per-keypoint distribution. Targets are whitened per keypoint
//! before training, and every reported number is computed in the original
//! target frame.

mod dataset;
mod experiment;
mod fit;
mod metrics;
mod tta;
mod whitening;

pub use dataset::{generate, DatasetConfig, NoiseConfig, NoiseFamily, Split, SyntheticDataset, TrueGenerator};
pub use experiment::{run_experiment, ExperimentConfig, ExperimentReport, RunOutcome, TableRow};
pub use fit::{
    fit, fit_distribution, Checkpoint, DistributionFit, FitReport, FittedModel, OptimizerConfig, Prediction,
    Schedule,
};
pub use metrics::{
    calibration_bins, calibration_curve, evaluate_metrics, expected_error, median, LandmarkMetrics, PCKH_THRESHOLD,
};
pub use tta::{tta_fuse, MirrorMap, TtaMode};
pub use whitening::WhiteningTransform;
