mod common;

use common::*;
use mvhuber::dist::{sample, to_canonical, variance_factor, HuberParams, MomentForm};
use mvhuber::estimator::*;
use mvhuber::fusion::{fuse, FusionProblem};
use mvhuber::losses::{CovarianceMode, Family, LossConfig, Parameterization};
use mvhuber::spd::SpdMatrix;
use nalgebra::{DMatrix, DVector};
use rand::Rng;

fn quiet_config(n_train: usize, n_test: usize) -> DatasetConfig {
    DatasetConfig {
        n_train,
        n_test,
        outlier_fraction: 0.0,
        noise: NoiseConfig { family: NoiseFamily::Gauss, scale: 0.0, ..Default::default() },
        ..Default::default()
    }
}

#[test]
fn dataset_is_deterministic_and_seed_dependent() {
    let cfg = DatasetConfig { n_train: 200, n_test: 50, ..Default::default() };
    let a = serde_json::to_vec(&generate(&cfg, 11).unwrap()).unwrap();
    let b = serde_json::to_vec(&generate(&cfg, 11).unwrap()).unwrap();
    assert_eq!(a, b);
    assert_ne!(a, serde_json::to_vec(&generate(&cfg, 12).unwrap()).unwrap());
}

#[test]
fn noiseless_targets_equal_the_linear_map() {
    let ds = generate(&quiet_config(100, 10), 5).unwrap();
    let w = DMatrix::from_fn(2, 4, |i, j| ds.generator.w_true[i][j]);
    for (x, t) in ds.train.inputs.iter().zip(&ds.train.targets) {
        let expect = &w * DVector::from_column_slice(x);
        assert_eq!(expect.as_slice(), t.as_slice());
    }
}

#[test]
fn huber_noise_second_moment() {
    let alpha = variance_factor(2, 1.0).unwrap();
    let cfg = DatasetConfig {
        n_train: 100_000,
        n_test: 1,
        outlier_fraction: 0.0,
        noise: NoiseConfig {
            family: NoiseFamily::Huber,
            delta: 1.0,
            // covariance α·I is the law with Λ = I
            covariance: Some(vec![vec![alpha, 0.0], vec![0.0, alpha]]),
            scale: 1.0,
        },
        ..Default::default()
    };
    let ds = generate(&cfg, 9).unwrap();
    let mut m2 = DMatrix::zeros(2, 2);
    for (t, c) in ds.train.targets.iter().zip(&ds.train.clean_targets) {
        let e = DVector::from_vec(vec![t[0] - c[0], t[1] - c[1]]);
        m2 += &e * e.transpose();
    }
    m2 /= ds.train.len() as f64;
    let target = DMatrix::identity(2, 2) * alpha;
    assert!((&m2 - &target).amax() / alpha < 0.02, "{m2}");
}

#[test]
fn whitening_properties() {
    let mut r = rng(3);
    let lambda = random_spd(&mut r, 2, 0.2, 4.0);
    let p = to_canonical(&MomentForm::new(DVector::from_vec(vec![3.0, -1.0]), lambda, 1.0).unwrap()).unwrap();
    let a = sample(&p, 500, 1);
    let b = sample(&p, 500, 2);
    let rows: Vec<Vec<f64>> = a.iter().zip(&b).map(|(u, v)| vec![u[0], u[1], v[0], v[1]]).collect();
    let w = WhiteningTransform::fit(&rows, 2, 2).unwrap();
    let white: Vec<Vec<f64>> = rows.iter().map(|t| w.apply(t).unwrap()).collect();
    let n = white.len() as f64;
    for k in 0..2 {
        let mean = white.iter().fold(DVector::zeros(2), |acc, t| acc + DVector::from_column_slice(&t[2 * k..2 * k + 2])) / n;
        assert!(mean.amax() < 1e-8);
        let cov = white.iter().fold(DMatrix::zeros(2, 2), |acc, t| {
            let v = DVector::from_column_slice(&t[2 * k..2 * k + 2]) - &mean;
            acc + &v * v.transpose()
        }) / n;
        assert!((cov - DMatrix::identity(2, 2)).amax() < 1e-8);
    }
    for t in &rows {
        let back = w.invert(&w.apply(t).unwrap()).unwrap();
        assert!(max_rel_error(&back, t) < 1e-10);
    }

    let scaled: Vec<Vec<f64>> = white.iter().map(|t| t.iter().map(|v| 3.0 * v).collect()).collect();
    let w3 = WhiteningTransform::fit(&scaled, 2, 2).unwrap();
    for k in 0..2 {
        let sv = w3.linear(k).eigen().values.clone();
        assert!(sv.iter().all(|s| (s - 1.0 / 3.0).abs() < 1e-10), "{sv}");
    }

    let flat: Vec<Vec<f64>> = (0..10).map(|i| vec![i as f64, 2.0 * i as f64]).collect();
    assert!(WhiteningTransform::fit(&flat, 1, 2).is_err());
    assert!(WhiteningTransform::fit(&rows[..2], 2, 2).is_err());
}

#[test]
fn zero_noise_is_recovered_by_every_family() {
    let ds = generate(&quiet_config(300, 200), 21).unwrap();
    let opt = OptimizerConfig::default();
    for family in Family::ALL {
        let identity = LossConfig::new(family, CovarianceMode::Identity);
        let full_mu = LossConfig { parameterization: Parameterization::Mu, ..LossConfig::new(family, CovarianceMode::Full) };
        for loss in [identity, full_mu] {
            let rep = fit(&ds, &loss, &opt, 50).unwrap();
            assert!(rep.test_mean_error <= 1e-3, "{} {}: {}", family.name(), loss.mode.name(), rep.test_mean_error);
        }
    }
}

#[test]
fn identity_gauss_equals_least_squares() {
    let cfg = DatasetConfig { n_train: 400, n_test: 20, ..Default::default() };
    let ds = generate(&cfg, 8).unwrap();
    let rep = fit(&ds, &LossConfig::new(Family::Gauss, CovarianceMode::Identity), &OptimizerConfig::default(), 10).unwrap();
    let wt = &rep.model.whitening;
    let n = ds.train.len();
    let x = DMatrix::from_fn(n, 5, |i, j| if j < 4 { ds.train.inputs[i][j] } else { 1.0 });
    let y = DMatrix::from_fn(n, 2, |i, j| wt.apply(&ds.train.targets[i]).unwrap()[j]);
    let xtx = x.transpose() * &x;
    let ls = xtx.cholesky().unwrap().solve(&(x.transpose() * y)).transpose();
    let gap = (&rep.model.weights - &ls).amax();
    assert!(gap <= 1e-3, "{gap}\n{}\n{ls}", rep.model.weights);
}

#[test]
fn fit_report_invariants() {
    let cfg = DatasetConfig { n_train: 300, n_test: 250, ..Default::default() };
    let ds = generate(&cfg, 4).unwrap();
    let opt = OptimizerConfig { steps: 200, ..Default::default() };
    let rep = fit(&ds, &LossConfig::new(Family::Huber, CovarianceMode::Full), &opt, 40).unwrap();
    assert_eq!(rep.loss_trace.len(), 201);
    assert_eq!(rep.calibration.iter().map(|b| b.count).sum::<usize>(), 250);
    assert!(rep.calibration.windows(2).all(|w| w[0].expected <= w[1].expected));
    assert!(rep.loss_trace.last().unwrap() < rep.loss_trace.first().unwrap());
    let again = fit(&ds, &LossConfig::new(Family::Huber, CovarianceMode::Full), &opt, 40).unwrap();
    assert_eq!(serde_json::to_string(&rep).unwrap(), serde_json::to_string(&again).unwrap());
    // test NLL recomputed by hand from the predicted distributions
    let mut total = 0.0;
    for (x, t) in ds.test.inputs.iter().zip(&ds.test.targets) {
        let p = &rep.model.predict_params(x).unwrap()[0];
        total -= mvhuber::dist::log_pdf(t, p).unwrap();
    }
    assert!((total / 250.0 - rep.test_nll).abs() < 1e-9 * rep.test_nll.abs().max(1.0));
}

#[test]
fn metrics_examples() {
    let t = vec![vec![1.0, 2.0], vec![0.0, 0.0]];
    let m = evaluate_metrics(&t, &t, &[1.0, 2.0], 2, PCKH_THRESHOLD).unwrap();
    assert_eq!((m.nme, m.pckh), (0.0, 1.0));
    let m = evaluate_metrics(&[vec![3.0, 4.0]], &[vec![0.0, 0.0]], &[5.0], 2, 0.5).unwrap();
    assert!((m.nme - 1.0).abs() < 1e-15 && m.pckh == 0.0);
    // errors 1, 2, 0.5 with scales 2, 2, 4: normalized 0.5, 1, 0.125
    let preds = vec![vec![1.0, 0.0], vec![0.0, 2.0], vec![0.3, 0.4]];
    let zeros = vec![vec![0.0, 0.0]; 3];
    let m = evaluate_metrics(&preds, &zeros, &[2.0, 2.0, 4.0], 2, 0.5).unwrap();
    assert!((m.nme - (0.5 + 1.0 + 0.125) / 3.0).abs() < 1e-15);
    assert!((m.pckh - 2.0 / 3.0).abs() < 1e-15);
    assert!(evaluate_metrics(&preds, &zeros[..2], &[1.0, 1.0, 1.0], 2, 0.5).is_err());
    assert!(evaluate_metrics(&preds, &zeros, &[1.0, 0.0, 1.0], 2, 0.5).is_err());
}

#[test]
fn expected_error_uses_the_variance_factor() {
    let p = HuberParams::standard(2, 1.0).unwrap();
    let e = expected_error(&p).unwrap();
    assert!((e * e / 2.0 - 3.0765).abs() < 1e-3);
}

#[test]
fn single_bin_calibration_by_monte_carlo() {
    let mut r = rng(12);
    let lambda = random_spd(&mut r, 2, 0.5, 2.0);
    let p = to_canonical(&MomentForm::new(DVector::zeros(2), lambda, 1.0).unwrap()).unwrap();
    let errs = sample(&p, 100_000, 77);
    let preds = vec![p.clone(); errs.len()];
    let bins = calibration_curve(&preds, &errs, errs.len()).unwrap();
    assert_eq!(bins.len(), 1);
    assert!((bins[0].empirical / bins[0].expected - 1.0).abs() < 0.02);
    let mean_norm = errs.iter().map(|e| e.norm()).sum::<f64>() / errs.len() as f64;
    assert!(mean_norm < bins[0].empirical);
    assert!(calibration_curve(&[], &[], 1).is_err());
    assert!(calibration_curve(&preds[..1], &errs[..1], 0).is_err());
}

#[test]
fn calibration_bin_layout() {
    let expected: Vec<f64> = (0..10).rev().map(|i| i as f64).collect();
    let norms = vec![1.0; 10];
    let bins = calibration_bins(&expected, &norms, 3).unwrap();
    assert_eq!(bins.iter().map(|b| b.count).collect::<Vec<_>>(), vec![3, 3, 4]);
    assert!((bins[0].expected - (5.0f64 / 3.0).sqrt()).abs() < 1e-15);
    assert_eq!(calibration_bins(&expected, &norms, 10).unwrap().len(), 1);
}

#[test]
fn tta_anisotropic_matches_grid_oracle() {
    let map = MirrorMap::reflection(2, 0, 0.5).unwrap();
    let orig = to_canonical(&MomentForm::new(
        DVector::from_vec(vec![0.2, 1.0]),
        SpdMatrix::new(DMatrix::from_row_slice(2, 2, &[4.0, 1.5, 1.5, 1.0])).unwrap(),
        1.0,
    ).unwrap()).unwrap();
    let mirrored = to_canonical(&MomentForm::new(
        DVector::from_vec(vec![-1.5, 3.0]),
        SpdMatrix::new(DMatrix::from_row_slice(2, 2, &[0.5, -0.2, -0.2, 3.0])).unwrap(),
        1.0,
    ).unwrap()).unwrap();
    let back = map.transform_params(&mirrored).unwrap();
    // mirrored mean (−1.5, 3) lands on (2.5, 3) after reflecting about x = 0.5
    assert!((back.mean() - DVector::from_vec(vec![2.5, 3.0])).amax() < 1e-12);
    let prob = tta_fuse(&orig, &mirrored, &map, TtaMode::Probabilistic).unwrap();
    let mean = tta_fuse(&orig, &mirrored, &map, TtaMode::Mean).unwrap();
    let f = |x: f64, y: f64| {
        let v = DVector::from_vec(vec![x, y]);
        [&orig, &back]
            .iter()
            .map(|p| huber_ref((p.a().matrix() * &v - p.nu()).norm(), 1.0))
            .sum::<f64>()
    };
    let best = grid_then_polish(f, [-3.0, -3.0], [6.0, 6.0], 450, 1e-9);
    assert!((prob[0] - best[0]).hypot(prob[1] - best[1]) < 1e-3, "{prob} vs {best:?}");
    assert!((&prob - &mean).norm() > 0.1);
    let direct = fuse(&FusionProblem::new(vec![orig.clone(), back]).unwrap()).unwrap().y_star;
    assert!((direct - prob).amax() < 1e-12);

    let singular = MirrorMap { linear: DMatrix::zeros(2, 2), offset: DVector::zeros(2) };
    assert!(tta_fuse(&orig, &mirrored, &singular, TtaMode::Mean).is_err());
}

#[test]
fn tta_isotropic_quadratic_pair_gives_midpoint() {
    let map = MirrorMap::reflection(2, 1, 0.0).unwrap();
    let a = HuberParams::new(DVector::from_vec(vec![0.1, 0.2]), SpdMatrix::identity(2), 1.0).unwrap();
    let m = HuberParams::new(DVector::from_vec(vec![0.3, -0.4]), SpdMatrix::identity(2), 1.0).unwrap();
    for mode in [TtaMode::Probabilistic, TtaMode::Mean] {
        let y = tta_fuse(&a, &m, &map, mode).unwrap();
        assert!((y - DVector::from_vec(vec![0.2, 0.3])).amax() < 1e-12);
    }
}

#[test]
fn distribution_fit_recovers_parameters() {
    let mut r = rng(31);
    let lambda = random_spd(&mut r, 2, 0.5, 3.0);
    let mu = DVector::from_vec(vec![r.random_range(-2.0..2.0), r.random_range(-2.0..2.0)]);
    let truth = to_canonical(&MomentForm::new(mu.clone(), lambda.clone(), 1.0).unwrap()).unwrap();
    let xs = sample(&truth, 50_000, 4);
    let fitted = fit_distribution(&xs, 1.0, 0.1, &OptimizerConfig::default()).unwrap();
    let cov_fit = fitted.params.a().square().inverse();
    let cov_true = lambda.inverse();
    assert!((&cov_fit - &cov_true).norm() / cov_true.norm() < 0.05);
    assert!((fitted.params.mean() - mu).norm() < 0.05);
}
