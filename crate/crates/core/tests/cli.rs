mod common;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use common::*;
use serde_json::Value;

struct Outcome {
    code: i32,
    stdout: String,
    stderr: String,
}

impl Outcome {
    fn lines(&self) -> Vec<Value> {
        self.stdout
            .lines()
            .map(|l| serde_json::from_str(l).unwrap_or_else(|e| panic!("{l:?}: {e}")))
            .collect()
    }
}

fn mvhuber<S: AsRef<std::ffi::OsStr>>(args: &[S]) -> Outcome {
    let out = Command::new(env!("CARGO_BIN_EXE_mvhuber")).args(args).output().expect("binary runs");
    Outcome {
        code: out.status.code().expect("exit code"),
        stdout: String::from_utf8(out.stdout).unwrap(),
        stderr: String::from_utf8(out.stderr).unwrap(),
    }
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

fn sidecar(path: &Path) -> PathBuf {
    PathBuf::from(format!("{}.meta.json", path.display()))
}

fn write_rows(path: &Path, rows: &[Vec<f64>]) {
    let d = rows[0].len();
    let mut text = (1..=d).map(|i| format!("x{i}")).collect::<Vec<_>>().join(",") + "\n";
    for r in rows {
        text += &(r.iter().map(|v| format!("{v:?}")).collect::<Vec<_>>().join(",") + "\n");
    }
    fs::write(path, text).unwrap();
}

fn read_rows(path: &Path) -> Vec<Vec<f64>> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .skip(1)
        .map(|l| l.split(',').map(|v| v.parse().unwrap()).collect())
        .collect()
}

#[test]
fn constants_reports_alpha_and_header() {
    let o = mvhuber(&["constants", "--d", "2", "--delta", "1"]);
    assert_eq!(o.code, 0, "{}", o.stderr);
    let lines = o.lines();
    assert_eq!(lines[0]["command"], "constants");
    assert_eq!(lines[0]["config"]["d"], 2);
    let alpha = lines[1]["alpha"].as_f64().unwrap();
    assert!((alpha - 3.07).abs() < 0.01, "{alpha}");
    assert!(lines[1]["c_d"].as_f64().unwrap() > 0.0);
    assert_eq!(lines[1]["header"], lines[0]);

    let o = mvhuber(&["constants", "--d", "2", "--delta", "10"]);
    let alpha = o.lines()[1]["alpha"].as_f64().unwrap();
    assert!((alpha - 1.0).abs() < 0.02, "{alpha}");
}

#[test]
fn usage_errors_exit_two() {
    let o = mvhuber(&["constants", "--d", "0", "--delta", "1"]);
    assert_eq!(o.code, 2);
    assert!(!o.stderr.is_empty());
    assert_eq!(mvhuber(&["constants", "--d", "2", "--delta", "-1"]).code, 2);
    assert_eq!(mvhuber(&["constants", "--d", "2", "--delta", "1", "--bogus"]).code, 2);
    assert_eq!(mvhuber(&["nonsense"]).code, 2);
    assert_eq!(mvhuber::<&str>(&[]).code, 2);

    let dir = tempfile::tempdir().unwrap();
    let dist = dir.path().join("d.json");
    fs::write(&dist, r#"{"mu":[0,0],"Lambda":[[1,0],[0,1]],"delta":1}"#).unwrap();
    let out = dir.path().join("s.csv");
    // sampling without a seed is refused
    assert_eq!(mvhuber(&["sample", "--dist", p(&dist), "--n", "10", "--out", p(&out)]).code, 2);
    assert_eq!(mvhuber(&["logpdf", "--dist", p(&dir.path().join("missing.json")), "--samples", p(&out)]).code, 2);
    fs::write(&dist, r#"{"mu":[0,0],"Lambda":[[1,2],[2,1]],"delta":1}"#).unwrap();
    assert_eq!(mvhuber(&["sample", "--dist", p(&dist), "--n", "10", "--seed", "1", "--out", p(&out)]).code, 2);
}

#[test]
fn sample_and_logpdf_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let dist = dir.path().join("d.json");
    fs::write(&dist, r#"{"d":2,"mu":[1.0,-1.0],"Lambda":[[2.0,0.5],[0.5,1.0]],"delta":1.0}"#).unwrap();
    let samples = dir.path().join("s.csv");
    let o = mvhuber(&["sample", "--dist", p(&dist), "--n", "500", "--seed", "7", "--out", p(&samples)]);
    assert_eq!(o.code, 0, "{}", o.stderr);
    let lines = o.lines();
    assert_eq!(lines[0]["seed"], 7);
    assert_eq!(lines[1]["written"], 500);
    assert_eq!(read_json(&sidecar(&samples)), lines[0]);
    let rows = read_rows(&samples);
    assert_eq!(rows.len(), 500);
    assert!(fs::read_to_string(&samples).unwrap().starts_with("x1,x2\n"));

    let lp = dir.path().join("lp.csv");
    let o = mvhuber(&["logpdf", "--dist", p(&dist), "--samples", p(&samples), "--out", p(&lp)]);
    assert_eq!(o.code, 0, "{}", o.stderr);
    assert!(sidecar(&lp).exists());
    let values = read_rows(&lp);
    assert_eq!(values.len(), 500);

    let params = mvhuber::io::parse_distribution(&fs::read_to_string(&dist).unwrap()).unwrap();
    for (row, v) in rows.iter().zip(&values) {
        let expect = mvhuber::dist::log_pdf(row, &params).unwrap();
        assert_eq!(v[0], expect);
    }

    let o = mvhuber(&["logpdf", "--dist", p(&dist), "--samples", p(&samples)]);
    assert_eq!(o.lines()[1]["logpdf"].as_array().unwrap().len(), 500);
}

#[test]
fn fit_mle_recovers_the_generating_distribution() {
    let dir = tempfile::tempdir().unwrap();
    let dist = dir.path().join("d.json");
    fs::write(&dist, r#"{"mu":[0.5,-1.0],"Lambda":[[1.5,-0.4],[-0.4,0.8]],"delta":1.0}"#).unwrap();
    let samples = dir.path().join("s.csv");
    let o = mvhuber(&["sample", "--dist", p(&dist), "--n", "100000", "--seed", "11", "--out", p(&samples)]);
    assert_eq!(o.code, 0);
    let fit = dir.path().join("fit.json");
    let o = mvhuber(&["fit-mle", "--samples", p(&samples), "--d", "2", "--delta", "1", "--out", p(&fit)]);
    assert_eq!(o.code, 0, "{}", o.stderr);
    let body = read_json(&fit);
    assert_eq!(body["header"]["command"], "fit-mle");
    assert_eq!(body["samples"], 100000);
    let lambda: Vec<Vec<f64>> = serde_json::from_value(body["moment"]["Lambda"].clone()).unwrap();
    let est = nalgebra::Matrix2::new(lambda[0][0], lambda[0][1], lambda[1][0], lambda[1][1]);
    let truth = nalgebra::Matrix2::new(1.5, -0.4, -0.4, 0.8);
    let inv_est = est.try_inverse().unwrap();
    let inv_truth = truth.try_inverse().unwrap();
    let rel = (inv_est - inv_truth).norm() / inv_truth.norm();
    assert!(rel < 0.05, "relative Frobenius error {rel}");
    assert!(body["nll"].as_f64().unwrap().is_finite());
}

#[test]
fn fit_mle_gaussian_limit_matches_sample_mean() {
    let dir = tempfile::tempdir().unwrap();
    let mut r = rng(21);
    let n = 20_000;
    let (mean, sd) = ([1.0, -2.0], [0.7, 1.3]);
    let rows: Vec<Vec<f64>> = (0..n).map(|_| (0..2).map(|k| mean[k] + sd[k] * gaussian(&mut r)).collect()).collect();
    let samples = dir.path().join("g.csv");
    write_rows(&samples, &rows);
    let o = mvhuber(&["fit-mle", "--samples", p(&samples), "--delta", "10"]);
    assert_eq!(o.code, 0, "{}", o.stderr);
    let mu: Vec<f64> = serde_json::from_value(o.lines()[1]["moment"]["mu"].clone()).unwrap();
    for k in 0..2 {
        let m = rows.iter().map(|x| x[k]).sum::<f64>() / n as f64;
        let var = rows.iter().map(|x| (x[k] - m).powi(2)).sum::<f64>() / (n - 1) as f64;
        let se = (var / n as f64).sqrt();
        assert!((mu[k] - m).abs() < 3.0 * se, "coordinate {k}: {} vs {m} (se {se})", mu[k]);
    }
}

#[test]
fn fit_mle_rejects_degenerate_samples() {
    let dir = tempfile::tempdir().unwrap();
    let samples = dir.path().join("same.csv");
    write_rows(&samples, &vec![vec![1.0, 2.0]; 50]);
    let o = mvhuber(&["fit-mle", "--samples", p(&samples)]);
    assert_eq!(o.code, 3, "{}", o.stderr);
    let o = mvhuber(&["fit-mle", "--samples", p(&samples), "--d", "3"]);
    assert_eq!(o.code, 2);
}

#[test]
fn fuse_writes_the_fused_point() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("in.json");
    fs::write(
        &input,
        r#"{"delta":1.0,"estimates":[
            {"mu":[0,0],"Lambda":[[1,0],[0,1]],"delta":1.0},
            {"mu":[10,0],"Lambda":[[1,0],[0,1]],"delta":1.0},
            {"mu":[0,10],"Lambda":[[1,0],[0,1]],"delta":1.0}]}"#,
    )
    .unwrap();
    let out = dir.path().join("out.json");
    let o = mvhuber(&["fuse", "--input", p(&input), "--out", p(&out), "--max-iter", "100000"]);
    assert_eq!(o.code, 0, "{}", o.stderr);
    let body = read_json(&out);
    assert_eq!(body["converged"], true);
    assert_eq!(body["header"]["config"]["args"]["max_iter"], 100000);
    let y: Vec<f64> = serde_json::from_value(body["y"].clone()).unwrap();
    let f = |a: f64, b: f64| [(0.0, 0.0), (10.0, 0.0), (0.0, 10.0)].iter().map(|&(u, v)| huber_ref((a - u).hypot(b - v), 1.0)).sum::<f64>();
    let best = grid_then_polish(f, [-2.0, -2.0], [12.0, 12.0], 280, 1e-8);
    assert!((y[0] - best[0]).hypot(y[1] - best[1]) < 1e-3);

    fs::write(&input, r#"{"delta":1.0,"estimates":[{"mu":[0,0],"Lambda":[[1,0],[0,1]],"delta":2.0}]}"#).unwrap();
    assert_eq!(mvhuber(&["fuse", "--input", p(&input)]).code, 2);
    fs::write(&input, r#"{"delta":1.0,"estimates":[]}"#).unwrap();
    assert_eq!(mvhuber(&["fuse", "--input", p(&input)]).code, 2);
}

#[test]
fn gradcheck_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let report = dir.path().join("g.json");
    let o = mvhuber(&["gradcheck", "--seed", "3", "--trials", "200", "--out", p(&report)]);
    assert_eq!(o.code, 0, "{}", o.stderr);
    let body = read_json(&report);
    assert_eq!(body["passed"], true);
    for c in body["checks"].as_array().unwrap() {
        assert!(c["worst_relative_error"].as_f64().unwrap() < c["tolerance"].as_f64().unwrap());
    }

    let o = mvhuber(&["gradcheck", "--trials", "20", "--corrupt-gradient", "1e-3"]);
    assert_eq!(o.code, 1);
    assert_eq!(o.lines()[1]["passed"], false);
    assert_eq!(mvhuber(&["gradcheck", "--trials", "0"]).code, 2);
}

#[test]
fn experiment_writes_report_and_calibration_files() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("report.json");
    let cal = dir.path().join("cal");
    let o = mvhuber(&[
        "experiment",
        "--seed",
        "4",
        "--out",
        p(&out),
        "--calibration-dir",
        p(&cal),
        "--set",
        "optimizer.steps=200",
        "--set",
        "dataset.n_train=300",
        "--set",
        "dataset.n_test=300",
        "--set",
        "calibration_bin_size=50",
    ]);
    assert_eq!(o.code, 0, "{}", o.stderr);
    let body = read_json(&out);
    assert_eq!(body["header"]["config"]["experiment"]["optimizer"]["steps"], 200);
    assert_eq!(body["table"].as_array().unwrap().len(), 12);
    assert_eq!(o.lines().last().unwrap()["table"], body["table"]);
    for family in ["huber", "gauss", "laplace", "charbonnier"] {
        for mode in ["identity", "diagonal", "full"] {
            let csv = cal.join(format!("{family}_{mode}.csv"));
            assert!(csv.exists(), "{}", csv.display());
            assert!(sidecar(&csv).exists());
            let rows = read_rows(&csv);
            assert_eq!(rows.len(), 6);
        }
    }
    assert_eq!(mvhuber(&["experiment", "--seed", "1", "--out", p(&out), "--set", "families=[\"cauchy\"]"]).code, 2);
    assert_eq!(mvhuber(&["experiment", "--seed", "1", "--out", p(&out), "--set", "novalue"]).code, 2);
    assert_eq!(mvhuber(&["experiment", "--out", p(&out)]).code, 2);
}

#[test]
fn experiment_without_outliers_or_noise_converges_everywhere() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("report.json");
    let o = mvhuber(&[
        "experiment",
        "--seed",
        "0",
        "--out",
        p(&out),
        "--set",
        "dataset.outlier_fraction=0",
        "--set",
        "dataset.noise.scale=1e-4",
        "--set",
        "modes=[\"identity\"]",
    ]);
    assert_eq!(o.code, 0, "{}", o.stderr);
    for row in read_json(&out)["table"].as_array().unwrap() {
        let err = row["mean_error"].as_f64().unwrap();
        assert!(err < 1e-2, "{}: {err}", row["family"]);
    }
}

#[test]
fn calibrate_bins_predictions() {
    let dir = tempfile::tempdir().unwrap();
    let dist = r#"{"mu":[0.0,0.0],"Lambda":[[1.0,0.0],[0.0,4.0]],"delta":1.0}"#;
    fs::write(dir.path().join("d.json"), dist).unwrap();
    let targets = dir.path().join("t.csv");
    let o = mvhuber(&["sample", "--dist", p(&dir.path().join("d.json")), "--n", "2000", "--seed", "5", "--out", p(&targets)]);
    assert_eq!(o.code, 0);
    let preds = dir.path().join("p.json");
    fs::write(&preds, format!("[{}]", vec![dist; 2000].join(","))).unwrap();
    let out = dir.path().join("cal.csv");
    let o = mvhuber(&["calibrate", "--predictions", p(&preds), "--targets", p(&targets), "--bin-size", "500", "--out", p(&out)]);
    assert_eq!(o.code, 0, "{}", o.stderr);
    assert!(sidecar(&out).exists());
    let bins = read_rows(&out);
    assert_eq!(bins.len(), 4);
    for b in bins {
        assert!((b[1] / b[0] - 1.0).abs() < 0.1, "{b:?}");
        assert_eq!(b[2], 500.0);
    }
    fs::write(&preds, format!("[{}]", vec![dist; 10].join(","))).unwrap();
    assert_eq!(mvhuber(&["calibrate", "--predictions", p(&preds), "--targets", p(&targets)]).code, 2);
}
