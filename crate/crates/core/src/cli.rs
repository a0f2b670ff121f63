//! The `mvhuber` command line.
//!
//! Every command prints one JSON header line to stdout holding the resolved
//! arguments and seed, then its result. Exit codes: 0 success, 1 failed check,
//! 2 usage error, 3 numeric or runtime failure.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use nalgebra::DVector;
use serde::Serialize;
use serde_json::{json, Value};

use crate::dist::{log_normalizing_constant, log_pdf, sample, variance_factor};
use crate::error::{Error, Result};
use crate::estimator::{calibration_curve, fit_distribution, run_experiment, ExperimentConfig, OptimizerConfig};
use crate::fusion::{fuse, FusionProblem};
use crate::gradcheck::{run_gradcheck, GradcheckConfig};
use crate::io::{
    parse_distribution, read_samples_csv, write_calibration_csv, write_samples_csv, DistributionJson, FusionInputJson,
    FusionOutputJson,
};

/// The experiment configuration used when `--config` is omitted.
pub const DEFAULT_EXPERIMENT_CONFIG: &str = include_str!("../configs/default_experiment.json");

pub const EXIT_OK: i32 = 0;
pub const EXIT_CHECK_FAILED: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_RUNTIME: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "mvhuber", version, about = "Multivariate Huber distribution toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Normalizing constant and variance factor.
    Constants(ConstantsArgs),
    /// Draw samples from a distribution.
    Sample(SampleArgs),
    /// Log-density of each row of a samples file.
    Logpdf(LogpdfArgs),
    /// Maximum-likelihood fit of a distribution to samples.
    FitMle(FitMleArgs),
    /// Maximum-likelihood fusion of several estimates.
    Fuse(FuseArgs),
    /// Finite-difference check of every analytic gradient.
    Gradcheck(GradcheckArgs),
    /// Fit every loss family and covariance mode on a synthetic dataset.
    Experiment(ExperimentArgs),
    /// Calibration curve of predicted distributions against observed targets.
    Calibrate(CalibrateArgs),
}

#[derive(Debug, Args, Serialize)]
struct ConstantsArgs {
    #[arg(long)]
    d: usize,
    #[arg(long, allow_negative_numbers = true)]
    delta: f64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
struct SampleArgs {
    /// Distribution JSON file.
    #[arg(long)]
    dist: PathBuf,
    #[arg(long)]
    n: usize,
    #[arg(long)]
    seed: u64,
    /// Samples CSV to write.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
struct LogpdfArgs {
    #[arg(long)]
    dist: PathBuf,
    #[arg(long)]
    samples: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
struct FitMleArgs {
    #[arg(long)]
    samples: PathBuf,
    /// Expected dimension; checked against the CSV header.
    #[arg(long)]
    d: Option<usize>,
    #[arg(long, default_value_t = 1.0, allow_negative_numbers = true)]
    delta: f64,
    #[arg(long, default_value_t = 0.1, allow_negative_numbers = true)]
    theta: f64,
    #[arg(long, default_value_t = 2000)]
    steps: usize,
    #[arg(long, default_value_t = 1e-2)]
    learning_rate: f64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
struct FuseArgs {
    /// Fusion input JSON file.
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value_t = 500)]
    max_iter: usize,
}

#[derive(Debug, Args, Serialize)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 200)]
    trials: usize,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, hide = true, allow_negative_numbers = true)]
    corrupt_gradient: Option<f64>,
}

#[derive(Debug, Args, Serialize)]
struct ExperimentArgs {
    /// Experiment configuration JSON; the bundled default when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: u64,
    /// Report JSON to write.
    #[arg(long)]
    out: PathBuf,
    /// Directory for one calibration CSV per run.
    #[arg(long)]
    calibration_dir: Option<PathBuf>,
    /// Override a configuration entry, e.g. `optimizer.steps=500`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Keep going when a run diverges.
    #[arg(long)]
    allow_partial: bool,
}

#[derive(Debug, Args, Serialize)]
struct CalibrateArgs {
    /// JSON array of predicted distributions, one per target row.
    #[arg(long)]
    predictions: PathBuf,
    /// Samples CSV of observed targets.
    #[arg(long)]
    targets: PathBuf,
    #[arg(long, default_value_t = 100)]
    bin_size: usize,
    /// Calibration CSV to write.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Domain(_) | Error::Dimension { .. } | Error::Io(_) | Error::Json(_) | Error::Csv(_) => EXIT_USAGE,
        Error::Range(_) | Error::Numeric(_) | Error::Precondition(_) | Error::Degenerate(_) => EXIT_RUNTIME,
    }
}

struct Ctx<'a> {
    out: &'a mut dyn Write,
    header: Value,
}

impl Ctx<'_> {
    fn line(&mut self, v: &Value) -> Result<()> {
        writeln!(self.out, "{}", serde_json::to_string(v)?)?;
        Ok(())
    }

    /// Writes `body` with the header embedded, to `path` or stdout.
    fn emit(&mut self, path: Option<&Path>, mut body: Value) -> Result<()> {
        if let Value::Object(m) = &mut body {
            m.insert("header".into(), self.header.clone());
        }
        match path {
            Some(p) => {
                fs::write(p, serde_json::to_string_pretty(&body)? + "\n")?;
                Ok(())
            }
            None => self.line(&body),
        }
    }

    /// CSV outputs carry their header in a `<file>.meta.json` sidecar.
    fn sidecar(&self, csv_path: &Path) -> Result<()> {
        let mut p = csv_path.as_os_str().to_owned();
        p.push(".meta.json");
        fs::write(PathBuf::from(p), serde_json::to_string_pretty(&self.header)? + "\n")?;
        Ok(())
    }
}

fn header(command: &str, seed: Option<u64>, config: &impl Serialize) -> Result<Value> {
    Ok(json!({
        "tool": "mvhuber",
        "version": env!("CARGO_PKG_VERSION"),
        "command": command,
        "seed": seed,
        "config": serde_json::to_value(config)?,
    }))
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::Domain(format!("cannot read {}: {e}", path.display())))
}

fn read_samples(path: &Path) -> Result<Vec<DVector<f64>>> {
    let f = fs::File::open(path).map_err(|e| Error::Domain(format!("cannot read {}: {e}", path.display())))?;
    read_samples_csv(f)
}

fn constants(a: &ConstantsArgs, out: &mut dyn Write) -> Result<i32> {
    let mut ctx = Ctx { out, header: header("constants", None, a)? };
    ctx.line(&ctx.header.clone())?;
    let ln_c = log_normalizing_constant(a.d, a.delta)?;
    let c = ln_c.exp();
    let body = json!({
        "d": a.d,
        "delta": a.delta,
        "c_d": if c.is_finite() && c > 0.0 { Some(c) } else { None },
        "log_c_d": ln_c,
        "alpha": variance_factor(a.d, a.delta)?,
    });
    ctx.emit(a.out.as_deref(), body)?;
    Ok(EXIT_OK)
}

fn sample_cmd(a: &SampleArgs, out: &mut dyn Write) -> Result<i32> {
    let p = parse_distribution(&read(&a.dist)?)?;
    let resolved = json!({"args": a, "distribution": DistributionJson::from_params(&p)});
    let mut ctx = Ctx { out, header: header("sample", Some(a.seed), &resolved)? };
    ctx.line(&ctx.header.clone())?;
    let xs = sample(&p, a.n, a.seed);
    write_samples_csv(fs::File::create(&a.out)?, &xs, p.dim())?;
    ctx.sidecar(&a.out)?;
    ctx.line(&json!({"written": a.n, "path": a.out}))?;
    Ok(EXIT_OK)
}

fn logpdf_cmd(a: &LogpdfArgs, out: &mut dyn Write) -> Result<i32> {
    let p = parse_distribution(&read(&a.dist)?)?;
    let xs = read_samples(&a.samples)?;
    let resolved = json!({"args": a, "distribution": DistributionJson::from_params(&p)});
    let mut ctx = Ctx { out, header: header("logpdf", None, &resolved)? };
    ctx.line(&ctx.header.clone())?;
    let values = xs.iter().map(|x| log_pdf(x.as_slice(), &p)).collect::<Result<Vec<_>>>()?;
    match &a.out {
        Some(path) => {
            let mut w = csv::Writer::from_path(path)?;
            w.write_record(["logpdf"])?;
            for v in &values {
                w.write_record([crate::io::format_float(*v)])?;
            }
            w.flush()?;
            ctx.sidecar(path)?;
        }
        None => ctx.line(&json!({ "logpdf": values }))?,
    }
    Ok(EXIT_OK)
}

fn fit_mle(a: &FitMleArgs, out: &mut dyn Write) -> Result<i32> {
    let opt = OptimizerConfig {
        learning_rate: a.learning_rate,
        steps: a.steps,
        checkpoint_every: 0,
        ..Default::default()
    };
    let resolved = json!({"args": a, "optimizer": opt});
    let mut ctx = Ctx { out, header: header("fit-mle", None, &resolved)? };
    ctx.line(&ctx.header.clone())?;
    let xs = read_samples(&a.samples)?;
    if let (Some(d), Some(first)) = (a.d, xs.first()) {
        crate::error::check_dim(d, first.len())?;
    }
    let fit = fit_distribution(&xs, a.delta, a.theta, &opt)?;
    let moment = crate::dist::to_moment(&fit.params);
    let body = json!({
        "distribution": DistributionJson::from_params(&fit.params),
        "moment": {"mu": moment.mu.as_slice(), "Lambda": moment.lambda.to_rows()},
        "nll": fit.nll,
        "nll_includes_normalizer": true,
        "samples": xs.len(),
    });
    ctx.emit(a.out.as_deref(), body)?;
    Ok(EXIT_OK)
}

fn fuse_cmd(a: &FuseArgs, out: &mut dyn Write) -> Result<i32> {
    let input: FusionInputJson = serde_json::from_str(&read(&a.input)?)?;
    let mut problem = FusionProblem::new(input.to_params()?)?;
    problem.max_iter = a.max_iter;
    let resolved = json!({
        "args": a,
        "tol_step": problem.tol_step,
        "tol_obj": problem.tol_obj,
        "tol_grad": problem.tol_grad,
    });
    let mut ctx = Ctx { out, header: header("fuse", None, &resolved)? };
    ctx.line(&ctx.header.clone())?;
    let r = fuse(&problem)?;
    ctx.emit(a.out.as_deref(), serde_json::to_value(FusionOutputJson::from(&r))?)?;
    Ok(EXIT_OK)
}

fn gradcheck_cmd(a: &GradcheckArgs, out: &mut dyn Write) -> Result<i32> {
    let cfg = GradcheckConfig {
        trials: a.trials,
        seed: a.seed,
        corrupt: a.corrupt_gradient,
        ..Default::default()
    };
    let mut ctx = Ctx { out, header: header("gradcheck", Some(a.seed), &cfg)? };
    ctx.line(&ctx.header.clone())?;
    let rep = run_gradcheck(&cfg)?;
    ctx.emit(a.out.as_deref(), serde_json::to_value(&rep)?)?;
    Ok(if rep.passed { EXIT_OK } else { EXIT_CHECK_FAILED })
}

/// Sets `path.to.key` in a JSON object; the value is parsed as JSON when it
/// can be and kept as a string otherwise.
fn apply_override(config: &mut Value, entry: &str) -> Result<()> {
    let (key, raw) = entry
        .split_once('=')
        .ok_or_else(|| Error::Domain(format!("override {entry:?} is not KEY=VALUE")))?;
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut node = config;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let obj = node
            .as_object_mut()
            .ok_or_else(|| Error::Domain(format!("override {key:?}: {part:?} is not inside an object")))?;
        if i + 1 == parts.len() {
            obj.insert(part.to_string(), value);
            return Ok(());
        }
        node = obj.entry(part.to_string()).or_insert_with(|| json!({}));
    }
    Ok(())
}

fn experiment_cmd(a: &ExperimentArgs, out: &mut dyn Write) -> Result<i32> {
    let text = match &a.config {
        Some(p) => read(p)?,
        None => DEFAULT_EXPERIMENT_CONFIG.to_string(),
    };
    let mut raw: Value = serde_json::from_str(&text)?;
    for o in &a.overrides {
        apply_override(&mut raw, o)?;
    }
    let cfg: ExperimentConfig = serde_json::from_value(raw)?;
    cfg.validate()?;
    let resolved = json!({"args": a, "experiment": cfg});
    let mut ctx = Ctx { out, header: header("experiment", Some(a.seed), &resolved)? };
    ctx.line(&ctx.header.clone())?;
    let rep = run_experiment(&cfg, a.seed, a.allow_partial)?;
    if let Some(dir) = &a.calibration_dir {
        fs::create_dir_all(dir)?;
        for run in &rep.runs {
            if let crate::estimator::RunOutcome::Ok { report } = run {
                let path = dir.join(format!("{}_{}.csv", report.family.name(), report.mode.name()));
                write_calibration_csv(fs::File::create(&path)?, &report.calibration)?;
                ctx.sidecar(&path)?;
            }
        }
    }
    let body = json!({
        "expected_error": "sqrt(alpha * trace(Lambda^-1)); bins report root mean squares",
        "nll_includes_normalizer": true,
        "table": rep.table,
        "runs": rep.runs,
    });
    ctx.emit(Some(&a.out), body)?;
    ctx.line(&json!({ "table": rep.table }))?;
    Ok(EXIT_OK)
}

fn calibrate_cmd(a: &CalibrateArgs, out: &mut dyn Write) -> Result<i32> {
    let preds: Vec<DistributionJson> = serde_json::from_str(&read(&a.predictions)?)?;
    let preds = preds.iter().map(|p| p.to_params()).collect::<Result<Vec<_>>>()?;
    let targets = read_samples(&a.targets)?;
    crate::error::check_dim(preds.len(), targets.len())?;
    let errors: Vec<DVector<f64>> = preds
        .iter()
        .zip(&targets)
        .map(|(p, t)| {
            crate::error::check_dim(p.dim(), t.len())?;
            Ok(t - p.mean())
        })
        .collect::<Result<_>>()?;
    let mut ctx = Ctx { out, header: header("calibrate", None, a)? };
    ctx.line(&ctx.header.clone())?;
    let bins = calibration_curve(&preds, &errors, a.bin_size)?;
    match &a.out {
        Some(path) => {
            write_calibration_csv(fs::File::create(path)?, &bins)?;
            ctx.sidecar(path)?;
        }
        None => ctx.line(&json!({ "bins": bins }))?,
    }
    Ok(EXIT_OK)
}

/// Parses `args` (program name first), runs the command and returns the exit code.
pub fn run<I, T>(args: I, stdout: &mut dyn Write, stderr: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = e.exit_code();
            let rendered = e.render().to_string();
            if code == 0 {
                let _ = write!(stdout, "{rendered}");
            } else {
                let _ = write!(stderr, "{rendered}");
            }
            return code;
        }
    };
    let res = match &cli.command {
        Command::Constants(a) => constants(a, stdout),
        Command::Sample(a) => sample_cmd(a, stdout),
        Command::Logpdf(a) => logpdf_cmd(a, stdout),
        Command::FitMle(a) => fit_mle(a, stdout),
        Command::Fuse(a) => fuse_cmd(a, stdout),
        Command::Gradcheck(a) => gradcheck_cmd(a, stdout),
        Command::Experiment(a) => experiment_cmd(a, stdout),
        Command::Calibrate(a) => calibrate_cmd(a, stdout),
    };
    match res {
        Ok(code) => code,
        Err(e) => {
            let _ = writeln!(stderr, "error: {e}");
            exit_code(&e)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run_args(args: &[&str]) -> (i32, String, String) {
        let mut out = Vec::new();
        let mut err = Vec::new();
        let code = run(std::iter::once("mvhuber").chain(args.iter().copied()), &mut out, &mut err);
        (code, String::from_utf8(out).unwrap(), String::from_utf8(err).unwrap())
    }

    #[test]
    fn constants_output() {
        let (code, out, _) = run_args(&["constants", "--d", "2", "--delta", "1"]);
        assert_eq!(code, 0);
        let lines: Vec<&str> = out.lines().collect();
        assert_eq!(lines.len(), 2);
        let header: Value = serde_json::from_str(lines[0]).unwrap();
        assert_eq!(header["command"], "constants");
        let body: Value = serde_json::from_str(lines[1]).unwrap();
        assert!((body["alpha"].as_f64().unwrap() - 3.07).abs() < 0.01);
    }

    #[test]
    fn usage_errors() {
        assert_eq!(run_args(&["constants", "--d", "0", "--delta", "1"]).0, 2);
        assert_eq!(run_args(&["constants", "--d", "2", "--delta", "-1"]).0, 2);
        assert_eq!(run_args(&["constants", "--d", "2"]).0, 2);
        assert_eq!(run_args(&["constants", "--d", "2", "--delta", "1", "--bogus"]).0, 2);
        assert_eq!(run_args(&["sample", "--dist", "x.json", "--n", "3", "--out", "y.csv"]).0, 2);
        assert_eq!(run_args(&["gradcheck", "--trials", "0"]).0, 2);
        assert_eq!(run_args(&["nope"]).0, 2);
    }

    #[test]
    fn overrides_set_nested_keys() {
        let mut v = json!({"optimizer": {"steps": 2000}, "delta": 1.0});
        apply_override(&mut v, "optimizer.steps=10").unwrap();
        apply_override(&mut v, "families=[\"huber\"]").unwrap();
        apply_override(&mut v, "parameterization=mu").unwrap();
        assert_eq!(v["optimizer"]["steps"], 10);
        assert_eq!(v["families"][0], "huber");
        assert_eq!(v["parameterization"], "mu");
        assert!(apply_override(&mut v, "novalue").is_err());
        assert!(apply_override(&mut v, "delta.inner=1").is_err());
    }

    #[test]
    fn default_config_parses() {
        let cfg: ExperimentConfig = serde_json::from_str(DEFAULT_EXPERIMENT_CONFIG).unwrap();
        cfg.validate().unwrap();
        assert_eq!(cfg.families.len() * cfg.modes.len(), 12);
    }
}
