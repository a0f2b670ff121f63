//! JSON and CSV formats.
//!
//! A distribution is either canonical,
//! `{"d": 2, "nu": [..], "A": [[..], [..]], "delta": 1.0}`,
//! or moment-style, `{"d": 2, "mu": [..], "Lambda": [[..], [..]], "delta": 1.0}`.
//! `d` is optional on input and always written on output.

use std::io::{Read, Write};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::dist::{to_canonical, HuberParams, MomentForm};
use crate::error::{check_dim, domain, Error, Result};
use crate::fusion::FusionResult;
use crate::spd::SpdMatrix;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum DistributionJson {
    Canonical(CanonicalJson),
    Moment(MomentJson),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CanonicalJson {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub d: Option<usize>,
    pub nu: Vec<f64>,
    #[serde(rename = "A")]
    pub a: Vec<Vec<f64>>,
    pub delta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MomentJson {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub d: Option<usize>,
    pub mu: Vec<f64>,
    #[serde(rename = "Lambda")]
    pub lambda: Vec<Vec<f64>>,
    pub delta: f64,
}

pub fn matrix_from_rows(rows: &[Vec<f64>]) -> Result<DMatrix<f64>> {
    let n = rows.len();
    if n == 0 {
        return domain("matrix has no rows");
    }
    for r in rows {
        check_dim(n, r.len())?;
    }
    Ok(DMatrix::from_fn(n, n, |i, j| rows[i][j]))
}

fn check_declared(d: Option<usize>, actual: usize) -> Result<()> {
    match d {
        Some(d) => check_dim(d, actual),
        None => Ok(()),
    }
}

impl DistributionJson {
    pub fn to_params(&self) -> Result<HuberParams> {
        match self {
            DistributionJson::Canonical(c) => {
                check_declared(c.d, c.nu.len())?;
                let a = SpdMatrix::new(matrix_from_rows(&c.a)?)?;
                HuberParams::new(DVector::from_column_slice(&c.nu), a, c.delta)
            }
            DistributionJson::Moment(m) => {
                check_declared(m.d, m.mu.len())?;
                let lambda = SpdMatrix::new(matrix_from_rows(&m.lambda)?)?;
                to_canonical(&MomentForm::new(DVector::from_column_slice(&m.mu), lambda, m.delta)?)
            }
        }
    }

    pub fn from_params(p: &HuberParams) -> Self {
        DistributionJson::Canonical(CanonicalJson {
            d: Some(p.dim()),
            nu: p.nu().as_slice().to_vec(),
            a: p.a().to_rows(),
            delta: p.delta(),
        })
    }
}

pub fn parse_distribution(text: &str) -> Result<HuberParams> {
    serde_json::from_str::<DistributionJson>(text)
        .map_err(|e| Error::Domain(format!("invalid distribution JSON: {e}")))?
        .to_params()
}

/// Fusion input: `{"delta": 1.0, "estimates": [distribution, ...]}`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FusionInputJson {
    pub delta: f64,
    pub estimates: Vec<DistributionJson>,
}

impl FusionInputJson {
    /// Each estimate takes the top-level `delta`; an estimate that states a
    /// different one is rejected.
    pub fn to_params(&self) -> Result<Vec<HuberParams>> {
        self.estimates
            .iter()
            .map(|e| {
                let p = e.to_params()?;
                if p.delta() != self.delta {
                    return domain(format!("estimate delta {} differs from {}", p.delta(), self.delta));
                }
                Ok(p)
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusionOutputJson {
    pub y: Vec<f64>,
    pub objective: f64,
    pub iterations: usize,
    pub converged: bool,
}

impl From<&FusionResult> for FusionOutputJson {
    fn from(r: &FusionResult) -> Self {
        FusionOutputJson {
            y: r.y_star.as_slice().to_vec(),
            objective: r.objective(),
            iterations: r.iterations,
            converged: r.converged,
        }
    }
}

/// Writes samples as CSV with header `x1,..,xd`.
pub fn write_samples_csv<W: Write>(w: W, samples: &[DVector<f64>], d: usize) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record((1..=d).map(|i| format!("x{i}")))?;
    for s in samples {
        check_dim(d, s.len())?;
        out.write_record(s.iter().map(|v| format_float(*v)))?;
    }
    out.flush()?;
    Ok(())
}

/// Reads a samples CSV; the header fixes `d`.
pub fn read_samples_csv<R: Read>(r: R) -> Result<Vec<DVector<f64>>> {
    let mut rdr = csv::Reader::from_reader(r);
    let d = rdr.headers()?.len();
    if d == 0 {
        return domain("samples CSV has an empty header");
    }
    let mut out = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        check_dim(d, rec.len())?;
        let row = rec
            .iter()
            .map(|f| {
                f.trim()
                    .parse::<f64>()
                    .map_err(|e| Error::Domain(format!("row {}: cannot parse {f:?}: {e}", i + 1)))
            })
            .collect::<Result<Vec<_>>>()?;
        if row.iter().any(|v| !v.is_finite()) {
            return domain(format!("row {} has non-finite values", i + 1));
        }
        out.push(DVector::from_vec(row));
    }
    Ok(out)
}

/// Shortest decimal that round-trips.
pub fn format_float(v: f64) -> String {
    format!("{v:?}")
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CalibrationBin {
    pub expected: f64,
    pub empirical: f64,
    pub count: usize,
}

/// Calibration curve as CSV with columns `expected,empirical,count`.
pub fn write_calibration_csv<W: Write>(w: W, bins: &[CalibrationBin]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["expected", "empirical", "count"])?;
    for b in bins {
        out.write_record([format_float(b.expected), format_float(b.empirical), b.count.to_string()])?;
    }
    out.flush()?;
    Ok(())
}
