//! Reading posterior samples back from chain or particle CSVs.

use std::path::Path;

use epical::posterior::VariancePair;
use epical::{ParameterVector, N_PARAMS, PARAM_NAMES};

use crate::error::{CliError, CliResult};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SampleKind {
    /// Metropolis chain, burn-in removed.
    Chain,
    /// Pooled SVI particles.
    Particles,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PosteriorSamples {
    pub kind: SampleKind,
    pub points: Vec<ParameterVector>,
    /// Per-point noise variances when the file carries them.
    pub variances: Option<Vec<VariancePair>>,
}

impl PosteriorSamples {
    pub fn marginal(&self, k: usize) -> Vec<f64> {
        self.points.iter().map(|p| p.0[k]).collect()
    }
}

fn malformed(stage: &str, path: &Path, msg: impl Into<String>) -> CliError {
    CliError::new(stage, "malformed_input", msg).with("path", path.display())
}

/// Reads a chain CSV (dropping the first `burn_in_fraction` of rows) or a
/// particle CSV, telling them apart by their header.
pub fn read_samples(stage: &str, path: &Path, burn_in_fraction: f64) -> CliResult<PosteriorSamples> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| malformed(stage, path, e.to_string()))?;
    let header: Vec<String> = rdr
        .headers()
        .map_err(|e| malformed(stage, path, e.to_string()))?
        .iter()
        .map(String::from)
        .collect();
    let col = |name: &str| header.iter().position(|h| h == name);
    let theta: Vec<usize> = PARAM_NAMES
        .iter()
        .map(|n| col(n).ok_or_else(|| malformed(stage, path, format!("missing column {n}"))))
        .collect::<CliResult<_>>()?;
    let kind = if col("accepted_stage").is_some() {
        SampleKind::Chain
    } else if col("particle").is_some() {
        SampleKind::Particles
    } else {
        return Err(malformed(stage, path, "neither a chain nor a particle file"));
    };
    let var_cols = match (col("sigma_h2"), col("sigma_d2")) {
        (Some(h), Some(d)) => Some((h, d)),
        _ => None,
    };

    let mut points = Vec::new();
    let mut variances: Vec<VariancePair> = Vec::new();
    let mut have_variances = var_cols.is_some();
    for (line, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| malformed(stage, path, e.to_string()))?;
        let num = |i: usize| -> CliResult<f64> {
            rec.get(i)
                .and_then(|s| s.parse::<f64>().ok())
                .ok_or_else(|| malformed(stage, path, format!("bad number in row {}", line + 2)))
        };
        let mut p = [0.0; N_PARAMS];
        for (v, &c) in p.iter_mut().zip(&theta) {
            *v = num(c)?;
        }
        points.push(ParameterVector(p));
        if let Some((h, d)) = var_cols {
            if rec.get(h).is_some_and(|s| s.is_empty()) {
                have_variances = false;
            } else if have_variances {
                let pair = VariancePair::new(num(h)?, num(d)?).map_err(|e| malformed(stage, path, e.to_string()))?;
                variances.push(pair);
            }
        }
    }
    if kind == SampleKind::Chain {
        let burn = (burn_in_fraction * points.len() as f64).floor() as usize;
        points.drain(..burn);
        if have_variances {
            variances.drain(..burn);
        }
    }
    if points.is_empty() {
        return Err(malformed(stage, path, "no samples"));
    }
    Ok(PosteriorSamples {
        kind,
        points,
        variances: have_variances.then_some(variances),
    })
}
