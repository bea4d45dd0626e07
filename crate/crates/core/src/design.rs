//! Halton designs over the parameter box and the seed-averaged training dataset.

use std::fs;
use std::path::{Path, PathBuf};

use log::info;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::abm::{simulate_mean_with, AbmConfig, Population};
use crate::error::{invalid, Error, Result};
use crate::params::{Bounds, ParameterVector, N_PARAMS, PARAM_NAMES};
use crate::series::DailySeries;

/// Prime bases, in dimension order.
pub const PRIMES: [u64; 16] = [2, 3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37, 41, 43, 47, 53];

/// Default number of design points.
pub const DEFAULT_DESIGN_SIZE: usize = 700;

/// Radical inverse of `index` in `base`: its base-`base` digits mirrored about the point.
pub fn halton_value(index: u64, base: u64) -> Result<f64> {
    if index == 0 {
        return Err(invalid("Halton indices start at 1"));
    }
    if base < 2 {
        return Err(invalid(format!("Halton base must be at least 2, got {base}")));
    }
    let mut i = index;
    let mut f = 1.0;
    let mut value = 0.0;
    let b = base as f64;
    while i > 0 {
        f /= b;
        value += f * (i % base) as f64;
        i /= base;
    }
    Ok(value)
}

/// `n` rows of the unscrambled Halton sequence in `dims` dimensions, starting at index 1.
pub fn halton_matrix(n: usize, dims: usize) -> Result<Vec<Vec<f64>>> {
    halton_matrix_from(1, n, dims)
}

/// `n` rows starting at sequence index `start` (1-based).
pub fn halton_matrix_from(start: u64, n: usize, dims: usize) -> Result<Vec<Vec<f64>>> {
    if n == 0 {
        return Err(invalid("design size must be at least 1"));
    }
    if dims == 0 || dims > PRIMES.len() {
        return Err(invalid(format!("dims must lie in 1..={}, got {dims}", PRIMES.len())));
    }
    (0..n as u64)
        .map(|i| PRIMES[..dims].iter().map(|&p| halton_value(start + i, p)).collect())
        .collect()
}

/// Maps unit-cube rows affinely onto `bounds`.
pub fn scale_to_bounds(unit: &[Vec<f64>], bounds: &Bounds) -> Result<Vec<Vec<f64>>> {
    bounds.validate()?;
    unit.iter()
        .enumerate()
        .map(|(r, row)| {
            if row.len() != bounds.dim() {
                return Err(Error::LengthMismatch {
                    expected: bounds.dim(),
                    actual: row.len(),
                });
            }
            if let Some(v) = row.iter().find(|v| !(0.0..=1.0).contains(*v)) {
                return Err(invalid(format!("unit design row {r} contains {v} outside [0, 1]")));
            }
            Ok(bounds.from_unit(row))
        })
        .collect()
}

/// Inverse of [`scale_to_bounds`].
pub fn unscale_from_bounds(design: &[Vec<f64>], bounds: &Bounds) -> Vec<Vec<f64>> {
    design.iter().map(|row| bounds.to_unit(row)).collect()
}

/// Kolmogorov-Smirnov distance between the empirical CDF of `values` and U(0, 1).
pub fn ks_distance_uniform(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len() as f64;
    v.iter()
        .enumerate()
        .map(|(i, &x)| {
            let x = x.clamp(0.0, 1.0);
            ((i + 1) as f64 / n - x).max(x - i as f64 / n)
        })
        .fold(0.0, f64::max)
}

/// The Halton design of `n` points over `bounds`, as parameter vectors.
pub fn halton_design(n: usize, bounds: &Bounds) -> Result<Vec<ParameterVector>> {
    if bounds.dim() != N_PARAMS {
        return Err(Error::LengthMismatch {
            expected: N_PARAMS,
            actual: bounds.dim(),
        });
    }
    let unit = halton_matrix(n, N_PARAMS)?;
    scale_to_bounds(&unit, bounds)?
        .iter()
        .map(|r| ParameterVector::from_slice(r))
        .collect()
}

pub fn write_design_csv(path: &Path, design: &[ParameterVector]) -> Result<()> {
    crate::io::write_atomic(path, |w| {
        let mut csv = csv::Writer::from_writer(w);
        csv.write_record(PARAM_NAMES)?;
        for p in design {
            csv.serialize(p.0)?;
        }
        csv.flush()?;
        Ok(())
    })
}

pub fn read_design_csv(path: &Path) -> Result<Vec<ParameterVector>> {
    let malformed = |message: String| Error::Malformed {
        path: path.to_path_buf(),
        message,
    };
    let mut r = csv::Reader::from_path(path)?;
    let headers = r.headers()?.clone();
    if headers.iter().collect::<Vec<_>>() != PARAM_NAMES {
        return Err(malformed(format!(
            "expected header {}, got {}",
            PARAM_NAMES.join(","),
            headers.iter().collect::<Vec<_>>().join(",")
        )));
    }
    let mut rows = Vec::new();
    for (i, rec) in r.deserialize::<[f64; N_PARAMS]>().enumerate() {
        let row = rec.map_err(|e| malformed(format!("row {i}: {e}")))?;
        if row.iter().any(|v| !v.is_finite()) {
            return Err(malformed(format!("row {i} has a non-finite value")));
        }
        rows.push(ParameterVector(row));
    }
    Ok(rows)
}

/// Design points paired with their seed-averaged responses.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainingDataset {
    pub design: Vec<ParameterVector>,
    pub responses: Vec<DailySeries>,
    pub n_seeds: usize,
    pub bounds: Bounds,
}

impl TrainingDataset {
    pub fn new(
        design: Vec<ParameterVector>,
        responses: Vec<DailySeries>,
        n_seeds: usize,
        bounds: Bounds,
    ) -> Result<Self> {
        let d = Self {
            design,
            responses,
            n_seeds,
            bounds,
        };
        d.validate()?;
        Ok(d)
    }

    pub fn validate(&self) -> Result<()> {
        self.bounds.validate()?;
        if self.design.is_empty() {
            return Err(invalid("dataset has no rows"));
        }
        if self.responses.len() != self.design.len() {
            return Err(Error::LengthMismatch {
                expected: self.design.len(),
                actual: self.responses.len(),
            });
        }
        let horizon = self.responses[0].horizon();
        for r in &self.responses {
            r.validate()?;
            if r.horizon() != horizon {
                return Err(Error::LengthMismatch {
                    expected: horizon,
                    actual: r.horizon(),
                });
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.design.len()
    }

    pub fn is_empty(&self) -> bool {
        self.design.is_empty()
    }

    pub fn horizon(&self) -> usize {
        self.responses.first().map_or(0, |r| r.horizon())
    }

    /// Rows restricted to `idx`, in that order.
    pub fn subset(&self, idx: &[usize]) -> Self {
        Self {
            design: idx.iter().map(|&i| self.design[i]).collect(),
            responses: idx.iter().map(|&i| self.responses[i].clone()).collect(),
            n_seeds: self.n_seeds,
            bounds: self.bounds.clone(),
        }
    }

    /// Loads a dataset directory written by [`build_dataset_in`]; every row must be present.
    pub fn load(dir: &Path) -> Result<Self> {
        let manifest: DatasetManifest = crate::io::read_json(&dir.join(MANIFEST_FILE))?;
        let design = read_design_csv(&dir.join(DESIGN_FILE))?;
        if design.len() != manifest.rows {
            return Err(Error::Malformed {
                path: dir.join(DESIGN_FILE),
                message: format!("manifest lists {} rows, design has {}", manifest.rows, design.len()),
            });
        }
        let responses = (0..design.len())
            .map(|i| DailySeries::load(&response_path(dir, i)))
            .collect::<Result<Vec<_>>>()?;
        let bounds = Bounds::new(manifest.bounds)?;
        Self::new(design, responses, manifest.n_seeds, bounds)
    }
}

pub const DESIGN_FILE: &str = "design.csv";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const RESPONSES_DIR: &str = "responses";

/// Provenance of a dataset directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub rows: usize,
    pub n_seeds: usize,
    pub horizon_days: usize,
    pub bounds: Vec<(f64, f64)>,
    /// How the design was produced, e.g. `halton(n=700, start=1)`.
    pub design_source: String,
    pub abm: AbmConfig,
}

pub fn response_path(dir: &Path, row: usize) -> PathBuf {
    dir.join(RESPONSES_DIR).join(format!("row_{row:05}.csv"))
}

fn check_design(design: &[ParameterVector], bounds: &Bounds, n_seeds: usize) -> Result<()> {
    if design.is_empty() {
        return Err(invalid("design has no rows"));
    }
    if n_seeds == 0 {
        return Err(invalid("n_seeds must be at least 1"));
    }
    for (i, p) in design.iter().enumerate() {
        if !bounds.contains(p.as_slice()) {
            return Err(invalid(format!("design row {i} {:?} lies outside the bounds", p.0)));
        }
    }
    Ok(())
}

/// Seed-averaged responses for every design row, computed in memory.
pub fn build_dataset(
    design: &[ParameterVector],
    bounds: &Bounds,
    config: &AbmConfig,
    n_seeds: usize,
) -> Result<TrainingDataset> {
    check_design(design, bounds, n_seeds)?;
    let pop = Population::build(config)?;
    let responses = design
        .par_iter()
        .map(|p| simulate_mean_with(&pop, p, config, n_seeds))
        .collect::<Result<Vec<_>>>()?;
    TrainingDataset::new(design.to_vec(), responses, n_seeds, bounds.clone())
}

/// Builds (or resumes) a dataset directory.
///
/// Rows whose response file already exists are read back instead of simulated,
/// so an interrupted build continues where it stopped. A directory built from a
/// different design, configuration or seed count is rejected.
pub fn build_dataset_in(
    dir: &Path,
    design: &[ParameterVector],
    bounds: &Bounds,
    config: &AbmConfig,
    n_seeds: usize,
    design_source: &str,
) -> Result<TrainingDataset> {
    check_design(design, bounds, n_seeds)?;
    let manifest = DatasetManifest {
        rows: design.len(),
        n_seeds,
        horizon_days: config.horizon_days,
        bounds: bounds.ranges.clone(),
        design_source: design_source.to_string(),
        abm: config.clone(),
    };
    let manifest_path = dir.join(MANIFEST_FILE);
    let design_path = dir.join(DESIGN_FILE);
    if manifest_path.exists() {
        let existing: DatasetManifest = crate::io::read_json(&manifest_path)?;
        if existing != manifest {
            return Err(invalid(format!(
                "{} was built with a different configuration; use a fresh directory",
                dir.display()
            )));
        }
        if read_design_csv(&design_path)? != design {
            return Err(invalid(format!(
                "{} was built from a different design; use a fresh directory",
                dir.display()
            )));
        }
    } else {
        fs::create_dir_all(dir.join(RESPONSES_DIR))?;
        write_design_csv(&design_path, design)?;
        crate::io::write_json(&manifest_path, &manifest)?;
    }
    fs::create_dir_all(dir.join(RESPONSES_DIR))?;

    let pop = Population::build(config)?;
    let pending = (0..design.len()).filter(|&i| !response_path(dir, i).exists()).count();
    if pending < design.len() {
        info!("resuming dataset in {}: {pending} of {} rows left", dir.display(), design.len());
    }
    let responses = design
        .par_iter()
        .enumerate()
        .map(|(i, p)| {
            let path = response_path(dir, i);
            if path.exists() {
                return DailySeries::load(&path);
            }
            let s = simulate_mean_with(&pop, p, config, n_seeds)?;
            s.save(&path)?;
            Ok(s)
        })
        .collect::<Result<Vec<_>>>()?;
    TrainingDataset::new(design.to_vec(), responses, n_seeds, bounds.clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    /// Digit reversal done on the string of base-b digits.
    fn reversed_digits(index: u64, base: u64) -> f64 {
        let mut digits = Vec::new();
        let mut i = index;
        while i > 0 {
            digits.push(i % base);
            i /= base;
        }
        digits
            .iter()
            .enumerate()
            .map(|(k, &d)| d as f64 / (base as f64).powi(k as i32 + 1))
            .sum()
    }

    #[test]
    fn radical_inverse_small_cases() {
        assert_eq!(halton_value(1, 2).unwrap(), 0.5);
        assert_eq!(halton_value(2, 2).unwrap(), 0.25);
        assert_eq!(halton_value(3, 2).unwrap(), 0.75);
        assert_relative_eq!(halton_value(1, 3).unwrap(), 1.0 / 3.0, epsilon = 1e-15);
        assert_relative_eq!(halton_value(2, 3).unwrap(), 2.0 / 3.0, epsilon = 1e-15);
        assert_relative_eq!(halton_value(3, 3).unwrap(), 1.0 / 9.0, epsilon = 1e-15);
        // 10 = 1010b -> 0.0101b
        assert_eq!(halton_value(10, 2).unwrap(), 0.3125);
        for base in [2, 3, 5, 7] {
            for i in 1..200 {
                assert_relative_eq!(halton_value(i, base).unwrap(), reversed_digits(i, base), epsilon = 1e-14);
            }
        }
    }

    #[test]
    fn rejects_index_zero_and_tiny_base() {
        assert!(halton_value(0, 2).is_err());
        assert!(halton_value(1, 1).is_err());
        assert!(halton_matrix(0, 2).is_err());
        assert!(halton_matrix(3, PRIMES.len() + 1).is_err());
    }

    #[test]
    fn matrix_rows_and_columns() {
        let m = halton_matrix(1, 2).unwrap();
        assert_eq!(m[0][0], 0.5);
        assert_relative_eq!(m[0][1], 1.0 / 3.0, epsilon = 1e-15);
        assert_eq!(halton_matrix(3, 1).unwrap(), vec![vec![0.5], vec![0.25], vec![0.75]]);
    }

    #[test]
    fn seven_hundred_points_are_equidistributed() {
        let m = halton_matrix(700, 4).unwrap();
        for d in 0..4 {
            let col: Vec<f64> = m.iter().map(|r| r[d]).collect();
            assert!(col.iter().all(|&v| v > 0.0 && v < 1.0));
            assert!(ks_distance_uniform(&col) < 0.05, "dim {d}");
        }
    }

    #[test]
    fn ks_distance_shrinks_with_more_points() {
        let max_ks = |n| {
            let m = halton_matrix(n, 4).unwrap();
            (0..4)
                .map(|d| ks_distance_uniform(&m.iter().map(|r| r[d]).collect::<Vec<_>>()))
                .fold(0.0, f64::max)
        };
        assert!(max_ks(700) < max_ks(50));
    }

    #[test]
    fn ks_distance_of_known_sample() {
        // Single point at 0.5: sup |F_n - F| = 0.5.
        assert_relative_eq!(ks_distance_uniform(&[0.5]), 0.5);
        assert_relative_eq!(ks_distance_uniform(&[0.25, 0.75]), 0.25);
    }

    #[test]
    fn scaling_maps_corners_and_round_trips() {
        let b = Bounds::default_box();
        let s = scale_to_bounds(&[vec![0.0, 1.0, 0.5, 0.5]], &b).unwrap();
        assert_eq!(s[0][0], 0.046);
        assert_eq!(s[0][1], 59.0);
        let id = scale_to_bounds(&[vec![0.5]], &Bounds::unit(1)).unwrap();
        assert_eq!(id[0][0], 0.5);
        assert!(scale_to_bounds(&[vec![1.1, 0.0, 0.0, 0.0]], &b).is_err());
        assert!(scale_to_bounds(&[vec![-0.1, 0.0, 0.0, 0.0]], &b).is_err());

        let u = halton_matrix(50, 4).unwrap();
        let back = unscale_from_bounds(&scale_to_bounds(&u, &b).unwrap(), &b);
        for (r, s) in u.iter().zip(&back) {
            for (a, c) in r.iter().zip(s) {
                assert!((a - c).abs() < 1e-12);
            }
        }
    }

    fn small_config() -> AbmConfig {
        AbmConfig {
            population: 400,
            seed_infections: 5,
            horizon_days: 20,
            ..AbmConfig::default()
        }
    }

    #[test]
    fn single_row_dataset_is_simulate_mean() {
        let b = Bounds::default_box();
        let c = small_config();
        let design = halton_design(1, &b).unwrap();
        let ds = build_dataset(&design, &b, &c, 3).unwrap();
        assert_eq!(ds.len(), 1);
        assert_eq!(ds.responses[0], crate::abm::simulate_mean(&design[0], &c, 3).unwrap());
    }

    #[test]
    fn directory_build_matches_recomputation_and_is_idempotent() {
        let b = Bounds::default_box();
        let c = small_config();
        let design = halton_design(8, &b).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let ds = build_dataset_in(dir.path(), &design, &b, &c, 2, "halton(n=8)").unwrap();
        for (p, r) in design.iter().zip(&ds.responses) {
            let runs: Vec<_> = (0..2).map(|s| crate::abm::simulate(p, &c, s).unwrap()).collect();
            for day in 0..c.horizon_days {
                let h = 0.5 * (runs[0].hospitalizations[day] + runs[1].hospitalizations[day]);
                assert!((r.hospitalizations[day] - h).abs() < 1e-12);
            }
        }
        let snapshot = |d: &Path| {
            let mut files: Vec<(PathBuf, Vec<u8>)> = Vec::new();
            for sub in [d.to_path_buf(), d.join(RESPONSES_DIR)] {
                for e in fs::read_dir(sub).unwrap() {
                    let p = e.unwrap().path();
                    if p.is_file() {
                        files.push((p.clone(), fs::read(&p).unwrap()));
                    }
                }
            }
            files.sort();
            files
        };
        let before = snapshot(dir.path());
        let again = build_dataset_in(dir.path(), &design, &b, &c, 2, "halton(n=8)").unwrap();
        assert_eq!(again, ds);
        assert_eq!(snapshot(dir.path()), before);
        assert_eq!(TrainingDataset::load(dir.path()).unwrap(), ds);

        // Resume after losing rows.
        fs::remove_file(response_path(dir.path(), 3)).unwrap();
        let resumed = build_dataset_in(dir.path(), &design, &b, &c, 2, "halton(n=8)").unwrap();
        assert_eq!(resumed, ds);

        // Different seed count is refused.
        assert!(build_dataset_in(dir.path(), &design, &b, &c, 3, "halton(n=8)").is_err());
    }

    #[test]
    fn design_outside_bounds_is_rejected() {
        let b = Bounds::default_box();
        let p = ParameterVector::new(0.1, 40.0, 0.95, 0.45);
        assert!(build_dataset(&[p], &b, &small_config(), 1).is_err());
    }
}
