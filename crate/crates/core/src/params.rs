//! Calibration parameters and their box bounds.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

/// Number of calibrated parameters.
pub const N_PARAMS: usize = 4;

/// Column names used in every CSV that carries parameter vectors.
pub const PARAM_NAMES: [&str; N_PARAMS] = ["theta1", "theta2", "theta3", "theta4"];

/// A calibration point.
///
/// Components, in order:
/// 1. exposure rate per infectious contact-hour,
/// 2. seeding time of the index cases in hours from simulation start,
/// 3. probability an agent stays home on a given day,
/// 4. probability an agent adopts protective behavior on a given day.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParameterVector(pub [f64; N_PARAMS]);

impl ParameterVector {
    pub fn new(exposure_rate: f64, seeding_hours: f64, stay_home: f64, protective: f64) -> Self {
        Self([exposure_rate, seeding_hours, stay_home, protective])
    }

    pub fn from_slice(values: &[f64]) -> Result<Self> {
        let arr: [f64; N_PARAMS] = values
            .try_into()
            .map_err(|_| invalid(format!("expected {N_PARAMS} parameters, got {}", values.len())))?;
        Ok(Self(arr))
    }

    pub fn exposure_rate(&self) -> f64 {
        self.0[0]
    }

    pub fn seeding_hours(&self) -> f64 {
        self.0[1]
    }

    /// Day on which index cases are injected: the 24-hour span containing the seeding time.
    pub fn seeding_day(&self) -> usize {
        (self.0[1] / 24.0).floor().max(0.0) as usize
    }

    pub fn stay_home(&self) -> f64 {
        self.0[2]
    }

    pub fn protective(&self) -> f64 {
        self.0[3]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }
}

/// Axis-aligned box, one `(min, max)` pair per dimension.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Bounds {
    pub ranges: Vec<(f64, f64)>,
}

impl Bounds {
    pub fn new(ranges: Vec<(f64, f64)>) -> Result<Self> {
        let b = Self { ranges };
        b.validate()?;
        Ok(b)
    }

    /// Prior ranges of the four calibrated parameters.
    pub fn default_box() -> Self {
        Self {
            ranges: vec![(0.046, 0.069), (31.0, 59.0), (0.939, 0.981), (0.407, 0.492)],
        }
    }

    pub fn unit(dim: usize) -> Self {
        Self { ranges: vec![(0.0, 1.0); dim] }
    }

    pub fn validate(&self) -> Result<()> {
        if self.ranges.is_empty() {
            return Err(invalid("bounds must have at least one dimension"));
        }
        for (i, &(lo, hi)) in self.ranges.iter().enumerate() {
            if !(lo.is_finite() && hi.is_finite() && lo < hi) {
                return Err(invalid(format!("bounds[{i}] requires min < max, got ({lo}, {hi})")));
            }
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.ranges.len()
    }

    pub fn width(&self, i: usize) -> f64 {
        self.ranges[i].1 - self.ranges[i].0
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        x.len() == self.dim() && x.iter().zip(&self.ranges).all(|(v, &(lo, hi))| *v >= lo && *v <= hi)
    }

    /// Maps a point from these bounds onto the unit cube.
    pub fn to_unit(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(&self.ranges)
            .map(|(v, &(lo, hi))| (v - lo) / (hi - lo))
            .collect()
    }

    /// Maps a unit-cube point back into these bounds.
    pub fn from_unit(&self, u: &[f64]) -> Vec<f64> {
        u.iter()
            .zip(&self.ranges)
            .map(|(v, &(lo, hi))| lo + v * (hi - lo))
            .collect()
    }

    pub fn clamp(&self, x: &mut [f64]) -> bool {
        let mut clamped = false;
        for (v, &(lo, hi)) in x.iter_mut().zip(&self.ranges) {
            if *v < lo {
                *v = lo;
                clamped = true;
            } else if *v > hi {
                *v = hi;
                clamped = true;
            }
        }
        clamped
    }
}

impl Default for Bounds {
    fn default() -> Self {
        Self::default_box()
    }
}
