//! Paired daily hospitalization and death counts.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

/// Daily hospitalizations and deaths over a horizon of `J` days.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DailySeries {
    pub hospitalizations: Vec<f64>,
    pub deaths: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct Row {
    day: usize,
    hospitalizations: f64,
    deaths: f64,
}

impl DailySeries {
    pub fn new(hospitalizations: Vec<f64>, deaths: Vec<f64>) -> Result<Self> {
        let s = Self { hospitalizations, deaths };
        s.validate()?;
        Ok(s)
    }

    pub fn zeros(horizon: usize) -> Self {
        Self {
            hospitalizations: vec![0.0; horizon],
            deaths: vec![0.0; horizon],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.hospitalizations.len() != self.deaths.len() {
            return Err(Error::LengthMismatch {
                expected: self.hospitalizations.len(),
                actual: self.deaths.len(),
            });
        }
        if self
            .hospitalizations
            .iter()
            .chain(&self.deaths)
            .any(|v| !v.is_finite() || *v < 0.0)
        {
            return Err(invalid("daily counts must be finite and non-negative"));
        }
        Ok(())
    }

    pub fn horizon(&self) -> usize {
        self.hospitalizations.len()
    }

    /// Concatenation `[h_1..h_J, d_1..d_J]`, the surrogate's output layout.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(2 * self.horizon());
        v.extend_from_slice(&self.hospitalizations);
        v.extend_from_slice(&self.deaths);
        v
    }

    /// Inverse of [`DailySeries::to_flat`]. Does not enforce non-negativity.
    pub fn from_flat(flat: &[f64]) -> Result<Self> {
        if flat.len() % 2 != 0 {
            return Err(invalid("flat series must have even length"));
        }
        let j = flat.len() / 2;
        Ok(Self {
            hospitalizations: flat[..j].to_vec(),
            deaths: flat[j..].to_vec(),
        })
    }

    pub fn total(&self) -> f64 {
        self.hospitalizations.iter().sum::<f64>() + self.deaths.iter().sum::<f64>()
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        for (day, (h, d)) in self.hospitalizations.iter().zip(&self.deaths).enumerate() {
            w.serialize(Row {
                day,
                hospitalizations: *h,
                deaths: *d,
            })?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(reader: R) -> Result<Self> {
        let mut r = csv::Reader::from_reader(reader);
        let headers = r.headers()?.clone();
        if headers.iter().collect::<Vec<_>>() != ["day", "hospitalizations", "deaths"] {
            return Err(invalid(format!(
                "expected header day,hospitalizations,deaths, got {}",
                headers.iter().collect::<Vec<_>>().join(",")
            )));
        }
        let mut s = Self::zeros(0);
        for (i, row) in r.deserialize::<Row>().enumerate() {
            let row = row?;
            if row.day != i {
                return Err(invalid(format!("day column out of order at row {i}")));
            }
            s.hospitalizations.push(row.hospitalizations);
            s.deaths.push(row.deaths);
        }
        s.validate()?;
        Ok(s)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::io::write_atomic(path, |w| self.write_csv(w))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path)?;
        Self::read_csv(std::io::BufReader::new(f)).map_err(|e| match e {
            Error::Io(_) => e,
            other => Error::Malformed {
                path: path.to_path_buf(),
                message: other.to_string(),
            },
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_header_and_rows() {
        let s = DailySeries::new(vec![1.0, 2.5], vec![0.0, 0.25]).unwrap();
        let mut buf = Vec::new();
        s.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert_eq!(text, "day,hospitalizations,deaths\n0,1.0,0.0\n1,2.5,0.25\n");
        assert_eq!(DailySeries::read_csv(&buf[..]).unwrap(), s);
    }

    #[test]
    fn rejects_negative_counts() {
        assert!(DailySeries::new(vec![-1.0], vec![0.0]).is_err());
        assert!(DailySeries::new(vec![1.0], vec![0.0, 1.0]).is_err());
    }
}
