//! Gaussian-process mean surrogate with a Laplacian kernel.
//!
//! Inputs are mapped to the unit cube with the stored bounds; each output column
//! (hospitalizations then deaths, one per day) is standardized before the solve.
//! Only the posterior mean is kept: `g(x) = mean + scale * sum_i alpha_i k(x_i, x)`.

use std::fmt::Write as _;
use std::io::{BufRead, Write};
use std::path::Path;

use log::{debug, warn};
use nalgebra::{Cholesky, DMatrix, DMatrixView, SymmetricEigen};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::design::TrainingDataset;
use crate::error::{invalid, Error, Result};
use crate::params::{Bounds, ParameterVector};
use crate::series::DailySeries;

pub const MIN_NUGGET: f64 = 1e-3;
pub const MAX_NUGGET: f64 = 1.0;
pub const DEFAULT_FOLDS: usize = 5;
pub const DEFAULT_CV_SEED: u64 = 7;
/// Relative errors divide by `max(|truth|, REL_ERROR_FLOOR)`.
pub const REL_ERROR_FLOOR: f64 = 1.0;

/// `exp(-|x - y|_1 / l)`.
pub fn laplacian_kernel(x: &[f64], y: &[f64], l: f64) -> Result<f64> {
    if !(l > 0.0 && l.is_finite()) {
        return Err(invalid(format!("kernel scale must be positive, got {l}")));
    }
    if x.len() != y.len() {
        return Err(Error::LengthMismatch {
            expected: x.len(),
            actual: y.len(),
        });
    }
    Ok((-l1(x, y) / l).exp())
}

#[inline]
fn l1(x: &[f64], y: &[f64]) -> f64 {
    x.iter().zip(y).map(|(a, b)| (a - b).abs()).sum()
}

/// `n` log-spaced nuggets spanning `[MIN_NUGGET, MAX_NUGGET]`.
pub fn default_nugget_grid(n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![MIN_NUGGET];
    }
    let (a, b) = (MIN_NUGGET.ln(), MAX_NUGGET.ln());
    (0..n)
        .map(|i| (a + (b - a) * i as f64 / (n - 1) as f64).exp().clamp(MIN_NUGGET, MAX_NUGGET))
        .collect()
}

/// Per-column affine standardization of a response matrix.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Standardization {
    pub mean: Vec<f64>,
    /// Population standard deviation; columns without spread use 1.
    pub scale: Vec<f64>,
}

impl Standardization {
    pub fn from_columns(y: &DMatrix<f64>) -> Self {
        let n = y.nrows() as f64;
        let mut mean = Vec::with_capacity(y.ncols());
        let mut scale = Vec::with_capacity(y.ncols());
        for col in y.column_iter() {
            let m = col.sum() / n;
            let var = col.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n;
            let s = var.sqrt();
            mean.push(m);
            scale.push(if s > 1e-12 * m.abs().max(1.0) { s } else { 1.0 });
        }
        Self { mean, scale }
    }

    pub fn apply(&self, y: &DMatrix<f64>) -> DMatrix<f64> {
        let mut z = y.clone();
        for (j, mut col) in z.column_iter_mut().enumerate() {
            col.apply(|v| *v = (*v - self.mean[j]) / self.scale[j]);
        }
        z
    }
}

/// A fitted surrogate.
#[derive(Clone, Debug, PartialEq)]
pub struct GpModel {
    pub length_scale: f64,
    pub nugget: f64,
    pub bounds: Bounds,
    pub standardization: Standardization,
    /// Training inputs on the unit cube, row-major `n x dims`.
    theta: Vec<f64>,
    /// Coefficients, row-major `n x outputs`.
    alpha: Vec<f64>,
    n: usize,
    dims: usize,
    outputs: usize,
}

impl GpModel {
    /// Fits on a dataset. The nugget must lie in `[MIN_NUGGET, MAX_NUGGET]`.
    pub fn fit(dataset: &TrainingDataset, length_scale: f64, nugget: f64) -> Result<Self> {
        dataset.validate()?;
        check_nugget(nugget)?;
        let x = unit_design(dataset);
        let y = response_matrix(dataset);
        fit_matrix(&x, &y, &dataset.bounds, length_scale, nugget)
    }

    pub fn n_train(&self) -> usize {
        self.n
    }

    pub fn dims(&self) -> usize {
        self.dims
    }

    pub fn n_outputs(&self) -> usize {
        self.outputs
    }

    /// Days covered, assuming the outputs are hospitalizations then deaths.
    pub fn horizon(&self) -> usize {
        self.outputs / 2
    }

    pub fn train_point_unit(&self, i: usize) -> &[f64] {
        &self.theta[i * self.dims..(i + 1) * self.dims]
    }

    pub fn alpha_row(&self, i: usize) -> &[f64] {
        &self.alpha[i * self.outputs..(i + 1) * self.outputs]
    }

    /// Mean prediction for a point already mapped to the unit cube.
    pub fn predict_unit(&self, u: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.outputs];
        self.predict_unit_into(u, &mut out);
        out
    }

    pub fn predict_unit_into(&self, u: &[f64], out: &mut [f64]) {
        debug_assert_eq!(u.len(), self.dims);
        out.iter_mut().for_each(|v| *v = 0.0);
        let inv_l = 1.0 / self.length_scale;
        for i in 0..self.n {
            let k = (-l1(self.train_point_unit(i), u) * inv_l).exp();
            if k < 1e-300 {
                continue;
            }
            for (o, a) in out.iter_mut().zip(self.alpha_row(i)) {
                *o += k * a;
            }
        }
        for ((o, m), s) in out.iter_mut().zip(&self.standardization.mean).zip(&self.standardization.scale) {
            *o = m + s * *o;
        }
    }

    /// Standardized-to-original predictions for many unit-cube points at once.
    ///
    /// `points` holds `p` points of `dims` coordinates each; the result holds `p`
    /// prediction vectors of `n_outputs` values each, in the same order.
    pub fn predict_unit_batch(&self, points: &[f64]) -> Vec<f64> {
        assert_eq!(points.len() % self.dims.max(1), 0, "batch length must be a multiple of dims");
        let p = points.len() / self.dims.max(1);
        let inv_l = 1.0 / self.length_scale;
        // Column c of the kernel matrix holds k(x_i, point_c) over training rows i.
        let mut kt = DMatrix::<f64>::zeros(self.n, p);
        for (c, u) in points.chunks_exact(self.dims).enumerate() {
            for (i, k) in kt.column_mut(c).iter_mut().enumerate() {
                *k = (-l1(self.train_point_unit(i), u) * inv_l).exp();
            }
        }
        // Row-major alpha read column-major is its transpose.
        let at = DMatrixView::from_slice(&self.alpha, self.outputs, self.n);
        let pred = at * kt;
        let mut out = pred.as_slice().to_vec();
        for row in out.chunks_exact_mut(self.outputs) {
            for ((o, m), s) in row.iter_mut().zip(&self.standardization.mean).zip(&self.standardization.scale) {
                *o = m + s * *o;
            }
        }
        out
    }

    /// Predictions at each point and at its axis neighbours `z +- steps[i] e_i`,
    /// in original units.
    ///
    /// Per point the output holds `1 + 2 dims` prediction vectors ordered
    /// `z, z + h_0, z - h_0, z + h_1, ...`. Moving one coordinate by `h` rescales
    /// the kernel value of every training point at least `h` away along that axis
    /// by `exp(-+h / l)`, so only the training points closer than `h` need a fresh
    /// kernel evaluation.
    pub fn predict_axis_stencil_batch(&self, points: &[f64], steps: &[f64]) -> Vec<f64> {
        let d = self.dims;
        assert_eq!(steps.len(), d, "one step per input dimension");
        assert_eq!(points.len() % d.max(1), 0, "batch length must be a multiple of dims");
        let p = points.len() / d.max(1);
        let inv_l = 1.0 / self.length_scale;
        let out = self.outputs;
        let cols = 1 + d;
        let mut kb = DMatrix::<f64>::zeros(self.n, p * cols);
        for (c, z) in points.chunks_exact(d).enumerate() {
            for i in 0..self.n {
                let k = (-l1(self.train_point_unit(i), z) * inv_l).exp();
                kb[(i, c * cols)] = k;
                let t = self.train_point_unit(i);
                for a in 0..d {
                    if t[a] <= z[a] - steps[a] {
                        kb[(i, c * cols + 1 + a)] = k;
                    }
                }
            }
        }
        let at = DMatrixView::from_slice(&self.alpha, out, self.n);
        let r = at * &kb;
        let width = 1 + 2 * d;
        let mut result = vec![0.0; p * width * out];
        let mut near_base = vec![0.0; out];
        let mut near_plus = vec![0.0; out];
        let mut near_minus = vec![0.0; out];
        for (c, z) in points.chunks_exact(d).enumerate() {
            let block = &mut result[c * width * out..(c + 1) * width * out];
            let base = r.column(c * cols);
            block[..out].copy_from_slice(base.as_slice());
            for a in 0..d {
                let h = steps[a];
                near_base.iter_mut().for_each(|v| *v = 0.0);
                near_plus.iter_mut().for_each(|v| *v = 0.0);
                near_minus.iter_mut().for_each(|v| *v = 0.0);
                for i in 0..self.n {
                    let t = self.train_point_unit(i);
                    if t[a] > z[a] - h && t[a] < z[a] + h {
                        let k = kb[(i, c * cols)];
                        let dist0 = (z[a] - t[a]).abs();
                        let fp = k * (-((z[a] + h - t[a]).abs() - dist0) * inv_l).exp();
                        let fm = k * (-((z[a] - h - t[a]).abs() - dist0) * inv_l).exp();
                        for (o, al) in self.alpha_row(i).iter().enumerate() {
                            near_base[o] += k * al;
                            near_plus[o] += fp * al;
                            near_minus[o] += fm * al;
                        }
                    }
                }
                let lower = r.column(c * cols + 1 + a);
                let (down, up) = ((-h * inv_l).exp(), (h * inv_l).exp());
                for o in 0..out {
                    let pl = lower[o];
                    let qu = base[o] - pl - near_base[o];
                    block[(1 + 2 * a) * out + o] = down * pl + up * qu + near_plus[o];
                    block[(2 + 2 * a) * out + o] = up * pl + down * qu + near_minus[o];
                }
            }
        }
        for row in result.chunks_exact_mut(out) {
            for ((o, m), s) in row.iter_mut().zip(&self.standardization.mean).zip(&self.standardization.scale) {
                *o = m + s * *o;
            }
        }
        result
    }

    /// Mean prediction in original units, flattened as `[h_0..h_J, d_0..d_J]`.
    ///
    /// Points outside the stored bounds are still evaluated; a warning is logged.
    pub fn predict_flat(&self, x: &[f64]) -> Vec<f64> {
        if !self.bounds.contains(x) {
            warn!("surrogate extrapolating outside its training bounds at {x:?}");
        }
        self.predict_unit(&self.bounds.to_unit(x))
    }

    /// Mean prediction as a daily series. Surrogate means are not clipped and can
    /// dip slightly below zero.
    pub fn predict(&self, theta: &ParameterVector) -> DailySeries {
        let flat = self.predict_flat(theta.as_slice());
        let j = self.horizon();
        DailySeries {
            hospitalizations: flat[..j].to_vec(),
            deaths: flat[j..2 * j].to_vec(),
        }
    }

    /// Writes the JSON header line followed by `#theta` and `#alpha` CSV blocks.
    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        let header = ModelHeader {
            format: MODEL_FORMAT.to_string(),
            length_scale: self.length_scale,
            nugget: self.nugget,
            bounds: self.bounds.ranges.clone(),
            n_train: self.n,
            dims: self.dims,
            outputs: self.outputs,
            standardization: self.standardization.clone(),
        };
        serde_json::to_writer(&mut w, &header)?;
        writeln!(w)?;
        writeln!(w, "#theta")?;
        write_block(&mut w, &self.theta, self.dims)?;
        writeln!(w, "#alpha")?;
        write_block(&mut w, &self.alpha, self.outputs)?;
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::io::write_atomic(path, |w| self.write_to(w))
    }

    pub fn read_from<R: BufRead>(r: R) -> std::result::Result<Self, String> {
        let mut lines = r.lines();
        let mut next = || -> std::result::Result<String, String> {
            lines
                .next()
                .ok_or_else(|| "unexpected end of file".to_string())?
                .map_err(|e| e.to_string())
        };
        let header: ModelHeader = serde_json::from_str(&next()?).map_err(|e| format!("header: {e}"))?;
        if header.format != MODEL_FORMAT {
            return Err(format!("unknown model format {:?}", header.format));
        }
        let mut read_block = |tag: &str, rows: usize, cols: usize| -> std::result::Result<Vec<f64>, String> {
            let line = next()?;
            if line.trim() != tag {
                return Err(format!("expected {tag}, got {line:?}"));
            }
            let mut values = Vec::with_capacity(rows * cols);
            for r in 0..rows {
                let line = next()?;
                let before = values.len();
                for field in line.split(',') {
                    values.push(field.trim().parse::<f64>().map_err(|e| format!("{tag} row {r}: {e}"))?);
                }
                if values.len() - before != cols {
                    return Err(format!("{tag} row {r} has {} values, expected {cols}", values.len() - before));
                }
            }
            Ok(values)
        };
        let theta = read_block("#theta", header.n_train, header.dims)?;
        let alpha = read_block("#alpha", header.n_train, header.outputs)?;
        let bounds = Bounds::new(header.bounds).map_err(|e| e.to_string())?;
        if bounds.dim() != header.dims
            || header.standardization.mean.len() != header.outputs
            || header.standardization.scale.len() != header.outputs
        {
            return Err("header dimensions disagree".into());
        }
        Ok(Self {
            length_scale: header.length_scale,
            nugget: header.nugget,
            bounds,
            standardization: header.standardization,
            theta,
            alpha,
            n: header.n_train,
            dims: header.dims,
            outputs: header.outputs,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path)?;
        Self::read_from(std::io::BufReader::new(f)).map_err(|message| Error::Malformed {
            path: path.to_path_buf(),
            message,
        })
    }
}

const MODEL_FORMAT: &str = "epical-gp-v1";

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelHeader {
    format: String,
    length_scale: f64,
    nugget: f64,
    bounds: Vec<(f64, f64)>,
    n_train: usize,
    dims: usize,
    outputs: usize,
    standardization: Standardization,
}

fn write_block<W: Write>(w: &mut W, values: &[f64], cols: usize) -> Result<()> {
    let mut line = String::new();
    for row in values.chunks(cols) {
        line.clear();
        for (j, v) in row.iter().enumerate() {
            if j > 0 {
                line.push(',');
            }
            write!(line, "{v:?}").expect("writing to a String");
        }
        writeln!(w, "{line}")?;
    }
    Ok(())
}

fn check_nugget(nugget: f64) -> Result<()> {
    if !(MIN_NUGGET..=MAX_NUGGET).contains(&nugget) {
        return Err(invalid(format!("nugget must lie in [{MIN_NUGGET}, {MAX_NUGGET}], got {nugget}")));
    }
    Ok(())
}

/// Dataset inputs on the unit cube.
pub fn unit_design(dataset: &TrainingDataset) -> Vec<Vec<f64>> {
    dataset.design.iter().map(|p| dataset.bounds.to_unit(p.as_slice())).collect()
}

/// `n x 2J` response matrix, hospitalizations then deaths.
pub fn response_matrix(dataset: &TrainingDataset) -> DMatrix<f64> {
    let n = dataset.len();
    let m = 2 * dataset.horizon();
    let mut y = DMatrix::zeros(n, m);
    for (i, r) in dataset.responses.iter().enumerate() {
        for (j, v) in r.to_flat().into_iter().enumerate() {
            y[(i, j)] = v;
        }
    }
    y
}

fn distance_matrix(x: &[Vec<f64>]) -> DMatrix<f64> {
    let n = x.len();
    DMatrix::from_fn(n, n, |i, j| l1(&x[i], &x[j]))
}

fn gram(dist: &DMatrix<f64>, l: f64, nugget: f64) -> DMatrix<f64> {
    let mut k = dist.map(|d| (-d / l).exp());
    for i in 0..k.nrows() {
        k[(i, i)] = 1.0 + nugget;
    }
    k
}

fn factor(k: DMatrix<f64>, nugget: f64) -> Result<Cholesky<f64, nalgebra::Dyn>> {
    match Cholesky::new(k.clone()) {
        Some(c) => Ok(c),
        None => {
            let eig = SymmetricEigen::new(k);
            let max = eig.eigenvalues.iter().cloned().fold(f64::MIN, f64::max);
            let min = eig.eigenvalues.iter().cloned().fold(f64::MAX, f64::min);
            let condition_estimate = if min > 0.0 { max / min } else { f64::INFINITY };
            Err(Error::SingularGram {
                nugget,
                condition_estimate,
            })
        }
    }
}

/// Fits on unit-cube inputs and a raw response matrix. Any non-negative nugget is
/// accepted here; callers that need the documented range use [`GpModel::fit`].
pub fn fit_matrix(x: &[Vec<f64>], y: &DMatrix<f64>, bounds: &Bounds, length_scale: f64, nugget: f64) -> Result<GpModel> {
    if x.is_empty() {
        return Err(invalid("cannot fit a surrogate on zero points"));
    }
    if y.nrows() != x.len() {
        return Err(Error::LengthMismatch {
            expected: x.len(),
            actual: y.nrows(),
        });
    }
    if !(length_scale > 0.0 && length_scale.is_finite()) {
        return Err(invalid(format!("length scale must be positive, got {length_scale}")));
    }
    if !(nugget >= 0.0 && nugget.is_finite()) {
        return Err(invalid(format!("nugget must be non-negative, got {nugget}")));
    }
    let dims = bounds.dim();
    if let Some(row) = x.iter().find(|r| r.len() != dims) {
        return Err(Error::LengthMismatch {
            expected: dims,
            actual: row.len(),
        });
    }
    let standardization = Standardization::from_columns(y);
    let z = standardization.apply(y);
    let chol = factor(gram(&distance_matrix(x), length_scale, nugget), nugget)?;
    let alpha = chol.solve(&z);
    let (n, m) = (x.len(), y.ncols());
    let mut alpha_rm = Vec::with_capacity(n * m);
    for i in 0..n {
        alpha_rm.extend(alpha.row(i).iter());
    }
    Ok(GpModel {
        length_scale,
        nugget,
        bounds: bounds.clone(),
        standardization,
        theta: x.iter().flatten().copied().collect(),
        alpha: alpha_rm,
        n,
        dims,
        outputs: m,
    })
}

/// Log marginal likelihood of standardized outputs, summed over columns, and its
/// derivative with respect to `log l`.
pub fn log_marginal_likelihood(dist: &DMatrix<f64>, z: &DMatrix<f64>, l: f64, nugget: f64) -> Result<(f64, f64)> {
    let n = dist.nrows();
    let m = z.ncols() as f64;
    let chol = factor(gram(dist, l, nugget), nugget)?;
    let alpha = chol.solve(z);
    let log_det: f64 = 2.0 * chol.l_dirty().diagonal().iter().take(n).map(|v| v.ln()).sum::<f64>();
    let fit: f64 = z.iter().zip(alpha.iter()).map(|(a, b)| a * b).sum();
    let lml = -0.5 * fit - 0.5 * m * log_det - 0.5 * m * n as f64 * (2.0 * std::f64::consts::PI).ln();

    // dK/dlog l = K .* D / l off the diagonal.
    let dk = DMatrix::from_fn(n, n, |i, j| {
        let d = dist[(i, j)];
        (-d / l).exp() * d / l
    });
    let k_inv = chol.inverse();
    let trace_term: f64 = k_inv.iter().zip(dk.iter()).map(|(a, b)| a * b).sum();
    let dk_alpha = &dk * &alpha;
    let quad: f64 = dk_alpha.iter().zip(alpha.iter()).map(|(a, b)| a * b).sum();
    Ok((lml, 0.5 * (quad - m * trace_term)))
}

/// Outcome of optimizing `l` for one nugget.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LengthScaleFit {
    pub length_scale: f64,
    pub log_marginal_likelihood: f64,
    pub iterations: usize,
    /// Gradient ascent failed and the best point of the coarse grid was used.
    pub fallback: bool,
}

const LOG_L_RANGE: (f64, f64) = (-6.907_755_278_982_137, 6.907_755_278_982_137); // ln(1e-3), ln(1e3)
const COARSE_L_GRID: [f64; 9] = [0.03, 0.1, 0.3, 1.0, 2.0, 4.0, 8.0, 16.0, 32.0];

/// Gradient ascent on `log l` with an adaptive step; falls back to a coarse grid
/// when the ascent leaves the admissible range or never settles.
pub fn optimize_length_scale(dist: &DMatrix<f64>, z: &DMatrix<f64>, nugget: f64, l0: f64) -> Result<LengthScaleFit> {
    const MAX_ITER: usize = 100;
    let mut x = l0.ln();
    let (mut f, mut g) = log_marginal_likelihood(dist, z, l0, nugget)?;
    let scale = (z.nrows() * z.ncols()) as f64;
    let mut step = 0.5 / g.abs().max(1e-12);
    let mut converged = false;
    let mut iterations = 0;
    let mut diverged = !f.is_finite();
    while iterations < MAX_ITER && !diverged {
        iterations += 1;
        let trial = x + step * g;
        if !(LOG_L_RANGE.0..=LOG_L_RANGE.1).contains(&trial) {
            step *= 0.5;
            if step * g.abs() < 1e-10 {
                diverged = true;
            }
            continue;
        }
        match log_marginal_likelihood(dist, z, trial.exp(), nugget) {
            Ok((ft, gt)) if ft.is_finite() && ft >= f => {
                let moved = (trial - x).abs();
                x = trial;
                f = ft;
                g = gt;
                step *= 1.2;
                if g.abs() < 1e-8 * scale || moved < 1e-7 {
                    converged = true;
                    break;
                }
            }
            Ok(_) | Err(Error::SingularGram { .. }) => {
                step *= 0.5;
                if step * g.abs() < 1e-7 {
                    converged = true;
                    break;
                }
            }
            Err(e) => return Err(e),
        }
    }
    if converged && !diverged {
        debug!("nugget {nugget}: l = {:.4} after {iterations} steps", x.exp());
        return Ok(LengthScaleFit {
            length_scale: x.exp(),
            log_marginal_likelihood: f,
            iterations,
            fallback: false,
        });
    }
    warn!("length-scale ascent did not settle for nugget {nugget}; using the coarse grid");
    let mut best: Option<(f64, f64)> = None;
    for &l in &COARSE_L_GRID {
        if let Ok((fl, _)) = log_marginal_likelihood(dist, z, l, nugget) {
            if fl.is_finite() && best.map_or(true, |(_, bf)| fl > bf) {
                best = Some((l, fl));
            }
        }
    }
    let (l, fl) = best.ok_or_else(|| Error::NonFinite("log marginal likelihood on every grid point".into()))?;
    Ok(LengthScaleFit {
        length_scale: l,
        log_marginal_likelihood: fl,
        iterations,
        fallback: true,
    })
}

/// Relative error used throughout validation.
pub fn relative_error(pred: f64, truth: f64) -> f64 {
    (pred - truth).abs() / truth.abs().max(REL_ERROR_FLOOR)
}

pub fn median(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Cross-validation summary.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CvReport {
    pub folds: usize,
    pub seed: u64,
    pub length_scale: f64,
    pub nugget: f64,
    pub fold_medians: Vec<f64>,
    pub pooled_median: f64,
    pub mse: f64,
    pub r_squared: f64,
    /// Fold index of every dataset row.
    pub fold_of_row: Vec<usize>,
    /// Per row, the relative error of every output.
    pub point_errors: Vec<Vec<f64>>,
}

/// Seeded shuffle split into `k` folds whose sizes differ by at most one.
pub fn fold_assignment(n: usize, k: usize, seed: u64) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut fold = vec![0; n];
    let base = n / k;
    let extra = n % k;
    let mut pos = 0;
    for f in 0..k {
        let size = base + usize::from(f < extra);
        for &i in &idx[pos..pos + size] {
            fold[i] = f;
        }
        pos += size;
    }
    fold
}

/// k-fold cross-validation at fixed hyperparameters.
pub fn cross_validate(dataset: &TrainingDataset, k: usize, length_scale: f64, nugget: f64, seed: u64) -> Result<CvReport> {
    dataset.validate()?;
    let n = dataset.len();
    if k < 2 {
        return Err(invalid(format!("need at least 2 folds, got {k}")));
    }
    if k > n {
        return Err(invalid(format!("{k} folds requested for {n} rows")));
    }
    if n - n.div_ceil(k) < 2 {
        return Err(invalid(format!("{k}-fold split of {n} rows leaves fewer than 2 training points")));
    }
    let x = unit_design(dataset);
    let y = response_matrix(dataset);
    let fold_of_row = fold_assignment(n, k, seed);
    let per_fold: Vec<Vec<(usize, Vec<f64>)>> = (0..k)
        .into_par_iter()
        .map(|f| {
            let train: Vec<usize> = (0..n).filter(|&i| fold_of_row[i] != f).collect();
            let tx: Vec<Vec<f64>> = train.iter().map(|&i| x[i].clone()).collect();
            let ty = y.select_rows(&train);
            let model = fit_matrix(&tx, &ty, &dataset.bounds, length_scale, nugget)?;
            Ok((0..n)
                .filter(|&i| fold_of_row[i] == f)
                .map(|i| (i, model.predict_unit(&x[i])))
                .collect())
        })
        .collect::<Result<_>>()?;

    let m = y.ncols();
    let mut preds = vec![Vec::new(); n];
    for fold in per_fold {
        for (i, p) in fold {
            preds[i] = p;
        }
    }
    let point_errors: Vec<Vec<f64>> = (0..n)
        .map(|i| (0..m).map(|j| relative_error(preds[i][j], y[(i, j)])).collect())
        .collect();
    let fold_medians = (0..k)
        .map(|f| {
            let errs: Vec<f64> = (0..n)
                .filter(|&i| fold_of_row[i] == f)
                .flat_map(|i| point_errors[i].iter().copied())
                .collect();
            median(&errs)
        })
        .collect();
    let pooled: Vec<f64> = point_errors.iter().flatten().copied().collect();
    let col_mean: Vec<f64> = (0..m).map(|j| y.column(j).mean()).collect();
    let mut sse = 0.0;
    let mut sst = 0.0;
    for i in 0..n {
        for j in 0..m {
            sse += (preds[i][j] - y[(i, j)]).powi(2);
            sst += (y[(i, j)] - col_mean[j]).powi(2);
        }
    }
    Ok(CvReport {
        folds: k,
        seed,
        length_scale,
        nugget,
        fold_medians,
        pooled_median: median(&pooled),
        mse: sse / (n * m) as f64,
        r_squared: if sst > 0.0 { 1.0 - sse / sst } else { 1.0 },
        fold_of_row,
        point_errors,
    })
}

/// One nugget of the sweep.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepEntry {
    pub nugget: f64,
    pub fit: LengthScaleFit,
    pub cv_pooled_median: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Selection {
    pub length_scale: f64,
    pub nugget: f64,
    pub folds: usize,
    pub cv_seed: u64,
    pub sweep: Vec<SweepEntry>,
}

/// For every grid nugget, optimizes `l` on the marginal likelihood of the whole
/// dataset, then keeps the pair with the lowest cross-validated median error.
pub fn select_hyperparameters(dataset: &TrainingDataset, nugget_grid: &[f64], folds: usize, cv_seed: u64) -> Result<Selection> {
    dataset.validate()?;
    if nugget_grid.is_empty() {
        return Err(invalid("nugget grid is empty"));
    }
    for &g in nugget_grid {
        check_nugget(g)?;
    }
    let x = unit_design(dataset);
    let y = response_matrix(dataset);
    let dist = distance_matrix(&x);
    let z = Standardization::from_columns(&y).apply(&y);
    let mut sweep = Vec::with_capacity(nugget_grid.len());
    let mut l0 = 1.0;
    for &nugget in nugget_grid {
        let fit = optimize_length_scale(&dist, &z, nugget, l0)?;
        if !fit.fallback {
            l0 = fit.length_scale;
        }
        let cv = cross_validate(dataset, folds, fit.length_scale, nugget, cv_seed)?;
        debug!(
            "nugget {nugget:.4}: l {:.4}, lml {:.2}, cv median {:.4}",
            fit.length_scale, fit.log_marginal_likelihood, cv.pooled_median
        );
        sweep.push(SweepEntry {
            nugget,
            fit,
            cv_pooled_median: cv.pooled_median,
        });
    }
    let best = sweep
        .iter()
        .min_by(|a, b| a.cv_pooled_median.total_cmp(&b.cv_pooled_median))
        .expect("non-empty sweep");
    Ok(Selection {
        length_scale: best.fit.length_scale,
        nugget: best.nugget,
        folds,
        cv_seed,
        sweep,
    })
}
