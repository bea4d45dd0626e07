//! Global sensitivity of a surrogate: permutation importance and Saltelli
//! pick-freeze Sobol indices.

use std::fmt::Write as _;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::design::{halton_matrix_from, TrainingDataset, PRIMES};
use crate::error::{invalid, Error, Result};
use crate::gp::GpModel;
use crate::io::{write_atomic, write_json};
use crate::params::Bounds;

pub const DEFAULT_REPETITIONS: usize = 10;
pub const MIN_BASE_SAMPLES: usize = 64;

/// Points per chunk of model evaluations.
const EVAL_CHUNK: usize = 256;

/// Pooled coefficient of determination over all output columns.
///
/// `truth` and `pred` are row-major `n x outputs`.
pub fn pooled_r_squared(truth: &[f64], pred: &[f64], outputs: usize) -> f64 {
    assert_eq!(truth.len(), pred.len());
    let n = truth.len() / outputs.max(1);
    let mut mean = vec![0.0; outputs];
    for row in truth.chunks_exact(outputs) {
        for (m, v) in mean.iter_mut().zip(row) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let mut sse = 0.0;
    let mut sst = 0.0;
    for (t, p) in truth.chunks_exact(outputs).zip(pred.chunks_exact(outputs)) {
        for j in 0..outputs {
            sse += (p[j] - t[j]).powi(2);
            sst += (t[j] - mean[j]).powi(2);
        }
    }
    if sst > 0.0 {
        1.0 - sse / sst
    } else {
        1.0
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PermutationImportance {
    pub baseline_r_squared: f64,
    /// Baseline minus mean shuffled score, per input.
    pub scores: Vec<f64>,
    /// Standard deviation of the drop across repetitions, per input.
    pub spread: Vec<f64>,
    pub repetitions: usize,
    pub rows: usize,
    pub seed: u64,
}

/// Permutation importance for any batch predictor.
///
/// `x` holds the inputs row by row, `y` the matching responses (row-major
/// `n x outputs`). `predict` maps a flat batch of rows to a flat batch of
/// predictions. The shuffled score is floored at 0, so an input carrying all
/// of the signal scores the baseline itself. Column shuffles are drawn from
/// one seeded stream in input, then repetition, order.
pub fn permutation_importance_fn<F>(
    x: &[Vec<f64>],
    y: &[f64],
    outputs: usize,
    repetitions: usize,
    seed: u64,
    predict: F,
) -> Result<PermutationImportance>
where
    F: Fn(&[f64]) -> Vec<f64> + Sync,
{
    let n = x.len();
    if n < 2 {
        return Err(invalid(format!("permutation importance needs at least 2 rows, got {n}")));
    }
    if repetitions == 0 {
        return Err(invalid("at least one shuffle repetition is required"));
    }
    if outputs == 0 || y.len() != n * outputs {
        return Err(Error::LengthMismatch {
            expected: n * outputs,
            actual: y.len(),
        });
    }
    let dim = x[0].len();
    if x.iter().any(|r| r.len() != dim) {
        return Err(invalid("input rows differ in length"));
    }
    let flat: Vec<f64> = x.iter().flatten().copied().collect();
    let check = |pred: Vec<f64>| -> Result<Vec<f64>> {
        if pred.len() != n * outputs {
            return Err(Error::LengthMismatch {
                expected: n * outputs,
                actual: pred.len(),
            });
        }
        Ok(pred)
    };
    let baseline = pooled_r_squared(y, &check(predict(&flat))?, outputs);

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut jobs = Vec::with_capacity(dim * repetitions);
    for k in 0..dim {
        for _ in 0..repetitions {
            let mut perm: Vec<usize> = (0..n).collect();
            perm.shuffle(&mut rng);
            jobs.push((k, perm));
        }
    }
    let drops: Vec<f64> = jobs
        .par_iter()
        .map(|(k, perm)| {
            let mut shuffled = flat.clone();
            for (i, &src) in perm.iter().enumerate() {
                shuffled[i * dim + k] = flat[src * dim + k];
            }
            let shuffled_score = pooled_r_squared(y, &check(predict(&shuffled))?, outputs).max(0.0);
            Ok(baseline - shuffled_score)
        })
        .collect::<Result<_>>()?;

    let mut scores = Vec::with_capacity(dim);
    let mut spread = Vec::with_capacity(dim);
    for d in drops.chunks_exact(repetitions) {
        let mean = d.iter().sum::<f64>() / repetitions as f64;
        let var = if repetitions > 1 {
            d.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (repetitions - 1) as f64
        } else {
            0.0
        };
        scores.push(mean);
        spread.push(var.sqrt());
    }
    Ok(PermutationImportance {
        baseline_r_squared: baseline,
        scores,
        spread,
        repetitions,
        rows: n,
        seed,
    })
}

/// Permutation importance of a surrogate scored against a dataset.
pub fn permutation_importance(model: &GpModel, dataset: &TrainingDataset, repetitions: usize, seed: u64) -> Result<PermutationImportance> {
    dataset.validate()?;
    if dataset.horizon() * 2 != model.n_outputs() {
        return Err(Error::LengthMismatch {
            expected: model.n_outputs(),
            actual: dataset.horizon() * 2,
        });
    }
    let x: Vec<Vec<f64>> = dataset.design.iter().map(|p| model.bounds.to_unit(p.as_slice())).collect();
    let y: Vec<f64> = dataset.responses.iter().flat_map(|r| r.to_flat()).collect();
    permutation_importance_fn(&x, &y, model.n_outputs(), repetitions, seed, |pts| model.predict_unit_batch(pts))
}

/// First-order and total indices for one scalar output.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SobolIndices {
    pub first: Vec<f64>,
    pub total: Vec<f64>,
    /// Set where the raw first-order estimate was negative and clipped to 0.
    pub first_clipped: Vec<bool>,
    pub total_clipped: Vec<bool>,
    pub variance: f64,
}

/// Result of a pick-freeze run over one or more outputs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SobolRun {
    pub n_base: usize,
    /// Model evaluations spent, `n_base * (dim + 2)`.
    pub evaluations: usize,
    pub seed: u64,
    pub outputs: Vec<SobolIndices>,
}

/// Two independent base matrices on the unit cube.
///
/// Both come out of one `2 dim`-dimensional Halton sequence (columns `0..dim`
/// and `dim..2 dim`) under a seeded random shift modulo 1.
pub fn base_matrices(dim: usize, n_base: usize, seed: u64) -> Result<(Vec<f64>, Vec<f64>)> {
    if dim == 0 || 2 * dim > PRIMES.len() {
        return Err(invalid(format!("Sobol base matrices support 1..={} inputs, got {dim}", PRIMES.len() / 2)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shift: Vec<f64> = (0..2 * dim).map(|_| rng.gen::<f64>()).collect();
    let h = halton_matrix_from(1, n_base, 2 * dim)?;
    let mut a = Vec::with_capacity(n_base * dim);
    let mut b = Vec::with_capacity(n_base * dim);
    for row in &h {
        for (c, (&v, s)) in row.iter().zip(&shift).enumerate() {
            let u = (v + s).fract();
            if c < dim {
                a.push(u);
            } else {
                b.push(u);
            }
        }
    }
    Ok((a, b))
}

fn evaluate<F>(points: &[f64], dim: usize, outputs: usize, f: &F) -> Result<Vec<f64>>
where
    F: Fn(&[f64]) -> Vec<f64> + Sync,
{
    let parts: Vec<Vec<f64>> = points
        .par_chunks(EVAL_CHUNK * dim)
        .map(|chunk| {
            let v = f(chunk);
            if v.len() != chunk.len() / dim * outputs {
                return Err(Error::LengthMismatch {
                    expected: chunk.len() / dim * outputs,
                    actual: v.len(),
                });
            }
            if let Some(bad) = v.iter().find(|x| !x.is_finite()) {
                return Err(Error::NonFinite(format!("model output {bad} during Sobol evaluation")));
            }
            Ok(v)
        })
        .collect::<Result<_>>()?;
    Ok(parts.concat())
}

fn mean(x: &[f64]) -> f64 {
    x.iter().sum::<f64>() / x.len() as f64
}

/// Pick-freeze Sobol indices of `f` with inputs uniform on the unit cube.
///
/// `f` maps a flat batch of `dim`-dimensional rows to `outputs` values per row.
/// `A_B^i` is `A` with column `i` taken from `B` and `V` is the variance pooled
/// over `f(A)` and `f(B)`, with pooled mean `m`. First order estimates
/// `Cov(f(B), f(A_B^i)) / V` as `mean((f(B) - m) (f(A_B^i) - f(A))) / V`;
/// total estimates the complement `1 - Cov(f(A), f(A_B^i)) / V` as
/// `mean((f(A) - f(A_B^i))^2) / 2V`. Both
/// subtract the shared part of the two evaluations, which keeps small indices
/// resolvable next to a dominant input.
pub fn sobol_indices_fn<F>(dim: usize, outputs: usize, n_base: usize, seed: u64, f: F) -> Result<SobolRun>
where
    F: Fn(&[f64]) -> Vec<f64> + Sync,
{
    if n_base < MIN_BASE_SAMPLES {
        return Err(invalid(format!("n_base must be at least {MIN_BASE_SAMPLES}, got {n_base}")));
    }
    if outputs == 0 {
        return Err(invalid("at least one output is required"));
    }
    let (a, b) = base_matrices(dim, n_base, seed)?;
    let fa = evaluate(&a, dim, outputs, &f)?;
    let fb = evaluate(&b, dim, outputs, &f)?;
    let fab: Vec<Vec<f64>> = (0..dim)
        .map(|i| {
            let mut m = a.clone();
            for r in 0..n_base {
                m[r * dim + i] = b[r * dim + i];
            }
            evaluate(&m, dim, outputs, &f)
        })
        .collect::<Result<_>>()?;

    let column = |v: &[f64], o: usize| -> Vec<f64> { v.iter().skip(o).step_by(outputs).copied().collect() };
    let mut per_output = Vec::with_capacity(outputs);
    for o in 0..outputs {
        let ya = column(&fa, o);
        let yb = column(&fb, o);
        let n = n_base as f64;
        let pooled: Vec<f64> = ya.iter().chain(&yb).copied().collect();
        let m = mean(&pooled);
        let v = pooled.iter().map(|x| (x - m).powi(2)).sum::<f64>() / pooled.len() as f64;
        let mut idx = SobolIndices {
            first: vec![0.0; dim],
            total: vec![0.0; dim],
            first_clipped: vec![false; dim],
            total_clipped: vec![false; dim],
            variance: v,
        };
        if v > 0.0 {
            for i in 0..dim {
                let yab = column(&fab[i], o);
                let s1 = ya.iter().zip(&yb).zip(&yab).map(|((a, b), ab)| (b - m) * (ab - a)).sum::<f64>() / n / v;
                let st = ya.iter().zip(&yab).map(|(a, ab)| (a - ab).powi(2)).sum::<f64>() / (2.0 * n) / v;
                idx.first_clipped[i] = s1 < 0.0;
                idx.total_clipped[i] = st < 0.0;
                idx.first[i] = s1.max(0.0);
                idx.total[i] = st.max(0.0);
            }
        }
        per_output.push(idx);
    }
    Ok(SobolRun {
        n_base,
        evaluations: n_base * (dim + 2),
        seed,
        outputs: per_output,
    })
}

/// Sobol indices of a surrogate with inputs uniform on `bounds`.
///
/// The scalar output is the sum of all predicted daily hospitalizations and
/// deaths. With `per_output` set, indices for every output column follow it.
pub fn sobol_indices(model: &GpModel, bounds: &Bounds, n_base: usize, seed: u64, per_output: bool) -> Result<SobolRun> {
    bounds.validate()?;
    if bounds.dim() != model.dims() {
        return Err(Error::LengthMismatch {
            expected: model.dims(),
            actual: bounds.dim(),
        });
    }
    let dim = model.dims();
    let q = model.n_outputs();
    let outputs = if per_output { 1 + q } else { 1 };
    sobol_indices_fn(dim, outputs, n_base, seed, |pts| {
        let mapped: Vec<f64> = pts
            .chunks_exact(dim)
            .flat_map(|u| model.bounds.to_unit(&bounds.from_unit(u)))
            .collect();
        let pred = model.predict_unit_batch(&mapped);
        let mut out = Vec::with_capacity(pred.len() / q * outputs);
        for row in pred.chunks_exact(q) {
            out.push(row.iter().sum());
            if per_output {
                out.extend_from_slice(row);
            }
        }
        out
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SensitivityReport {
    pub parameters: Vec<String>,
    pub permutation: PermutationImportance,
    pub sobol_first: Vec<f64>,
    pub sobol_total: Vec<f64>,
    pub sobol_first_clipped: Vec<bool>,
    pub sobol_total_clipped: Vec<bool>,
    pub sobol_n_base: usize,
    pub sobol_evaluations: usize,
    pub sobol_seed: u64,
    /// Scalar reduction used for the indices above.
    pub reduction: String,
    /// Per-output indices, present when requested.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub per_output: Option<Vec<SobolIndices>>,
}

impl SensitivityReport {
    pub fn new(parameters: &[&str], permutation: PermutationImportance, sobol: SobolRun) -> Result<Self> {
        let mut outputs = sobol.outputs.into_iter();
        let scalar = outputs.next().ok_or_else(|| invalid("Sobol run has no outputs"))?;
        if scalar.first.len() != parameters.len() || permutation.scores.len() != parameters.len() {
            return Err(Error::LengthMismatch {
                expected: parameters.len(),
                actual: scalar.first.len(),
            });
        }
        let rest: Vec<SobolIndices> = outputs.collect();
        Ok(Self {
            parameters: parameters.iter().map(|s| s.to_string()).collect(),
            permutation,
            sobol_first: scalar.first,
            sobol_total: scalar.total,
            sobol_first_clipped: scalar.first_clipped,
            sobol_total_clipped: scalar.total_clipped,
            sobol_n_base: sobol.n_base,
            sobol_evaluations: sobol.evaluations,
            sobol_seed: sobol.seed,
            reduction: "sum of daily hospitalizations and deaths".to_string(),
            per_output: (!rest.is_empty()).then_some(rest),
        })
    }

    /// Indices ordered from most to least important by permutation score.
    pub fn permutation_ranking(&self) -> Vec<usize> {
        ranking(&self.permutation.scores)
    }

    pub fn first_order_ranking(&self) -> Vec<usize> {
        ranking(&self.sobol_first)
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "parameter,permutation_importance,sobol_first,sobol_total,permutation_repetitions,sobol_n_base")?;
        for (i, p) in self.parameters.iter().enumerate() {
            let mut line = String::new();
            write!(
                line,
                "{p},{:?},{:?},{:?},{},{}",
                self.permutation.scores[i], self.sobol_first[i], self.sobol_total[i], self.permutation.repetitions, self.sobol_n_base
            )
            .expect("writing to a String");
            writeln!(w, "{line}")?;
        }
        Ok(())
    }

    pub fn save(&self, json_path: &Path, csv_path: &Path) -> Result<()> {
        write_json(json_path, self)?;
        write_atomic(csv_path, |w| self.write_csv(w))
    }
}

fn ranking(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx
}
