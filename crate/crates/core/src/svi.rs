//! Stein variational inference: particles follow the kernelized Stein direction
//! under Adam, one ensemble per seed, final particles pooled into a superset.

use std::io::Write;
use std::path::Path;

use log::{debug, warn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::gp::median;
use crate::metrics::cramer_von_mises;
use crate::params::{Bounds, PARAM_NAMES};
use crate::posterior::SmoothLogDensity;

/// Smallest bandwidth used when every particle coincides.
pub const BANDWIDTH_FLOOR: f64 = 1e-12;

/// Particles whose gradients are evaluated together as one batch.
const GRADIENT_CHUNK: usize = 50;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SviConfig {
    pub particles: usize,
    pub steps: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_epsilon: f64,
    pub seeds: Vec<u64>,
    /// Kernel bandwidth `h`; `None` recomputes the median rule every step.
    pub fixed_bandwidth: Option<f64>,
    /// Iterations between trace rows.
    pub trace_interval: usize,
}

impl Default for SviConfig {
    fn default() -> Self {
        Self {
            particles: 200,
            steps: 10_000,
            learning_rate: 0.001,
            beta1: 0.9,
            beta2: 0.999,
            adam_epsilon: 1e-8,
            seeds: (0..10).collect(),
            fixed_bandwidth: None,
            trace_interval: 100,
        }
    }
}

impl SviConfig {
    pub fn validate(&self) -> Result<()> {
        if self.particles == 0 || self.steps == 0 {
            return Err(invalid("SVI needs at least one particle and one step"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(invalid(format!("learning rate must be positive, got {}", self.learning_rate)));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(b > 0.0 && b < 1.0) {
                return Err(invalid(format!("{name} must lie in (0, 1), got {b}")));
            }
        }
        if !(self.adam_epsilon > 0.0) {
            return Err(invalid("Adam epsilon must be positive"));
        }
        if self.seeds.is_empty() {
            return Err(invalid("SVI needs at least one seed"));
        }
        if let Some(h) = self.fixed_bandwidth {
            if !(h > 0.0 && h.is_finite()) {
                return Err(invalid(format!("fixed bandwidth must be positive, got {h}")));
            }
        }
        if self.trace_interval == 0 {
            return Err(invalid("trace interval must be positive"));
        }
        Ok(())
    }
}

/// Particles and Adam state for one seed, stored row-major `M x dim`.
#[derive(Clone, Debug, PartialEq)]
pub struct ParticleEnsemble {
    pub dim: usize,
    pub particles: Vec<f64>,
    pub first_moment: Vec<f64>,
    pub second_moment: Vec<f64>,
    pub iteration: usize,
    pub seed: u64,
}

impl ParticleEnsemble {
    pub fn new(dim: usize, particles: Vec<f64>, seed: u64) -> Result<Self> {
        if dim == 0 || particles.is_empty() || particles.len() % dim != 0 {
            return Err(invalid("particle matrix must be non-empty with whole rows"));
        }
        let n = particles.len();
        Ok(Self {
            dim,
            particles,
            first_moment: vec![0.0; n],
            second_moment: vec![0.0; n],
            iteration: 0,
            seed,
        })
    }

    /// I.i.d. uniform particles over `bounds`.
    pub fn uniform(m: usize, bounds: &Bounds, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let particles = (0..m)
            .flat_map(|_| bounds.ranges.iter().map(|&(lo, hi)| lo + (hi - lo) * rng.gen::<f64>()).collect::<Vec<_>>())
            .collect();
        Self::new(bounds.dim(), particles, seed)
    }

    pub fn len(&self) -> usize {
        self.particles.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.particles.is_empty()
    }

    pub fn particle(&self, i: usize) -> &[f64] {
        &self.particles[i * self.dim..(i + 1) * self.dim]
    }

    pub fn rows(&self) -> Vec<Vec<f64>> {
        self.particles.chunks_exact(self.dim).map(<[f64]>::to_vec).collect()
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum()
}

/// `h = med^2 / ln M` from the median pairwise distance; `1` for a single particle.
pub fn median_bandwidth(particles: &[f64], dim: usize) -> f64 {
    let m = particles.len() / dim;
    if m < 2 {
        return 1.0;
    }
    let mut d = Vec::with_capacity(m * (m - 1) / 2);
    for i in 0..m {
        for j in i + 1..m {
            d.push(sq_dist(&particles[i * dim..(i + 1) * dim], &particles[j * dim..(j + 1) * dim]).sqrt());
        }
    }
    let med = median(&d);
    let h = med * med / (m as f64).ln();
    if h < BANDWIDTH_FLOOR {
        warn!("particles have collapsed (median distance {med:e}); bandwidth floored at {BANDWIDTH_FLOOR:e}");
        return BANDWIDTH_FLOOR;
    }
    h
}

/// Kernel matrix `k_ij = exp(-|x_i - x_j|^2 / h)` and gradients
/// `d k_ij / d x_j = (2 / h) (x_i - x_j) k_ij`.
#[derive(Clone, Debug, PartialEq)]
pub struct KernelMatrix {
    pub m: usize,
    pub dim: usize,
    pub h: f64,
    /// Row-major `M x M`.
    pub values: Vec<f64>,
    /// `M x M x dim`; entry `(i, j)` holds the gradient of `k_ij` in `x_j`.
    pub grads: Vec<f64>,
}

impl KernelMatrix {
    pub fn value(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.m + j]
    }

    pub fn grad(&self, i: usize, j: usize) -> &[f64] {
        let o = (i * self.m + j) * self.dim;
        &self.grads[o..o + self.dim]
    }
}

pub fn kernel_and_grads(particles: &[f64], dim: usize, h: f64) -> Result<KernelMatrix> {
    if !(h > 0.0) {
        return Err(invalid(format!("kernel bandwidth must be positive, got {h}")));
    }
    let m = particles.len() / dim;
    let mut values = vec![0.0; m * m];
    let mut grads = vec![0.0; m * m * dim];
    for i in 0..m {
        let xi = &particles[i * dim..(i + 1) * dim];
        values[i * m + i] = 1.0;
        for j in i + 1..m {
            let xj = &particles[j * dim..(j + 1) * dim];
            let k = (-sq_dist(xi, xj) / h).exp();
            values[i * m + j] = k;
            values[j * m + i] = k;
            for c in 0..dim {
                let g = 2.0 / h * (xi[c] - xj[c]) * k;
                grads[(i * m + j) * dim + c] = g;
                grads[(j * m + i) * dim + c] = -g;
            }
        }
    }
    Ok(KernelMatrix { m, dim, h, values, grads })
}

/// `psi_i = (1/M) sum_j [k_ij grad log P(x_j) + d k_ij / d x_j]`.
pub fn stein_potential(log_grads: &[f64], kernel: &KernelMatrix) -> Result<Vec<f64>> {
    let (m, dim) = (kernel.m, kernel.dim);
    if log_grads.len() != m * dim {
        return Err(Error::LengthMismatch {
            expected: m * dim,
            actual: log_grads.len(),
        });
    }
    if let Some(p) = log_grads.chunks_exact(dim).position(|g| g.iter().any(|v| !v.is_finite())) {
        return Err(Error::NonFinite(format!("log-posterior gradient at particle {p}")));
    }
    let mut psi = vec![0.0; m * dim];
    for i in 0..m {
        let out = &mut psi[i * dim..(i + 1) * dim];
        for j in 0..m {
            let k = kernel.value(i, j);
            let g = &log_grads[j * dim..(j + 1) * dim];
            for ((o, gj), kg) in out.iter_mut().zip(g).zip(kernel.grad(i, j)) {
                *o += k * gj + kg;
            }
        }
        out.iter_mut().for_each(|o| *o /= m as f64);
    }
    Ok(psi)
}

/// One bias-corrected Adam ascent step along `directions`. Returns the largest
/// per-particle step norm.
pub fn adam_step(ens: &mut ParticleEnsemble, directions: &[f64], config: &SviConfig) -> Result<f64> {
    if directions.len() != ens.particles.len() {
        return Err(Error::LengthMismatch {
            expected: ens.particles.len(),
            actual: directions.len(),
        });
    }
    ens.iteration += 1;
    let t = ens.iteration as i32;
    let (b1, b2) = (config.beta1, config.beta2);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    let mut max_step: f64 = 0.0;
    for (p, chunk) in directions.chunks_exact(ens.dim).enumerate() {
        let mut norm2 = 0.0;
        for (c, &g) in chunk.iter().enumerate() {
            let k = p * ens.dim + c;
            let m = b1 * ens.first_moment[k] + (1.0 - b1) * g;
            let v = b2 * ens.second_moment[k] + (1.0 - b2) * g * g;
            ens.first_moment[k] = m;
            ens.second_moment[k] = v;
            let step = config.learning_rate * (m / c1) / ((v / c2).sqrt() + config.adam_epsilon);
            ens.particles[k] += step;
            norm2 += step * step;
        }
        if ens.particle(p).iter().any(|v| !v.is_finite()) {
            return Err(Error::ParticleBlowUp {
                seed: ens.seed,
                iteration: ens.iteration,
                particle: p,
                detail: format!("direction {chunk:?} gave coordinates {:?}", ens.particle(p)),
            });
        }
        max_step = max_step.max(norm2.sqrt());
    }
    Ok(max_step)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub iteration: usize,
    pub mean_log_density: f64,
    pub bandwidth: f64,
    pub max_step: f64,
}

/// Final state of one seed.
#[derive(Clone, Debug, PartialEq)]
pub struct SeedRun {
    pub seed: u64,
    pub ensemble: ParticleEnsemble,
    pub trace: Vec<TraceRow>,
    pub clamp_events: usize,
}

fn gradients<T: SmoothLogDensity + ?Sized>(target: &T, rows: &[Vec<f64>]) -> Vec<f64> {
    rows.par_chunks(GRADIENT_CHUNK)
        .map(|c| target.gradients(c))
        .collect::<Vec<_>>()
        .into_iter()
        .flatten()
        .flat_map(|g| g.gradient)
        .collect()
}

fn mean_log_density<T: SmoothLogDensity + ?Sized>(target: &T, rows: &[Vec<f64>]) -> f64 {
    let l: Vec<f64> = rows
        .par_chunks(GRADIENT_CHUNK)
        .map(|c| target.log_densities(c))
        .collect::<Vec<_>>()
        .concat();
    l.iter().sum::<f64>() / l.len() as f64
}

/// Runs `config.steps` iterations for one seed from i.i.d. uniform particles.
pub fn run_seed<T: SmoothLogDensity + ?Sized>(target: &T, config: &SviConfig, seed: u64) -> Result<SeedRun> {
    config.validate()?;
    let mut ens = ParticleEnsemble::uniform(config.particles, target.bounds(), seed)?;
    run_ensemble(target, config, &mut ens)
}

/// Continues an ensemble for `config.steps` iterations.
pub fn run_ensemble<T: SmoothLogDensity + ?Sized>(
    target: &T,
    config: &SviConfig,
    ens: &mut ParticleEnsemble,
) -> Result<SeedRun> {
    config.validate()?;
    if ens.dim != target.dim() {
        return Err(Error::LengthMismatch {
            expected: target.dim(),
            actual: ens.dim,
        });
    }
    let rows = ens.rows();
    if let Some(p) = target.log_densities(&rows).iter().position(|l| !l.is_finite()) {
        return Err(invalid(format!("particle {p} starts where the log posterior is not finite")));
    }
    let mut trace = Vec::new();
    let mut clamp_events = 0;
    let start = ens.iteration;
    for t in 0..config.steps {
        let h = config.fixed_bandwidth.unwrap_or_else(|| median_bandwidth(&ens.particles, ens.dim));
        let kernel = kernel_and_grads(&ens.particles, ens.dim, h)?;
        let rows = ens.rows();
        let grads = gradients(target, &rows);
        let psi = stein_potential(&grads, &kernel).map_err(|e| Error::ParticleBlowUp {
            seed: ens.seed,
            iteration: ens.iteration + 1,
            particle: usize::MAX,
            detail: e.to_string(),
        })?;
        let max_step = adam_step(ens, &psi, config)?;
        let d = ens.dim;
        for p in ens.particles.chunks_exact_mut(d) {
            if target.bounds().clamp(p) {
                clamp_events += 1;
            }
        }
        if (t + 1) % config.trace_interval == 0 || t + 1 == config.steps {
            trace.push(TraceRow {
                iteration: ens.iteration,
                mean_log_density: mean_log_density(target, &ens.rows()),
                bandwidth: h,
                max_step,
            });
        }
    }
    if clamp_events > 0 {
        debug!(
            "seed {}: {clamp_events} particle clamps over iterations {}..{}",
            ens.seed,
            start + 1,
            ens.iteration
        );
    }
    Ok(SeedRun {
        seed: ens.seed,
        ensemble: ens.clone(),
        trace,
        clamp_events,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SupersetRow {
    pub seed: u64,
    pub particle: usize,
    pub theta: Vec<f64>,
}

/// Final particles of every successful seed, in reported coordinates.
#[derive(Clone, Debug, PartialEq)]
pub struct Superset {
    pub dim: usize,
    pub rows: Vec<SupersetRow>,
    pub runs: Vec<SeedRun>,
    pub aborted: Vec<(u64, String)>,
}

impl Superset {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn points(&self) -> Vec<Vec<f64>> {
        self.rows.iter().map(|r| r.theta.clone()).collect()
    }

    pub fn marginal(&self, k: usize) -> Vec<f64> {
        self.rows.iter().map(|r| r.theta[k]).collect()
    }

    fn header(&self) -> Vec<String> {
        if self.dim == PARAM_NAMES.len() {
            PARAM_NAMES.iter().map(|s| s.to_string()).collect()
        } else {
            (1..=self.dim).map(|i| format!("x{i}")).collect()
        }
    }

    /// `seed,particle,theta1..theta4`.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut csv = csv::Writer::from_writer(w);
        let mut header = vec!["seed".to_string(), "particle".to_string()];
        header.extend(self.header());
        csv.write_record(&header)?;
        for r in &self.rows {
            let mut rec = vec![r.seed.to_string(), r.particle.to_string()];
            rec.extend(r.theta.iter().map(|v| format!("{v:?}")));
            csv.write_record(&rec)?;
        }
        csv.flush()?;
        Ok(())
    }

    /// `seed,iteration,mean_log_density,bandwidth,max_step`.
    pub fn write_trace_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut csv = csv::Writer::from_writer(w);
        csv.write_record(["seed", "iteration", "mean_log_density", "bandwidth", "max_step"])?;
        for run in &self.runs {
            for t in &run.trace {
                csv.write_record([
                    run.seed.to_string(),
                    t.iteration.to_string(),
                    format!("{:?}", t.mean_log_density),
                    format!("{:?}", t.bandwidth),
                    format!("{:?}", t.max_step),
                ])?;
            }
        }
        csv.flush()?;
        Ok(())
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        crate::io::write_atomic(path, |w| self.write_csv(w))
    }

    pub fn save_trace_csv(&self, path: &Path) -> Result<()> {
        crate::io::write_atomic(path, |w| self.write_trace_csv(w))
    }
}

/// Runs every seed and pools the final particles. Seeds that blow up are
/// dropped and reported; the run fails when more than half of them do.
pub fn run_svi<T: SmoothLogDensity + ?Sized>(target: &T, config: &SviConfig) -> Result<Superset> {
    config.validate()?;
    let results: Vec<(u64, Result<SeedRun>)> = config
        .seeds
        .par_iter()
        .map(|&s| (s, run_seed(target, config, s)))
        .collect();
    let mut runs = Vec::new();
    let mut aborted = Vec::new();
    for (seed, r) in results {
        match r {
            Ok(run) => runs.push(run),
            Err(e @ Error::ParticleBlowUp { .. }) => {
                warn!("SVI seed {seed} aborted: {e}");
                aborted.push((seed, e.to_string()));
            }
            Err(e) => return Err(e),
        }
    }
    if 2 * aborted.len() > config.seeds.len() {
        return Err(Error::TooManyAbortedSeeds {
            failed: aborted.len(),
            total: config.seeds.len(),
        });
    }
    let rows = runs
        .iter()
        .flat_map(|run| {
            (0..run.ensemble.len()).map(move |i| SupersetRow {
                seed: run.seed,
                particle: i,
                theta: target.to_reported(run.ensemble.particle(i)),
            })
        })
        .collect();
    Ok(Superset {
        dim: target.dim(),
        rows,
        runs,
        aborted,
    })
}

/// Cramér-von Mises distances of smaller-ensemble marginals to a reference.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelfConsistency {
    pub reference_count: usize,
    pub counts: Vec<usize>,
    /// Per count, per parameter.
    pub statistics: Vec<Vec<f64>>,
    /// Reference count against a second reference run with other seeds.
    pub baseline: Option<Vec<f64>>,
}

impl SelfConsistency {
    /// Mean over parameters, per count.
    pub fn mean_statistics(&self) -> Vec<f64> {
        self.statistics.iter().map(|s| s.iter().sum::<f64>() / s.len() as f64).collect()
    }

    pub fn mean_baseline(&self) -> Option<f64> {
        self.baseline.as_ref().map(|s| s.iter().sum::<f64>() / s.len() as f64)
    }

    /// Adjacent count pairs where the mean statistic grows.
    pub fn inversions(&self) -> usize {
        self.mean_statistics().windows(2).filter(|w| w[1] > w[0]).count()
    }
}

fn marginals(s: &Superset) -> Vec<Vec<f64>> {
    (0..s.dim).map(|k| s.marginal(k)).collect()
}

/// Runs SVI at `reference_count` and at each of `counts`, all with
/// `config.seeds`, and compares marginals. `baseline_seeds` adds a second
/// reference-count run for the noise floor.
pub fn self_consistency<T: SmoothLogDensity + ?Sized>(
    target: &T,
    config: &SviConfig,
    counts: &[usize],
    reference_count: usize,
    baseline_seeds: Option<&[u64]>,
) -> Result<SelfConsistency> {
    if counts.iter().any(|&c| c > reference_count) {
        return Err(invalid("reference count must be at least every compared count"));
    }
    let with = |m: usize, seeds: &[u64]| SviConfig {
        particles: m,
        seeds: seeds.to_vec(),
        ..config.clone()
    };
    let reference = marginals(&run_svi(target, &with(reference_count, &config.seeds))?);
    let compare = |s: &Superset| -> Result<Vec<f64>> {
        marginals(s)
            .iter()
            .zip(&reference)
            .map(|(a, r)| cramer_von_mises(a, r))
            .collect()
    };
    let mut statistics = Vec::with_capacity(counts.len());
    for &m in counts {
        statistics.push(compare(&run_svi(target, &with(m, &config.seeds))?)?);
    }
    let baseline = match baseline_seeds {
        Some(seeds) => Some(compare(&run_svi(target, &with(reference_count, seeds))?)?),
        None => None,
    };
    Ok(SelfConsistency {
        reference_count,
        counts: counts.to_vec(),
        statistics,
        baseline,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::posterior::stubs::GaussianStub;
    use approx::assert_relative_eq;
    use rand_distr::StandardNormal;

    fn unit_stub() -> GaussianStub {
        GaussianStub::with_bounds(vec![0.45, 0.55], vec![0.08, 0.12], Bounds::unit(2))
    }

    #[test]
    fn bandwidth_cases() {
        assert_relative_eq!(median_bandwidth(&[0.0, 0.0, 1.0, 0.0], 2), 1.0 / 2f64.ln());
        assert_eq!(median_bandwidth(&[0.3, 0.2], 2), 1.0);
        assert_eq!(median_bandwidth(&[0.5; 10], 2), BANDWIDTH_FLOOR);

        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let p: Vec<f64> = (0..100).map(|_| rng.gen::<f64>()).collect();
        let mut d = Vec::new();
        for i in 0..50 {
            for j in 0..50 {
                if i < j {
                    d.push(((p[2 * i] - p[2 * j]).powi(2) + (p[2 * i + 1] - p[2 * j + 1]).powi(2)).sqrt());
                }
            }
        }
        assert_eq!(d.len(), 1225);
        d.sort_by(f64::total_cmp);
        let med = d[612];
        assert_relative_eq!(median_bandwidth(&p, 2), med * med / 50f64.ln(), max_relative = 1e-14);
    }

    #[test]
    fn kernel_cases() {
        let k = kernel_and_grads(&[0.0, 0.0, 1.0, 1.0], 2, 2.0).unwrap();
        assert_eq!(k.value(0, 0), 1.0);
        assert!(k.grad(1, 1).iter().all(|g| *g == 0.0));
        assert_relative_eq!(k.value(0, 1), (-1.0f64).exp());

        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p: Vec<f64> = (0..15).map(|_| rng.gen::<f64>()).collect();
        let h = 0.37;
        let k = kernel_and_grads(&p, 3, h).unwrap();
        for i in 0..5 {
            for j in 0..5 {
                let xi = &p[3 * i..3 * i + 3];
                let xj = &p[3 * j..3 * j + 3];
                let d2: f64 = (0..3).map(|c| (xi[c] - xj[c]).powi(2)).sum();
                let kij = (-d2 / h).exp();
                assert_relative_eq!(k.value(i, j), kij, max_relative = 1e-14);
                assert_eq!(k.value(i, j), k.value(j, i));
                for c in 0..3 {
                    assert_relative_eq!(k.grad(i, j)[c], 2.0 / h * (xi[c] - xj[c]) * kij, max_relative = 1e-13, epsilon = 1e-300);
                }
            }
        }
        assert!(kernel_and_grads(&p, 3, 0.0).is_err());
    }

    #[test]
    fn potential_cases() {
        // One particle: pure gradient.
        let k = kernel_and_grads(&[0.2, 0.7], 2, 1.0).unwrap();
        assert_eq!(stein_potential(&[1.5, -2.0], &k).unwrap(), vec![1.5, -2.0]);

        // Mirror pair about the mode of a symmetric target.
        let stub = GaussianStub::standard(2);
        let p = [-0.7, 0.0, 0.7, 0.0];
        let g: Vec<f64> = p.chunks(2).flat_map(|x| stub.analytic_gradient(x)).collect();
        let k = kernel_and_grads(&p, 2, 0.5).unwrap();
        let psi = stein_potential(&g, &k).unwrap();
        assert_relative_eq!(psi[0], -psi[2], max_relative = 1e-14);
        assert_eq!(psi[1], 0.0);

        // Four particles against a double loop over the definition.
        let p = [0.1, 0.3, -0.4, 0.8, 1.1, -0.2, 0.5, 0.5];
        let g: Vec<f64> = p.chunks(2).flat_map(|x| stub.analytic_gradient(x)).collect();
        let h = 0.9;
        let k = kernel_and_grads(&p, 2, h).unwrap();
        let psi = stein_potential(&g, &k).unwrap();
        for i in 0..4 {
            for c in 0..2 {
                let mut acc = 0.0;
                for j in 0..4 {
                    let d2 = (p[2 * i] - p[2 * j]).powi(2) + (p[2 * i + 1] - p[2 * j + 1]).powi(2);
                    let kij = (-d2 / h).exp();
                    acc += kij * g[2 * j + c] + 2.0 / h * (p[2 * i + c] - p[2 * j + c]) * kij;
                }
                assert_relative_eq!(psi[2 * i + c], acc / 4.0, max_relative = 1e-13);
            }
        }

        let bad = [0.0, f64::NAN, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0];
        match stein_potential(&bad, &k) {
            Err(Error::NonFinite(msg)) => assert!(msg.contains("particle 0")),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn adam_first_step_and_trace() {
        let cfg = SviConfig::default();
        let mut e = ParticleEnsemble::new(2, vec![0.0, 0.0], 0).unwrap();
        adam_step(&mut e, &[3.0, -1e-3], &cfg).unwrap();
        assert_relative_eq!(e.particles[0], 0.001 * 3.0 / (3.0 + 1e-8), max_relative = 1e-12);
        assert_relative_eq!(e.particles[1], -0.001 * 1e-3 / (1e-3 + 1e-8), max_relative = 1e-12);

        let mut still = ParticleEnsemble::new(1, vec![0.25], 0).unwrap();
        for _ in 0..10 {
            adam_step(&mut still, &[0.0], &cfg).unwrap();
        }
        assert_eq!(still.particles, vec![0.25]);

        // f(x) = -(x - 1)^2 from x = 0 with lr 0.1: gradients 2(1 - x).
        let cfg = SviConfig {
            learning_rate: 0.1,
            ..SviConfig::default()
        };
        let mut e = ParticleEnsemble::new(1, vec![0.0], 0).unwrap();
        let (mut m, mut v, mut x) = (0.0f64, 0.0f64, 0.0f64);
        for t in 1..=3 {
            let g = 2.0 * (1.0 - x);
            m = 0.9 * m + 0.1 * g;
            v = 0.999 * v + 0.001 * g * g;
            x += 0.1 * (m / (1.0 - 0.9f64.powi(t))) / ((v / (1.0 - 0.999f64.powi(t))).sqrt() + 1e-8);
            let g = 2.0 * (1.0 - e.particles[0]);
            adam_step(&mut e, &[g], &cfg).unwrap();
            assert_relative_eq!(e.particles[0], x, max_relative = 1e-14);
        }
        // Hand values: step 1 moves by exactly lr; step 2 by lr as well since the
        // gradient shrinks only slightly.
        assert!((e.particles[0] - 0.3).abs() < 2e-3, "{}", e.particles[0]);
    }

    #[test]
    fn blow_up_is_reported() {
        let cfg = SviConfig::default();
        let mut e = ParticleEnsemble::new(1, vec![f64::MAX, 0.0], 3).unwrap();
        e.first_moment[0] = f64::MAX;
        match adam_step(&mut e, &[f64::MAX, 0.0], &cfg) {
            Err(Error::ParticleBlowUp { seed, particle, .. }) => {
                assert_eq!(seed, 3);
                assert_eq!(particle, 0);
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn repulsion_separates_particles_on_a_flat_target() {
        let cfg = SviConfig::default();
        let mut e = ParticleEnsemble::new(2, vec![0.4, 0.5, 0.6, 0.5], 0).unwrap();
        let k = kernel_and_grads(&e.particles, 2, median_bandwidth(&e.particles, 2)).unwrap();
        let psi = stein_potential(&[0.0; 4], &k).unwrap();
        let before = sq_dist(e.particle(0), e.particle(1));
        adam_step(&mut e, &psi, &cfg).unwrap();
        assert!(sq_dist(e.particle(0), e.particle(1)) > before);
    }

    #[test]
    fn permutation_equivariance() {
        let stub = GaussianStub::standard(2);
        let p = [0.1, 0.3, -0.4, 0.8, 1.1, -0.2];
        let perm = [2, 0, 1];
        let q: Vec<f64> = perm.iter().flat_map(|&i| p[2 * i..2 * i + 2].to_vec()).collect();
        let run = |x: &[f64]| {
            let g: Vec<f64> = x.chunks(2).flat_map(|v| stub.analytic_gradient(v)).collect();
            stein_potential(&g, &kernel_and_grads(x, 2, median_bandwidth(x, 2)).unwrap()).unwrap()
        };
        let a = run(&p);
        let b = run(&q);
        for (slot, &i) in perm.iter().enumerate() {
            for c in 0..2 {
                assert_relative_eq!(b[2 * slot + c], a[2 * i + c], max_relative = 1e-13);
            }
        }
    }

    #[test]
    fn stein_identity_smoke() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let n = 100_000;
        // grad log p(x) * x + 1 for the standard normal.
        let vals: Vec<f64> = (0..n)
            .map(|_| {
                let x: f64 = rng.sample(StandardNormal);
                -x * x + 1.0
            })
            .collect();
        let mean = vals.iter().sum::<f64>() / n as f64;
        let sd = (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt();
        assert!(mean.abs() < 3.0 * sd / (n as f64).sqrt(), "{mean}");
    }

    #[test]
    fn gaussian_moments() {
        let stub = unit_stub();
        let cfg = SviConfig {
            particles: 100,
            steps: 2000,
            seeds: vec![0],
            ..SviConfig::default()
        };
        let s = run_svi(&stub, &cfg).unwrap();
        assert_eq!(s.len(), 100);
        for k in 0..2 {
            let m = s.marginal(k);
            let mean = m.iter().sum::<f64>() / m.len() as f64;
            let var = m.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (m.len() - 1) as f64;
            assert!((mean - stub.mean[k]).abs() < 0.05, "mean {k}: {mean}");
            let truth = stub.sd[k].powi(2);
            assert!((var / truth - 1.0).abs() < 0.15, "var {k}: {var} vs {truth}");
        }
    }

    #[test]
    fn single_particle_finds_the_mode() {
        let stub = unit_stub();
        let cfg = SviConfig {
            particles: 1,
            steps: 3000,
            seeds: vec![4],
            ..SviConfig::default()
        };
        let s = run_svi(&stub, &cfg).unwrap();
        for k in 0..2 {
            assert!((s.rows[0].theta[k] - stub.mean[k]).abs() < 1e-3, "{:?}", s.rows[0]);
        }
    }

    #[test]
    fn single_particle_climbs_after_transients() {
        let stub = GaussianStub::with_bounds(vec![0.5], vec![0.3], Bounds::unit(1));
        let cfg = SviConfig {
            steps: 1,
            ..SviConfig::default()
        };
        let mut e = ParticleEnsemble::new(1, vec![0.05], 0).unwrap();
        let mut trace = Vec::new();
        for _ in 0..1500 {
            run_ensemble(&stub, &cfg, &mut e).unwrap();
            trace.push(stub.log_density(&e.particles));
        }
        for w in trace[100..].windows(2) {
            assert!(w[1] >= w[0] - 1e-4, "{} -> {}", w[0], w[1]);
        }
    }

    #[test]
    fn seeds_are_reproducible_and_independent_of_threads() {
        let stub = unit_stub();
        let cfg = SviConfig {
            particles: 20,
            steps: 50,
            seeds: vec![1, 2, 3],
            ..SviConfig::default()
        };
        let a = run_svi(&stub, &cfg).unwrap();
        let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        let b = pool.install(|| run_svi(&stub, &cfg).unwrap());
        assert_eq!(a.rows, b.rows);
        assert_eq!(a.rows.iter().filter(|r| r.seed == 2).count(), 20);
        let mut buf = Vec::new();
        a.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().next().unwrap(), "seed,particle,x1,x2");
        assert_eq!(text.lines().count(), 61);
    }

    #[test]
    fn self_consistency_of_identical_runs_is_zero() {
        let stub = unit_stub();
        let cfg = SviConfig {
            particles: 10,
            steps: 30,
            seeds: vec![1, 2],
            ..SviConfig::default()
        };
        let sc = self_consistency(&stub, &cfg, &[5, 10], 10, Some(&[7, 8])).unwrap();
        assert!(sc.statistics[1].iter().all(|v| v.abs() < 1e-12));
        assert!(sc.mean_baseline().unwrap() > 0.0);
        assert!(self_consistency(&stub, &cfg, &[20], 10, None).is_err());
    }

    #[test]
    fn config_validation() {
        let ok = SviConfig::default();
        assert!(ok.validate().is_ok());
        for bad in [
            SviConfig { particles: 0, ..ok.clone() },
            SviConfig { steps: 0, ..ok.clone() },
            SviConfig { learning_rate: 0.0, ..ok.clone() },
            SviConfig { beta1: 1.0, ..ok.clone() },
            SviConfig { seeds: vec![], ..ok.clone() },
            SviConfig { fixed_bandwidth: Some(-1.0), ..ok.clone() },
        ] {
            assert!(bad.validate().is_err());
        }
    }
}
