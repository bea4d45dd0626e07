//! Delayed-rejection adaptive Metropolis with Gibbs refreshes of the noise variances.

use std::io::Write;
use std::path::Path;

use log::{debug, warn};
use nalgebra::{Cholesky, DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{invalid, Error, Result};
use crate::params::PARAM_NAMES;
use crate::posterior::{log_density_at, sample_variance_conditional, Evaluation, NoiseModel, Posterior, VariancePair};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DramConfig {
    /// Total iterations, burn-in included.
    pub samples: usize,
    /// Initial proposal standard deviation per coordinate, used when no full
    /// covariance is given.
    pub initial_sd: f64,
    pub initial_covariance: Option<Vec<Vec<f64>>>,
    /// First iteration at which the proposal adapts.
    pub adapt_start: usize,
    pub adapt_interval: usize,
    /// Second-stage proposal scale relative to the first stage.
    pub dr_scale: f64,
    pub epsilon_am: f64,
    pub burn_in_fraction: f64,
    /// Adapted covariances are recorded every this many iterations.
    pub checkpoint_interval: usize,
}

impl Default for DramConfig {
    fn default() -> Self {
        Self {
            samples: 200_000,
            initial_sd: 0.05,
            initial_covariance: None,
            adapt_start: 1_000,
            adapt_interval: 100,
            dr_scale: 0.2,
            epsilon_am: 1e-10,
            burn_in_fraction: 0.25,
            checkpoint_interval: 10_000,
        }
    }
}

impl DramConfig {
    pub fn validate(&self, dim: usize) -> Result<()> {
        if self.samples == 0 {
            return Err(invalid("chain length must be at least 1"));
        }
        if !(self.dr_scale > 0.0 && self.dr_scale < 1.0) {
            return Err(invalid(format!("delayed-rejection scale must lie in (0, 1), got {}", self.dr_scale)));
        }
        if !(0.0..1.0).contains(&self.burn_in_fraction) {
            return Err(invalid("burn-in fraction must lie in [0, 1)"));
        }
        if !(self.epsilon_am >= 0.0) || self.adapt_interval == 0 || self.checkpoint_interval == 0 {
            return Err(invalid("epsilon_am must be non-negative and intervals positive"));
        }
        match &self.initial_covariance {
            Some(c) => {
                if c.len() != dim || c.iter().any(|r| r.len() != dim) {
                    return Err(invalid(format!("initial covariance must be {dim}x{dim}")));
                }
                let m = DMatrix::from_fn(dim, dim, |i, j| c[i][j]);
                if (0..dim).any(|i| (0..dim).any(|j| (m[(i, j)] - m[(j, i)]).abs() > 1e-12 * (1.0 + m[(i, j)].abs()))) {
                    return Err(invalid("initial covariance is not symmetric"));
                }
                if Cholesky::new(m).is_none() {
                    return Err(invalid("initial covariance is not positive definite"));
                }
            }
            None => {
                if !(self.initial_sd > 0.0 && self.initial_sd.is_finite()) {
                    return Err(invalid("initial proposal sd must be positive"));
                }
            }
        }
        Ok(())
    }

    fn initial_matrix(&self, dim: usize) -> DMatrix<f64> {
        match &self.initial_covariance {
            Some(c) => DMatrix::from_fn(dim, dim, |i, j| c[i][j]),
            None => DMatrix::identity(dim, dim) * self.initial_sd.powi(2),
        }
    }
}

/// Acceptance outcome per iteration.
pub const REJECTED: u8 = 0;
pub const FIRST_STAGE: u8 = 1;
pub const SECOND_STAGE: u8 = 2;

/// A sampled chain. Points are stored in the target's reported coordinates.
#[derive(Clone, Debug, PartialEq)]
pub struct Chain {
    pub dim: usize,
    samples: Vec<f64>,
    pub variances: Option<Vec<VariancePair>>,
    pub log_posterior: Vec<f64>,
    pub stage: Vec<u8>,
    pub covariance_checkpoints: Vec<(usize, Vec<Vec<f64>>)>,
    pub burn_in: usize,
    pub seed: u64,
}

impl Chain {
    pub fn len(&self) -> usize {
        self.stage.len()
    }

    pub fn is_empty(&self) -> bool {
        self.stage.is_empty()
    }

    pub fn sample(&self, i: usize) -> &[f64] {
        &self.samples[i * self.dim..(i + 1) * self.dim]
    }

    /// Post burn-in values of coordinate `k`.
    pub fn marginal(&self, k: usize) -> Vec<f64> {
        (self.burn_in..self.len()).map(|i| self.samples[i * self.dim + k]).collect()
    }

    /// Post burn-in points.
    pub fn kept(&self) -> impl Iterator<Item = &[f64]> {
        (self.burn_in..self.len()).map(move |i| self.sample(i))
    }

    pub fn kept_variances(&self) -> Option<&[VariancePair]> {
        self.variances.as_ref().map(|v| &v[self.burn_in..])
    }

    /// First-stage, delayed-stage and overall acceptance rates over all iterations.
    pub fn acceptance_rates(&self) -> (f64, f64, f64) {
        let n = self.len().max(1) as f64;
        let first = self.stage.iter().filter(|&&s| s == FIRST_STAGE).count() as f64;
        let second = self.stage.iter().filter(|&&s| s == SECOND_STAGE).count() as f64;
        (first / n, second / n, (first + second) / n)
    }

    /// CSV with columns `theta1..theta4,sigma_h2,sigma_d2,logpost,accepted_stage`.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut csv = csv::Writer::from_writer(w);
        let mut header: Vec<String> = if self.dim == PARAM_NAMES.len() {
            PARAM_NAMES.iter().map(|s| s.to_string()).collect()
        } else {
            (1..=self.dim).map(|i| format!("x{i}")).collect()
        };
        header.extend(["sigma_h2", "sigma_d2", "logpost", "accepted_stage"].map(String::from));
        csv.write_record(&header)?;
        let mut row: Vec<String> = Vec::with_capacity(header.len());
        for i in 0..self.len() {
            row.clear();
            row.extend(self.sample(i).iter().map(|v| format!("{v:?}")));
            match &self.variances {
                Some(v) => {
                    row.push(format!("{:?}", v[i].hospitalizations));
                    row.push(format!("{:?}", v[i].deaths));
                }
                None => {
                    row.push(String::new());
                    row.push(String::new());
                }
            }
            row.push(format!("{:?}", self.log_posterior[i]));
            row.push(self.stage[i].to_string());
            csv.write_record(&row)?;
        }
        csv.flush()?;
        Ok(())
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        crate::io::write_atomic(path, |w| self.write_csv(w))
    }
}

/// Metropolis acceptance probability `min(1, pi(y) / pi(x))` on log densities.
pub fn first_stage_acceptance(log_pi_x: f64, log_pi_y: f64) -> f64 {
    if log_pi_y == f64::NEG_INFINITY {
        return 0.0;
    }
    (log_pi_y - log_pi_x).exp().min(1.0)
}

/// Log densities and proposal log-probabilities entering the delayed-rejection ratio.
#[derive(Clone, Copy, Debug)]
pub struct DelayedRejectionTerms {
    pub log_pi_x: f64,
    pub log_pi_y1: f64,
    pub log_pi_y2: f64,
    /// `log q1(x -> y1)`.
    pub log_q1_x_y1: f64,
    /// `log q1(y1 -> x)`.
    pub log_q1_y1_x: f64,
    /// `log q1(y2 -> y1)`.
    pub log_q1_y2_y1: f64,
    /// `log q1(y1 -> y2)`.
    pub log_q1_y1_y2: f64,
    /// `log q2(x, y1 -> y2)`.
    pub log_q2_forward: f64,
    /// `log q2(y2, y1 -> x)`.
    pub log_q2_backward: f64,
}

/// Second-stage acceptance
/// `min(1, pi(y2) q1(y2,y1) q2(y2,y1,x) (1 - a1(y2,y1)) / [pi(x) q1(x,y1) q2(x,y1,y2) (1 - a1(x,y1))])`
/// where `a1` is the Metropolis-Hastings first-stage probability.
pub fn second_stage_acceptance(t: &DelayedRejectionTerms) -> f64 {
    if t.log_pi_y2 == f64::NEG_INFINITY {
        return 0.0;
    }
    let a1_x = first_stage_acceptance(t.log_pi_x + t.log_q1_x_y1, t.log_pi_y1 + t.log_q1_y1_x);
    let a1_y2 = first_stage_acceptance(t.log_pi_y2 + t.log_q1_y2_y1, t.log_pi_y1 + t.log_q1_y1_y2);
    if a1_y2 >= 1.0 {
        return 0.0;
    }
    if a1_x >= 1.0 {
        // The first stage always accepts from x, so the second stage is never reached.
        return 0.0;
    }
    let log_num = t.log_pi_y2 + t.log_q1_y2_y1 + t.log_q2_backward + (1.0 - a1_y2).ln();
    let log_den = t.log_pi_x + t.log_q1_x_y1 + t.log_q2_forward + (1.0 - a1_x).ln();
    (log_num - log_den).exp().min(1.0)
}

struct Proposal {
    cov: DMatrix<f64>,
    chol_l: DMatrix<f64>,
    prec: DMatrix<f64>,
}

impl Proposal {
    fn new(cov: DMatrix<f64>, epsilon: f64) -> Self {
        let dim = cov.nrows();
        let mut jitter = epsilon.max(1e-300);
        let mut c = cov.clone();
        loop {
            if let Some(ch) = Cholesky::new(c.clone()) {
                let prec = ch.inverse();
                return Self {
                    cov: c,
                    chol_l: ch.l(),
                    prec,
                };
            }
            warn!("adapted proposal covariance not positive definite; inflating diagonal by {jitter:e}");
            c = &cov + DMatrix::identity(dim, dim) * jitter;
            jitter *= 10.0;
        }
    }

    /// `-0.5 (b - a)' C^-1 (b - a)`, the Gaussian log kernel up to its constant.
    fn log_kernel(&self, a: &[f64], b: &[f64]) -> f64 {
        let d = DVector::from_iterator(a.len(), a.iter().zip(b).map(|(x, y)| y - x));
        -0.5 * (d.transpose() * &self.prec * &d)[(0, 0)]
    }

    fn draw(&self, x: &[f64], scale: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
        let z = DVector::from_iterator(x.len(), (0..x.len()).map(|_| rng.sample::<f64, _>(StandardNormal)));
        let step = &self.chol_l * z;
        x.iter().zip(step.iter()).map(|(a, s)| a + scale * s).collect()
    }
}

/// Running mean and covariance (Welford).
struct RunningCov {
    n: usize,
    mean: Vec<f64>,
    m2: DMatrix<f64>,
}

impl RunningCov {
    fn new(dim: usize) -> Self {
        Self {
            n: 0,
            mean: vec![0.0; dim],
            m2: DMatrix::zeros(dim, dim),
        }
    }

    fn push(&mut self, x: &[f64]) {
        self.n += 1;
        let n = self.n as f64;
        let delta: Vec<f64> = x.iter().zip(&self.mean).map(|(a, m)| a - m).collect();
        for (m, d) in self.mean.iter_mut().zip(&delta) {
            *m += d / n;
        }
        let dim = x.len();
        for i in 0..dim {
            let di2 = x[i] - self.mean[i];
            for j in 0..dim {
                self.m2[(i, j)] += delta[j] * di2;
            }
        }
    }

    fn covariance(&self) -> DMatrix<f64> {
        let mut c = &self.m2 / (self.n.saturating_sub(1).max(1)) as f64;
        // Symmetrize against rounding.
        let t = c.transpose();
        c = (c + t) * 0.5;
        c
    }
}

fn to_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|i| m.row(i).iter().copied().collect()).collect()
}

/// Runs one chain from `start` (target coordinates).
///
/// Each iteration makes a Metropolis move on the parameters with the noise
/// variances held fixed, falling back to one delayed-rejection stage, then
/// redraws the variances from their conditional at the new point.
pub fn run_chain<P: Posterior + ?Sized>(
    target: &P,
    config: &DramConfig,
    start: &[f64],
    initial_variances: Option<VariancePair>,
    seed: u64,
) -> Result<Chain> {
    let dim = target.dim();
    config.validate(dim)?;
    if start.len() != dim {
        return Err(Error::LengthMismatch {
            expected: dim,
            actual: start.len(),
        });
    }
    let noise: Option<NoiseModel> = target.noise();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut x = start.to_vec();
    let mut ex: Evaluation = target
        .evaluate(&x)
        .ok_or_else(|| invalid("initial point lies outside the posterior support"))?;
    let mut v = match (noise, initial_variances) {
        (Some(_), Some(v)) => {
            v.validate()?;
            Some(v)
        }
        (Some(nm), None) => Some(draw_variances(&ex, &nm, &mut rng)?),
        (None, _) => None,
    };
    let mut lx = log_density_at(&ex, noise.as_ref(), v.as_ref());
    if !lx.is_finite() {
        return Err(invalid("initial point has a non-finite log posterior"));
    }

    let k = config.samples;
    let sd = 2.38f64.powi(2) / dim as f64;
    let mut proposal = Proposal::new(config.initial_matrix(dim), config.epsilon_am);
    let mut running = RunningCov::new(dim);
    let mut samples = Vec::with_capacity(k * dim);
    let mut variances = noise.map(|_| Vec::with_capacity(k));
    let mut log_posterior = Vec::with_capacity(k);
    let mut stage = Vec::with_capacity(k);
    let mut checkpoints = vec![(0, to_rows(&proposal.cov))];
    let gamma = config.dr_scale;

    for t in 0..k {
        let y1 = proposal.draw(&x, 1.0, &mut rng);
        let e1 = target.evaluate(&y1);
        let l1 = e1.as_ref().map_or(f64::NEG_INFINITY, |e| log_density_at(e, noise.as_ref(), v.as_ref()));
        let a1 = first_stage_acceptance(lx, l1);
        let mut outcome = REJECTED;
        if a1 > 0.0 && (a1 >= 1.0 || rng.gen::<f64>() < a1) {
            x = y1;
            ex = e1.expect("accepted points are in the support");
            lx = l1;
            outcome = FIRST_STAGE;
        } else {
            // Second stage: a shrunken symmetric proposal around x, so the q2 terms cancel.
            let y2 = proposal.draw(&x, gamma, &mut rng);
            if let Some(e2) = target.evaluate(&y2) {
                let l2 = log_density_at(&e2, noise.as_ref(), v.as_ref());
                let q_x_y1 = proposal.log_kernel(&x, &y1);
                let q_y2_y1 = proposal.log_kernel(&y2, &y1);
                let terms = DelayedRejectionTerms {
                    log_pi_x: lx,
                    log_pi_y1: l1,
                    log_pi_y2: l2,
                    log_q1_x_y1: q_x_y1,
                    log_q1_y1_x: q_x_y1,
                    log_q1_y2_y1: q_y2_y1,
                    log_q1_y1_y2: q_y2_y1,
                    log_q2_forward: 0.0,
                    log_q2_backward: 0.0,
                };
                let a2 = second_stage_acceptance(&terms);
                if a2 > 0.0 && rng.gen::<f64>() < a2 {
                    x = y2;
                    ex = e2;
                    lx = l2;
                    outcome = SECOND_STAGE;
                }
            }
        }

        if let Some(nm) = &noise {
            let nv = draw_variances(&ex, nm, &mut rng)?;
            v = Some(nv);
            lx = log_density_at(&ex, noise.as_ref(), v.as_ref());
        }
        if !lx.is_finite() {
            return Err(Error::NonFinite(format!("log posterior at iteration {t}")));
        }

        running.push(&x);
        samples.extend(target.to_reported(&x));
        if let (Some(store), Some(cur)) = (variances.as_mut(), v) {
            store.push(cur);
        }
        log_posterior.push(lx);
        stage.push(outcome);

        let done = t + 1;
        if done >= config.adapt_start && done % config.adapt_interval == 0 && running.n >= 2 {
            let cov = running.covariance() * sd + DMatrix::identity(dim, dim) * config.epsilon_am;
            proposal = Proposal::new(cov, config.epsilon_am);
            if done % config.checkpoint_interval == 0 {
                checkpoints.push((done, to_rows(&proposal.cov)));
            }
        }
    }

    let chain = Chain {
        dim,
        samples,
        variances,
        log_posterior,
        stage,
        covariance_checkpoints: checkpoints,
        burn_in: (config.burn_in_fraction * k as f64).floor() as usize,
        seed,
    };
    let (a1, a2, _) = chain.acceptance_rates();
    debug!("chain seed {seed}: first-stage acceptance {a1:.3}, delayed {a2:.3}");
    Ok(chain)
}

fn draw_variances(e: &Evaluation, nm: &NoiseModel, rng: &mut ChaCha8Rng) -> Result<VariancePair> {
    let (sh, sd) = e
        .sums
        .ok_or_else(|| invalid("target with a noise model must report residual sums"))?;
    Ok(VariancePair {
        hospitalizations: sample_variance_conditional(sh, nm.n, nm.prior.zeta2_hospitalizations, rng)?,
        deaths: sample_variance_conditional(sd, nm.n, nm.prior.zeta2_deaths, rng)?,
    })
}

/// Settings of the run-length diagnostic.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunLengthConfig {
    pub quantile: f64,
    pub accuracy: f64,
    pub probability: f64,
    pub converge_eps: f64,
}

impl Default for RunLengthConfig {
    fn default() -> Self {
        Self {
            quantile: 0.025,
            accuracy: 0.005,
            probability: 0.95,
            converge_eps: 0.001,
        }
    }
}

impl RunLengthConfig {
    fn phi(&self) -> f64 {
        Normal::new(0.0, 1.0)
            .expect("standard normal")
            .inverse_cdf(0.5 * (1.0 + self.probability))
    }

    /// Length an independent chain would need.
    pub fn n_min(&self) -> usize {
        let q = self.quantile;
        (q * (1.0 - q) * (self.phi() / self.accuracy).powi(2)).ceil() as usize
    }
}

/// Run-length estimate for one marginal.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunLength {
    pub thin: usize,
    pub burn_in: usize,
    pub total: usize,
    pub n_min: usize,
    pub dependence_factor: f64,
}

/// Diagnostic over all sampled parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunLengthReport {
    pub config: RunLengthConfig,
    pub per_parameter: Vec<RunLength>,
    /// Largest `total` over the parameters.
    pub required: usize,
    pub available: usize,
    pub converged: bool,
}

/// Type-7 sample quantile.
pub fn sample_quantile(x: &[f64], q: f64) -> f64 {
    let mut v = x.to_vec();
    v.sort_by(f64::total_cmp);
    let h = (v.len() - 1) as f64 * q;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(v.len() - 1);
    v[lo] + (h - lo as f64) * (v[hi] - v[lo])
}

/// Raftery-Lewis run length for the indicator `x <= quantile(x, q)`.
///
/// The thinning interval is the smallest one for which a first-order Markov
/// chain beats a second-order one by BIC; burn-in and the kept length follow
/// from the fitted two-state transition probabilities.
pub fn raftery_lewis(x: &[f64], cfg: &RunLengthConfig) -> Result<RunLength> {
    let n_min = cfg.n_min();
    if x.len() < n_min {
        return Err(Error::InsufficientSamples {
            required: n_min,
            available: x.len(),
        });
    }
    let cut = sample_quantile(x, cfg.quantile);
    let z: Vec<usize> = x.iter().map(|&v| usize::from(v <= cut)).collect();
    if z.iter().all(|&b| b == z[0]) {
        return Err(Error::DegenerateChain("quantile indicator never changes".into()));
    }

    let mut thin = 0;
    let thinned = loop {
        thin += 1;
        let t: Vec<usize> = z.iter().step_by(thin).copied().collect();
        if t.len() < 3 {
            return Err(Error::DegenerateChain(format!(
                "no thinning interval up to {thin} yields a first-order indicator chain"
            )));
        }
        let mut c3 = [[[0.0f64; 2]; 2]; 2];
        for w in t.windows(3) {
            c3[w[0]][w[1]][w[2]] += 1.0;
        }
        let mut g2 = 0.0;
        for i1 in 0..2 {
            for i2 in 0..2 {
                for i3 in 0..2 {
                    let obs = c3[i1][i2][i3];
                    if obs > 0.0 {
                        let row = c3[i1][i2][0] + c3[i1][i2][1];
                        let col = c3[0][i2][i3] + c3[1][i2][i3];
                        let mid: f64 = (0..2).flat_map(|a| (0..2).map(move |b| (a, b))).map(|(a, b)| c3[a][i2][b]).sum();
                        let fitted = row * col / mid;
                        g2 += 2.0 * obs * (obs / fitted).ln();
                    }
                }
            }
        }
        let bic = g2 - 2.0 * ((t.len() - 2) as f64).ln();
        if bic < 0.0 {
            break t;
        }
    };

    let mut c2 = [[0.0f64; 2]; 2];
    for w in thinned.windows(2) {
        c2[w[0]][w[1]] += 1.0;
    }
    // State 0 is "above the quantile", state 1 "at or below".
    let alpha = c2[0][1] / (c2[0][0] + c2[0][1]);
    let beta = c2[1][0] / (c2[1][0] + c2[1][1]);
    if !(alpha > 0.0 && beta > 0.0) || !alpha.is_finite() || !beta.is_finite() {
        return Err(Error::DegenerateChain(format!(
            "indicator transitions alpha = {alpha}, beta = {beta} after thinning by {thin}"
        )));
    }
    let phi = cfg.phi();
    let lam = (1.0 - alpha - beta).abs();
    let temp_burn = if lam > 0.0 {
        ((cfg.converge_eps * (alpha + beta)) / alpha.max(beta)).ln() / lam.ln()
    } else {
        0.0
    };
    let burn_in = (temp_burn.ceil().max(0.0) as usize) * thin;
    let temp_prec = ((2.0 - alpha - beta) * alpha * beta * phi * phi) / ((alpha + beta).powi(3) * cfg.accuracy.powi(2));
    let keep = (temp_prec * thin as f64).ceil() as usize;
    Ok(RunLength {
        thin,
        burn_in,
        total: burn_in + keep,
        n_min,
        dependence_factor: (burn_in + keep) as f64 / n_min as f64,
    })
}

/// Run-length diagnostic on each post burn-in parameter marginal of a chain.
pub fn run_length_diagnostic(chain: &Chain, cfg: &RunLengthConfig) -> Result<RunLengthReport> {
    let per_parameter = (0..chain.dim)
        .map(|k| raftery_lewis(&chain.marginal(k), cfg))
        .collect::<Result<Vec<_>>>()?;
    let required = per_parameter.iter().map(|r| r.total).max().unwrap_or(0);
    let available = chain.len() - chain.burn_in;
    Ok(RunLengthReport {
        config: *cfg,
        per_parameter,
        required,
        available,
        converged: required <= available,
    })
}
