//! Likelihood, priors and the shared log-posterior over the calibration parameters.
//!
//! Observation errors are independent Gaussians with one variance for the
//! hospitalization series and one for deaths. The parameter prior is uniform on
//! the box; each variance has an inverse-gamma prior whose conditional given the
//! residuals is conjugate, so samplers can refresh the variances by Gibbs steps.

use std::path::Path;

use log::warn;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use crate::design::TrainingDataset;
use crate::error::{invalid, Error, Result};
use crate::gp::GpModel;
use crate::params::{Bounds, ParameterVector};
use crate::series::DailySeries;

/// Default relative finite-difference step, as a fraction of each parameter range.
pub const DEFAULT_FD_STEP: f64 = 1e-4;

/// Observed daily series.
#[derive(Clone, Debug, PartialEq)]
pub struct Observations {
    pub series: DailySeries,
}

impl Observations {
    pub fn new(series: DailySeries) -> Result<Self> {
        series.validate()?;
        if series.horizon() == 0 {
            return Err(invalid("observations must cover at least one day"));
        }
        Ok(Self { series })
    }

    /// Observations per series.
    pub fn n(&self) -> usize {
        self.series.horizon()
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::new(DailySeries::load(path)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.series.save(path)
    }

    /// Seed-averaged ABM output at `truth` plus independent Gaussian noise with
    /// standard deviations `noise_sd` (hospitalizations, deaths), clipped at 0.
    /// A zero standard deviation leaves that series untouched.
    pub fn synthetic(
        truth: &ParameterVector,
        config: &crate::abm::AbmConfig,
        n_seeds: usize,
        noise_sd: [f64; 2],
        noise_seed: u64,
    ) -> Result<Self> {
        if noise_sd.iter().any(|s| !(s.is_finite() && *s >= 0.0)) {
            return Err(invalid(format!("noise standard deviations must be finite and non-negative, got {noise_sd:?}")));
        }
        let mut series = crate::abm::simulate_mean(truth, config, n_seeds)?;
        let mut rng = ChaCha8Rng::seed_from_u64(noise_seed);
        for (values, sd) in [&mut series.hospitalizations, &mut series.deaths].into_iter().zip(noise_sd) {
            if sd > 0.0 {
                let noise = rand_distr::Normal::new(0.0, sd).map_err(|e| invalid(e.to_string()))?;
                for v in values.iter_mut() {
                    *v = (*v + noise.sample(&mut rng)).max(0.0);
                }
            }
        }
        Self::new(series)
    }
}

/// Observation noise variances (count squared).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct VariancePair {
    pub hospitalizations: f64,
    pub deaths: f64,
}

impl VariancePair {
    pub fn new(hospitalizations: f64, deaths: f64) -> Result<Self> {
        let v = Self {
            hospitalizations,
            deaths,
        };
        v.validate()?;
        Ok(v)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, s2) in [("hospitalization", self.hospitalizations), ("death", self.deaths)] {
            if !(s2 > 0.0 && s2.is_finite()) {
                return Err(invalid(format!("{name} variance must be positive and finite, got {s2}")));
            }
        }
        Ok(())
    }
}

/// Inverse-gamma priors on the two variances: precision ~ Gamma(1/2, zeta2 / 2).
///
/// Combined with `n` Gaussian observations the precision's conditional is
/// Gamma((1 + n) / 2, (zeta2 + S) / 2).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VariancePrior {
    pub zeta2_hospitalizations: f64,
    pub zeta2_deaths: f64,
}

impl Default for VariancePrior {
    fn default() -> Self {
        Self {
            zeta2_hospitalizations: 1.0,
            zeta2_deaths: 1.0,
        }
    }
}

impl VariancePrior {
    pub const PRIOR_SHAPE: f64 = 0.5;

    pub fn validate(&self) -> Result<()> {
        for z in [self.zeta2_hospitalizations, self.zeta2_deaths] {
            if !(z >= 0.0 && z.is_finite()) {
                return Err(invalid(format!("variance prior rate must be non-negative, got {z}")));
            }
        }
        Ok(())
    }

    /// Shape of the conditional precision given `n` observations.
    pub fn conditional_shape(n: usize) -> f64 {
        (1.0 + n as f64) / 2.0
    }

    /// Log prior density of the variance pair. A zero rate gives the improper
    /// limit `(sigma^2)^(-3/2)`.
    pub fn log_density(&self, v: &VariancePair) -> f64 {
        log_inverse_gamma(v.hospitalizations, self.zeta2_hospitalizations) + log_inverse_gamma(v.deaths, self.zeta2_deaths)
    }
}

fn log_inverse_gamma(s2: f64, zeta2: f64) -> f64 {
    let a = VariancePrior::PRIOR_SHAPE;
    let b = zeta2 / 2.0;
    let kernel = -(a + 1.0) * s2.ln() - b / s2;
    if b > 0.0 {
        a * b.ln() - ln_gamma(a) + kernel
    } else {
        kernel
    }
}

/// Squared residual norms between a flattened prediction `[h.., d..]` and observations.
pub fn residual_sums_flat(pred: &[f64], obs: &Observations) -> Result<(f64, f64)> {
    let j = obs.n();
    if pred.len() != 2 * j {
        return Err(Error::LengthMismatch {
            expected: 2 * j,
            actual: pred.len(),
        });
    }
    let sh = pred[..j]
        .iter()
        .zip(&obs.series.hospitalizations)
        .map(|(p, o)| (o - p) * (o - p))
        .sum();
    let sd = pred[j..]
        .iter()
        .zip(&obs.series.deaths)
        .map(|(p, o)| (o - p) * (o - p))
        .sum();
    Ok((sh, sd))
}

/// `(S_h, S_d)` of the surrogate prediction at `theta`.
pub fn residual_sums(theta: &ParameterVector, obs: &Observations, model: &GpModel) -> Result<(f64, f64)> {
    if model.horizon() != obs.n() {
        return Err(Error::LengthMismatch {
            expected: model.horizon(),
            actual: obs.n(),
        });
    }
    residual_sums_flat(&model.predict_flat(theta.as_slice()), obs)
}

/// Gaussian log-likelihood from the residual sums.
pub fn log_likelihood_from_sums(sh: f64, sd: f64, n: usize, v: &VariancePair) -> Result<f64> {
    v.validate()?;
    Ok(log_likelihood_unchecked(sh, sd, n, v))
}

#[inline]
fn log_likelihood_unchecked(sh: f64, sd: f64, n: usize, v: &VariancePair) -> f64 {
    let sigma_prod = (v.hospitalizations * v.deaths).sqrt();
    -(n as f64) * (2.0 * std::f64::consts::PI * sigma_prod).ln() - 0.5 * (sh / v.hospitalizations + sd / v.deaths)
}

pub fn log_likelihood(theta: &ParameterVector, obs: &Observations, v: &VariancePair, model: &GpModel) -> Result<f64> {
    v.validate()?;
    let (sh, sd) = residual_sums(theta, obs, model)?;
    Ok(log_likelihood_unchecked(sh, sd, obs.n(), v))
}

/// Log of the uniform density on `bounds`, or `-inf` outside.
pub fn log_uniform_prior(x: &[f64], bounds: &Bounds) -> f64 {
    if bounds.contains(x) {
        -(0..bounds.dim()).map(|i| bounds.width(i).ln()).sum::<f64>()
    } else {
        f64::NEG_INFINITY
    }
}

/// Log-posterior of `theta` and the variances.
///
/// With `variances_fixed` the variance prior is omitted and the variances act as
/// constants, as in the particle method.
pub fn log_posterior(
    theta: &ParameterVector,
    v: &VariancePair,
    obs: &Observations,
    model: &GpModel,
    bounds: &Bounds,
    prior: &VariancePrior,
    variances_fixed: bool,
) -> Result<f64> {
    v.validate()?;
    let lp = log_uniform_prior(theta.as_slice(), bounds);
    if lp == f64::NEG_INFINITY {
        return Ok(lp);
    }
    let ll = log_likelihood(theta, obs, v, model)?;
    let lv = if variances_fixed { 0.0 } else { prior.log_density(v) };
    Ok(ll + lp + lv)
}

/// Draws a variance from its inverse-gamma conditional: precision ~
/// Gamma((1 + n) / 2, rate (zeta2 + S) / 2).
pub fn sample_variance_conditional<R: Rng + ?Sized>(s: f64, n: usize, zeta2: f64, rng: &mut R) -> Result<f64> {
    if !(s >= 0.0 && s.is_finite()) || !(zeta2 >= 0.0 && zeta2.is_finite()) {
        return Err(invalid(format!("residual sum and rate must be non-negative, got {s} and {zeta2}")));
    }
    if n == 0 {
        return Err(invalid("variance conditional needs at least one observation"));
    }
    let rate = (zeta2 + s) / 2.0;
    if rate <= 0.0 {
        return Err(invalid("variance conditional has zero rate (S = 0 and zeta2 = 0)"));
    }
    let shape = VariancePrior::conditional_shape(n);
    let g = Gamma::new(shape, 1.0 / rate).map_err(|e| invalid(e.to_string()))?;
    let precision: f64 = g.sample(rng);
    Ok(1.0 / precision.max(f64::MIN_POSITIVE))
}

/// A finite-difference gradient and the coordinates that fell back to a one-sided stencil.
#[derive(Clone, Debug, PartialEq)]
pub struct FdGradient {
    pub gradient: Vec<f64>,
    pub one_sided: Vec<usize>,
}

/// Central differences with per-coordinate `steps`; coordinates within a step of
/// `bounds` use the one-sided stencil that stays inside.
pub fn fd_gradient<F: Fn(&[f64]) -> f64>(f: F, x: &[f64], steps: &[f64], bounds: &Bounds) -> FdGradient {
    let mut gradient = vec![0.0; x.len()];
    let mut one_sided = Vec::new();
    let mut y = x.to_vec();
    let mut f0 = None;
    for i in 0..x.len() {
        let h = steps[i];
        let (lo, hi) = bounds.ranges[i];
        let can_up = x[i] + h <= hi;
        let can_down = x[i] - h >= lo;
        gradient[i] = if can_up && can_down {
            y[i] = x[i] + h;
            let fp = f(&y);
            y[i] = x[i] - h;
            let fm = f(&y);
            (fp - fm) / (2.0 * h)
        } else {
            one_sided.push(i);
            let base = *f0.get_or_insert_with(|| f(x));
            if can_up {
                y[i] = x[i] + h;
                (f(&y) - base) / h
            } else {
                y[i] = x[i] - h;
                (base - f(&y)) / h
            }
        };
        y[i] = x[i];
    }
    FdGradient { gradient, one_sided }
}

/// Gradient of the fixed-variance log-posterior in original parameter units.
pub fn grad_log_posterior(
    theta: &ParameterVector,
    v: &VariancePair,
    obs: &Observations,
    model: &GpModel,
    bounds: &Bounds,
    rel_step: f64,
) -> Result<Vec<f64>> {
    v.validate()?;
    if !bounds.contains(theta.as_slice()) {
        return Err(invalid(format!("gradient requested outside the bounds at {:?}", theta.0)));
    }
    let steps: Vec<f64> = (0..bounds.dim()).map(|i| rel_step * bounds.width(i)).collect();
    let n = obs.n();
    if model.horizon() != n {
        return Err(Error::LengthMismatch {
            expected: model.horizon(),
            actual: n,
        });
    }
    let g = fd_gradient(
        |x| {
            let pred = model.predict_flat(x);
            let (sh, sd) = residual_sums_flat(&pred, obs).expect("horizon checked");
            log_likelihood_unchecked(sh, sd, n, v)
        },
        theta.as_slice(),
        &steps,
        bounds,
    );
    if !g.one_sided.is_empty() {
        warn!("one-sided differences near the boundary for coordinates {:?}", g.one_sided);
    }
    Ok(g.gradient)
}

/// Variances set from the design point with the best profile likelihood: the row
/// minimizing `S_h * S_d` against the observations, with `sigma^2 = S / J`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PilotFit {
    pub row: usize,
    pub theta: ParameterVector,
    pub variances: VariancePair,
}

/// Smallest variance the pilot rule returns, guarding against an exact match.
pub const PILOT_VARIANCE_FLOOR: f64 = 1e-6;

pub fn pilot_fit(dataset: &TrainingDataset, obs: &Observations) -> Result<PilotFit> {
    dataset.validate()?;
    if dataset.horizon() != obs.n() {
        return Err(Error::LengthMismatch {
            expected: obs.n(),
            actual: dataset.horizon(),
        });
    }
    let mut best: Option<(usize, f64)> = None;
    for (i, r) in dataset.responses.iter().enumerate() {
        let (sh, sd) = residual_sums_flat(&r.to_flat(), obs)?;
        let score = sh.max(PILOT_VARIANCE_FLOOR).ln() + sd.max(PILOT_VARIANCE_FLOOR).ln();
        if best.map_or(true, |(_, b)| score < b) {
            best = Some((i, score));
        }
    }
    let (row, _) = best.expect("non-empty dataset");
    let (sh, sd) = residual_sums_flat(&dataset.responses[row].to_flat(), obs)?;
    let j = obs.n() as f64;
    Ok(PilotFit {
        row,
        theta: dataset.design[row],
        variances: VariancePair::new((sh / j).max(PILOT_VARIANCE_FLOOR), (sd / j).max(PILOT_VARIANCE_FLOOR))?,
    })
}

/// Cached evaluation of a posterior at one point.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Evaluation {
    /// Log density terms that do not involve the noise variances.
    pub base: f64,
    /// Residual sums when the target has a Gaussian noise model.
    pub sums: Option<(f64, f64)>,
}

/// Gaussian noise model attached to a posterior.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NoiseModel {
    pub n: usize,
    pub prior: VariancePrior,
}

/// Target interface for the Metropolis sampler.
pub trait Posterior: Sync {
    fn dim(&self) -> usize;

    /// `None` outside the support.
    fn evaluate(&self, x: &[f64]) -> Option<Evaluation>;

    /// Present when the target has noise variances refreshed by Gibbs steps.
    fn noise(&self) -> Option<NoiseModel> {
        None
    }

    /// Coordinates stored in chains; identity unless the target samples a
    /// reparametrization.
    fn to_reported(&self, x: &[f64]) -> Vec<f64> {
        x.to_vec()
    }
}

/// Full log density at a cached evaluation. Variance priors are included when
/// `variances` is given and a noise model exists.
pub fn log_density_at(e: &Evaluation, noise: Option<&NoiseModel>, variances: Option<&VariancePair>) -> f64 {
    match (e.sums, noise, variances) {
        (Some((sh, sd)), Some(nm), Some(v)) => {
            e.base + log_likelihood_unchecked(sh, sd, nm.n, v) + nm.prior.log_density(v)
        }
        _ => e.base,
    }
}

/// Target interface for the particle method: a differentiable log density on a box.
pub trait SmoothLogDensity: Sync {
    fn dim(&self) -> usize;

    /// Box that particles are kept inside.
    fn bounds(&self) -> &Bounds;

    fn log_density(&self, x: &[f64]) -> f64;

    fn gradient(&self, x: &[f64]) -> FdGradient;

    /// Gradients at several points, in order.
    fn gradients(&self, xs: &[Vec<f64>]) -> Vec<FdGradient> {
        xs.iter().map(|x| self.gradient(x)).collect()
    }

    fn log_densities(&self, xs: &[Vec<f64>]) -> Vec<f64> {
        xs.iter().map(|x| self.log_density(x)).collect()
    }

    /// Coordinates written to outputs; identity unless the target works in a
    /// reparametrization.
    fn to_reported(&self, x: &[f64]) -> Vec<f64> {
        x.to_vec()
    }
}

/// The surrogate posterior expressed on the unit cube of the parameter box.
///
/// Unit coordinates keep every parameter on the same scale for the samplers. The
/// map is affine, so densities differ from the original-unit ones by a constant.
pub struct GpPosterior<'a> {
    pub model: &'a GpModel,
    pub obs: &'a Observations,
    pub bounds: Bounds,
    pub prior: VariancePrior,
    /// Used by [`SmoothLogDensity`]; the Metropolis path samples its own.
    pub fixed_variances: VariancePair,
    pub fd_step: f64,
    unit: Bounds,
}

impl<'a> GpPosterior<'a> {
    pub fn new(
        model: &'a GpModel,
        obs: &'a Observations,
        bounds: Bounds,
        prior: VariancePrior,
        fixed_variances: VariancePair,
    ) -> Result<Self> {
        bounds.validate()?;
        prior.validate()?;
        fixed_variances.validate()?;
        if model.horizon() != obs.n() {
            return Err(Error::LengthMismatch {
                expected: model.horizon(),
                actual: obs.n(),
            });
        }
        if model.dims() != bounds.dim() {
            return Err(Error::LengthMismatch {
                expected: model.dims(),
                actual: bounds.dim(),
            });
        }
        let unit = Bounds::unit(bounds.dim());
        Ok(Self {
            model,
            obs,
            bounds,
            prior,
            fixed_variances,
            fd_step: DEFAULT_FD_STEP,
            unit,
        })
    }

    pub fn to_original(&self, u: &[f64]) -> Vec<f64> {
        self.bounds.from_unit(u)
    }

    pub fn to_unit(&self, x: &[f64]) -> Vec<f64> {
        self.bounds.to_unit(x)
    }

    /// Residual sums at a unit-cube point.
    pub fn sums_unit(&self, u: &[f64]) -> (f64, f64) {
        let x = self.bounds.from_unit(u);
        let pred = self.model.predict_unit(&self.model.bounds.to_unit(&x));
        residual_sums_flat(&pred, self.obs).expect("horizon checked at construction")
    }

    /// Fixed-variance log densities at unit-cube points stored back to back.
    pub fn log_density_fixed_batch(&self, us: &[f64]) -> Vec<f64> {
        let d = self.bounds.dim();
        let model_units: Vec<f64> = us
            .chunks_exact(d)
            .flat_map(|u| self.model.bounds.to_unit(&self.bounds.from_unit(u)))
            .collect();
        let preds = self.model.predict_unit_batch(&model_units);
        us.chunks_exact(d)
            .zip(preds.chunks_exact(self.model.n_outputs()))
            .map(|(u, pred)| {
                if !self.unit.contains(u) {
                    return f64::NEG_INFINITY;
                }
                let (sh, sd) = residual_sums_flat(pred, self.obs).expect("horizon checked at construction");
                log_likelihood_unchecked(sh, sd, self.obs.n(), &self.fixed_variances)
            })
            .collect()
    }

    /// Fixed-variance log density at a unit-cube point, up to a constant.
    pub fn log_density_fixed(&self, u: &[f64]) -> f64 {
        if !self.unit.contains(u) {
            return f64::NEG_INFINITY;
        }
        let (sh, sd) = self.sums_unit(u);
        log_likelihood_unchecked(sh, sd, self.obs.n(), &self.fixed_variances)
    }
}

impl Posterior for GpPosterior<'_> {
    fn dim(&self) -> usize {
        self.bounds.dim()
    }

    fn evaluate(&self, u: &[f64]) -> Option<Evaluation> {
        if !self.unit.contains(u) {
            return None;
        }
        Some(Evaluation {
            base: 0.0,
            sums: Some(self.sums_unit(u)),
        })
    }

    fn noise(&self) -> Option<NoiseModel> {
        Some(NoiseModel {
            n: self.obs.n(),
            prior: self.prior,
        })
    }

    fn to_reported(&self, u: &[f64]) -> Vec<f64> {
        self.to_original(u)
    }
}

impl SmoothLogDensity for GpPosterior<'_> {
    fn dim(&self) -> usize {
        self.bounds.dim()
    }

    fn bounds(&self) -> &Bounds {
        &self.unit
    }

    fn log_density(&self, u: &[f64]) -> f64 {
        self.log_density_fixed(u)
    }

    fn gradient(&self, u: &[f64]) -> FdGradient {
        let steps = vec![self.fd_step; self.bounds.dim()];
        fd_gradient(|v| self.log_density_fixed(v), u, &steps, &self.unit)
    }

    fn gradients(&self, us: &[Vec<f64>]) -> Vec<FdGradient> {
        let d = self.bounds.dim();
        let steps = vec![self.fd_step; d];
        // Stencil predictions for every point in one batch, in model units.
        let model_steps: Vec<f64> = (0..d)
            .map(|i| self.fd_step * self.bounds.width(i) / self.model.bounds.width(i))
            .collect();
        let zs: Vec<f64> = us
            .iter()
            .flat_map(|u| self.model.bounds.to_unit(&self.bounds.from_unit(u)))
            .collect();
        let preds = self.model.predict_axis_stencil_batch(&zs, &model_steps);
        let out = self.model.n_outputs();
        let width = 1 + 2 * d;
        us.iter()
            .enumerate()
            .map(|(c, u)| {
                let block = &preds[c * width * out..(c + 1) * width * out];
                // fd_gradient only asks for u itself or u moved along one axis.
                let f = |y: &[f64]| {
                    let slot = match (0..d).find(|&i| y[i] != u[i]) {
                        None => 0,
                        Some(i) if y[i] > u[i] => 1 + 2 * i,
                        Some(i) => 2 + 2 * i,
                    };
                    let (sh, sd) = residual_sums_flat(&block[slot * out..(slot + 1) * out], self.obs)
                        .expect("horizon checked at construction");
                    log_likelihood_unchecked(sh, sd, self.obs.n(), &self.fixed_variances)
                };
                fd_gradient(f, u, &steps, &self.unit)
            })
            .collect()
    }

    fn log_densities(&self, us: &[Vec<f64>]) -> Vec<f64> {
        self.log_density_fixed_batch(&us.concat())
    }

    fn to_reported(&self, u: &[f64]) -> Vec<f64> {
        self.to_original(u)
    }
}

/// Test targets with closed-form moments and gradients.
pub mod stubs {
    use super::*;

    /// Independent Gaussian with the given means and standard deviations, on a box
    /// wide enough to hold essentially all of its mass.
    pub struct GaussianStub {
        pub mean: Vec<f64>,
        pub sd: Vec<f64>,
        pub bounds: Bounds,
        pub fd_step: f64,
    }

    impl GaussianStub {
        pub fn new(mean: Vec<f64>, sd: Vec<f64>) -> Self {
            let bounds = Bounds {
                ranges: mean.iter().zip(&sd).map(|(m, s)| (m - 12.0 * s, m + 12.0 * s)).collect(),
            };
            Self {
                mean,
                sd,
                bounds,
                fd_step: DEFAULT_FD_STEP,
            }
        }

        /// Same density restricted to `bounds`.
        pub fn with_bounds(mean: Vec<f64>, sd: Vec<f64>, bounds: Bounds) -> Self {
            Self {
                bounds,
                ..Self::new(mean, sd)
            }
        }

        pub fn standard(dim: usize) -> Self {
            Self::new(vec![0.0; dim], vec![1.0; dim])
        }

        pub fn analytic_gradient(&self, x: &[f64]) -> Vec<f64> {
            x.iter()
                .zip(&self.mean)
                .zip(&self.sd)
                .map(|((x, m), s)| -(x - m) / (s * s))
                .collect()
        }

        fn value(&self, x: &[f64]) -> f64 {
            -0.5 * x
                .iter()
                .zip(&self.mean)
                .zip(&self.sd)
                .map(|((x, m), s)| ((x - m) / s).powi(2))
                .sum::<f64>()
        }
    }

    impl Posterior for GaussianStub {
        fn dim(&self) -> usize {
            self.mean.len()
        }

        fn evaluate(&self, x: &[f64]) -> Option<Evaluation> {
            self.bounds.contains(x).then(|| Evaluation {
                base: self.value(x),
                sums: None,
            })
        }
    }

    impl SmoothLogDensity for GaussianStub {
        fn dim(&self) -> usize {
            self.mean.len()
        }

        fn bounds(&self) -> &Bounds {
            &self.bounds
        }

        fn log_density(&self, x: &[f64]) -> f64 {
            if self.bounds.contains(x) {
                self.value(x)
            } else {
                f64::NEG_INFINITY
            }
        }

        fn gradient(&self, x: &[f64]) -> FdGradient {
            let steps: Vec<f64> = (0..self.mean.len()).map(|i| self.fd_step * self.bounds.width(i)).collect();
            fd_gradient(|v| self.value(v), x, &steps, &self.bounds)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::stubs::GaussianStub;
    use super::*;
    use crate::design::halton_design;
    use approx::assert_relative_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn toy_model(j: usize) -> (TrainingDataset, GpModel) {
        let b = Bounds::default_box();
        let design = halton_design(30, &b).unwrap();
        let responses = design
            .iter()
            .map(|p| {
                let u = b.to_unit(p.as_slice());
                let h: Vec<f64> = (0..j).map(|d| 50.0 + 40.0 * u[0] * (d as f64 / 3.0).sin().abs() + 5.0 * u[2]).collect();
                let dd: Vec<f64> = (0..j).map(|d| 10.0 + 8.0 * u[1] + u[3] * d as f64 * 0.1).collect();
                DailySeries::new(h, dd).unwrap()
            })
            .collect();
        let ds = TrainingDataset::new(design, responses, 1, b).unwrap();
        let m = GpModel::fit(&ds, 0.6, 0.01).unwrap();
        (ds, m)
    }

    #[test]
    fn synthetic_observations() {
        let abm = crate::abm::AbmConfig {
            population: 1000,
            places: 50,
            horizon_days: 20,
            ..Default::default()
        };
        let truth = ParameterVector::new(0.06, 40.0, 0.95, 0.45);
        let mean = crate::abm::simulate_mean(&truth, &abm, 2).unwrap();
        let clean = Observations::synthetic(&truth, &abm, 2, [0.0, 0.0], 9).unwrap();
        assert_eq!(clean.series, mean);
        let noisy = Observations::synthetic(&truth, &abm, 2, [3.0, 0.0], 9).unwrap();
        assert_eq!(noisy.series.deaths, mean.deaths);
        assert_ne!(noisy.series.hospitalizations, mean.hospitalizations);
        assert!(noisy.series.hospitalizations.iter().all(|&h| h >= 0.0));
        assert_eq!(noisy, Observations::synthetic(&truth, &abm, 2, [3.0, 0.0], 9).unwrap());
        assert!(Observations::synthetic(&truth, &abm, 2, [-1.0, 0.0], 9).is_err());
        assert!(Observations::synthetic(&truth, &abm, 2, [f64::NAN, 0.0], 9).is_err());
    }

    fn obs_from(pred: DailySeries) -> Observations {
        let clip = |v: Vec<f64>| v.into_iter().map(|x| x.max(0.0)).collect();
        Observations::new(DailySeries::new(clip(pred.hospitalizations), clip(pred.deaths)).unwrap()).unwrap()
    }

    #[test]
    fn residual_sums_cases() {
        let (_, m) = toy_model(95);
        let theta = ParameterVector::new(0.05, 40.0, 0.95, 0.45);
        let pred = m.predict(&theta);
        let obs = obs_from(pred.clone());
        assert_eq!(residual_sums(&theta, &obs, &m).unwrap(), (0.0, 0.0));

        let shifted = Observations::new(DailySeries::new(
            pred.hospitalizations.iter().map(|v| v + 1.0).collect(),
            pred.deaths.clone(),
        ).unwrap())
        .unwrap();
        let (sh, sd) = residual_sums(&theta, &shifted, &m).unwrap();
        assert_relative_eq!(sh, 95.0, epsilon = 1e-9);
        assert_eq!(sd, 0.0);

        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let noisy = Observations::new(DailySeries::new(
            (0..95).map(|_| rng.gen_range(0.0..100.0)).collect(),
            (0..95).map(|_| rng.gen_range(0.0..20.0)).collect(),
        ).unwrap())
        .unwrap();
        let (sh, sd) = residual_sums(&theta, &noisy, &m).unwrap();
        let mut bh = 0.0;
        let mut bd = 0.0;
        for d in 0..95 {
            bh += (noisy.series.hospitalizations[d] - pred.hospitalizations[d]).powi(2);
            bd += (noisy.series.deaths[d] - pred.deaths[d]).powi(2);
        }
        assert_relative_eq!(sh, bh, max_relative = 1e-12);
        assert_relative_eq!(sd, bd, max_relative = 1e-12);

        let short = Observations::new(DailySeries::zeros(10)).unwrap();
        assert!(residual_sums(&theta, &short, &m).is_err());
    }

    #[test]
    fn likelihood_cases() {
        let s = 1.0 / (2.0 * std::f64::consts::PI).sqrt();
        let v = VariancePair::new(s * s, s * s).unwrap();
        assert_relative_eq!(log_likelihood_from_sums(0.0, 0.0, 95, &v).unwrap(), 0.0, epsilon = 1e-12);

        let v = VariancePair::new(4.0, 9.0).unwrap();
        let n = 95;
        let base = -(n as f64) * (2.0 * std::f64::consts::PI * 2.0 * 3.0).ln();
        assert_relative_eq!(log_likelihood_from_sums(8.0, 0.0, n, &v).unwrap(), base - 1.0, epsilon = 1e-10);

        // Direct form: product of 2n Gaussian densities.
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..20 {
            let n = rng.gen_range(1..50);
            let rh: Vec<f64> = (0..n).map(|_| rng.gen_range(-5.0..5.0)).collect();
            let rd: Vec<f64> = (0..n).map(|_| rng.gen_range(-5.0..5.0)).collect();
            let v = VariancePair::new(rng.gen_range(0.1..10.0), rng.gen_range(0.1..10.0)).unwrap();
            let dens = |r: f64, s2: f64| (-(r * r) / (2.0 * s2)).exp() / (2.0 * std::f64::consts::PI * s2).sqrt();
            let direct: f64 = rh.iter().map(|&r| dens(r, v.hospitalizations).ln()).sum::<f64>()
                + rd.iter().map(|&r| dens(r, v.deaths).ln()).sum::<f64>();
            let sh = rh.iter().map(|r| r * r).sum();
            let sd = rd.iter().map(|r| r * r).sum();
            assert_relative_eq!(log_likelihood_from_sums(sh, sd, n, &v).unwrap(), direct, max_relative = 1e-10);
        }
        assert!(VariancePair::new(0.0, 1.0).is_err());
        assert!(log_likelihood_from_sums(0.0, 0.0, 3, &VariancePair { hospitalizations: -1.0, deaths: 1.0 }).is_err());
    }

    #[test]
    fn posterior_terms() {
        let (_, m) = toy_model(20);
        let b = Bounds::default_box();
        let prior = VariancePrior::default();
        let v = VariancePair::new(3.0, 0.5).unwrap();
        let theta = ParameterVector::new(0.05, 40.0, 0.95, 0.45);
        let obs = obs_from(m.predict(&ParameterVector::new(0.06, 50.0, 0.97, 0.42)));
        let outside = ParameterVector::new(0.1, 40.0, 0.95, 0.45);
        assert_eq!(log_posterior(&outside, &v, &obs, &m, &b, &prior, false).unwrap(), f64::NEG_INFINITY);

        // Fixed variances: likelihood plus the same constant everywhere inside.
        let other = ParameterVector::new(0.065, 33.0, 0.94, 0.49);
        let c1 = log_posterior(&theta, &v, &obs, &m, &b, &prior, true).unwrap() - log_likelihood(&theta, &obs, &v, &m).unwrap();
        let c2 = log_posterior(&other, &v, &obs, &m, &b, &prior, true).unwrap() - log_likelihood(&other, &obs, &v, &m).unwrap();
        assert_relative_eq!(c1, c2, epsilon = 1e-9);

        // Term by term.
        let ll = log_likelihood(&theta, &obs, &v, &m).unwrap();
        let lp = -(0.023f64.ln() + 28f64.ln() + 0.042f64.ln() + 0.085f64.ln());
        let ig = |s2: f64, z: f64| {
            let (a, bb) = (0.5, z / 2.0);
            a * bb.ln() - ln_gamma(a) - (a + 1.0) * s2.ln() - bb / s2
        };
        let total = ll + lp + ig(3.0, 1.0) + ig(0.5, 1.0);
        assert_relative_eq!(log_posterior(&theta, &v, &obs, &m, &b, &prior, false).unwrap(), total, max_relative = 1e-10);
    }

    #[test]
    fn posterior_depends_on_obs_only_through_residuals() {
        let n = 10;
        let v = VariancePair::new(2.0, 3.0).unwrap();
        let pred: Vec<f64> = (0..2 * n).map(|i| 5.0 + i as f64).collect();
        let obs_vals: Vec<f64> = (0..2 * n).map(|i| 6.0 + (i as f64).sqrt()).collect();
        let obs = Observations::new(DailySeries::from_flat(&obs_vals).unwrap()).unwrap();
        let shifted_obs = Observations::new(DailySeries::from_flat(&obs_vals.iter().map(|o| o + 7.0).collect::<Vec<_>>()).unwrap()).unwrap();
        let shifted_pred: Vec<f64> = pred.iter().map(|p| p + 7.0).collect();
        let (a, b) = residual_sums_flat(&pred, &obs).unwrap();
        let (c, d) = residual_sums_flat(&shifted_pred, &shifted_obs).unwrap();
        assert_relative_eq!(
            log_likelihood_from_sums(a, b, n, &v).unwrap(),
            log_likelihood_from_sums(c, d, n, &v).unwrap(),
            max_relative = 1e-12
        );
        assert!(log_likelihood_from_sums(a * 0.9, b, n, &v).unwrap() > log_likelihood_from_sums(a, b, n, &v).unwrap());
    }

    #[test]
    fn fd_gradient_on_quadratic() {
        let c = [0.3, -1.0, 2.0, 0.5];
        let f = |x: &[f64]| -x.iter().zip(&c).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
        let b = Bounds::new(vec![(-10.0, 10.0); 4]).unwrap();
        let steps = vec![1e-4 * 20.0; 4];
        let x = [1.0, 2.0, -3.0, 0.0];
        let g = fd_gradient(f, &x, &steps, &b);
        assert!(g.one_sided.is_empty());
        for i in 0..4 {
            assert!((g.gradient[i] + 2.0 * (x[i] - c[i])).abs() < 1e-6);
        }
        let g0 = fd_gradient(f, &c, &steps, &b);
        assert!(g0.gradient.iter().all(|v| v.abs() < 1e-8));

        let edge = [10.0, 2.0, -10.0, 0.0];
        let ge = fd_gradient(f, &edge, &steps, &b);
        assert_eq!(ge.one_sided, vec![0, 2]);
        assert!((ge.gradient[0] + 2.0 * (10.0 - c[0])).abs() < 1e-2);
    }

    #[test]
    fn fd_matches_analytic_on_gaussian_stub() {
        let stub = GaussianStub::new(vec![0.2, -0.4, 1.0, 0.0], vec![0.5, 1.5, 0.8, 1.0]);
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..100 {
            let x: Vec<f64> = stub.mean.iter().zip(&stub.sd).map(|(m, s)| m + s * rng.gen_range(-3.0..3.0)).collect();
            let g = SmoothLogDensity::gradient(&stub, &x);
            for (a, b) in g.gradient.iter().zip(stub.analytic_gradient(&x)) {
                assert!((a - b).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn gp_gradient_agrees_with_refined_step() {
        let (_, m) = toy_model(20);
        let b = Bounds::default_box();
        let v = VariancePair::new(20.0, 4.0).unwrap();
        let obs = obs_from(m.predict(&ParameterVector::new(0.06, 50.0, 0.97, 0.42)));
        let theta = ParameterVector::new(0.0512, 41.3, 0.9523, 0.4471);
        let g = grad_log_posterior(&theta, &v, &obs, &m, &b, DEFAULT_FD_STEP).unwrap();
        let fine = grad_log_posterior(&theta, &v, &obs, &m, &b, DEFAULT_FD_STEP / 10.0).unwrap();
        for (a, f) in g.iter().zip(&fine) {
            assert!((a - f).abs() <= 0.01 * f.abs(), "{g:?} vs {fine:?}");
        }
    }

    #[test]
    fn variance_conditional_moments() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (s, n, z) = (40.0, 20, 1.0);
        let draws: Vec<f64> = (0..100_000)
            .map(|_| 1.0 / sample_variance_conditional(s, n, z, &mut rng).unwrap())
            .collect();
        let mean = draws.iter().sum::<f64>() / draws.len() as f64;
        let expected = (1.0 + n as f64) / (z + s);
        assert!((mean / expected - 1.0).abs() < 0.02);

        // shape 3, rate 2: n = 5, zeta2 + S = 4.
        let draws: Vec<f64> = (0..100_000)
            .map(|_| 1.0 / sample_variance_conditional(3.0, 5, 1.0, &mut rng).unwrap())
            .collect();
        let mean = draws.iter().sum::<f64>() / draws.len() as f64;
        let var = draws.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (draws.len() - 1) as f64;
        assert!((var / 0.75 - 1.0).abs() < 0.05, "{var}");

        assert!(sample_variance_conditional(0.0, 5, 0.0, &mut rng).is_err());
        assert!(sample_variance_conditional(-1.0, 5, 1.0, &mut rng).is_err());
    }

    #[test]
    fn pilot_picks_best_profile_row() {
        let (ds, _) = toy_model(20);
        let target = ds.responses[7].clone();
        let obs = Observations::new(DailySeries::new(
            target.hospitalizations.iter().map(|v| v + 0.5).collect(),
            target.deaths.iter().map(|v| v + 0.25).collect(),
        ).unwrap())
        .unwrap();
        let p = pilot_fit(&ds, &obs).unwrap();
        assert_eq!(p.row, 7);
        assert_relative_eq!(p.variances.hospitalizations, 0.25, epsilon = 1e-9);
        assert_relative_eq!(p.variances.deaths, 0.0625, epsilon = 1e-9);
    }

    #[test]
    fn unit_adapter_matches_original_units() {
        let (_, m) = toy_model(20);
        let b = Bounds::default_box();
        let obs = obs_from(m.predict(&ParameterVector::new(0.06, 50.0, 0.97, 0.42)));
        let v = VariancePair::new(20.0, 4.0).unwrap();
        let post = GpPosterior::new(&m, &obs, b.clone(), VariancePrior::default(), v).unwrap();
        let theta = ParameterVector::new(0.0512, 41.3, 0.9523, 0.4471);
        let u = post.to_unit(theta.as_slice());
        assert_relative_eq!(
            post.log_density_fixed(&u),
            log_likelihood(&theta, &obs, &v, &m).unwrap(),
            max_relative = 1e-12
        );
        let gu = SmoothLogDensity::gradient(&post, &u).gradient;
        let gx = grad_log_posterior(&theta, &v, &obs, &m, &b, DEFAULT_FD_STEP).unwrap();
        for i in 0..4 {
            assert_relative_eq!(gu[i], gx[i] * b.width(i), max_relative = 1e-6, epsilon = 1e-9);
        }
        assert_eq!(post.log_density_fixed(&[1.1, 0.5, 0.5, 0.5]), f64::NEG_INFINITY);
        assert!(post.evaluate(&[-0.1, 0.5, 0.5, 0.5]).is_none());
    }

    #[test]
    fn batched_gradients_match_pointwise() {
        let (_, m) = toy_model(20);
        let obs = obs_from(m.predict(&ParameterVector::new(0.06, 50.0, 0.97, 0.42)));
        let v = VariancePair::new(20.0, 4.0).unwrap();
        let post = GpPosterior::new(&m, &obs, Bounds::default_box(), VariancePrior::default(), v).unwrap();
        // Interior point plus corner and edge points that need one-sided stencils.
        let us = vec![vec![0.3, 0.6, 0.2, 0.8], vec![0.0, 1.0, 0.5, 0.5], vec![0.99999, 0.4, 0.0, 1.0]];
        let batch = post.gradients(&us);
        for (u, g) in us.iter().zip(&batch) {
            let single = SmoothLogDensity::gradient(&post, u);
            assert_eq!(g.one_sided, single.one_sided);
            for (a, b) in g.gradient.iter().zip(&single.gradient) {
                assert_relative_eq!(a, b, max_relative = 1e-6, epsilon = 1e-6);
            }
        }
        for (u, l) in us.iter().zip(post.log_densities(&us)) {
            assert_relative_eq!(l, post.log_density_fixed(u), max_relative = 1e-12);
        }
        assert!(!batch[1].one_sided.is_empty());
    }
}
