//! Scores for comparing calibrations: CRPS, rank histograms, PPT and the
//! two-sample Cramér-von Mises statistic, plus the predictive ensembles they act on.

use std::io::Write;
use std::path::Path;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF};

use crate::abm::{simulate_mean_with, AbmConfig, Population};
use crate::error::{invalid, Error, Result};
use crate::gp::GpModel;
use crate::params::ParameterVector;
use crate::posterior::{Observations, VariancePair};
use crate::series::DailySeries;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    /// Surrogate mean plus observation noise.
    Predictive,
    /// Seed-averaged ABM runs, no noise.
    Pushforward,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictiveEnsemble {
    pub members: Vec<DailySeries>,
    pub provenance: Provenance,
    /// Label of the posterior the members came from, e.g. `dram` or `svi`.
    pub source: String,
}

impl PredictiveEnsemble {
    pub fn new(members: Vec<DailySeries>, provenance: Provenance, source: impl Into<String>) -> Result<Self> {
        let e = Self {
            members,
            provenance,
            source: source.into(),
        };
        e.validate()?;
        Ok(e)
    }

    pub fn validate(&self) -> Result<()> {
        if self.members.len() < 2 {
            return Err(invalid(format!("an ensemble needs at least 2 members, got {}", self.members.len())));
        }
        let j = self.members[0].horizon();
        for m in &self.members {
            if m.horizon() != j {
                return Err(Error::LengthMismatch {
                    expected: j,
                    actual: m.horizon(),
                });
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn horizon(&self) -> usize {
        self.members[0].horizon()
    }

    /// Member values on one day; `output` 0 is hospitalizations, 1 deaths.
    pub fn values(&self, output: usize, day: usize) -> Vec<f64> {
        self.members.iter().map(|m| series_of(m, output)[day]).collect()
    }

    /// Element-wise mean, flattened as `[h.., d..]`.
    pub fn mean_flat(&self) -> Vec<f64> {
        let mut acc = vec![0.0; 2 * self.horizon()];
        for m in &self.members {
            for (a, v) in acc.iter_mut().zip(m.to_flat()) {
                *a += v;
            }
        }
        let e = self.len() as f64;
        acc.iter_mut().for_each(|a| *a /= e);
        acc
    }

    /// Member-major CSV: `member,day,hospitalizations,deaths`.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut csv = csv::Writer::from_writer(w);
        csv.write_record(["member", "day", "hospitalizations", "deaths"])?;
        for (e, m) in self.members.iter().enumerate() {
            for d in 0..m.horizon() {
                csv.write_record([
                    e.to_string(),
                    d.to_string(),
                    format!("{:?}", m.hospitalizations[d]),
                    format!("{:?}", m.deaths[d]),
                ])?;
            }
        }
        csv.flush()?;
        Ok(())
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        crate::io::write_atomic(path, |w| self.write_csv(w))
    }
}

fn series_of(s: &DailySeries, output: usize) -> &[f64] {
    if output == 0 {
        &s.hospitalizations
    } else {
        &s.deaths
    }
}

fn obs_horizon_check(e: &PredictiveEnsemble, obs: &Observations) -> Result<()> {
    e.validate()?;
    if e.horizon() != obs.n() {
        return Err(Error::LengthMismatch {
            expected: obs.n(),
            actual: e.horizon(),
        });
    }
    Ok(())
}

/// Indices of the `e` draws: without replacement when enough samples exist.
fn pick_draws(available: usize, e: usize, rng: &mut ChaCha8Rng) -> Result<Vec<usize>> {
    if available == 0 {
        return Err(invalid("no posterior samples to draw from"));
    }
    if e < 2 {
        return Err(invalid("an ensemble needs at least 2 members"));
    }
    Ok(if e <= available {
        let mut idx = index::sample(rng, available, e).into_vec();
        idx.sort_unstable();
        idx
    } else {
        (0..e).map(|_| rng.gen_range(0..available)).collect()
    })
}

/// Surrogate predictions at `e` posterior draws plus Gaussian observation noise,
/// clipped at zero.
///
/// `variances` holds one pair shared by every draw or one pair per sample.
pub fn posterior_predictive(
    samples: &[ParameterVector],
    variances: &[VariancePair],
    model: &GpModel,
    e: usize,
    source: &str,
    seed: u64,
) -> Result<PredictiveEnsemble> {
    if variances.len() != 1 && variances.len() != samples.len() {
        return Err(invalid(format!(
            "need 1 or {} variance pairs, got {}",
            samples.len(),
            variances.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let draws = pick_draws(samples.len(), e, &mut rng)?;
    let mut members = Vec::with_capacity(e);
    for i in draws {
        let v = variances[if variances.len() == 1 { 0 } else { i }];
        let mean = model.predict(&samples[i]);
        let nh = Normal::new(0.0, v.hospitalizations.sqrt()).map_err(|err| invalid(err.to_string()))?;
        let nd = Normal::new(0.0, v.deaths.sqrt()).map_err(|err| invalid(err.to_string()))?;
        let h = mean.hospitalizations.iter().map(|m| (m + nh.sample(&mut rng)).max(0.0)).collect();
        let d = mean.deaths.iter().map(|m| (m + nd.sample(&mut rng)).max(0.0)).collect();
        members.push(DailySeries::new(h, d)?);
    }
    PredictiveEnsemble::new(members, Provenance::Predictive, source)
}

/// Seed-averaged ABM runs at `e` posterior draws.
pub fn pushforward(
    samples: &[ParameterVector],
    config: &AbmConfig,
    n_seeds: usize,
    e: usize,
    source: &str,
    seed: u64,
) -> Result<PredictiveEnsemble> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let draws = pick_draws(samples.len(), e, &mut rng)?;
    let pop = Population::build(config)?;
    let members = draws
        .par_iter()
        .map(|&i| simulate_mean_with(&pop, &samples[i], config, n_seeds))
        .collect::<Result<Vec<_>>>()?;
    PredictiveEnsemble::new(members, Provenance::Pushforward, source)
}

/// CRPS of an empirical ensemble: `mean|X - y| - 0.5 mean|X - X'|`.
pub fn crps(members: &[f64], obs: f64) -> Result<f64> {
    if members.is_empty() {
        return Err(invalid("CRPS needs at least one member"));
    }
    let n = members.len() as f64;
    let term1 = members.iter().map(|x| (x - obs).abs()).sum::<f64>() / n;
    // Sum over ordered pairs of |x_i - x_j| from the sorted sample.
    let mut s = members.to_vec();
    s.sort_by(f64::total_cmp);
    let pair_sum: f64 = s
        .iter()
        .enumerate()
        .map(|(i, x)| x * (2.0 * i as f64 - (s.len() - 1) as f64))
        .sum::<f64>()
        * 2.0;
    Ok((term1 - 0.5 * pair_sum / (n * n)).max(0.0))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CrpsSeries {
    pub hospitalizations: Vec<f64>,
    pub deaths: Vec<f64>,
    pub mean_hospitalizations: f64,
    pub mean_deaths: f64,
    /// Mean over both outputs and all days.
    pub mean: f64,
}

pub fn crps_series(e: &PredictiveEnsemble, obs: &Observations) -> Result<CrpsSeries> {
    obs_horizon_check(e, obs)?;
    let per = |output: usize| -> Result<Vec<f64>> {
        let o = series_of(&obs.series, output);
        (0..e.horizon()).map(|d| crps(&e.values(output, d), o[d])).collect()
    };
    let h = per(0)?;
    let d = per(1)?;
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    Ok(CrpsSeries {
        mean_hospitalizations: mean(&h),
        mean_deaths: mean(&d),
        mean: (h.iter().sum::<f64>() + d.iter().sum::<f64>()) / (h.len() + d.len()) as f64,
        hospitalizations: h,
        deaths: d,
    })
}

/// Rank of `obs` among `members`, 0 to `members.len()`, with ties broken uniformly.
pub fn rank_of<R: Rng + ?Sized>(members: &[f64], obs: f64, rng: &mut R) -> usize {
    let below = members.iter().filter(|&&m| m < obs).count();
    let ties = members.iter().filter(|&&m| m == obs).count();
    below + if ties > 0 { rng.gen_range(0..=ties) } else { 0 }
}

/// Chi-square goodness of fit of bin counts against the uniform distribution.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct UniformityTest {
    pub statistic: f64,
    pub degrees_of_freedom: usize,
    pub p_value: f64,
}

pub fn chi_square_uniformity(counts: &[usize]) -> Result<UniformityTest> {
    if counts.len() < 2 {
        return Err(invalid("uniformity test needs at least 2 bins"));
    }
    let total: usize = counts.iter().sum();
    if total == 0 {
        return Err(invalid("uniformity test needs a non-empty histogram"));
    }
    let expected = total as f64 / counts.len() as f64;
    let statistic = counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
    let df = counts.len() - 1;
    let dist = ChiSquared::new(df as f64).map_err(|e| invalid(e.to_string()))?;
    Ok(UniformityTest {
        statistic,
        degrees_of_freedom: df,
        p_value: dist.sf(statistic),
    })
}

/// Sample skewness of the rank distribution a histogram describes; zero for a
/// single occupied bin.
pub fn rank_skewness(counts: &[usize]) -> f64 {
    let n: f64 = counts.iter().sum::<usize>() as f64;
    if n == 0.0 {
        return 0.0;
    }
    let mean = counts.iter().enumerate().map(|(r, &c)| r as f64 * c as f64).sum::<f64>() / n;
    let moment = |p: i32| counts.iter().enumerate().map(|(r, &c)| (r as f64 - mean).powi(p) * c as f64).sum::<f64>() / n;
    let m2 = moment(2);
    if m2 == 0.0 {
        return 0.0;
    }
    moment(3) / m2.powf(1.5)
}

/// Mean rank minus the centre rank, as a fraction of the `E` rank steps; in
/// `[-0.5, 0.5]`.
pub fn mean_rank_offset(counts: &[usize]) -> f64 {
    let n: f64 = counts.iter().sum::<usize>() as f64;
    if n == 0.0 || counts.len() < 2 {
        return 0.0;
    }
    let mean = counts.iter().enumerate().map(|(r, &c)| r as f64 * c as f64).sum::<f64>() / n;
    mean / (counts.len() - 1) as f64 - 0.5
}

/// Which way a rank histogram leans.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RankSkew {
    /// Observations rank high: the ensemble underestimates them.
    Underestimates,
    /// Observations rank low: the ensemble overestimates them.
    Overestimates,
    Centered,
}

impl RankSkew {
    /// Offsets beyond 0.05 either way count as a lean.
    pub fn from_offset(offset: f64) -> Self {
        if offset > 0.05 {
            RankSkew::Underestimates
        } else if offset < -0.05 {
            RankSkew::Overestimates
        } else {
            RankSkew::Centered
        }
    }
}

/// Verification rank histogram with `E + 1` bins.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankHistogram {
    pub hospitalizations: Vec<usize>,
    pub deaths: Vec<usize>,
    pub pooled: Vec<usize>,
    pub tie_seed: u64,
    pub uniformity: UniformityTest,
    pub skewness: f64,
    pub mean_rank_offset: f64,
    pub skew: RankSkew,
}

pub fn vrh(e: &PredictiveEnsemble, obs: &Observations, tie_seed: u64) -> Result<RankHistogram> {
    obs_horizon_check(e, obs)?;
    let mut rng = ChaCha8Rng::seed_from_u64(tie_seed);
    let bins = e.len() + 1;
    let mut per = [vec![0usize; bins], vec![0usize; bins]];
    for (output, counts) in per.iter_mut().enumerate() {
        let o = series_of(&obs.series, output);
        for d in 0..e.horizon() {
            counts[rank_of(&e.values(output, d), o[d], &mut rng)] += 1;
        }
    }
    let [h, d] = per;
    let pooled: Vec<usize> = h.iter().zip(&d).map(|(a, b)| a + b).collect();
    let offset = mean_rank_offset(&pooled);
    Ok(RankHistogram {
        uniformity: chi_square_uniformity(&pooled)?,
        skewness: rank_skewness(&pooled),
        mean_rank_offset: offset,
        skew: RankSkew::from_offset(offset),
        hospitalizations: h,
        deaths: d,
        pooled,
        tie_seed,
    })
}

/// L2 norm of the difference of ensemble means over all days and both outputs.
pub fn ppt(a: &PredictiveEnsemble, b: &PredictiveEnsemble) -> Result<f64> {
    a.validate()?;
    b.validate()?;
    if a.horizon() != b.horizon() {
        return Err(Error::LengthMismatch {
            expected: a.horizon(),
            actual: b.horizon(),
        });
    }
    Ok(a.mean_flat()
        .iter()
        .zip(b.mean_flat())
        .map(|(x, y)| (x - y).powi(2))
        .sum::<f64>()
        .sqrt())
}

/// Average ranks (1-based) of `values`, ties sharing the mean of their positions.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&i, &j| values[i].total_cmp(&values[j]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Two-sample Cramér-von Mises statistic
/// `T = U / (N M (N + M)) - (4 M N - 1) / (6 (M + N))` with
/// `U = N sum (r_i - i)^2 + M sum (s_j - j)^2` over pooled average ranks.
pub fn cramer_von_mises(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(invalid("Cramér-von Mises needs two non-empty samples"));
    }
    let (n, m) = (a.len(), b.len());
    let pooled: Vec<f64> = a.iter().chain(b).copied().collect();
    let ranks = average_ranks(&pooled);
    let mut ra = ranks[..n].to_vec();
    let mut rb = ranks[n..].to_vec();
    ra.sort_by(f64::total_cmp);
    rb.sort_by(f64::total_cmp);
    let sq = |r: &[f64]| r.iter().enumerate().map(|(i, v)| (v - (i + 1) as f64).powi(2)).sum::<f64>();
    let (nf, mf) = (n as f64, m as f64);
    let u = nf * sq(&ra) + mf * sq(&rb);
    Ok(u / (nf * mf * (nf + mf)) - (4.0 * mf * nf - 1.0) / (6.0 * (mf + nf)))
}

/// Per-day lower, median and upper quantiles of an ensemble.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Bands {
    pub lower_quantile: f64,
    pub upper_quantile: f64,
    pub median: DailySeries,
    pub lower: DailySeries,
    pub upper: DailySeries,
}

pub fn bands(e: &PredictiveEnsemble, lower_quantile: f64, upper_quantile: f64) -> Result<Bands> {
    e.validate()?;
    if !(0.0..=1.0).contains(&lower_quantile) || !(lower_quantile..=1.0).contains(&upper_quantile) {
        return Err(invalid("band quantiles must satisfy 0 <= lower <= upper <= 1"));
    }
    let j = e.horizon();
    let q = |p: f64| -> DailySeries {
        let col = |o: usize| (0..j).map(|d| crate::dram::sample_quantile(&e.values(o, d), p)).collect();
        DailySeries {
            hospitalizations: col(0),
            deaths: col(1),
        }
    };
    Ok(Bands {
        lower_quantile,
        upper_quantile,
        median: q(0.5),
        lower: q(lower_quantile),
        upper: q(upper_quantile),
    })
}

impl Bands {
    /// Fraction of observed day values, both outputs, inside `[lower, upper]`.
    pub fn coverage(&self, obs: &Observations) -> Result<f64> {
        if obs.n() != self.median.horizon() {
            return Err(Error::LengthMismatch {
                expected: self.median.horizon(),
                actual: obs.n(),
            });
        }
        let lo = self.lower.to_flat();
        let hi = self.upper.to_flat();
        let o = obs.series.to_flat();
        let inside = o.iter().zip(lo.iter().zip(&hi)).filter(|(v, (l, h))| *l <= *v && *v <= *h).count();
        Ok(inside as f64 / o.len() as f64)
    }

    /// `day,output,lower,median,upper` rows.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut csv = csv::Writer::from_writer(w);
        csv.write_record(["day", "output", "lower", "median", "upper"])?;
        for (name, o) in [("hospitalizations", 0), ("deaths", 1)] {
            let (l, m, u) = (series_of(&self.lower, o), series_of(&self.median, o), series_of(&self.upper, o));
            for d in 0..m.len() {
                csv.write_record([
                    d.to_string(),
                    name.to_string(),
                    format!("{:?}", l[d]),
                    format!("{:?}", m[d]),
                    format!("{:?}", u[d]),
                ])?;
            }
        }
        csv.flush()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::Rng;
    use rand_distr::StandardNormal;

    /// Trapezoid quadrature of the squared CDF difference.
    fn crps_quadrature(members: &[f64], obs: f64) -> f64 {
        let lo = members.iter().copied().fold(obs, f64::min);
        let hi = members.iter().copied().fold(obs, f64::max);
        if hi == lo {
            return 0.0;
        }
        let steps = 200_000;
        let dx = (hi - lo) / steps as f64;
        let n = members.len() as f64;
        let g = |x: f64| {
            let f = members.iter().filter(|&&m| m <= x).count() as f64 / n;
            let h = if x >= obs { 1.0 } else { 0.0 };
            (f - h).powi(2)
        };
        // Midpoint rule: the integrand is a step function.
        (0..steps).map(|i| g(lo + (i as f64 + 0.5) * dx)).sum::<f64>() * dx
    }

    fn ensemble(members: Vec<DailySeries>) -> PredictiveEnsemble {
        PredictiveEnsemble::new(members, Provenance::Predictive, "test").unwrap()
    }

    #[test]
    fn crps_trivial_cases() {
        assert_eq!(crps(&[3.0, 3.0, 3.0], 3.0).unwrap(), 0.0);
        assert_relative_eq!(crps(&[7.5], 2.0).unwrap(), 5.5);
        assert!(crps(&[], 1.0).is_err());
    }

    #[test]
    fn crps_matches_quadrature() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for _ in 0..50 {
            let m = rng.gen_range(1..12);
            let members: Vec<f64> = (0..m).map(|_| rng.gen_range(-5.0..5.0)).collect();
            let obs = rng.gen_range(-6.0..6.0);
            let exact = crps(&members, obs).unwrap();
            let quad = crps_quadrature(&members, obs);
            assert!((exact - quad).abs() <= 1e-4 * quad.max(1e-3), "{exact} vs {quad}");
        }
    }

    proptest! {
        #[test]
        fn crps_nonnegative_and_zero_only_at_obs(members in prop::collection::vec(-100.0f64..100.0, 1..20), obs in -100.0f64..100.0) {
            let c = crps(&members, obs).unwrap();
            prop_assert!(c >= 0.0);
            if members.iter().any(|&m| m != obs) {
                prop_assert!(c > 0.0);
            }
        }

        #[test]
        fn cvm_invariant_under_monotone_maps(a in prop::collection::vec(-3.0f64..3.0, 1..30), b in prop::collection::vec(-3.0f64..3.0, 1..30)) {
            let t = cramer_von_mises(&a, &b).unwrap();
            let f = |v: &Vec<f64>| v.iter().map(|x| (2.0 * x).exp() + 1.0).collect::<Vec<_>>();
            let t2 = cramer_von_mises(&f(&a), &f(&b)).unwrap();
            prop_assert!((t - t2).abs() < 1e-12);
        }
    }

    #[test]
    fn crps_series_cases() {
        let obs = Observations::new(DailySeries::new(vec![1.0, 2.0, 3.0], vec![0.0, 1.0, 0.0]).unwrap()).unwrap();
        let e = ensemble(vec![obs.series.clone(), obs.series.clone()]);
        let c = crps_series(&e, &obs).unwrap();
        assert!(c.hospitalizations.iter().chain(&c.deaths).all(|v| *v == 0.0));

        let a = DailySeries::new(vec![2.0, 2.0, 5.0], vec![1.0, 1.0, 1.0]).unwrap();
        let b = DailySeries::new(vec![0.0, 4.0, 5.0], vec![0.0, 3.0, 2.0]).unwrap();
        let e = ensemble(vec![a, b]);
        let c = crps_series(&e, &obs).unwrap();
        for d in 0..3 {
            assert_relative_eq!(c.hospitalizations[d], crps(&e.values(0, d), obs.series.hospitalizations[d]).unwrap());
            assert_relative_eq!(c.deaths[d], crps(&e.values(1, d), obs.series.deaths[d]).unwrap());
        }
        let total: f64 = c.hospitalizations.iter().chain(&c.deaths).sum();
        assert_relative_eq!(c.mean, total / 6.0);

        let short = Observations::new(DailySeries::new(vec![1.0], vec![1.0]).unwrap()).unwrap();
        assert!(crps_series(&e, &short).is_err());
    }

    #[test]
    fn rank_histogram_extremes() {
        let obs = Observations::new(DailySeries::new(vec![0.0; 4], vec![0.0; 4]).unwrap()).unwrap();
        let e = ensemble(vec![
            DailySeries::new(vec![1.0; 4], vec![1.0; 4]).unwrap(),
            DailySeries::new(vec![2.0; 4], vec![3.0; 4]).unwrap(),
        ]);
        let r = vrh(&e, &obs, 0).unwrap();
        assert_eq!(r.pooled, vec![8, 0, 0]);
        assert_eq!(r.skew, RankSkew::Overestimates);
        assert_relative_eq!(r.mean_rank_offset, -0.5);

        let mid = Observations::new(DailySeries::new(vec![1.5; 4], vec![2.0; 4]).unwrap()).unwrap();
        assert_eq!(vrh(&e, &mid, 0).unwrap().pooled, vec![0, 8, 0]);
    }

    #[test]
    fn self_consistent_ranks_are_uniform() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let e_size = 9;
        let days = 400;
        let mut draw = || -> Vec<f64> { (0..days).map(|_| 50.0 + 5.0 * rng.sample::<f64, _>(StandardNormal)).collect() };
        let members: Vec<DailySeries> = (0..e_size).map(|_| DailySeries::new(draw(), draw()).unwrap()).collect();
        let obs = Observations::new(DailySeries::new(draw(), draw()).unwrap()).unwrap();
        let r = vrh(&ensemble(members), &obs, 1).unwrap();
        assert_eq!(r.pooled.len(), e_size + 1);
        assert_eq!(r.pooled.iter().sum::<usize>(), 2 * days);
        assert!(r.uniformity.p_value > 0.01, "{:?}", r.uniformity);
        assert_eq!(r.skew, RankSkew::Centered);
    }

    #[test]
    fn ties_are_broken_with_the_seed() {
        let members = [1.0, 1.0, 1.0, 1.0];
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut seen = [0usize; 5];
        for _ in 0..5000 {
            seen[rank_of(&members, 1.0, &mut rng)] += 1;
        }
        assert!(seen.iter().all(|&c| c > 800), "{seen:?}");
        let a: Vec<usize> = {
            let mut r = ChaCha8Rng::seed_from_u64(9);
            (0..20).map(|_| rank_of(&members, 1.0, &mut r)).collect()
        };
        let b: Vec<usize> = {
            let mut r = ChaCha8Rng::seed_from_u64(9);
            (0..20).map(|_| rank_of(&members, 1.0, &mut r)).collect()
        };
        assert_eq!(a, b);
    }

    #[test]
    fn chi_square_reference_value() {
        // Counts (10, 20, 30): expected 20, statistic (100 + 0 + 100)/20 = 10, df 2,
        // survival exp(-10/2) for two degrees of freedom.
        let t = chi_square_uniformity(&[10, 20, 30]).unwrap();
        assert_relative_eq!(t.statistic, 10.0);
        assert_eq!(t.degrees_of_freedom, 2);
        assert_relative_eq!(t.p_value, (-5.0f64).exp(), max_relative = 1e-10);
    }

    #[test]
    fn ppt_cases() {
        let j = 95;
        let base = DailySeries::new(vec![10.0; j], vec![3.0; j]).unwrap();
        let shifted = DailySeries::new(vec![11.0; j], vec![4.0; j]).unwrap();
        let a = ensemble(vec![base.clone(), base.clone()]);
        let b = ensemble(vec![shifted.clone(), shifted]);
        assert_eq!(ppt(&a, &a).unwrap(), 0.0);
        assert_relative_eq!(ppt(&a, &b).unwrap(), 190f64.sqrt(), max_relative = 1e-12);

        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut rand_ens = |k: usize| {
            ensemble(
                (0..k)
                    .map(|_| DailySeries::new((0..4).map(|_| rng.gen::<f64>()).collect(), (0..4).map(|_| rng.gen::<f64>()).collect()).unwrap())
                    .collect(),
            )
        };
        let x = rand_ens(3);
        let y = rand_ens(5);
        let mut direct = 0.0;
        for i in 0..8 {
            let mx = x.members.iter().map(|m| m.to_flat()[i]).sum::<f64>() / 3.0;
            let my = y.members.iter().map(|m| m.to_flat()[i]).sum::<f64>() / 5.0;
            direct += (mx - my) * (mx - my);
        }
        assert_relative_eq!(ppt(&x, &y).unwrap(), direct.sqrt(), max_relative = 1e-12);
        assert_eq!(ppt(&x, &y).unwrap(), ppt(&y, &x).unwrap());
    }

    #[test]
    fn cvm_hand_cases() {
        // A = {0}, B = {1}: ranks 1 and 2, U = 1*0 + 1*(2-1)^2 = 1, T = 1/2 - 3/12.
        assert_relative_eq!(cramer_von_mises(&[0.0], &[1.0]).unwrap(), 0.25);
        // A = {0, 1}, B = {2}: ranks of A 1,2 and B 3: U = 2*0 + 1*(3-1)^2 = 4;
        // T = 4/(2*1*3) - 7/18.
        assert_relative_eq!(cramer_von_mises(&[0.0, 1.0], &[2.0]).unwrap(), 4.0 / 6.0 - 7.0 / 18.0, epsilon = 1e-15);
        assert!(cramer_von_mises(&[], &[1.0]).is_err());
    }

    /// Brute-force `NM/(N+M)^2 sum (F_N - G_M)^2` over the pooled points.
    fn cvm_from_ecdf(a: &[f64], b: &[f64]) -> f64 {
        let (n, m) = (a.len() as f64, b.len() as f64);
        let ecdf = |s: &[f64], x: f64| s.iter().filter(|&&v| v <= x).count() as f64 / s.len() as f64;
        let pooled: Vec<f64> = a.iter().chain(b).copied().collect();
        let sum: f64 = pooled.iter().map(|&x| (ecdf(a, x) - ecdf(b, x)).powi(2)).sum();
        n * m / (n + m).powi(2) * sum
    }

    #[test]
    fn cvm_matches_ecdf_definition_without_ties() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let a: Vec<f64> = (0..rng.gen_range(1..15)).map(|_| rng.gen::<f64>()).collect();
            let b: Vec<f64> = (0..rng.gen_range(1..15)).map(|_| rng.gen::<f64>() + 0.2).collect();
            assert_relative_eq!(cramer_von_mises(&a, &b).unwrap(), cvm_from_ecdf(&a, &b), epsilon = 1e-10);
        }
    }

    #[test]
    fn cvm_identical_is_minimal_and_separation_is_large() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a: Vec<f64> = (0..100).map(|_| rng.gen::<f64>()).collect();
        let same = cramer_von_mises(&a, &a).unwrap();
        assert!(same.abs() < 1e-9, "{same}");
        // Any relabelling of the 200 pooled values into two halves scores at least as high.
        let pooled: Vec<f64> = a.iter().chain(&a).copied().collect();
        for _ in 0..200 {
            let idx = index::sample(&mut rng, 200, 100).into_vec();
            let mut mask = vec![false; 200];
            idx.iter().for_each(|&i| mask[i] = true);
            let x: Vec<f64> = (0..200).filter(|&i| mask[i]).map(|i| pooled[i]).collect();
            let y: Vec<f64> = (0..200).filter(|&i| !mask[i]).map(|i| pooled[i]).collect();
            assert!(cramer_von_mises(&x, &y).unwrap() >= same - 1e-12);
        }
        let far: Vec<f64> = a.iter().map(|v| v + 100.0).collect();
        let sep = cramer_von_mises(&a, &far).unwrap();
        assert!(sep >= 100.0 * same.abs().max(1e-3), "{sep} vs {same}");
        assert_relative_eq!(sep, cvm_from_ecdf(&a, &far), epsilon = 1e-9);
    }

    #[test]
    fn predictive_noise_free_and_mean() {
        use crate::design::halton_design;
        use crate::design::TrainingDataset;
        use crate::params::Bounds;
        let b = Bounds::default_box();
        let design = halton_design(20, &b).unwrap();
        let responses = design
            .iter()
            .map(|p| {
                let u = b.to_unit(p.as_slice());
                DailySeries::new(
                    (0..5).map(|d| 200.0 + 100.0 * u[0] + d as f64).collect(),
                    (0..5).map(|d| 100.0 + 50.0 * u[1] + d as f64).collect(),
                )
                .unwrap()
            })
            .collect();
        let ds = TrainingDataset::new(design, responses, 1, b.clone()).unwrap();
        let model = GpModel::fit(&ds, 0.5, 0.01).unwrap();
        let theta = ParameterVector::new(0.05, 48.0, 0.95, 0.4);
        let tiny = VariancePair::new(1e-300, 1e-300).unwrap();
        let e = posterior_predictive(&[theta], &[tiny], &model, 4, "x", 3).unwrap();
        let mean = model.predict(&theta);
        for m in &e.members {
            for (a, b) in m.hospitalizations.iter().zip(&mean.hospitalizations) {
                assert_relative_eq!(a, b, max_relative = 1e-12);
            }
        }

        let v = VariancePair::new(4.0, 1.0).unwrap();
        let e = posterior_predictive(&[theta], &[v], &model, 10_000, "x", 4).unwrap();
        let em = e.mean_flat();
        let flat = mean.to_flat();
        for (i, (a, b)) in em.iter().zip(&flat).enumerate() {
            let se = if i < 5 { 2.0 } else { 1.0 } / 100.0;
            assert!((a - b).abs() < 3.0 * se, "entry {i}: {a} vs {b}");
        }

        // Mixed draws against a loop over the same random stream.
        let thetas = vec![theta, ParameterVector::new(0.07, 30.0, 0.93, 0.2), ParameterVector::new(0.03, 90.0, 0.99, 0.7)];
        let vs = vec![v, VariancePair::new(9.0, 2.0).unwrap(), VariancePair::new(1.0, 0.5).unwrap()];
        let e = posterior_predictive(&thetas, &vs, &model, 5, "x", 8).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let idx: Vec<usize> = (0..5).map(|_| rng.gen_range(0..3)).collect();
        for (member, &i) in e.members.iter().zip(&idx) {
            let mu = model.predict(&thetas[i]);
            let nh = Normal::new(0.0, vs[i].hospitalizations.sqrt()).unwrap();
            let nd = Normal::new(0.0, vs[i].deaths.sqrt()).unwrap();
            let h: Vec<f64> = mu.hospitalizations.iter().map(|m| (m + nh.sample(&mut rng)).max(0.0)).collect();
            let d: Vec<f64> = mu.deaths.iter().map(|m| (m + nd.sample(&mut rng)).max(0.0)).collect();
            assert_eq!(member.hospitalizations, h);
            assert_eq!(member.deaths, d);
        }
        assert!(posterior_predictive(&[], &[v], &model, 5, "x", 1).is_err());
    }

    #[test]
    fn pushforward_members_are_seed_averaged_runs() {
        let cfg = AbmConfig {
            population: 400,
            seed_infections: 10,
            horizon_days: 20,
            places: 20,
            ..AbmConfig::default()
        };
        let theta = ParameterVector::new(0.05, 24.0, 0.95, 0.4);
        let e = pushforward(&[theta], &cfg, 2, 3, "x", 0).unwrap();
        let direct = crate::abm::simulate_mean(&theta, &cfg, 2).unwrap();
        assert!(e.members.iter().all(|m| *m == direct));
        let zero = ParameterVector::new(0.0, 24.0, 0.95, 0.4);
        let z = pushforward(&[zero], &cfg, 2, 2, "x", 0).unwrap();
        assert!(z.members[0].total() < 20.0);
    }

    #[test]
    fn bands_and_coverage() {
        let members: Vec<DailySeries> = (0..=10)
            .map(|k| DailySeries::new(vec![k as f64; 3], vec![k as f64 * 2.0; 3]).unwrap())
            .collect();
        let e = ensemble(members);
        let b = bands(&e, 0.1, 0.9).unwrap();
        assert_eq!(b.median.hospitalizations, vec![5.0; 3]);
        assert_eq!(b.lower.hospitalizations, vec![1.0; 3]);
        assert_eq!(b.upper.deaths, vec![18.0; 3]);
        let obs = Observations::new(DailySeries::new(vec![0.5, 5.0, 9.0], vec![2.0, 20.0, 10.0]).unwrap()).unwrap();
        assert_relative_eq!(b.coverage(&obs).unwrap(), 4.0 / 6.0);
    }
}
