//! Side-by-side scoring of the two calibrations.

use std::path::Path;

use epical::metrics::{
    bands, cramer_von_mises, crps_series, posterior_predictive, ppt, pushforward, vrh, Bands, CrpsSeries, PredictiveEnsemble,
    RankHistogram, RankSkew,
};
use epical::posterior::Observations;
use epical::{Bounds, PARAM_NAMES};
use log::info;
use serde::Serialize;

use crate::config::MetricsConfig;
use crate::error::{CliResult, StageContext};
use crate::manifest::{RunManifest, StagedDir};
use crate::samples::{read_samples, PosteriorSamples, SampleKind};
use crate::stages::{builder, load_calibration_inputs, write_table, Context};

const STAGE: &str = "compare";
const METHODS: [&str; 2] = ["dram", "svi"];

#[derive(Serialize)]
struct CompareSettings<'a> {
    metrics: &'a MetricsConfig,
    abm: &'a epical::abm::AbmConfig,
    burn_in_fraction: f64,
    bounds: &'a [(f64, f64)],
    predictive_seed: u64,
    pushforward_seed: u64,
    rank_tie_seed: u64,
}

#[derive(Clone, Debug, Serialize)]
pub struct EnsembleScores {
    pub crps_mean: f64,
    pub crps_mean_hospitalizations: f64,
    pub crps_mean_deaths: f64,
    pub band_coverage: f64,
    pub vrh_statistic: f64,
    pub vrh_p_value: f64,
    pub vrh_mean_rank_offset: f64,
    pub vrh_skew: RankSkew,
}

#[derive(Clone, Debug, Serialize)]
pub struct MethodSummary {
    pub method: String,
    pub kind: String,
    pub samples: usize,
    pub means: Vec<f64>,
    pub standard_deviations: Vec<f64>,
    pub predictive: EnsembleScores,
    pub pushforward: EnsembleScores,
}

#[derive(Clone, Debug, Serialize)]
pub struct CompareReport {
    pub parameters: Vec<String>,
    pub ensemble_size: usize,
    pub pushforward_seeds: usize,
    pub band_quantiles: (f64, f64),
    pub methods: Vec<MethodSummary>,
    /// L2 distance between the predictive means.
    pub ppt_predictive: f64,
    pub ppt_pushforward: f64,
    /// Cramer-von Mises statistic between the two marginals, per parameter.
    pub cramer_von_mises: Vec<f64>,
    /// Ratio of time-mean pushforward CRPS, SVI over DRAM.
    pub pushforward_crps_ratio: f64,
}

struct Scored {
    crps: CrpsSeries,
    vrh: RankHistogram,
    bands: Bands,
    scores: EnsembleScores,
}

fn score(e: &PredictiveEnsemble, obs: &Observations, m: &MetricsConfig, tie_seed: u64) -> CliResult<Scored> {
    let crps = crps_series(e, obs).stage(STAGE)?;
    let vrh = vrh(e, obs, tie_seed).stage(STAGE)?;
    let bands = bands(e, m.lower_quantile, m.upper_quantile).stage(STAGE)?;
    let scores = EnsembleScores {
        crps_mean: crps.mean,
        crps_mean_hospitalizations: crps.mean_hospitalizations,
        crps_mean_deaths: crps.mean_deaths,
        band_coverage: bands.coverage(obs).stage(STAGE)?,
        vrh_statistic: vrh.uniformity.statistic,
        vrh_p_value: vrh.uniformity.p_value,
        vrh_mean_rank_offset: vrh.mean_rank_offset,
        vrh_skew: vrh.skew,
    };
    Ok(Scored { crps, vrh, bands, scores })
}

fn moments(x: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

fn f(v: f64) -> String {
    format!("{v:?}")
}

/// Histogram density of each marginal over the prior box.
fn marginal_rows(method: &str, s: &PosteriorSamples, bounds: &Bounds, bins: usize) -> Vec<Vec<String>> {
    let mut rows = Vec::new();
    for (k, name) in PARAM_NAMES.iter().enumerate() {
        let (lo, hi) = bounds.ranges[k];
        let width = (hi - lo) / bins as f64;
        let mut counts = vec![0usize; bins];
        let x = s.marginal(k);
        for v in &x {
            let b = (((v - lo) / width).floor().max(0.0) as usize).min(bins - 1);
            counts[b] += 1;
        }
        for (b, c) in counts.iter().enumerate() {
            let left = lo + b as f64 * width;
            rows.push(vec![
                method.to_string(),
                name.to_string(),
                f(left),
                f(left + width),
                f(*c as f64 / (x.len() as f64 * width)),
            ]);
        }
    }
    rows
}

/// Evenly spaced rows, at most `limit` of them.
fn scatter_rows(s: &PosteriorSamples, limit: usize) -> Vec<Vec<String>> {
    let n = s.points.len();
    let take = n.min(limit.max(1));
    (0..take)
        .map(|i| {
            let p = &s.points[i * n / take];
            p.0.iter().map(|v| f(*v)).collect()
        })
        .collect()
}

pub fn run(
    ctx: &Context,
    dram_samples: &Path,
    svi_samples: &Path,
    model_dir: &Path,
    dataset_dir: &Path,
    obs_dir: &Path,
    out: &Path,
) -> CliResult<RunManifest> {
    let c = &ctx.config;
    let m = &c.metrics;
    let settings = CompareSettings {
        metrics: m,
        abm: &c.abm,
        burn_in_fraction: c.dram.burn_in_fraction,
        bounds: &c.bounds.ranges,
        predictive_seed: c.seeds.predictive,
        pushforward_seed: c.seeds.pushforward,
        rank_tie_seed: c.seeds.rank_ties,
    };
    let mut b = builder(ctx, STAGE, &settings);
    let dram_samples = b.input(dram_samples)?;
    let svi_samples = b.input(svi_samples)?;
    let inputs = load_calibration_inputs(STAGE, &mut b, model_dir, dataset_dir, obs_dir)?;
    b.seed("predictive", c.seeds.predictive);
    b.seed("pushforward", c.seeds.pushforward);
    b.seed("rank_ties", c.seeds.rank_ties);
    let bounds = c.bounds().stage(STAGE)?;
    let samples = [
        read_samples(STAGE, &dram_samples, c.dram.burn_in_fraction)?,
        read_samples(STAGE, &svi_samples, c.dram.burn_in_fraction)?,
    ];
    let staged = StagedDir::begin(STAGE, out, false)?;

    let mut predictive = Vec::new();
    let mut pushed = Vec::new();
    for (method, s) in METHODS.iter().zip(&samples) {
        let variances = s.variances.clone().unwrap_or_else(|| vec![inputs.pilot.variances]);
        predictive.push(
            posterior_predictive(&s.points, &variances, &inputs.model, m.ensemble_size, method, c.seeds.predictive).stage(STAGE)?,
        );
        info!("pushing {} {method} draws through the ABM", m.ensemble_size);
        pushed.push(pushforward(&s.points, &c.abm, m.pushforward_seeds, m.ensemble_size, method, c.seeds.pushforward).stage(STAGE)?);
    }

    let mut crps_rows = Vec::new();
    let mut vrh_rows = Vec::new();
    let mut band_rows = Vec::new();
    let mut summaries = Vec::new();
    for (i, method) in METHODS.iter().enumerate() {
        let mut per_kind = Vec::new();
        for (kind, e) in [("predictive", &predictive[i]), ("pushforward", &pushed[i])] {
            e.save_csv(&staged.file(&format!("ensemble_{method}_{kind}.csv"))).stage(STAGE)?;
            let sc = score(e, &inputs.obs, m, c.seeds.rank_ties)?;
            for d in 0..sc.crps.hospitalizations.len() {
                crps_rows.push(vec![
                    method.to_string(),
                    kind.to_string(),
                    d.to_string(),
                    f(sc.crps.hospitalizations[d]),
                    f(sc.crps.deaths[d]),
                ]);
            }
            for (series, counts) in [
                ("hospitalizations", &sc.vrh.hospitalizations),
                ("deaths", &sc.vrh.deaths),
                ("pooled", &sc.vrh.pooled),
            ] {
                for (rank, n) in counts.iter().enumerate() {
                    vrh_rows.push(vec![method.to_string(), kind.to_string(), series.to_string(), rank.to_string(), n.to_string()]);
                }
            }
            for (output, lo, med, hi) in [
                ("hospitalizations", &sc.bands.lower.hospitalizations, &sc.bands.median.hospitalizations, &sc.bands.upper.hospitalizations),
                ("deaths", &sc.bands.lower.deaths, &sc.bands.median.deaths, &sc.bands.upper.deaths),
            ] {
                for d in 0..med.len() {
                    band_rows.push(vec![
                        method.to_string(),
                        kind.to_string(),
                        d.to_string(),
                        output.to_string(),
                        f(lo[d]),
                        f(med[d]),
                        f(hi[d]),
                    ]);
                }
            }
            per_kind.push(sc.scores);
        }
        let s = &samples[i];
        let (means, sds): (Vec<f64>, Vec<f64>) = (0..PARAM_NAMES.len()).map(|k| moments(&s.marginal(k))).unzip();
        let pf = per_kind.pop().expect("two kinds");
        let pr = per_kind.pop().expect("two kinds");
        summaries.push(MethodSummary {
            method: method.to_string(),
            kind: match s.kind {
                SampleKind::Chain => "chain",
                SampleKind::Particles => "particles",
            }
            .to_string(),
            samples: s.points.len(),
            means,
            standard_deviations: sds,
            predictive: pr,
            pushforward: pf,
        });
    }
    write_table(STAGE, &staged.file("crps.csv"), &["method", "ensemble", "day", "hospitalizations", "deaths"], &crps_rows)?;
    write_table(STAGE, &staged.file("vrh.csv"), &["method", "ensemble", "series", "rank", "count"], &vrh_rows)?;
    write_table(
        STAGE,
        &staged.file("bands.csv"),
        &["method", "ensemble", "day", "output", "lower", "median", "upper"],
        &band_rows,
    )?;

    let mut marginals = Vec::new();
    for (method, s) in METHODS.iter().zip(&samples) {
        marginals.extend(marginal_rows(method, s, &bounds, m.marginal_bins));
        write_table(STAGE, &staged.file(&format!("pairwise_{method}.csv")), &PARAM_NAMES, &scatter_rows(s, m.scatter_points))?;
    }
    write_table(
        STAGE,
        &staged.file("marginals.csv"),
        &["method", "parameter", "bin_lower", "bin_upper", "density"],
        &marginals,
    )?;

    let cvm = (0..PARAM_NAMES.len())
        .map(|k| cramer_von_mises(&samples[0].marginal(k), &samples[1].marginal(k)))
        .collect::<epical::Result<Vec<_>>>()
        .stage(STAGE)?;
    let report = CompareReport {
        parameters: PARAM_NAMES.iter().map(|s| s.to_string()).collect(),
        ensemble_size: m.ensemble_size,
        pushforward_seeds: m.pushforward_seeds,
        band_quantiles: (m.lower_quantile, m.upper_quantile),
        ppt_predictive: ppt(&predictive[0], &predictive[1]).stage(STAGE)?,
        ppt_pushforward: ppt(&pushed[0], &pushed[1]).stage(STAGE)?,
        cramer_von_mises: cvm,
        pushforward_crps_ratio: summaries[1].pushforward.crps_mean / summaries[0].pushforward.crps_mean,
        methods: summaries,
    };
    epical::io::write_json(&staged.file("report.json"), &report).stage(STAGE)?;
    staged.commit(b)
}
