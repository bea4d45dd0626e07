//! One function per pipeline stage. Each reads verified inputs, writes its
//! artifacts through a staging location and returns the manifest it wrote.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use epical::abm::AbmConfig;
use epical::design::{halton_matrix_from, read_design_csv, scale_to_bounds, write_design_csv, TrainingDataset};
use epical::dram::{run_chain, run_length_diagnostic, DramConfig, RunLengthConfig, RunLengthReport};
use epical::gp::{cross_validate, default_nugget_grid, select_hyperparameters, CvReport, GpModel, Selection};
use epical::io::{write_atomic, write_json};
use epical::posterior::{pilot_fit, GpPosterior, Observations, PilotFit, VariancePair};
use epical::sensitivity::{permutation_importance, sobol_indices, SensitivityReport};
use epical::svi::{run_svi, SviConfig};
use epical::{Bounds, ParameterVector, PARAM_NAMES};
use log::{info, warn};
use serde::Serialize;

use crate::config::{ExperimentConfig, GpConfig, ObservationConfig, PosteriorConfig, SensitivityConfig};
use crate::error::{CliError, CliResult, StageContext};
use crate::manifest::{sha256_file, ManifestBuilder, RunManifest, StagedDir, StagedFile};

pub const MODEL_FILE: &str = "model.txt";
pub const OBS_FILE: &str = "observations.csv";
pub const CHAIN_FILE: &str = "chain.csv";
pub const PARTICLES_FILE: &str = "particles.csv";

pub struct Context {
    pub config: ExperimentConfig,
    pub record_timing: bool,
}

impl Context {
    fn builder<S: Serialize>(&self, stage: &str, settings: &S) -> ManifestBuilder {
        ManifestBuilder::new(stage, settings, self.record_timing)
    }

    fn bounds(&self, stage: &str) -> CliResult<Bounds> {
        self.config.bounds().stage(stage)
    }
}

#[derive(Serialize)]
struct DesignSettings {
    size: usize,
    start: u64,
    bounds: Vec<(f64, f64)>,
}

pub fn design(ctx: &Context, out: &Path, n: Option<usize>, start: Option<u64>) -> CliResult<RunManifest> {
    const STAGE: &str = "design";
    let settings = DesignSettings {
        size: n.unwrap_or(ctx.config.design.size),
        start: start.unwrap_or(ctx.config.design.start),
        bounds: ctx.config.bounds.ranges.clone(),
    };
    if settings.start == 0 {
        return Err(CliError::new(STAGE, "invalid_input", "Halton indices start at 1"));
    }
    let b = ctx.builder(STAGE, &settings);
    let bounds = ctx.bounds(STAGE)?;
    let unit = halton_matrix_from(settings.start, settings.size, bounds.dim()).stage(STAGE)?;
    let design: Vec<ParameterVector> = scale_to_bounds(&unit, &bounds)
        .stage(STAGE)?
        .iter()
        .map(|r| ParameterVector::from_slice(r))
        .collect::<epical::Result<_>>()
        .stage(STAGE)?;
    let staged = StagedFile::begin(STAGE, out)?;
    write_design_csv(staged.path(), &design).stage(STAGE)?;
    staged.commit(b)
}

#[derive(Serialize)]
struct SimulateSettings<'a> {
    n_seeds: usize,
    bounds: &'a [(f64, f64)],
    abm: &'a AbmConfig,
}

pub fn simulate(ctx: &Context, design_path: &Path, out: &Path) -> CliResult<RunManifest> {
    const STAGE: &str = "simulate";
    let c = &ctx.config;
    let settings = SimulateSettings {
        n_seeds: c.simulate.n_seeds,
        bounds: &c.bounds.ranges,
        abm: &c.abm,
    };
    let mut b = ctx.builder(STAGE, &settings);
    let design_path = b.input(design_path)?;
    let design = read_design_csv(&design_path).stage(STAGE)?;
    let source = format!("design sha256 {}", sha256_file(STAGE, &design_path)?);
    // Kept on failure: an interrupted build resumes from the rows already written.
    let staged = StagedDir::begin(STAGE, out, true)?;
    info!("simulating {} design points x {} seeds", design.len(), c.simulate.n_seeds);
    epical::design::build_dataset_in(staged.path(), &design, &ctx.bounds(STAGE)?, &c.abm, c.simulate.n_seeds, &source)
        .stage(STAGE)?;
    // Every row averages the runs seeded 0..n_seeds.
    b.seed("abm_first_run", 0);
    b.seed("abm_last_run", c.simulate.n_seeds as u64 - 1);
    b.seed("abm_rng_key", c.abm.rng_key);
    staged.commit(b)
}

/// Cross-validation numbers without the per-point detail.
#[derive(Serialize)]
struct CvSummary {
    folds: usize,
    seed: u64,
    length_scale: f64,
    nugget: f64,
    fold_medians: Vec<f64>,
    pooled_median: f64,
    mse: f64,
    r_squared: f64,
}

impl From<&CvReport> for CvSummary {
    fn from(r: &CvReport) -> Self {
        Self {
            folds: r.folds,
            seed: r.seed,
            length_scale: r.length_scale,
            nugget: r.nugget,
            fold_medians: r.fold_medians.clone(),
            pooled_median: r.pooled_median,
            mse: r.mse,
            r_squared: r.r_squared,
        }
    }
}

pub fn train_gp(ctx: &Context, dataset_dir: &Path, out: &Path) -> CliResult<RunManifest> {
    const STAGE: &str = "train-gp";
    let gp: &GpConfig = &ctx.config.gp;
    let mut b = ctx.builder(STAGE, gp);
    let dataset_dir = b.input(dataset_dir)?;
    let ds = TrainingDataset::load(&dataset_dir).stage(STAGE)?;
    b.seed("cv", gp.cv_seed);
    let staged = StagedDir::begin(STAGE, out, false)?;
    let (l, nugget) = match (gp.length_scale, gp.nugget) {
        (Some(l), Some(g)) => (l, g),
        _ => {
            let grid = if gp.nugget_grid.is_empty() {
                default_nugget_grid(gp.nugget_points)
            } else {
                gp.nugget_grid.clone()
            };
            let sel: Selection = select_hyperparameters(&ds, &grid, gp.folds, gp.cv_seed).stage(STAGE)?;
            write_json(&staged.file("selection.json"), &sel).stage(STAGE)?;
            (sel.length_scale, sel.nugget)
        }
    };
    info!("fitting surrogate with l = {l:.4}, nugget = {nugget:.4}");
    let model = GpModel::fit(&ds, l, nugget).stage(STAGE)?;
    model.save(&staged.file(MODEL_FILE)).stage(STAGE)?;
    let cv = cross_validate(&ds, gp.folds, l, nugget, gp.cv_seed).stage(STAGE)?;
    info!("cross-validated pooled median relative error {:.4}", cv.pooled_median);
    write_json(&staged.file("cv.json"), &CvSummary::from(&cv)).stage(STAGE)?;
    staged.commit(b)
}

#[derive(Serialize)]
struct ObsSettings<'a> {
    observations: &'a ObservationConfig,
    abm: Option<&'a AbmConfig>,
}

#[derive(Serialize)]
struct TruthRecord {
    source: String,
    truth: Option<ParameterVector>,
    noise_sd: [f64; 2],
    noise_seed: u64,
    n_seeds: usize,
}

pub fn make_obs(ctx: &Context, out: &Path) -> CliResult<RunManifest> {
    const STAGE: &str = "make-obs";
    let oc = &ctx.config.observations;
    let settings = ObsSettings {
        observations: oc,
        abm: oc.path.is_none().then_some(&ctx.config.abm),
    };
    let mut b = ctx.builder(STAGE, &settings);
    let staged = StagedDir::begin(STAGE, out, false)?;
    let record = match &oc.path {
        Some(p) => {
            let obs = Observations::load(p).stage(STAGE)?;
            if obs.n() != ctx.config.abm.horizon_days {
                return Err(CliError::new(STAGE, "invalid_input", "observation horizon differs from abm.horizon_days")
                    .with("path", p.display())
                    .with("days", obs.n()));
            }
            b.external_input(p)?;
            obs.save(&staged.file(OBS_FILE)).stage(STAGE)?;
            TruthRecord {
                source: "imported".to_string(),
                truth: None,
                noise_sd: [0.0; 2],
                noise_seed: 0,
                n_seeds: 0,
            }
        }
        None => {
            let truth = ctx.config.truth();
            let obs = Observations::synthetic(&truth, &ctx.config.abm, oc.n_seeds, oc.noise_sd, oc.noise_seed).stage(STAGE)?;
            obs.save(&staged.file(OBS_FILE)).stage(STAGE)?;
            b.seed("noise", oc.noise_seed);
            TruthRecord {
                source: "synthetic".to_string(),
                truth: Some(truth),
                noise_sd: oc.noise_sd,
                noise_seed: oc.noise_seed,
                n_seeds: oc.n_seeds,
            }
        }
    };
    write_json(&staged.file("truth.json"), &record).stage(STAGE)?;
    staged.commit(b)
}

/// Inputs shared by the calibration and comparison stages.
pub struct CalibrationInputs {
    pub model: GpModel,
    pub obs: Observations,
    pub pilot: PilotFit,
}

impl CalibrationInputs {
    fn load(stage: &str, b: &mut ManifestBuilder, model_dir: &Path, dataset_dir: &Path, obs_dir: &Path) -> CliResult<Self> {
        let model_dir = b.input(model_dir)?;
        let dataset_dir = b.input(dataset_dir)?;
        let obs_dir = b.input(obs_dir)?;
        let model = GpModel::load(&model_dir.join(MODEL_FILE)).stage(stage)?;
        let dataset = TrainingDataset::load(&dataset_dir).stage(stage)?;
        let obs = Observations::load(&obs_dir.join(OBS_FILE)).stage(stage)?;
        let pilot = pilot_fit(&dataset, &obs).stage(stage)?;
        Ok(Self {
            model,
            obs,
            pilot,
        })
    }

    fn posterior(&self, stage: &str, bounds: Bounds, pc: &PosteriorConfig) -> CliResult<GpPosterior<'_>> {
        let mut post = GpPosterior::new(&self.model, &self.obs, bounds, pc.prior, self.pilot.variances).stage(stage)?;
        post.fd_step = pc.fd_step;
        Ok(post)
    }
}

#[derive(Serialize)]
struct DramSettings<'a> {
    dram: &'a DramConfig,
    run_length: &'a RunLengthConfig,
    posterior: &'a PosteriorConfig,
    bounds: &'a [(f64, f64)],
    seed: u64,
}

#[derive(Serialize)]
struct DramDiagnostics {
    pilot: PilotFit,
    samples: usize,
    burn_in: usize,
    first_stage_acceptance: f64,
    second_stage_acceptance: f64,
    total_acceptance: f64,
    run_length: Option<RunLengthReport>,
    run_length_error: Option<String>,
    covariance_checkpoints: BTreeMap<usize, Vec<Vec<f64>>>,
}

pub fn calibrate_dram(ctx: &Context, model_dir: &Path, dataset_dir: &Path, obs_dir: &Path, out: &Path) -> CliResult<RunManifest> {
    const STAGE: &str = "calibrate-dram";
    let c = &ctx.config;
    let settings = DramSettings {
        dram: &c.dram,
        run_length: &c.run_length,
        posterior: &c.posterior,
        bounds: &c.bounds.ranges,
        seed: c.seeds.dram,
    };
    let mut b = ctx.builder(STAGE, &settings);
    let inputs = CalibrationInputs::load(STAGE, &mut b, model_dir, dataset_dir, obs_dir)?;
    let post = inputs.posterior(STAGE, ctx.bounds(STAGE)?, &c.posterior)?;
    b.seed("dram", c.seeds.dram);
    let staged = StagedDir::begin(STAGE, out, false)?;
    let start = post.to_unit(inputs.pilot.theta.as_slice());
    info!("running DRAM for {} iterations", c.dram.samples);
    let chain = run_chain(&post, &c.dram, &start, Some(inputs.pilot.variances), c.seeds.dram).stage(STAGE)?;
    chain.save_csv(&staged.file(CHAIN_FILE)).stage(STAGE)?;
    let (first, second, total) = chain.acceptance_rates();
    let (run_length, run_length_error) = match run_length_diagnostic(&chain, &c.run_length) {
        Ok(r) => {
            if !r.converged {
                warn!("run-length diagnostic asks for {} samples, {} available", r.required, r.available);
            }
            (Some(r), None)
        }
        Err(e) => {
            warn!("run-length diagnostic failed: {e}");
            (None, Some(e.to_string()))
        }
    };
    let diag = DramDiagnostics {
        pilot: inputs.pilot.clone(),
        samples: chain.len(),
        burn_in: chain.burn_in,
        first_stage_acceptance: first,
        second_stage_acceptance: second,
        total_acceptance: total,
        run_length,
        run_length_error,
        covariance_checkpoints: chain.covariance_checkpoints.iter().cloned().collect(),
    };
    write_json(&staged.file("diagnostics.json"), &diag).stage(STAGE)?;
    staged.commit(b)
}

#[derive(Serialize)]
struct SviSettings<'a> {
    svi: &'a SviConfig,
    posterior: &'a PosteriorConfig,
    bounds: &'a [(f64, f64)],
}

#[derive(Serialize)]
struct SviSummary {
    pilot: PilotFit,
    fixed_variances: VariancePair,
    particles: usize,
    seeds: Vec<u64>,
    aborted: Vec<(u64, String)>,
    clamp_events: BTreeMap<u64, usize>,
    final_mean_log_density: BTreeMap<u64, f64>,
}

pub fn calibrate_svi(ctx: &Context, model_dir: &Path, dataset_dir: &Path, obs_dir: &Path, out: &Path) -> CliResult<RunManifest> {
    const STAGE: &str = "calibrate-svi";
    let c = &ctx.config;
    let settings = SviSettings {
        svi: &c.svi,
        posterior: &c.posterior,
        bounds: &c.bounds.ranges,
    };
    let mut b = ctx.builder(STAGE, &settings);
    let inputs = CalibrationInputs::load(STAGE, &mut b, model_dir, dataset_dir, obs_dir)?;
    let post = inputs.posterior(STAGE, ctx.bounds(STAGE)?, &c.posterior)?;
    for &s in &c.svi.seeds {
        b.seed(&format!("svi_{s}"), s);
    }
    let staged = StagedDir::begin(STAGE, out, false)?;
    info!("running SVI: {} seeds x {} particles x {} steps", c.svi.seeds.len(), c.svi.particles, c.svi.steps);
    let superset = run_svi(&post, &c.svi).stage(STAGE)?;
    for (seed, why) in &superset.aborted {
        warn!("SVI seed {seed} aborted: {why}");
    }
    superset.save_csv(&staged.file(PARTICLES_FILE)).stage(STAGE)?;
    superset.save_trace_csv(&staged.file("trace.csv")).stage(STAGE)?;
    let summary = SviSummary {
        pilot: inputs.pilot.clone(),
        fixed_variances: inputs.pilot.variances,
        particles: superset.len(),
        seeds: superset.runs.iter().map(|r| r.seed).collect(),
        aborted: superset.aborted.clone(),
        clamp_events: superset.runs.iter().map(|r| (r.seed, r.clamp_events)).collect(),
        final_mean_log_density: superset
            .runs
            .iter()
            .filter_map(|r| r.trace.last().map(|t| (r.seed, t.mean_log_density)))
            .collect(),
    };
    write_json(&staged.file("summary.json"), &summary).stage(STAGE)?;
    staged.commit(b)
}

#[derive(Serialize)]
struct SensitivitySettings<'a> {
    sensitivity: &'a SensitivityConfig,
    bounds: &'a [(f64, f64)],
    permutation_seed: u64,
    sobol_seed: u64,
}

pub fn sensitivity(ctx: &Context, model_dir: &Path, dataset_dir: &Path, out: &Path) -> CliResult<RunManifest> {
    const STAGE: &str = "sensitivity";
    let c = &ctx.config;
    let settings = SensitivitySettings {
        sensitivity: &c.sensitivity,
        bounds: &c.bounds.ranges,
        permutation_seed: c.seeds.permutation,
        sobol_seed: c.seeds.sobol,
    };
    let mut b = ctx.builder(STAGE, &settings);
    let model_dir = b.input(model_dir)?;
    let dataset_dir = b.input(dataset_dir)?;
    let model = GpModel::load(&model_dir.join(MODEL_FILE)).stage(STAGE)?;
    let ds = TrainingDataset::load(&dataset_dir).stage(STAGE)?;
    b.seed("permutation", c.seeds.permutation);
    b.seed("sobol", c.seeds.sobol);
    let staged = StagedDir::begin(STAGE, out, false)?;
    let perm = permutation_importance(&model, &ds, c.sensitivity.repetitions, c.seeds.permutation).stage(STAGE)?;
    let sobol = sobol_indices(&model, &ctx.bounds(STAGE)?, c.sensitivity.n_base, c.seeds.sobol, c.sensitivity.per_output)
        .stage(STAGE)?;
    let report = SensitivityReport::new(&PARAM_NAMES, perm, sobol).stage(STAGE)?;
    report.save(&staged.file("report.json"), &staged.file("report.csv")).stage(STAGE)?;
    staged.commit(b)
}

pub fn compare(
    ctx: &Context,
    dram_samples: &Path,
    svi_samples: &Path,
    model_dir: &Path,
    dataset_dir: &Path,
    obs_dir: &Path,
    out: &Path,
) -> CliResult<RunManifest> {
    crate::compare::run(ctx, dram_samples, svi_samples, model_dir, dataset_dir, obs_dir, out)
}

/// Writes a CSV through the atomic writer, mapping errors to the stage.
pub(crate) fn write_table(stage: &str, path: &Path, header: &[&str], rows: &[Vec<String>]) -> CliResult<()> {
    write_atomic(path, |w| {
        let mut csv = csv::Writer::from_writer(w);
        csv.write_record(header)?;
        for r in rows {
            csv.write_record(r)?;
        }
        csv.flush()?;
        Ok(())
    })
    .stage(stage)
}

pub(crate) fn load_calibration_inputs(
    stage: &str,
    b: &mut ManifestBuilder,
    model_dir: &Path,
    dataset_dir: &Path,
    obs_dir: &Path,
) -> CliResult<CalibrationInputs> {
    CalibrationInputs::load(stage, b, model_dir, dataset_dir, obs_dir)
}

pub(crate) fn builder<S: Serialize>(ctx: &Context, stage: &str, settings: &S) -> ManifestBuilder {
    ctx.builder(stage, settings)
}

/// Artifact layout of a full pipeline run under one directory.
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn design(&self) -> PathBuf {
        self.root.join("design.csv")
    }
    pub fn dataset(&self) -> PathBuf {
        self.root.join("dataset")
    }
    pub fn gp(&self) -> PathBuf {
        self.root.join("gp")
    }
    pub fn obs(&self) -> PathBuf {
        self.root.join("obs")
    }
    pub fn dram(&self) -> PathBuf {
        self.root.join("dram")
    }
    pub fn svi(&self) -> PathBuf {
        self.root.join("svi")
    }
    pub fn sensitivity(&self) -> PathBuf {
        self.root.join("sensitivity")
    }
    pub fn compare(&self) -> PathBuf {
        self.root.join("compare")
    }
}

pub fn pipeline(ctx: &Context, out: &Path) -> CliResult<()> {
    std::fs::create_dir_all(out).map_err(|e| CliError::io("pipeline", out, e))?;
    let config_path = out.join("config.json");
    write_json(&config_path, &ctx.config).stage("pipeline")?;
    let l = Layout { root: out.to_path_buf() };
    design(ctx, &l.design(), None, None)?;
    simulate(ctx, &l.design(), &l.dataset())?;
    train_gp(ctx, &l.dataset(), &l.gp())?;
    make_obs(ctx, &l.obs())?;
    calibrate_dram(ctx, &l.gp(), &l.dataset(), &l.obs(), &l.dram())?;
    calibrate_svi(ctx, &l.gp(), &l.dataset(), &l.obs(), &l.svi())?;
    sensitivity(ctx, &l.gp(), &l.dataset(), &l.sensitivity())?;
    compare(
        ctx,
        &l.dram().join(CHAIN_FILE),
        &l.svi().join(PARTICLES_FILE),
        &l.gp(),
        &l.dataset(),
        &l.obs(),
        &l.compare(),
    )?;
    Ok(())
}
