//! Experiment configuration: a TOML file with one table per stage, overridable
//! from the environment as `EPICAL_<SECTION>__<KEY>=<value>`.

use std::path::{Path, PathBuf};

use epical::abm::AbmConfig;
use epical::dram::{DramConfig, RunLengthConfig};
use epical::posterior::VariancePrior;
use epical::svi::SviConfig;
use epical::{Bounds, ParameterVector, N_PARAMS};
use serde::{Deserialize, Serialize};

use crate::error::CliError;

pub const ENV_PREFIX: &str = "EPICAL_";

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub bounds: BoundsConfig,
    pub design: DesignConfig,
    pub abm: AbmConfig,
    pub simulate: SimulateConfig,
    pub gp: GpConfig,
    pub observations: ObservationConfig,
    pub posterior: PosteriorConfig,
    pub dram: DramConfig,
    pub run_length: RunLengthConfig,
    pub svi: SviConfig,
    pub metrics: MetricsConfig,
    pub sensitivity: SensitivityConfig,
    pub seeds: SeedConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BoundsConfig {
    pub ranges: Vec<(f64, f64)>,
}

impl Default for BoundsConfig {
    fn default() -> Self {
        Self {
            ranges: Bounds::default_box().ranges,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DesignConfig {
    pub size: usize,
    /// First Halton index (1-based).
    pub start: u64,
}

impl Default for DesignConfig {
    fn default() -> Self {
        Self { size: 700, start: 1 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulateConfig {
    pub n_seeds: usize,
}

impl Default for SimulateConfig {
    fn default() -> Self {
        Self { n_seeds: 50 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GpConfig {
    pub folds: usize,
    pub cv_seed: u64,
    /// Nuggets searched; empty uses `nugget_points` log-spaced values.
    pub nugget_grid: Vec<f64>,
    pub nugget_points: usize,
    /// Fixes both hyperparameters and skips the search when set.
    pub length_scale: Option<f64>,
    pub nugget: Option<f64>,
}

impl Default for GpConfig {
    fn default() -> Self {
        Self {
            folds: 5,
            cv_seed: 0,
            nugget_grid: Vec::new(),
            nugget_points: 12,
            length_scale: None,
            nugget: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ObservationConfig {
    /// Parameters that generate synthetic observations.
    pub truth: [f64; N_PARAMS],
    /// Imports observations from a CSV instead of simulating them.
    pub path: Option<PathBuf>,
    /// Noise standard deviation for hospitalizations and deaths.
    pub noise_sd: [f64; 2],
    pub noise_seed: u64,
    pub n_seeds: usize,
}

impl Default for ObservationConfig {
    fn default() -> Self {
        Self {
            truth: [0.055, 45.0, 0.96, 0.45],
            path: None,
            noise_sd: [0.0, 0.0],
            noise_seed: 0,
            n_seeds: 50,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PosteriorConfig {
    pub prior: VariancePrior,
    pub fd_step: f64,
}

impl Default for PosteriorConfig {
    fn default() -> Self {
        Self {
            prior: VariancePrior::default(),
            fd_step: epical::posterior::DEFAULT_FD_STEP,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetricsConfig {
    pub ensemble_size: usize,
    /// ABM seeds averaged per pushforward member.
    pub pushforward_seeds: usize,
    pub lower_quantile: f64,
    pub upper_quantile: f64,
    pub marginal_bins: usize,
    /// Most rows written per method to the pairwise scatter tables.
    pub scatter_points: usize,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        Self {
            ensemble_size: 100,
            pushforward_seeds: 20,
            lower_quantile: 0.05,
            upper_quantile: 0.95,
            marginal_bins: 50,
            scatter_points: 2000,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SensitivityConfig {
    pub repetitions: usize,
    pub n_base: usize,
    pub per_output: bool,
}

impl Default for SensitivityConfig {
    fn default() -> Self {
        Self {
            repetitions: epical::sensitivity::DEFAULT_REPETITIONS,
            n_base: 4096,
            per_output: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SeedConfig {
    pub dram: u64,
    pub predictive: u64,
    pub pushforward: u64,
    pub rank_ties: u64,
    pub permutation: u64,
    pub sobol: u64,
}

impl Default for SeedConfig {
    fn default() -> Self {
        Self {
            dram: 1,
            predictive: 2,
            pushforward: 3,
            rank_ties: 4,
            permutation: 5,
            sobol: 6,
        }
    }
}

impl ExperimentConfig {
    /// Reads `path` (or the defaults), applies environment overrides and validates.
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let text = match path {
            Some(p) => std::fs::read_to_string(p).map_err(|e| {
                CliError::new("config", "missing_input", format!("cannot read config: {e}")).with("path", p.display())
            })?,
            None => String::new(),
        };
        let overrides: Vec<(String, String)> = std::env::vars().filter(|(k, _)| k.starts_with(ENV_PREFIX)).collect();
        Self::from_toml(&text, &overrides)
    }

    pub fn from_toml(text: &str, overrides: &[(String, String)]) -> Result<Self, CliError> {
        let mut table: toml::Table =
            toml::from_str(text).map_err(|e| CliError::new("config", "invalid_config", e.to_string()))?;
        for (key, raw) in overrides {
            apply_override(&mut table, key, raw)?;
        }
        let config: Self = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| CliError::new("config", "invalid_config", e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let wrap = |section: &str, e: epical::Error| {
            CliError::new("config", "invalid_config", e.to_string()).with("section", section)
        };
        let bounds = self.bounds().map_err(|e| wrap("bounds", e))?;
        if bounds.dim() != N_PARAMS {
            return Err(CliError::new("config", "invalid_config", format!("bounds need {N_PARAMS} ranges")).with("section", "bounds"));
        }
        if self.design.size == 0 {
            return Err(CliError::new("config", "invalid_config", "design size must be at least 1").with("section", "design"));
        }
        if self.design.start == 0 {
            return Err(CliError::new("config", "invalid_config", "Halton indices start at 1").with("section", "design"));
        }
        self.abm.validate().map_err(|e| wrap("abm", e))?;
        if self.simulate.n_seeds == 0 || self.observations.n_seeds == 0 {
            return Err(CliError::new("config", "invalid_config", "n_seeds must be at least 1"));
        }
        if self.gp.length_scale.is_some() != self.gp.nugget.is_some() {
            return Err(CliError::new("config", "invalid_config", "set both gp.length_scale and gp.nugget, or neither").with("section", "gp"));
        }
        if self.gp.nugget_grid.is_empty() && self.gp.nugget_points == 0 {
            return Err(CliError::new("config", "invalid_config", "gp.nugget_points must be at least 1").with("section", "gp"));
        }
        if self.gp.folds < 2 {
            return Err(CliError::new("config", "invalid_config", "gp.folds must be at least 2").with("section", "gp"));
        }
        if !bounds.contains(&self.observations.truth) {
            return Err(CliError::new("config", "invalid_config", "observations.truth lies outside the bounds").with("section", "observations"));
        }
        if self.observations.noise_sd.iter().any(|s| !(s.is_finite() && *s >= 0.0)) {
            return Err(CliError::new("config", "invalid_config", "noise_sd must be finite and non-negative").with("section", "observations"));
        }
        self.posterior.prior.validate().map_err(|e| wrap("posterior", e))?;
        if !(self.posterior.fd_step > 0.0 && self.posterior.fd_step < 0.5) {
            return Err(CliError::new("config", "invalid_config", "fd_step must lie in (0, 0.5)").with("section", "posterior"));
        }
        self.dram.validate(N_PARAMS).map_err(|e| wrap("dram", e))?;
        self.svi.validate().map_err(|e| wrap("svi", e))?;
        let m = &self.metrics;
        if m.ensemble_size < 2 || m.pushforward_seeds == 0 || m.marginal_bins == 0 {
            return Err(CliError::new("config", "invalid_config", "ensemble_size >= 2, pushforward_seeds >= 1 and marginal_bins >= 1 required").with("section", "metrics"));
        }
        if !(0.0 <= m.lower_quantile && m.lower_quantile < m.upper_quantile && m.upper_quantile <= 1.0) {
            return Err(CliError::new("config", "invalid_config", "quantiles must satisfy 0 <= lower < upper <= 1").with("section", "metrics"));
        }
        if self.sensitivity.n_base < epical::sensitivity::MIN_BASE_SAMPLES || self.sensitivity.repetitions == 0 {
            return Err(CliError::new(
                "config",
                "invalid_config",
                format!("sensitivity needs n_base >= {} and repetitions >= 1", epical::sensitivity::MIN_BASE_SAMPLES),
            )
            .with("section", "sensitivity"));
        }
        Ok(())
    }

    pub fn bounds(&self) -> epical::Result<Bounds> {
        Bounds::new(self.bounds.ranges.clone())
    }

    pub fn truth(&self) -> ParameterVector {
        ParameterVector(self.observations.truth)
    }
}

/// Sets `section.key` from an `EPICAL_SECTION__KEY` variable. The value is read
/// as a TOML literal when it parses as one and as a string otherwise.
fn apply_override(table: &mut toml::Table, var: &str, raw: &str) -> Result<(), CliError> {
    let Some(rest) = var.strip_prefix(ENV_PREFIX) else {
        return Ok(());
    };
    let Some((section, key)) = rest.split_once("__") else {
        return Err(CliError::new("config", "invalid_config", "override must look like EPICAL_<SECTION>__<KEY>").with("variable", var));
    };
    let section = section.to_ascii_lowercase();
    let key = key.to_ascii_lowercase();
    let value = match toml::from_str::<toml::Table>(&format!("v = {raw}")) {
        Ok(mut t) => t.remove("v").expect("parsed key"),
        Err(_) => toml::Value::String(raw.to_string()),
    };
    let entry = table
        .entry(section.clone())
        .or_insert_with(|| toml::Value::Table(toml::Table::new()));
    match entry {
        toml::Value::Table(t) => {
            t.insert(key, value);
            Ok(())
        }
        _ => Err(CliError::new("config", "invalid_config", format!("{section} is not a table")).with("variable", var)),
    }
}
