use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

mod compare;
mod config;
mod error;
mod manifest;
mod samples;
mod stages;

use config::ExperimentConfig;
use error::{CliError, CliResult};
use stages::Context;

/// Surrogate-based calibration of a stochastic epidemic ABM.
#[derive(Parser, Debug)]
#[command(name = "epical", version)]
struct Cli {
    /// TOML experiment configuration; `EPICAL_<SECTION>__<KEY>` variables override it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Worker threads (default: available cores). Results do not depend on it.
    #[arg(long, global = true)]
    threads: Option<usize>,

    /// Record wall-clock durations in run manifests.
    #[arg(long, global = true)]
    record_timing: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct PosteriorInputs {
    /// Directory written by `train-gp`.
    #[arg(long)]
    model: PathBuf,
    /// Directory written by `simulate`.
    #[arg(long)]
    dataset: PathBuf,
    /// Directory written by `make-obs`.
    #[arg(long)]
    obs: PathBuf,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Halton design over the parameter bounds.
    Design {
        #[arg(long)]
        out: PathBuf,
        /// Number of points (overrides design.size).
        #[arg(long)]
        n: Option<usize>,
        /// First Halton index (overrides design.start).
        #[arg(long)]
        start: Option<u64>,
    },
    /// Seed-averaged ABM responses for every design row.
    Simulate {
        #[arg(long)]
        design: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Seeds per row (overrides simulate.n_seeds).
        #[arg(long)]
        n_seeds: Option<usize>,
    },
    /// Hyperparameter search, surrogate fit and cross-validation.
    TrainGp {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Synthetic observations at a known parameter vector, or an imported file.
    MakeObs {
        #[arg(long)]
        out: PathBuf,
        /// Comma-separated truth (overrides observations.truth).
        #[arg(long, value_delimiter = ',')]
        truth: Option<Vec<f64>>,
        /// Comma-separated noise sd for hospitalizations and deaths.
        #[arg(long, value_delimiter = ',')]
        noise_sd: Option<Vec<f64>>,
        #[arg(long)]
        noise_seed: Option<u64>,
        /// Import observations from this CSV instead of simulating.
        #[arg(long)]
        from: Option<PathBuf>,
    },
    /// Delayed-rejection adaptive Metropolis on the surrogate posterior.
    CalibrateDram {
        #[command(flatten)]
        inputs: PosteriorInputs,
        #[arg(long)]
        out: PathBuf,
        /// Iterations (overrides dram.samples).
        #[arg(long)]
        samples: Option<usize>,
    },
    /// Stein variational gradient descent on the surrogate posterior.
    CalibrateSvi {
        #[command(flatten)]
        inputs: PosteriorInputs,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        particles: Option<usize>,
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Permutation importance and Sobol indices of the surrogate.
    Sensitivity {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Scores two posterior sample files against the observations and each other.
    Compare {
        /// Chain or particle CSV labelled `dram` in the outputs.
        #[arg(long)]
        dram: PathBuf,
        /// Chain or particle CSV labelled `svi` in the outputs.
        #[arg(long)]
        svi: PathBuf,
        #[command(flatten)]
        inputs: PosteriorInputs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Every stage in order under one directory.
    Pipeline {
        #[arg(long)]
        out: PathBuf,
    },
}

impl Command {
    fn stage(&self) -> &'static str {
        match self {
            Command::Design { .. } => "design",
            Command::Simulate { .. } => "simulate",
            Command::TrainGp { .. } => "train-gp",
            Command::MakeObs { .. } => "make-obs",
            Command::CalibrateDram { .. } => "calibrate-dram",
            Command::CalibrateSvi { .. } => "calibrate-svi",
            Command::Sensitivity { .. } => "sensitivity",
            Command::Compare { .. } => "compare",
            Command::Pipeline { .. } => "pipeline",
        }
    }
}

fn exact<const N: usize>(stage: &str, flag: &str, values: &[f64]) -> CliResult<[f64; N]> {
    values.try_into().map_err(|_| {
        CliError::new(stage, "invalid_input", format!("{flag} takes {N} comma-separated values"))
            .with("given", values.len())
    })
}

fn run(cli: Cli) -> CliResult<()> {
    let stage = cli.command.stage();
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(CliError::new(stage, "invalid_input", "--threads must be at least 1"));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::new(stage, "internal", e.to_string()))?;
    }
    let mut config = ExperimentConfig::load(cli.config.as_deref())?;
    match &cli.command {
        Command::Simulate { n_seeds: Some(n), .. } => config.simulate.n_seeds = *n,
        Command::MakeObs {
            truth,
            noise_sd,
            noise_seed,
            from,
            ..
        } => {
            if let Some(t) = truth {
                config.observations.truth = exact(stage, "--truth", t)?;
            }
            if let Some(s) = noise_sd {
                config.observations.noise_sd = exact(stage, "--noise-sd", s)?;
            }
            if let Some(s) = noise_seed {
                config.observations.noise_seed = *s;
            }
            if from.is_some() {
                config.observations.path = from.clone();
            }
        }
        Command::CalibrateDram { samples: Some(k), .. } => config.dram.samples = *k,
        Command::CalibrateSvi { particles, steps, .. } => {
            if let Some(m) = particles {
                config.svi.particles = *m;
            }
            if let Some(t) = steps {
                config.svi.steps = *t;
            }
        }
        _ => {}
    }
    config.validate()?;
    let ctx = Context {
        config,
        record_timing: cli.record_timing,
    };
    match cli.command {
        Command::Design { out, n, start } => stages::design(&ctx, &out, n, start).map(drop),
        Command::Simulate { design, out, .. } => stages::simulate(&ctx, &design, &out).map(drop),
        Command::TrainGp { dataset, out } => stages::train_gp(&ctx, &dataset, &out).map(drop),
        Command::MakeObs { out, .. } => stages::make_obs(&ctx, &out).map(drop),
        Command::CalibrateDram { inputs, out, .. } => {
            stages::calibrate_dram(&ctx, &inputs.model, &inputs.dataset, &inputs.obs, &out).map(drop)
        }
        Command::CalibrateSvi { inputs, out, .. } => {
            stages::calibrate_svi(&ctx, &inputs.model, &inputs.dataset, &inputs.obs, &out).map(drop)
        }
        Command::Sensitivity { model, dataset, out } => stages::sensitivity(&ctx, &model, &dataset, &out).map(drop),
        Command::Compare { dram, svi, inputs, out } => {
            stages::compare(&ctx, &dram, &svi, &inputs.model, &inputs.dataset, &inputs.obs, &out).map(drop)
        }
        Command::Pipeline { out } => stages::pipeline(&ctx, &out),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", e.to_json());
            ExitCode::FAILURE
        }
    }
}
