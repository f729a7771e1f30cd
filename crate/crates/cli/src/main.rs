//! `dkgp`: simulate, fit, predict, evaluate, sweep and export correlations.
//!
//! Exit codes: 0 success, 2 configuration error, 3 data error, 4 numerical
//! failure, 1 anything else.

mod commands;
mod config;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use dkgp_core::inference::PosteriorForm;
use dkgp_core::trainer::{KernelVariant, Solver};

use crate::commands::{CorrelationArgs, PredictArgs};
use crate::config::{ExperimentConfig, SweepKind};

#[derive(Debug, Clone, Copy, ValueEnum)]
enum SolverArg {
    ClosedForm,
    Sampling,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum SweepArg {
    InducingPoints,
    Solver,
}

#[derive(Parser)]
#[command(name = "dkgp", version, about = "Longitudinal deep-kernel GP regression")]
struct Cli {
    /// Experiment configuration (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Split and initialization seed; for `simulate`, the generator seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads.
    #[arg(long, global = true, env = "DKGP_THREADS")]
    threads: Option<usize>,
    /// Output directory, overriding the configuration.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Drop the time-invariant (individual embedding) kernel.
    #[arg(long, global = true, conflicts_with_all = ["no_time_varying", "rbf_only"])]
    no_time_invariant: bool,
    /// Drop the time-varying (encoder) kernel.
    #[arg(long, global = true, conflicts_with = "rbf_only")]
    no_time_varying: bool,
    /// Bypass the encoder: SE kernel on the raw covariates.
    #[arg(long, global = true)]
    rbf_only: bool,
    #[arg(long, global = true, value_enum)]
    solver: Option<SolverArg>,
    /// Full lower-triangular variational factor instead of a diagonal one.
    #[arg(long, global = true)]
    full_lq: bool,
    /// Monte-Carlo samples per step of the sampling solver.
    #[arg(long, global = true)]
    mc_samples: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a simulated dataset with its ground-truth sidecar.
    Simulate {
        /// Simulation spec (TOML); defaults to the configured one.
        spec: Option<PathBuf>,
    },
    /// Train one model; writes a checkpoint, log and metrics.
    Fit,
    /// Predict outcomes for a dataset from a checkpoint.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Output CSV; defaults to predictions.csv in the output directory.
        #[arg(long)]
        output: Option<PathBuf>,
        /// Report outcome rather than signal variance.
        #[arg(long)]
        observation_noise: bool,
        /// Use the mean embedding for individuals not seen in training.
        #[arg(long)]
        unseen_fallback: bool,
    },
    /// Score a checkpoint, or run the configured repetitions.
    Evaluate {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, requires = "checkpoint")]
        data: Option<PathBuf>,
        #[arg(long)]
        unseen_fallback: bool,
    },
    /// R^2 across inducing-point counts or solvers.
    Sweep {
        #[arg(long, value_enum)]
        kind: Option<SweepArg>,
        /// Comma-separated inducing-point counts.
        #[arg(long, value_delimiter = ',', num_args = 0..)]
        grid: Option<Vec<usize>>,
    },
    /// Learned outcome correlation as CSV and a PGM heatmap.
    ExportCorrelation {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Ground-truth sidecar for within/between cluster summaries.
        #[arg(long)]
        truth: Option<PathBuf>,
        /// Correlate outcomes (signal plus noise) instead of the signal.
        #[arg(long)]
        include_noise: bool,
        /// Largest number of rows allowed.
        #[arg(long)]
        cap: Option<usize>,
        #[arg(long)]
        unseen_fallback: bool,
    },
}

fn resolve(cli: &Cli) -> anyhow::Result<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(out) = &cli.out {
        cfg.output_dir = out.clone();
    }
    if !matches!(cli.command, Command::Simulate { .. }) {
        if let Some(s) = cli.seed {
            cfg.seed = s;
        }
    }
    let t = &mut cfg.train;
    if cli.no_time_invariant {
        t.variant = KernelVariant::NoTimeInvariant;
    } else if cli.no_time_varying {
        t.variant = KernelVariant::NoTimeVarying;
    } else if cli.rbf_only {
        t.variant = KernelVariant::RbfOnly;
    }
    match cli.solver {
        Some(SolverArg::ClosedForm) => t.solver = Solver::ClosedForm,
        Some(SolverArg::Sampling) => t.solver = Solver::Sampling,
        None => {}
    }
    if cli.full_lq {
        t.posterior.form = PosteriorForm::Full;
    }
    if let Some(s) = cli.mc_samples {
        t.mc_samples = s;
    }
    if let Command::Sweep { kind, grid } = &cli.command {
        match kind {
            Some(SweepArg::InducingPoints) => cfg.sweep.kind = SweepKind::InducingPoints,
            Some(SweepArg::Solver) => cfg.sweep.kind = SweepKind::Solver,
            None => {}
        }
        if let Some(g) = grid {
            cfg.sweep.grid = g.clone();
        }
    }
    Ok(cfg)
}

fn run(cli: Cli) -> anyhow::Result<()> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| dkgp_core::Error::InvalidConfig(format!("thread pool: {e}")))?;
    }
    let cfg = resolve(&cli)?;
    match &cli.command {
        Command::Simulate { spec } => commands::simulate(cfg, spec.as_deref(), cli.seed),
        Command::Fit => commands::fit(cfg),
        Command::Predict {
            checkpoint,
            data,
            output,
            observation_noise,
            unseen_fallback,
        } => commands::predict_cmd(
            cfg,
            PredictArgs {
                checkpoint,
                data: data.as_deref(),
                output: output.as_deref(),
                observation_noise: *observation_noise,
                unseen_fallback: *unseen_fallback,
            },
        ),
        Command::Evaluate {
            checkpoint,
            data,
            unseen_fallback,
        } => commands::evaluate(cfg, checkpoint.as_deref(), data.as_deref(), *unseen_fallback),
        Command::Sweep { .. } => commands::sweep(cfg),
        Command::ExportCorrelation {
            checkpoint,
            data,
            truth,
            include_noise,
            cap,
            unseen_fallback,
        } => commands::export_correlation(
            cfg,
            CorrelationArgs {
                checkpoint,
                data: data.as_deref(),
                truth: truth.as_deref(),
                include_noise: *include_noise,
                cap: *cap,
                unseen_fallback: *unseen_fallback,
            },
        ),
    }
}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<dkgp_core::Error>() {
            return if e.is_config() {
                2
            } else if e.is_data() {
                3
            } else if e.is_numeric() {
                4
            } else {
                1
            };
        }
        if cause.downcast_ref::<toml::de::Error>().is_some() {
            return 2;
        }
    }
    1
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use dkgp_core::Error;

    #[test]
    fn exit_codes_by_category() {
        assert_eq!(exit_code(&Error::InvalidSpec("c".into()).into()), 2);
        assert_eq!(exit_code(&Error::MissingColumn("x".into()).into()), 3);
        assert_eq!(exit_code(&Error::DegenerateTarget.into()), 4);
        let toml_err = toml::from_str::<ExperimentConfig>("seed = \"x\"").unwrap_err();
        assert_eq!(exit_code(&anyhow::Error::from(toml_err).context("loading")), 2);
        assert_eq!(exit_code(&anyhow::anyhow!("other")), 1);
    }

    #[test]
    fn flags_override_config() {
        let cli = Cli::parse_from(["dkgp", "--seed", "7", "--rbf-only", "--full-lq", "--solver", "closed-form", "fit"]);
        let cfg = resolve(&cli).unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.train.variant, KernelVariant::RbfOnly);
        assert_eq!(cfg.train.posterior.form, PosteriorForm::Full);
        assert!(Cli::try_parse_from(["dkgp", "--rbf-only", "--no-time-varying", "fit"]).is_err());
    }
}
