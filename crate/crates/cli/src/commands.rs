//! Subcommand implementations.

use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::Context;
use dkgp_core::checkpoint::Checkpoint;
use dkgp_core::data::{load_csv, save_csv, LongitudinalDataset};
use dkgp_core::experiment::{mean_std, median, run_once, run_repetitions, within_between, RunReport};
use dkgp_core::inference::PosteriorForm;
use dkgp_core::predictor::{correlation_matrix, predict, r_squared, CorrelationOptions, CovarianceMode, PredictOptions};
use dkgp_core::simulator::{generate_seeded, GroundTruth, SimulationSpec};
use dkgp_core::trainer::{Solver, TrainConfig};
use dkgp_core::Error;
use serde::Serialize;

use crate::config::{DataSource, ExperimentConfig, SweepKind};
use crate::output::{pgm_bytes, write_csv, write_json, write_jsonl};

fn out_path(cfg: &ExperimentConfig, name: &str) -> PathBuf {
    cfg.output_dir.join(name)
}

fn fmt(v: f64) -> String {
    v.to_string()
}

pub fn simulate(mut cfg: ExperimentConfig, spec_file: Option<&Path>, seed: Option<u64>) -> anyhow::Result<()> {
    let mut spec = match (spec_file, &cfg.data) {
        (Some(path), _) => {
            let text = std::fs::read_to_string(path).map_err(|e| Error::InvalidConfig(format!("{}: {e}", path.display())))?;
            toml::from_str::<SimulationSpec>(&text).with_context(|| format!("parsing {}", path.display()))?
        }
        (None, DataSource::Simulation(spec)) => spec.clone(),
        (None, DataSource::Csv(_)) => {
            return Err(Error::InvalidConfig("simulate needs a simulation spec, not a CSV source".into()).into());
        }
    };
    if let Some(s) = seed {
        spec.seed = s;
    }
    cfg.data = DataSource::Simulation(spec.clone());
    cfg.write_resolved()?;
    let (data, truth) = generate_seeded(&spec)?;
    let hash = cfg.hash()?;
    save_csv(&data, &out_path(&cfg, "data.csv"), Some(&format!("config_hash={hash}")))?;
    write_json(&out_path(&cfg, "truth.json"), &truth)?;
    eprintln!("wrote {} rows to {}", data.len(), out_path(&cfg, "data.csv").display());
    Ok(())
}

#[derive(Serialize)]
struct FitMetrics {
    seed: u64,
    train_r2: f64,
    valid_r2: f64,
    test_r2: f64,
    epochs: usize,
    best_epoch: usize,
    stopped_early: bool,
    elbo_trace: Vec<f64>,
    valid_r2_trace: Vec<f64>,
    /// Seconds per training iteration (epoch), in order.
    wall_time_per_iteration: Vec<f64>,
    seconds_per_iteration: f64,
    total_seconds: f64,
}

pub fn fit(cfg: ExperimentConfig) -> anyhow::Result<()> {
    cfg.validate()?;
    cfg.write_resolved()?;
    let (data, _) = cfg.load_data()?;
    let (report, outcome, prepared) = run_once(&data, &cfg.train, cfg.seed)?;
    let train_cfg = TrainConfig {
        seed: cfg.seed,
        ..cfg.train.clone()
    };
    let ck = Checkpoint::new(
        outcome.state.clone(),
        train_cfg,
        prepared.preprocess.clone(),
        data.individual_labels.clone(),
    )?;
    ck.save(&out_path(&cfg, "checkpoint.json"))?;
    write_jsonl(&out_path(&cfg, "train_log.jsonl"), &outcome.log)?;
    let metrics = FitMetrics {
        seed: cfg.seed,
        train_r2: report.train_r2,
        valid_r2: report.valid_r2,
        test_r2: report.test_r2,
        epochs: report.epochs,
        best_epoch: report.best_epoch,
        stopped_early: outcome.stopped_early,
        elbo_trace: outcome.log.iter().map(|r| r.elbo).collect(),
        valid_r2_trace: outcome.log.iter().map(|r| r.valid_r2).collect(),
        wall_time_per_iteration: outcome.log.iter().map(|r| r.wall_time).collect(),
        seconds_per_iteration: report.seconds_per_epoch,
        total_seconds: report.total_seconds,
    };
    write_json(&out_path(&cfg, "metrics.json"), &metrics)?;
    eprintln!(
        "train R2 {:.4}  valid R2 {:.4}  test R2 {:.4}  ({} epochs)",
        report.train_r2, report.valid_r2, report.test_r2, report.epochs
    );
    Ok(())
}

/// Raw data for a checkpoint-based command: `--data` if given, else the
/// configured source.
fn command_data(cfg: &ExperimentConfig, data: Option<&Path>) -> anyhow::Result<(LongitudinalDataset, Option<GroundTruth>)> {
    match data {
        Some(path) => Ok((load_csv(path, &cfg.schema())?, None)),
        None => Ok(cfg.load_data()?),
    }
}

pub struct PredictArgs<'a> {
    pub checkpoint: &'a Path,
    pub data: Option<&'a Path>,
    pub output: Option<&'a Path>,
    pub observation_noise: bool,
    pub unseen_fallback: bool,
}

pub fn predict_cmd(cfg: ExperimentConfig, args: PredictArgs) -> anyhow::Result<()> {
    cfg.write_resolved()?;
    let ck = Checkpoint::load(args.checkpoint)?;
    let (raw, _) = command_data(&cfg, args.data)?;
    let prepared = ck.prepare(&raw)?;
    let pred = predict(
        &ck.state,
        &prepared,
        PredictOptions {
            covariance: CovarianceMode::Diagonal,
            observation_noise: args.observation_noise,
            unseen_fallback: args.unseen_fallback,
        },
    )?;
    let offset = ck.preprocess.outcome_mean;
    let header: Vec<String> = ["individual_id", "time", "outcome", "prediction", "variance"].map(String::from).to_vec();
    let rows: Vec<Vec<String>> = (0..raw.len())
        .map(|r| {
            vec![
                raw.individual_labels[raw.individual[r]].clone(),
                fmt(raw.time[r]),
                fmt(raw.y[r]),
                fmt(pred.mean[r] + offset),
                fmt(pred.variance[r]),
            ]
        })
        .collect();
    let path = args.output.map(Path::to_path_buf).unwrap_or_else(|| out_path(&cfg, "predictions.csv"));
    write_csv(&path, &cfg.hash()?, &header, &rows)?;
    eprintln!("wrote {} predictions to {}", rows.len(), path.display());
    Ok(())
}

#[derive(Serialize)]
struct CheckpointScore {
    checkpoint: PathBuf,
    seed: u64,
    rows: usize,
    r2: f64,
    prediction_seconds: f64,
}

#[derive(Serialize)]
struct RepetitionReport {
    repetitions: usize,
    runs: Vec<RunReport>,
    test_r2_mean: f64,
    test_r2_std: f64,
    test_r2_median: f64,
    valid_r2_mean: f64,
    seconds_per_iteration: f64,
}

fn summarize(runs: Vec<RunReport>) -> RepetitionReport {
    let test: Vec<f64> = runs.iter().map(|r| r.test_r2).collect();
    let valid: Vec<f64> = runs.iter().map(|r| r.valid_r2).collect();
    let (mean, std) = mean_std(&test);
    RepetitionReport {
        repetitions: runs.len(),
        test_r2_mean: mean,
        test_r2_std: std,
        test_r2_median: median(&test),
        valid_r2_mean: mean_std(&valid).0,
        seconds_per_iteration: mean_std(&runs.iter().map(|r| r.seconds_per_epoch).collect::<Vec<_>>()).0,
        runs,
    }
}

fn run_rows(runs: &[RunReport]) -> (Vec<String>, Vec<Vec<String>>) {
    let header = ["seed", "train_r2", "valid_r2", "test_r2", "epochs", "best_epoch", "seconds_per_iteration"]
        .map(String::from)
        .to_vec();
    let rows = runs
        .iter()
        .map(|r| {
            vec![
                r.seed.to_string(),
                fmt(r.train_r2),
                fmt(r.valid_r2),
                fmt(r.test_r2),
                r.epochs.to_string(),
                r.best_epoch.to_string(),
                fmt(r.seconds_per_epoch),
            ]
        })
        .collect();
    (header, rows)
}

pub fn evaluate(cfg: ExperimentConfig, checkpoint: Option<&Path>, data: Option<&Path>, unseen_fallback: bool) -> anyhow::Result<()> {
    cfg.validate()?;
    cfg.write_resolved()?;
    let path = out_path(&cfg, "evaluation.json");
    if let Some(ck_path) = checkpoint {
        let ck = Checkpoint::load(ck_path)?;
        let (raw, _) = command_data(&cfg, data)?;
        let prepared = ck.prepare(&raw)?;
        let started = Instant::now();
        let pred = predict(
            &ck.state,
            &prepared,
            PredictOptions {
                covariance: CovarianceMode::None,
                observation_noise: false,
                unseen_fallback,
            },
        )?;
        let score = CheckpointScore {
            checkpoint: ck_path.to_path_buf(),
            seed: ck.config.seed,
            rows: prepared.len(),
            r2: r_squared(&pred.mean, &prepared.y)?,
            prediction_seconds: started.elapsed().as_secs_f64(),
        };
        eprintln!("R2 {:.6} over {} rows", score.r2, score.rows);
        return write_json(&path, &score);
    }
    let (raw, _) = cfg.load_data()?;
    let report = summarize(run_repetitions(&raw, &cfg.train, cfg.seed, cfg.repetitions)?);
    let (header, rows) = run_rows(&report.runs);
    write_csv(&out_path(&cfg, "runs.csv"), &cfg.hash()?, &header, &rows)?;
    eprintln!(
        "test R2 {:.4} +- {:.4} (median {:.4}) over {} runs",
        report.test_r2_mean, report.test_r2_std, report.test_r2_median, report.repetitions
    );
    write_json(&path, &report)
}

#[derive(Serialize)]
struct SweepEntry {
    setting: String,
    inducing_points: usize,
    solver: Solver,
    max_epochs: usize,
    #[serde(flatten)]
    report: RepetitionReport,
}

pub fn sweep(cfg: ExperimentConfig) -> anyhow::Result<()> {
    cfg.validate()?;
    let settings: Vec<(String, TrainConfig)> = match cfg.sweep.kind {
        SweepKind::InducingPoints => {
            if cfg.sweep.grid.is_empty() {
                return Err(Error::InvalidConfig("inducing-point grid is empty".into()).into());
            }
            cfg.sweep
                .grid
                .iter()
                .map(|&m| {
                    (
                        format!("m={m}"),
                        TrainConfig {
                            inducing_points: m,
                            ..cfg.train.clone()
                        },
                    )
                })
                .collect()
        }
        SweepKind::Solver => {
            let base = cfg.train.clone();
            let sampling = |m: usize, epochs: usize| TrainConfig {
                solver: Solver::Sampling,
                inducing_points: m,
                max_epochs: epochs,
                posterior: dkgp_core::inference::PosteriorOptions {
                    form: PosteriorForm::Diagonal,
                    ..base.posterior
                },
                ..base.clone()
            };
            let large = cfg.sweep.large_inducing_points;
            let long = base.max_epochs * cfg.sweep.epoch_multiplier;
            vec![
                (
                    "closed-form".into(),
                    TrainConfig {
                        solver: Solver::ClosedForm,
                        inducing_points: 10,
                        ..base.clone()
                    },
                ),
                ("sampling".into(), sampling(10, base.max_epochs)),
                (format!("sampling-m{large}-x{}", cfg.sweep.epoch_multiplier), sampling(large, long)),
            ]
        }
    };
    for (_, t) in &settings {
        t.validate()?;
    }
    cfg.write_resolved()?;
    let (raw, _) = cfg.load_data()?;
    let mut entries = Vec::new();
    for (setting, t) in settings {
        let report = summarize(run_repetitions(&raw, &t, cfg.seed, cfg.repetitions)?);
        eprintln!("{setting}: median test R2 {:.4}", report.test_r2_median);
        entries.push(SweepEntry {
            setting,
            inducing_points: t.inducing_points,
            solver: t.solver,
            max_epochs: t.max_epochs,
            report,
        });
    }
    let header = [
        "setting",
        "inducing_points",
        "solver",
        "max_epochs",
        "median_test_r2",
        "mean_test_r2",
        "std_test_r2",
        "seconds_per_iteration",
    ]
    .map(String::from)
    .to_vec();
    let rows: Vec<Vec<String>> = entries
        .iter()
        .map(|e| {
            vec![
                e.setting.clone(),
                e.inducing_points.to_string(),
                match e.solver {
                    Solver::ClosedForm => "closed-form".into(),
                    Solver::Sampling => "sampling".into(),
                },
                e.max_epochs.to_string(),
                fmt(e.report.test_r2_median),
                fmt(e.report.test_r2_mean),
                fmt(e.report.test_r2_std),
                fmt(e.report.seconds_per_iteration),
            ]
        })
        .collect();
    write_csv(&out_path(&cfg, "sweep.csv"), &cfg.hash()?, &header, &rows)?;
    write_json(&out_path(&cfg, "sweep.json"), &entries)
}

pub struct CorrelationArgs<'a> {
    pub checkpoint: &'a Path,
    pub data: Option<&'a Path>,
    pub truth: Option<&'a Path>,
    pub include_noise: bool,
    pub cap: Option<usize>,
    pub unseen_fallback: bool,
}

#[derive(Serialize)]
struct CorrelationSummary {
    rows: usize,
    within_cluster_mean: f64,
    between_cluster_mean: f64,
    difference: f64,
}

pub fn export_correlation(cfg: ExperimentConfig, args: CorrelationArgs) -> anyhow::Result<()> {
    cfg.write_resolved()?;
    let ck = Checkpoint::load(args.checkpoint)?;
    let (raw, generated) = command_data(&cfg, args.data)?;
    let truth = match args.truth {
        Some(p) => Some(serde_json::from_str::<GroundTruth>(&std::fs::read_to_string(p)?).map_err(|e| Error::Parse {
            row: e.line(),
            column: "truth".into(),
            message: e.to_string(),
        })?),
        None => generated,
    };
    let prepared = ck.prepare(&raw)?;
    let defaults = CorrelationOptions::default();
    let corr = correlation_matrix(
        &ck.state,
        &prepared,
        CorrelationOptions {
            cap: args.cap.unwrap_or(defaults.cap),
            include_noise: args.include_noise,
            unseen_fallback: args.unseen_fallback,
        },
    )?;
    let n = corr.rows();
    let mut header = vec!["row".to_string()];
    header.extend((0..n).map(|j| j.to_string()));
    let rows: Vec<Vec<String>> = (0..n)
        .map(|i| {
            let mut r = vec![i.to_string()];
            r.extend(corr.row(i).iter().map(|&v| fmt(v)));
            r
        })
        .collect();
    let hash = cfg.hash()?;
    write_csv(&out_path(&cfg, "correlation.csv"), &hash, &header, &rows)?;
    std::fs::write(out_path(&cfg, "correlation.pgm"), pgm_bytes(&corr))?;
    if let Some(truth) = truth {
        let labels = prepared
            .individual
            .iter()
            .map(|&i| {
                truth.cluster_labels.get(i).copied().ok_or(Error::UnknownEntity {
                    id: i,
                    max: truth.cluster_labels.len(),
                })
            })
            .collect::<Result<Vec<_>, _>>()?;
        let (w, b) = within_between(&corr, &labels);
        eprintln!("within {w:.4}  between {b:.4}  difference {:.4}", w - b);
        write_json(
            &out_path(&cfg, "correlation_summary.json"),
            &CorrelationSummary {
                rows: n,
                within_cluster_mean: w,
                between_cluster_mean: b,
                difference: w - b,
            },
        )?;
    }
    Ok(())
}
