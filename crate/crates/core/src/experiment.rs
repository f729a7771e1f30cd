//! End-to-end runs: split, preprocess, train, score.

use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{split, LongitudinalDataset, PreprocessSpec, DEFAULT_FRACTIONS};
use crate::error::{Error, Result};
use crate::predictor::{predict_mean, r_squared};
use crate::simulator::{generate_seeded, GroundTruth, SimulationSpec};
use crate::trainer::{train, TrainConfig, TrainOutcome};

/// Preprocessed train/validation/test sets and the frozen transform.
#[derive(Debug, Clone)]
pub struct PreparedSplit {
    pub train: LongitudinalDataset,
    pub valid: LongitudinalDataset,
    pub test: LongitudinalDataset,
    pub preprocess: PreprocessSpec,
}

pub fn prepare(data: &LongitudinalDataset, fractions: [f64; 3], seed: u64) -> Result<PreparedSplit> {
    let (train, valid, test) = split(data, fractions, seed)?;
    let preprocess = PreprocessSpec::fit(&train)?;
    Ok(PreparedSplit {
        train: preprocess.apply(&train)?,
        valid: preprocess.apply(&valid)?,
        test: preprocess.apply(&test)?,
        preprocess,
    })
}

/// Scores of one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub seed: u64,
    pub train_r2: f64,
    pub valid_r2: f64,
    pub test_r2: f64,
    pub epochs: usize,
    pub best_epoch: usize,
    /// Mean wall time of one training epoch, seconds.
    pub seconds_per_epoch: f64,
    pub total_seconds: f64,
}

/// Split with `seed`, train with `cfg.seed = seed`, and score every split.
pub fn run_once(data: &LongitudinalDataset, cfg: &TrainConfig, seed: u64) -> Result<(RunReport, TrainOutcome, PreparedSplit)> {
    let started = Instant::now();
    let prepared = prepare(data, DEFAULT_FRACTIONS, seed)?;
    let cfg = TrainConfig { seed, ..cfg.clone() };
    let outcome = train(&cfg, &prepared.train, &prepared.valid)?;
    let score = |d: &LongitudinalDataset| -> Result<f64> { r_squared(&predict_mean(&outcome.state, d, false)?, &d.y) };
    let epochs = outcome.log.len();
    let report = RunReport {
        seed,
        train_r2: score(&prepared.train)?,
        valid_r2: score(&prepared.valid)?,
        test_r2: score(&prepared.test)?,
        epochs,
        best_epoch: outcome.best_epoch,
        seconds_per_epoch: outcome.log.iter().map(|r| r.wall_time).sum::<f64>() / epochs as f64,
        total_seconds: started.elapsed().as_secs_f64(),
    };
    Ok((report, outcome, prepared))
}

/// Independent runs with seeds `first_seed..first_seed + repetitions`,
/// executed in parallel and returned in seed order.
pub fn run_repetitions(data: &LongitudinalDataset, cfg: &TrainConfig, first_seed: u64, repetitions: usize) -> Result<Vec<RunReport>> {
    if repetitions == 0 {
        return Err(Error::InvalidConfig("repetitions must be at least 1".into()));
    }
    (0..repetitions as u64)
        .into_par_iter()
        .map(|k| run_once(data, cfg, first_seed + k).map(|r| r.0))
        .collect()
}

/// Simulated dataset for `spec` plus repeated runs on it.
pub fn simulate_and_run(
    spec: &SimulationSpec,
    cfg: &TrainConfig,
    first_seed: u64,
    repetitions: usize,
) -> Result<(Vec<RunReport>, GroundTruth)> {
    let (data, truth) = generate_seeded(spec)?;
    Ok((run_repetitions(&data, cfg, first_seed, repetitions)?, truth))
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        return f64::NAN;
    }
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Mean and sample standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = if values.len() > 1 {
        values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (mean, var.sqrt())
}

/// Mean learned correlation among row pairs with equal and with different
/// labels (diagonal excluded).
pub fn within_between(corr: &crate::numerics::DenseMatrix, labels: &[usize]) -> (f64, f64) {
    let (mut w, mut nw, mut b, mut nb) = (0.0, 0usize, 0.0, 0usize);
    for i in 0..labels.len() {
        for j in 0..labels.len() {
            if i == j {
                continue;
            }
            if labels[i] == labels[j] {
                w += corr[(i, j)];
                nw += 1;
            } else {
                b += corr[(i, j)];
                nb += 1;
            }
        }
    }
    (w / nw.max(1) as f64, b / nb.max(1) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn summary_statistics() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
        let (m, s) = mean_std(&[1.0, 2.0, 3.0]);
        assert_eq!((m, s), (2.0, 1.0));
        let c = crate::numerics::DenseMatrix::from_rows(&[vec![1.0, 0.8, 0.1], vec![0.8, 1.0, 0.3], vec![0.1, 0.3, 1.0]]).unwrap();
        let (w, b) = within_between(&c, &[0, 0, 1]);
        assert!((w - 0.8).abs() < 1e-15 && (b - 0.2).abs() < 1e-15);
    }

    #[test]
    fn short_run_produces_report() {
        let spec = SimulationSpec {
            individuals: 6,
            observations: 6,
            covariates: 4,
            ..SimulationSpec::default()
        };
        let cfg = TrainConfig {
            max_epochs: 3,
            ..TrainConfig::default()
        };
        let (reports, truth) = simulate_and_run(&spec, &cfg, 0, 2).unwrap();
        assert_eq!(reports.len(), 2);
        assert_eq!(reports[1].seed, 1);
        assert_eq!(truth.cluster_labels.len(), 6);
        assert!(reports.iter().all(|r| r.seconds_per_epoch > 0.0 && r.epochs <= 3));
        assert!(simulate_and_run(&spec, &cfg, 0, 0).is_err());
    }
}
