//! Synthetic longitudinal data with known correlation structure.
//!
//! Covariates come from a random network over uniform base features, the
//! outcome signal from a second random network, and the residual is Gaussian
//! with AR(1) correlation inside each individual plus, optionally, a shared
//! unit-variance effect among individuals of the same cluster.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::{Column, LongitudinalDataset};
use crate::encoder::Layer;
use crate::error::{Error, Result};
use crate::numerics::{add_jitter, cholesky, DenseMatrix, LowerTriangular};

/// Diagonal jitter added to the residual covariance before factorizing.
pub const RESIDUAL_JITTER: f64 = 1e-6;
const HIDDEN: usize = 100;
const COVARIATE_DROPOUT: f64 = 0.7;
const BATCH_NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulationSpec {
    pub individuals: usize,
    pub observations: usize,
    pub covariates: usize,
    pub base_features: usize,
    /// `0` for longitudinal correlation only, otherwise at least 2.
    pub clusters: usize,
    pub ar_decay: f64,
    /// Multiplies the correlated residual.
    pub residual_scale: f64,
    /// Standard deviation of the noiseless signal across the dataset.
    pub signal_scale: f64,
    pub seed: u64,
}

impl Default for SimulationSpec {
    fn default() -> Self {
        SimulationSpec {
            individuals: 40,
            observations: 20,
            covariates: 30,
            base_features: 10,
            clusters: 0,
            ar_decay: 0.9,
            residual_scale: 1.0,
            signal_scale: 3.0,
            seed: 0,
        }
    }
}

impl SimulationSpec {
    pub fn validate(&self) -> Result<()> {
        if self.individuals == 0 || self.observations == 0 || self.covariates == 0 || self.base_features == 0 {
            return Err(Error::InvalidSpec("sizes must be at least 1".into()));
        }
        if self.clusters == 1 {
            return Err(Error::InvalidSpec("clusters must be 0 (none) or at least 2".into()));
        }
        if self.clusters > self.individuals {
            return Err(Error::InvalidSpec(format!(
                "{} clusters for {} individuals",
                self.clusters, self.individuals
            )));
        }
        if !(0.0..1.0).contains(&self.ar_decay) {
            return Err(Error::InvalidSpec(format!("AR decay {} outside [0, 1)", self.ar_decay)));
        }
        if !(self.residual_scale >= 0.0 && self.residual_scale.is_finite()) || !(self.signal_scale >= 0.0 && self.signal_scale.is_finite()) {
            return Err(Error::InvalidSpec("scales must be finite and non-negative".into()));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.individuals * self.observations
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Cluster of each individual: contiguous, nearly equal groups.
    pub fn cluster_labels(&self) -> Vec<usize> {
        (0..self.individuals)
            .map(|i| if self.clusters == 0 { 0 } else { i * self.clusters / self.individuals })
            .collect()
    }
}

/// Residual covariance over all `I x obs` rows (individual-major order).
pub fn build_covariance(spec: &SimulationSpec) -> Result<DenseMatrix> {
    spec.validate()?;
    let n = spec.len();
    let obs = spec.observations;
    let labels = spec.cluster_labels();
    Ok(DenseMatrix::from_fn(n, n, |a, b| {
        let (ia, ib) = (a / obs, b / obs);
        let mut v = 0.0;
        if ia == ib {
            v += spec.ar_decay.powi((a % obs).abs_diff(b % obs) as i32);
        }
        if spec.clusters >= 2 && labels[ia] == labels[ib] {
            v += 1.0;
        }
        v
    }))
}

/// Evaluation-only information about a simulated dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    /// Cluster of each individual (all zero without clusters).
    pub cluster_labels: Vec<usize>,
    /// Noiseless signal `f(X)` per row.
    pub signal: Vec<f64>,
    pub spec: SimulationSpec,
}

impl GroundTruth {
    /// Cluster of each observation row.
    pub fn row_clusters(&self, data: &LongitudinalDataset) -> Vec<usize> {
        data.individual.iter().map(|&i| self.cluster_labels[i]).collect()
    }
}

fn tanh_layer(layer: &Layer, x: &[f64]) -> Vec<f64> {
    layer.apply(x).into_iter().map(f64::tanh).collect()
}

/// Covariates from base features: `tanh`, dropout sampled once per element,
/// batch normalization with the statistics of the generated batch, `tanh`.
fn covariate_network(spec: &SimulationSpec, base: &DenseMatrix, rng: &mut dyn RngCore) -> DenseMatrix {
    let first = Layer::init_uniform(spec.base_features, HIDDEN, rng);
    let second = Layer::init_uniform(HIDDEN, spec.covariates, rng);
    let n = base.rows();
    let keep = 1.0 - COVARIATE_DROPOUT;
    let mut hidden = DenseMatrix::zeros(n, HIDDEN);
    for r in 0..n {
        let h = tanh_layer(&first, base.row(r));
        for (c, v) in h.into_iter().enumerate() {
            let mask = if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 };
            hidden[(r, c)] = v * mask;
        }
    }
    for c in 0..HIDDEN {
        let col = hidden.col(c);
        let mean = col.iter().sum::<f64>() / n as f64;
        let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
        let inv = 1.0 / (var + BATCH_NORM_EPS).sqrt();
        for r in 0..n {
            hidden[(r, c)] = (hidden[(r, c)] - mean) * inv;
        }
    }
    let mut x = DenseMatrix::zeros(n, spec.covariates);
    for r in 0..n {
        x.row_mut(r).copy_from_slice(&tanh_layer(&second, hidden.row(r)));
    }
    x
}

/// Noiseless signal, standardized to mean 0 and standard deviation
/// `spec.signal_scale` over the dataset.
fn outcome_network(spec: &SimulationSpec, x: &DenseMatrix, rng: &mut dyn RngCore) -> Vec<f64> {
    let first = Layer::init_uniform(spec.covariates, HIDDEN, rng);
    let second = Layer::init_uniform(HIDDEN, 1, rng);
    let raw: Vec<f64> = (0..x.rows()).map(|r| second.apply(&tanh_layer(&first, x.row(r)))[0]).collect();
    let n = raw.len() as f64;
    let mean = raw.iter().sum::<f64>() / n;
    let sd = (raw.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
    let scale = if sd > 0.0 { spec.signal_scale / sd } else { 0.0 };
    raw.iter().map(|v| (v - mean) * scale).collect()
}

/// Factor used to draw residuals.
pub fn residual_factor(spec: &SimulationSpec) -> Result<LowerTriangular> {
    cholesky(&add_jitter(&build_covariance(spec)?, RESIDUAL_JITTER))
}

/// One draw of the scaled residual `residual_scale * L e`.
pub fn sample_residual(spec: &SimulationSpec, factor: &LowerTriangular, rng: &mut dyn RngCore) -> Vec<f64> {
    let e: Vec<f64> = (0..factor.dim()).map(|_| StandardNormal.sample(rng)).collect();
    let dense = factor.to_dense();
    dense.matvec(&e).expect("square factor").into_iter().map(|v| v * spec.residual_scale).collect()
}

pub fn generate(spec: &SimulationSpec, rng: &mut dyn RngCore) -> Result<(LongitudinalDataset, GroundTruth)> {
    spec.validate()?;
    let n = spec.len();
    let base = DenseMatrix::from_fn(n, spec.base_features, |_, _| rng.random::<f64>());
    let x = covariate_network(spec, &base, rng);
    let signal = outcome_network(spec, &x, rng);
    let factor = residual_factor(spec)?;
    let eps = sample_residual(spec, &factor, rng);
    let y: Vec<f64> = signal.iter().zip(&eps).map(|(f, e)| f + e).collect();
    let individual: Vec<usize> = (0..n).map(|r| r / spec.observations).collect();
    let time: Vec<f64> = (0..n).map(|r| (r % spec.observations) as f64).collect();
    let mut data = LongitudinalDataset::new(individual, time, x, y)?;
    data.columns = (1..=spec.covariates).map(|j| Column::continuous(format!("x{j}"))).collect();
    let truth = GroundTruth {
        cluster_labels: spec.cluster_labels(),
        signal,
        spec: spec.clone(),
    };
    Ok((data, truth))
}

/// [`generate`] with a generator seeded from `spec.seed`.
pub fn generate_seeded(spec: &SimulationSpec) -> Result<(LongitudinalDataset, GroundTruth)> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    generate(spec, &mut rng)
}
