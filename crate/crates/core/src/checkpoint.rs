//! Versioned, shape-annotated JSON snapshots of a fitted model.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{LongitudinalDataset, PreprocessSpec};
use crate::error::{Error, Result};
use crate::kernels::FeatureMap;
use crate::trainer::{ModelState, TrainConfig};

pub const CHECKPOINT_VERSION: u32 = 1;

/// Dimensions a checkpoint promises; checked on load.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Shapes {
    pub individuals: usize,
    /// Width of the preprocessed covariate vector.
    pub covariates: usize,
    pub latent_dim: usize,
    pub embedding_dim: usize,
    pub inducing_points: usize,
    /// Layer widths of the encoder, empty without one.
    pub encoder_widths: Vec<usize>,
}

impl Shapes {
    pub fn of(state: &ModelState) -> Self {
        let encoder_widths = match &state.kernel.features {
            FeatureMap::Encoder(e) => {
                let mut w = vec![e.input_dim()];
                w.extend(e.layers.iter().map(|l| l.fan_out()));
                w
            }
            FeatureMap::Identity { .. } => Vec::new(),
        };
        Shapes {
            individuals: state.kernel.embeddings.n_individuals(),
            covariates: state.kernel.features.input_dim(),
            latent_dim: state.inducing.dv,
            embedding_dim: state.inducing.di(),
            inducing_points: state.inducing.len(),
            encoder_widths,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub shapes: Shapes,
    pub config: TrainConfig,
    pub preprocess: PreprocessSpec,
    /// Original id of each embedding row.
    pub individual_labels: Vec<String>,
    pub state: ModelState,
}

impl Checkpoint {
    pub fn new(state: ModelState, config: TrainConfig, preprocess: PreprocessSpec, individual_labels: Vec<String>) -> Result<Self> {
        let ck = Checkpoint {
            version: CHECKPOINT_VERSION,
            shapes: Shapes::of(&state),
            config,
            preprocess,
            individual_labels,
            state,
        };
        ck.validate()?;
        Ok(ck)
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != CHECKPOINT_VERSION {
            return Err(Error::InvalidConfig(format!(
                "checkpoint version {} is not supported (expected {CHECKPOINT_VERSION})",
                self.version
            )));
        }
        let actual = Shapes::of(&self.state);
        if actual != self.shapes {
            return Err(Error::shape("checkpoint shapes", format!("{:?}", self.shapes), format!("{actual:?}")));
        }
        if self.individual_labels.len() != self.shapes.individuals {
            return Err(Error::shape("checkpoint labels", self.shapes.individuals, self.individual_labels.len()));
        }
        if self.preprocess.output_width() != self.shapes.covariates {
            return Err(Error::shape("checkpoint preprocessing width", self.shapes.covariates, self.preprocess.output_width()));
        }
        let m = self.shapes.inducing_points;
        if self.state.posterior.dim() != m || self.state.posterior.l.dim() != m {
            return Err(Error::shape("checkpoint posterior", m, self.state.posterior.dim()));
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::Io(e.to_string()))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let ck: Checkpoint = serde_json::from_str(text).map_err(|e| Error::Parse {
            row: e.line(),
            column: "checkpoint".into(),
            message: e.to_string(),
        })?;
        ck.validate()?;
        Ok(ck)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    /// Re-indexes `data` so individuals map onto embedding rows by label.
    /// Labels the model never saw get indices past the table, one per label.
    pub fn align(&self, data: &LongitudinalDataset) -> LongitudinalDataset {
        let known = self.individual_labels.len();
        let mut extra: Vec<String> = Vec::new();
        let individual = data
            .individual
            .iter()
            .map(|&i| {
                let label = &data.individual_labels[i];
                match self.individual_labels.iter().position(|l| l == label) {
                    Some(p) => p,
                    None => match extra.iter().position(|l| l == label) {
                        Some(p) => known + p,
                        None => {
                            extra.push(label.clone());
                            known + extra.len() - 1
                        }
                    },
                }
            })
            .collect();
        let mut labels = self.individual_labels.clone();
        labels.extend(extra);
        LongitudinalDataset {
            individual,
            individual_labels: labels,
            ..data.clone()
        }
    }

    /// Aligns and preprocesses raw data for this model.
    pub fn prepare(&self, raw: &LongitudinalDataset) -> Result<LongitudinalDataset> {
        self.preprocess.apply(&self.align(raw))
    }
}
