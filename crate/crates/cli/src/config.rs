//! Experiment configuration files (TOML).

use std::path::{Path, PathBuf};

use anyhow::Context;
use dkgp_core::data::{load_csv, LongitudinalDataset, Schema};
use dkgp_core::simulator::{generate_seeded, GroundTruth, SimulationSpec};
use dkgp_core::trainer::TrainConfig;
use dkgp_core::Error;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

/// Where the observations come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DataSource {
    Simulation(SimulationSpec),
    Csv(CsvSource),
}

impl Default for DataSource {
    fn default() -> Self {
        DataSource::Simulation(SimulationSpec::default())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CsvSource {
    pub path: PathBuf,
    #[serde(default)]
    pub schema: Schema,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SweepKind {
    #[default]
    InducingPoints,
    Solver,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    pub kind: SweepKind,
    /// Inducing-point counts for the inducing-points sweep.
    pub grid: Vec<usize>,
    /// Inducing points of the long sampling run in the solver sweep.
    pub large_inducing_points: usize,
    /// Epoch multiplier of the long sampling run.
    pub epoch_multiplier: usize,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig {
            kind: SweepKind::InducingPoints,
            grid: vec![5, 10, 20, 50, 100],
            large_inducing_points: 128,
            epoch_multiplier: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Seed of the split and of training; repetition `k` uses `seed + k`.
    pub seed: u64,
    pub repetitions: usize,
    pub output_dir: PathBuf,
    pub data: DataSource,
    pub train: TrainConfig,
    pub sweep: SweepConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 0,
            repetitions: 10,
            output_dir: PathBuf::from("out"),
            data: DataSource::default(),
            train: TrainConfig::default(),
            sweep: SweepConfig::default(),
        }
    }
}

impl ExperimentConfig {
    /// Reads `path`; relative CSV paths resolve against the file's directory.
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::InvalidConfig(format!("{}: {e}", path.display())))?;
        let mut cfg: ExperimentConfig = toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
        if let DataSource::Csv(src) = &mut cfg.data {
            if src.path.is_relative() {
                if let Some(dir) = path.parent() {
                    src.path = dir.join(&src.path);
                }
            }
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> dkgp_core::Result<()> {
        if self.repetitions == 0 {
            return Err(Error::InvalidConfig("repetitions must be at least 1".into()));
        }
        self.train.validate()?;
        match &self.data {
            DataSource::Simulation(spec) => spec.validate(),
            DataSource::Csv(src) if !src.path.exists() => {
                Err(Error::InvalidConfig(format!("data file {} does not exist", src.path.display())))
            }
            DataSource::Csv(_) => Ok(()),
        }
    }

    pub fn schema(&self) -> Schema {
        match &self.data {
            DataSource::Csv(src) => src.schema.clone(),
            DataSource::Simulation(_) => Schema::default(),
        }
    }

    /// The dataset, plus ground truth when simulated.
    pub fn load_data(&self) -> dkgp_core::Result<(LongitudinalDataset, Option<GroundTruth>)> {
        match &self.data {
            DataSource::Simulation(spec) => generate_seeded(spec).map(|(d, t)| (d, Some(t))),
            DataSource::Csv(src) => load_csv(&src.path, &src.schema).map(|d| (d, None)),
        }
    }

    pub fn to_toml(&self) -> anyhow::Result<String> {
        Ok(toml::to_string_pretty(self)?)
    }

    /// SHA-256 of the resolved configuration text.
    pub fn hash(&self) -> anyhow::Result<String> {
        Ok(sha256_hex(self.to_toml()?.as_bytes()))
    }

    /// Writes the resolved configuration into the output directory.
    pub fn write_resolved(&self) -> anyhow::Result<()> {
        std::fs::create_dir_all(&self.output_dir)?;
        std::fs::write(self.output_dir.join("resolved_config.toml"), self.to_toml()?)?;
        Ok(())
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}
