use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::graph::NoiseConfig;
use crate::preprocess::PreprocessConfig;
use crate::regmodel::{RegistrationConfig, TrainConfig};
use crate::simworld::SimulationConfig;
use crate::solver::SolverConfig;
use crate::submap::{SalienceConfig, SubmapConfig};

/// Which relative-pose source feeds the GPR factors.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelKind {
    OdometryOnly,
    Engineered,
    Learned,
    Oracle,
}

impl ModelKind {
    pub const ALL: [ModelKind; 4] =
        [ModelKind::OdometryOnly, ModelKind::Engineered, ModelKind::Learned, ModelKind::Oracle];

    pub fn name(&self) -> &'static str {
        match self {
            ModelKind::OdometryOnly => "odometry-only",
            ModelKind::Engineered => "engineered",
            ModelKind::Learned => "learned",
            ModelKind::Oracle => "oracle",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        ModelKind::ALL
            .into_iter()
            .find(|m| m.name() == s || m.name().replace('-', "_") == s)
            .ok_or_else(|| Error::Config(format!("unknown model `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub model: ModelKind,
    /// Trained model used when `model` is `learned`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub model_file: Option<String>,
    /// Most recent salient submaps checked per new submap.
    pub candidate_cap: usize,
    /// Smallest anchor-index distance of a loop-closure pair.
    pub min_anchor_gap: usize,
    /// Largest tolerated gap in the IMU or wheel stream, s.
    pub max_stream_gap: f64,
    pub bank_size: usize,
    pub bank_seed: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            model: ModelKind::Learned,
            model_file: None,
            candidate_cap: 50,
            min_anchor_gap: 2,
            max_stream_gap: 0.5,
            bank_size: 16,
            bank_seed: 17,
        }
    }
}

/// Train/validation split and head fitting.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingConfig {
    pub split: f64,
    pub seed: u64,
    /// Largest lateral offset of a usable training pair, m.
    pub max_lateral: f64,
    /// Largest heading mismatch (after flip) of a usable pair, rad.
    pub max_heading: f64,
    pub head: TrainConfig,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig { split: 0.7, seed: 5, max_lateral: 0.3, max_heading: 0.3, head: TrainConfig::default() }
    }
}

/// The whole run configuration, read from a TOML file with dotted sections.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub seed: u64,
    pub simulation: SimulationConfig,
    pub preprocess: PreprocessConfig,
    pub submap: SubmapConfig,
    pub salience: SalienceConfig,
    pub registration: RegistrationConfig,
    pub noise: NoiseConfig,
    pub solver: SolverConfig,
    pub pipeline: PipelineConfig,
    pub training: TrainingConfig,
}

impl Config {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Config = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.simulation.world.validate()?;
        self.simulation.sensor.validate()?;
        self.simulation.run.validate()?;
        self.preprocess.validate()?;
        self.submap.validate()?;
        self.salience.validate()?;
        self.registration.validate()?;
        self.solver.validate()?;
        if self.pipeline.bank_size < 2 || self.pipeline.candidate_cap == 0 || !(self.pipeline.max_stream_gap > 0.0) {
            return Err(Error::Config("pipeline: bank_size >= 2, candidate_cap >= 1, max_stream_gap > 0".into()));
        }
        if let Some(f) = &self.pipeline.model_file {
            if !Path::new(f).is_file() {
                return Err(Error::Config(format!("pipeline: model file `{f}` does not exist")));
            }
        }
        if !(self.training.split > 0.0 && self.training.split < 1.0) {
            return Err(Error::Config("training: split must lie in (0, 1)".into()));
        }
        Ok(())
    }

    /// SHA-256 of the canonical serialization.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_toml().as_bytes()))
    }
}
