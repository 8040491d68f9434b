//! Run configuration, read from TOML.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::pose_graph::PoseGraphConfig;
use crate::radar_odometry::RadarOdometryConfig;
use crate::rte::RteConfig;
use crate::sim::{
    EnvironmentSpec, MissionSpec, OdometryDrift, RadarSensorModel, SensorRig, SimError, SimulationConfig,
    UwbNoiseModel,
};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {}: {message}", path.display())]
    Read { path: PathBuf, message: String },
    #[error("parse error: {0}")]
    Parse(String),
    #[error("invalid configuration: {0}")]
    Invalid(String),
}

/// Everything a run depends on. A run is reproducible from this and the seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    /// Artifact directory; the command line may override it.
    pub output: Option<PathBuf>,
    pub mission: MissionSpec,
    pub rig: SensorRig,
    pub uwb: UwbNoiseModel,
    pub odometry: OdometryDrift,
    pub radar: RadarSensorModel,
    pub environment: EnvironmentSpec,
    pub rte: RteConfig,
    pub radar_odometry: RadarOdometryConfig,
    pub pose_graph: PoseGraphConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            output: None,
            mission: MissionSpec::default(),
            rig: SensorRig::default(),
            uwb: UwbNoiseModel::default(),
            odometry: OdometryDrift::default(),
            radar: RadarSensorModel::default(),
            environment: EnvironmentSpec::default(),
            rte: RteConfig::default(),
            radar_odometry: RadarOdometryConfig::default(),
            pose_graph: PoseGraphConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let config: RunConfig = toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Read {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("configuration serializes")
    }

    pub fn simulation(&self) -> SimulationConfig {
        SimulationConfig {
            mission: self.mission.clone(),
            rig: self.rig.clone(),
            uwb: self.uwb,
            odometry: self.odometry,
            radar: self.radar,
            environment: self.environment.clone(),
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.simulation().validate().map_err(|e| match e {
            SimError::Config { field, message } => ConfigError::Invalid(format!("{field}: {message}")),
        })?;
        self.rte.validate().map_err(ConfigError::Invalid)?;
        self.radar_odometry.validate().map_err(ConfigError::Invalid)?;
        self.pose_graph.validate().map_err(ConfigError::Invalid)
    }
}
