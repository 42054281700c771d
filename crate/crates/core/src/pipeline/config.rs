use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::activation::ApTemplate;
use crate::error::{Error, Result};
use crate::mesh::AtriumParams;
use crate::model::{Ablation, ModelConfig};
use crate::oracle::OracleConfig;
use crate::training::TrainSchedule;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GeometryConfig {
    pub n_meshes: usize,
    /// Mesh `i` is generated from seed `first_seed + i`.
    pub first_seed: u64,
    pub atrium: AtriumParams,
}

impl Default for GeometryConfig {
    fn default() -> Self {
        Self {
            n_meshes: 8,
            first_seed: 0,
            atrium: AtriumParams::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimulationConfig {
    pub pacing_sites: usize,
    /// m/s
    pub cv_long: f64,
    pub aniso: f64,
    pub template: ApTemplate,
    /// ms
    pub frame_dt: f64,
    /// ms
    pub duration: f64,
}

impl Default for SimulationConfig {
    fn default() -> Self {
        Self {
            pacing_sites: 10,
            cv_long: 0.7,
            aniso: 4.0,
            template: ApTemplate::default(),
            frame_dt: 10.0,
            duration: 390.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SplitConfig {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self {
            train: 0.8,
            val: 0.1,
            test: 0.1,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub geometry: GeometryConfig,
    pub simulation: SimulationConfig,
    pub oracle: OracleConfig,
    pub model: ModelConfig,
    pub schedule: TrainSchedule,
    pub split: SplitConfig,
    pub ablation: Ablation,
}

/// The parts of the configuration that determine the generated data.
#[derive(Serialize)]
struct DataSection<'a> {
    geometry: &'a GeometryConfig,
    simulation: &'a SimulationConfig,
    oracle: &'a OracleConfig,
}

impl ExperimentConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Malformed(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let s = &self.split;
        if [s.train, s.val, s.test].iter().any(|f| !(*f >= 0.0)) || (s.train + s.val + s.test - 1.0).abs() > 1e-9 {
            return Err(Error::Param(format!(
                "split fractions must be non-negative and sum to 1, got {} / {} / {}",
                s.train, s.val, s.test
            )));
        }
        if self.geometry.n_meshes == 0 || self.simulation.pacing_sites == 0 {
            return Err(Error::Param("need at least one mesh and one pacing site".into()));
        }
        let sim = &self.simulation;
        if !(sim.frame_dt > 0.0) || !(sim.duration >= sim.frame_dt) {
            return Err(Error::Param("need 0 < frame_dt <= duration".into()));
        }
        sim.template.validate()?;
        self.oracle.validate()?;
        self.model.validate()?;
        self.schedule.validate()?;
        self.ablation.validate()
    }

    /// SHA-256 of the data-generating sections.
    pub fn data_hash(&self) -> String {
        let section = DataSection {
            geometry: &self.geometry,
            simulation: &self.simulation,
            oracle: &self.oracle,
        };
        let text = serde_json::to_string(&section).expect("config serializes");
        hex::encode(Sha256::digest(text.as_bytes()))
    }
}
