//! One sectioned run configuration shared by every pipeline stage.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::bins::BinSpec;
use crate::dataset::DrivePolicy;
use crate::error::{Error, Result};
use crate::kbm::KbmParams;
use crate::mppi::MppiConfig;
use crate::nav::NavConfig;
use crate::sim::SimParams;
use crate::terrain::TerrainConfig;
use crate::train::TrainConfig;

pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

/// Terrains and driving policies for the two datasets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorldConfig {
    pub terrain: TerrainConfig,
    pub sim: SimParams,
    pub train_terrain_seed: u64,
    pub eval_terrain_seed: u64,
    /// Terrain the navigation course is laid on.
    pub nav_terrain_seed: u64,
    pub train_policy: DrivePolicy,
    pub eval_policy: DrivePolicy,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            terrain: TerrainConfig::default(),
            sim: SimParams::default(),
            train_terrain_seed: 11,
            eval_terrain_seed: 12,
            nav_terrain_seed: 13,
            train_policy: DrivePolicy { seed: 3, ..DrivePolicy::default() },
            eval_policy: DrivePolicy { seed: 4, n_sequences: 600, balanced: true, speed_cap: 7.0, ..DrivePolicy::default() },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchConfig {
    pub sample_counts: Vec<usize>,
    pub horizon: usize,
    pub repetitions: usize,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self { sample_counts: vec![1024, 2048, 4096], horizon: 50, repetitions: 20 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Seeds model initialization and training.
    pub seed: u64,
    /// Output root; the `PIAUG_OUT` variable or `./runs` when unset.
    pub out_dir: Option<PathBuf>,
    pub kbm: KbmParams,
    pub world: WorldConfig,
    pub bins: BinSpec,
    pub train: TrainConfig,
    pub mppi: MppiConfig,
    pub nav: NavConfig,
    pub bench: BenchConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            out_dir: None,
            kbm: KbmParams::default(),
            world: WorldConfig::default(),
            bins: BinSpec::default(),
            train: TrainConfig::default(),
            mppi: MppiConfig::default(),
            nav: NavConfig::default(),
            bench: BenchConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }

    pub fn validate(&self) -> Result<()> {
        self.kbm.validate()?;
        self.world.train_policy.validate()?;
        self.world.eval_policy.validate()?;
        self.train_config().validate()?;
        self.mppi.validate()?;
        if self.world.train_policy.horizon != self.world.eval_policy.horizon {
            return Err(Error::Config("train and eval horizons differ".into()));
        }
        if (self.mppi.dt - self.kbm.dt).abs() > 1e-12 {
            return Err(Error::Config("controller and model time steps differ".into()));
        }
        if self.bench.sample_counts.is_empty() || self.bench.repetitions == 0 {
            return Err(Error::Config("bench needs sample counts and repetitions".into()));
        }
        Ok(())
    }

    /// Training settings with the global seed applied.
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig { seed: self.seed, ..self.train }
    }

    /// SHA-256 of the canonical serialization; output-directory choice is
    /// excluded so moving a run does not change its identity.
    pub fn hash(&self) -> Result<String> {
        let canonical = RunConfig { out_dir: None, ..self.clone() }.to_toml()?;
        Ok(hex::encode(Sha256::digest(canonical.as_bytes())))
    }
}
