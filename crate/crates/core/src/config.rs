//! One declarative run configuration (TOML) covering partitioning, the
//! embedding model, training, synthetic worlds and evaluation.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::embed::EmbedConfig;
use crate::error::{Error, Result};
use crate::partition::PartitionConfig;
use crate::retrieval::{DEFAULT_KS, DEFAULT_THRESHOLD_M};
use crate::synthcity::CityConfig;
use crate::train::TrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub threshold_m: f64,
    pub ks: Vec<usize>,
    /// Share of a synthetic world held out as test queries.
    pub query_fraction: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { threshold_m: DEFAULT_THRESHOLD_M, ks: DEFAULT_KS.to_vec(), query_fraction: 0.1 }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsConfig {
    pub manifest: Option<PathBuf>,
    pub features: Option<PathBuf>,
    pub partition: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub partition: PartitionConfig,
    pub embed: EmbedConfig,
    pub train: TrainConfig,
    /// `cell_size` and `heading_bin` here are overridden by `[partition]`
    /// whenever a world is generated for an experiment.
    pub city: CityConfig,
    pub eval: EvalConfig,
    pub paths: PathsConfig,
}

impl RunConfig {
    /// Small synthetic setup: 4 800 images, 64-d descriptors, 10 short epochs over 4 groups.
    pub fn desk() -> Self {
        Self {
            partition: PartitionConfig { min_images_per_class: 3, ..Default::default() },
            embed: EmbedConfig { output_dim: 64, ..Default::default() },
            train: TrainConfig::desk(),
            city: CityConfig::default(),
            eval: EvalConfig::default(),
            paths: PathsConfig::default(),
        }
    }

    pub fn from_toml(s: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(s).map_err(|e| Error::Config(e.message().to_owned()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.partition.validate()?;
        self.train.validate()?;
        self.world_config().validate()?;
        if self.embed.output_dim == 0 {
            return Err(Error::Config("embed.output_dim must be >= 1".into()));
        }
        if !(self.embed.gem_p >= 1.0) {
            return Err(Error::Config("embed.gem_p must be >= 1".into()));
        }
        if self.eval.ks.is_empty() || self.eval.ks.contains(&0) || self.eval.ks.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config(format!("eval.ks must be strictly ascending and >= 1, got {:?}", self.eval.ks)));
        }
        if !(self.eval.threshold_m >= 0.0) {
            return Err(Error::Config("eval.threshold_m must be >= 0".into()));
        }
        let groups = self.partition.group_count();
        if self.train.groups_used > groups {
            return Err(Error::Config(format!(
                "train.groups_used {} exceeds the {groups} groups of the partition",
                self.train.groups_used
            )));
        }
        Ok(())
    }

    /// The city config with its layout aligned to the partition cells and bins.
    pub fn world_config(&self) -> CityConfig {
        CityConfig {
            cell_size: self.partition.cell_size,
            heading_bin: self.partition.heading_bin,
            ..self.city.clone()
        }
    }

    /// Sets every seed in the config from one value.
    pub fn set_seed(&mut self, seed: u64) {
        self.train.seed = seed;
        self.city.seed = seed;
    }
}
