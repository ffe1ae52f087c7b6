use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::adapt::TrainConfig;
use crate::adapter::Hyper;
use crate::error::{Result, ShareError};
use crate::merge::MergeOptions;
use crate::sim::{ContinualConfig, ProbeConfig, StreamConfig};

/// Environment variable that overrides every seed in a loaded config.
pub const SEED_ENV: &str = "SHARE_SEED";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HyperBlock {
    pub k: usize,
    pub p: usize,
    pub phi: usize,
    pub variance_threshold: f64,
    pub sigma: f64,
    pub lora_rank: usize,
}

impl Default for HyperBlock {
    fn default() -> Self {
        let c = ContinualConfig::default();
        Self {
            k: c.hyper.k,
            p: c.hyper.p,
            phi: c.hyper.phi,
            variance_threshold: c.hyper.variance_threshold,
            sigma: c.hyper.init_sigma,
            lora_rank: c.lora_rank,
        }
    }
}

impl HyperBlock {
    pub fn hyper(&self) -> Hyper {
        Hyper {
            k: self.k,
            p: self.p,
            phi: self.phi,
            variance_threshold: self.variance_threshold,
            init_sigma: self.sigma,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsBlock {
    pub output_dir: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub hyper: HyperBlock,
    pub stream: StreamConfig,
    pub train: TrainConfig,
    pub paths: PathsBlock,
    pub probe: ProbeConfig,
    pub strict_cl: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            hyper: HyperBlock::default(),
            stream: StreamConfig::default(),
            train: ContinualConfig::default().train,
            paths: PathsBlock::default(),
            probe: ProbeConfig::default(),
            strict_cl: true,
        }
    }
}

impl RunConfig {
    /// Parse JSON, rejecting unknown keys, and apply the seed override.
    pub fn from_json(text: &str) -> Result<Self> {
        let mut cfg: RunConfig =
            serde_json::from_str(text).map_err(|e| ShareError::validation("config", e.to_string()))?;
        cfg.apply_seed_override(std::env::var(SEED_ENV).ok().as_deref())?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn apply_seed_override(&mut self, value: Option<&str>) -> Result<()> {
        if let Some(v) = value {
            let seed: u64 = v
                .trim()
                .parse()
                .map_err(|_| ShareError::validation(SEED_ENV, format!("{v:?} is not an unsigned integer")))?;
            self.stream.seed = seed;
            self.train.seed = seed;
            self.probe.restricted.seed = seed;
            self.probe.unrestricted.seed = seed;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.hyper.hyper().validate()?;
        if self.hyper.lora_rank == 0 {
            return Err(ShareError::validation("hyper.lora_rank", "must be ≥ 1"));
        }
        self.stream.validate()?;
        Ok(())
    }

    pub fn continual(&self) -> ContinualConfig {
        ContinualConfig {
            hyper: self.hyper.hyper(),
            lora_rank: self.hyper.lora_rank,
            train: self.train.clone(),
            merge: MergeOptions::default(),
            strict_cl: self.strict_cl,
        }
    }
}
