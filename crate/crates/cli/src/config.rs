use std::path::Path;

use anyhow::{bail, Context, Result};
use crica::config::ModelConfig;
use crica::train::TrainConfig;
use serde::{Deserialize, Serialize};

pub const CONFIG_VERSION: u32 = 1;
pub const SEED_ENV: &str = "CRICA_SEED";

/// Everything `train` needs, as read from TOML. Keys missing from the file
/// keep their desk defaults; unknown keys are rejected.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub version: u32,
    /// Seeds model initialization and batch sampling.
    pub seed: u64,
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            version: CONFIG_VERSION,
            seed: 0,
            model: ModelConfig::desk(),
            train: TrainConfig::desk(),
        }
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let file: toml::Table = toml::from_str(text).context("invalid run config")?;
        let mut merged = toml::Table::try_from(Self::default()).expect("config serializes");
        merge(&mut merged, file);
        let cfg: Self = merged.try_into().context("invalid run config")?;
        if cfg.version != CONFIG_VERSION {
            bail!(crica::Error::Config(format!(
                "config version {} is not supported (expected {CONFIG_VERSION})",
                cfg.version
            )));
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        Self::parse(&text).with_context(|| format!("in {}", path.display()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Copies the global seed into the training section and validates.
    pub fn resolve(mut self) -> Result<Self> {
        self.train.seed = self.seed;
        self.model.validate()?;
        self.train.validate()?;
        Ok(self)
    }
}

fn merge(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

/// `CRICA_SEED` if set, else `fallback`.
pub fn seed_override(fallback: u64) -> Result<u64> {
    match std::env::var(SEED_ENV) {
        Ok(s) => s
            .trim()
            .parse()
            .map_err(|_| crica::Error::Config(format!("{SEED_ENV}={s:?} is not an unsigned integer")).into()),
        Err(_) => Ok(fallback),
    }
}
