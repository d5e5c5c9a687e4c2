//! Run configuration: a JSON file (or `$DZLAB_CONFIG`) overridden by flags.

use std::path::{Path, PathBuf};

use dzlab::eval::CompareConfig;
use dzlab::model::{Hyper, LogisticConfig};
use dzlab::scenario::ScenarioConfig;
use dzlab::{Error, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub const CONFIG_ENV: &str = "DZLAB_CONFIG";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub scenario: ScenarioConfig,
    pub hyper: Hyper,
    pub logistic: LogisticConfig,
    pub window: usize,
    pub holdout_fraction: f64,
    pub seeds: Vec<u64>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let cmp = CompareConfig::default();
        Self {
            scenario: ScenarioConfig::default(),
            hyper: cmp.hyper,
            logistic: cmp.logistic,
            window: cmp.window,
            holdout_fraction: cmp.holdout_fraction,
            seeds: vec![0, 1, 2, 3, 4],
        }
    }
}

impl RunConfig {
    /// Reads `explicit`, else the path in `$DZLAB_CONFIG`, else defaults.
    pub fn resolve(explicit: Option<&Path>) -> Result<(Self, Option<PathBuf>)> {
        let path = explicit
            .map(Path::to_path_buf)
            .or_else(|| std::env::var_os(CONFIG_ENV).map(PathBuf::from));
        let Some(path) = path else {
            return Ok((Self::default(), None));
        };
        let text = std::fs::read_to_string(&path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        let cfg: RunConfig = serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("invalid config {}: {e}", path.display())))?;
        Ok((cfg, Some(path)))
    }

    pub fn validate(&self) -> Result<()> {
        self.scenario.validate()?;
        self.hyper.validate()?;
        if self.window == 0 {
            return Err(Error::Config("window must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.holdout_fraction) {
            return Err(Error::Config("holdout_fraction must lie in [0, 1)".into()));
        }
        Ok(())
    }

    pub fn compare(&self) -> CompareConfig {
        CompareConfig {
            window: self.window,
            holdout_fraction: self.holdout_fraction,
            hyper: self.hyper.clone(),
            logistic: self.logistic,
        }
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        hex_digest(serde_json::to_string(self).expect("config serializes").as_bytes())
    }
}

pub fn hex_digest(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}
