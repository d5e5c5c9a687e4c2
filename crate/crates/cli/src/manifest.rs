use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use dzlab::Result;
use serde::Serialize;

use crate::config::{hex_digest, RunConfig};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Serialize)]
pub struct InputDigest {
    pub path: PathBuf,
    pub sha256: String,
}

/// Everything needed to rerun the command that produced a directory.
#[derive(Debug, Serialize)]
pub struct Manifest<'a> {
    pub tool: &'static str,
    pub version: &'static str,
    pub command: &'a str,
    pub args: Vec<String>,
    pub config_sha256: String,
    pub config: &'a RunConfig,
    pub seeds: Vec<u64>,
    pub inputs: Vec<InputDigest>,
    pub created_unix_s: u64,
}

impl<'a> Manifest<'a> {
    pub fn new(command: &'a str, config: &'a RunConfig, seeds: Vec<u64>) -> Self {
        Self {
            tool: "dzlab",
            version: env!("CARGO_PKG_VERSION"),
            command,
            args: std::env::args().skip(1).collect(),
            config_sha256: config.hash(),
            config,
            seeds,
            inputs: Vec::new(),
            created_unix_s: SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map_or(0, |d| d.as_secs()),
        }
    }

    pub fn with_inputs(mut self, paths: &[PathBuf]) -> Result<Self> {
        for p in paths {
            self.inputs.push(InputDigest {
                path: p.clone(),
                sha256: hex_digest(&std::fs::read(p)?),
            });
        }
        Ok(self)
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::write(dir.join(MANIFEST_FILE), serde_json::to_string_pretty(self)?)?;
        Ok(())
    }
}
