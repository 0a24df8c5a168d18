use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{Context, Result};
use serde::Serialize;

/// Record of one invocation, written next to its outputs.
#[derive(Debug, Serialize)]
pub struct RunManifest<'a, C: Serialize> {
    pub subcommand: &'a str,
    pub version: &'a str,
    pub seed: Option<u64>,
    pub threads: usize,
    pub config: &'a C,
    pub started_unix: f64,
    pub finished_unix: f64,
    pub outputs: Vec<PathBuf>,
}

pub fn now() -> f64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs_f64()).unwrap_or(0.0)
}

pub struct Run<'a, C: Serialize> {
    subcommand: &'a str,
    seed: Option<u64>,
    threads: usize,
    config: &'a C,
    started: f64,
}

impl<'a, C: Serialize> Run<'a, C> {
    pub fn start(subcommand: &'a str, config: &'a C, seed: Option<u64>, threads: usize) -> Self {
        Self {
            subcommand,
            seed,
            threads,
            config,
            started: now(),
        }
    }

    pub fn finish(self, path: &Path, outputs: Vec<PathBuf>) -> Result<()> {
        let manifest = RunManifest {
            subcommand: self.subcommand,
            version: env!("CARGO_PKG_VERSION"),
            seed: self.seed,
            threads: self.threads,
            config: self.config,
            started_unix: self.started,
            finished_unix: now(),
            outputs,
        };
        let json = serde_json::to_vec_pretty(&manifest)?;
        fs::write(path, json).with_context(|| format!("writing {}", path.display()))?;
        log::debug!("run manifest written to {}", path.display());
        Ok(())
    }
}

/// `<file>.run.json` for single-file outputs.
pub fn beside(file: &Path) -> PathBuf {
    let mut s = file.as_os_str().to_os_string();
    s.push(".run.json");
    PathBuf::from(s)
}
