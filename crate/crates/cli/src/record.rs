use std::path::{Path, PathBuf};
use std::time::Duration;

use pumpout_core::manifest::Manifest;
use serde::Serialize;

/// What a run needs to be reproduced: the resolved configuration, seeds,
/// tool version and the files it produced.
#[derive(Debug, Serialize)]
pub struct RunRecord<'a> {
    pub tool: &'static str,
    pub version: &'static str,
    pub command: &'a str,
    pub sampling_seed: u64,
    pub optimization_seed: u64,
    pub threads: usize,
    pub config: &'a Manifest,
    pub outputs: Vec<PathBuf>,
    pub wall_time_s: f64,
}

impl<'a> RunRecord<'a> {
    pub fn new(command: &'a str, config: &'a Manifest, outputs: Vec<PathBuf>, wall: Duration) -> Self {
        Self {
            tool: env!("CARGO_PKG_NAME"),
            version: env!("CARGO_PKG_VERSION"),
            command,
            sampling_seed: config.sampling.seed,
            optimization_seed: config.optimization.seed,
            threads: rayon::current_num_threads(),
            config,
            outputs,
            wall_time_s: wall.as_secs_f64(),
        }
    }

    pub fn save(&self, path: &Path) -> pumpout_core::Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(std::io::Error::other)?;
        std::fs::write(path, text + "\n")?;
        Ok(())
    }
}
