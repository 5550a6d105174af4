use std::path::Path;

use serde::Serialize;

use crate::config::ExperimentConfig;
use crate::CliResult;

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct Seeds {
    pub dataset: u64,
    pub sampler: u64,
    pub aug: u64,
    pub init: u64,
    pub diagnostics: u64,
    pub dynamics: u64,
    pub distsim: u64,
    pub throughput: u64,
}

impl Seeds {
    pub fn of(cfg: &ExperimentConfig) -> Self {
        Self {
            dataset: cfg.dataset.seed,
            sampler: cfg.train.sampler_seed,
            aug: cfg.train.aug_seed,
            init: cfg.train.init_seed,
            diagnostics: cfg.diagnostics.seed,
            dynamics: cfg.dynamics.seed,
            distsim: cfg.distsim.seed,
            throughput: cfg.throughput.seed,
        }
    }
}

/// Everything needed to rerun a command: the canonical configuration reproduces the
/// outputs byte for byte (timing columns aside). Keys serialize in declaration order.
#[derive(Clone, Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub version: String,
    pub status: String,
    pub exit_code: i32,
    pub config: String,
    pub seeds: Seeds,
    pub details: serde_json::Value,
    pub outputs: Vec<String>,
    pub started_at: String,
    pub finished_at: String,
}

impl RunManifest {
    pub fn write(&self, path: &Path) -> CliResult<()> {
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        std::fs::write(path, text)?;
        Ok(())
    }
}
