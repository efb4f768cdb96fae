use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use act_core::io::write_json;
use act_core::pipeline::RunConfig;

pub const MANIFEST_FILE: &str = "manifest.json";

/// What a command produced. Paths are relative to the output directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    /// False when the command failed part way; `error` then says why.
    pub complete: bool,
    pub error: Option<String>,
    pub config: RunConfig,
    pub seeds: Vec<u64>,
    pub inputs: BTreeMap<String, String>,
    /// Generated datasets and splits.
    pub outputs: BTreeMap<String, String>,
    pub checkpoints: BTreeMap<String, String>,
    pub metrics: BTreeMap<String, String>,
    /// Wall-clock seconds per step.
    pub timings: BTreeMap<String, f64>,
}

impl RunManifest {
    pub fn new(command: &str, config: RunConfig, seeds: Vec<u64>) -> Self {
        RunManifest {
            command: command.into(),
            complete: false,
            error: None,
            config,
            seeds,
            inputs: BTreeMap::new(),
            outputs: BTreeMap::new(),
            checkpoints: BTreeMap::new(),
            metrics: BTreeMap::new(),
            timings: BTreeMap::new(),
        }
    }

    /// Runs `f`, recording its duration under `step`.
    pub fn timed<T>(&mut self, step: &str, f: impl FnOnce() -> T) -> T {
        let start = Instant::now();
        let out = f();
        self.timings.insert(step.into(), start.elapsed().as_secs_f64());
        out
    }

    pub fn write(&self, dir: &Path) -> act_core::Result<()> {
        write_json(&dir.join(MANIFEST_FILE), self)
    }
}
