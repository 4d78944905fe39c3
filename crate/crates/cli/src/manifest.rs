use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::Serialize;
use serde_json::Value;

use crate::error::{CliError, CliResult};

fn now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs())
}

/// Everything needed to repeat a run, written before it starts and
/// rewritten with the outcome when it ends.
#[derive(Clone, Debug, Serialize)]
pub struct Manifest {
    pub command: String,
    pub argv: Vec<String>,
    pub version: &'static str,
    pub seed: u64,
    pub threads: usize,
    pub config: BTreeMap<String, Value>,
    pub inputs: BTreeMap<String, String>,
    pub artifacts: BTreeMap<String, String>,
    pub started_unix: u64,
    pub finished_unix: Option<u64>,
    pub status: String,
    #[serde(skip)]
    path: PathBuf,
}

impl Manifest {
    pub fn begin(command: &str, dir: &Path, seed: u64, threads: usize, config: &BTreeMap<String, Value>) -> Self {
        Self {
            command: command.to_string(),
            argv: std::env::args().collect(),
            version: env!("CARGO_PKG_VERSION"),
            seed,
            threads,
            config: config.clone(),
            inputs: BTreeMap::new(),
            artifacts: BTreeMap::new(),
            started_unix: now(),
            finished_unix: None,
            status: "running".into(),
            path: dir.join("manifest.json"),
        }
    }

    pub fn input(mut self, name: &str, path: &Path) -> Self {
        self.inputs.insert(name.into(), path.display().to_string());
        self
    }

    pub fn artifact(mut self, name: &str, path: &Path) -> Self {
        self.artifacts.insert(name.into(), path.display().to_string());
        self
    }

    pub fn write(&self) -> CliResult<()> {
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        std::fs::write(&self.path, text + "\n").map_err(|e| CliError::io(&self.path, e))
    }

    pub fn finish<T>(mut self, outcome: &CliResult<T>) -> CliResult<()> {
        self.finished_unix = Some(now());
        self.status = match outcome {
            Ok(_) => "ok".into(),
            Err(e) => format!("error: {e}"),
        };
        self.write()
    }
}
