use std::path::{Path, PathBuf};

use clap::Args;
use latgeo_core::data::{load_proposals, Scene};
use latgeo_core::training::{load_checkpoint, Checkpoint};
use serde_json::Value;

use crate::error::{CliError, CliResult};
use crate::settings::Settings;

#[derive(Args, Debug, Clone, Default)]
pub struct ConfigArgs {
    /// JSON object of dotted keys, e.g. {"train.max_epochs": 20}
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override one key; repeatable
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    /// Shorthand for train.seed
    #[arg(long)]
    pub seed: Option<u64>,
    /// Shorthand for train.max_epochs
    #[arg(long)]
    pub max_epochs: Option<usize>,
    /// Shorthand for train.rl_epochs
    #[arg(long)]
    pub rl_epochs: Option<usize>,
    /// Shorthand for decode.beam
    #[arg(long)]
    pub beam: Option<usize>,
}

impl ConfigArgs {
    /// Defaults, then `base` (a checkpoint's own settings), then the config
    /// file, then flags.
    pub fn settings(&self, base: Option<&Checkpoint>) -> CliResult<Settings> {
        let mut s = Settings::default();
        if let Some(ck) = base {
            overlay(&mut s, "model", &serde_json::to_value(&ck.model).expect("config serializes"))?;
            if let Some(train) = &ck.train {
                overlay(&mut s, "train", train)?;
            }
        }
        if let Some(path) = &self.config {
            s.merge_file(path)?;
        }
        for pair in &self.set {
            s.assign(pair)?;
        }
        let shorthands = [
            ("train.seed", self.seed.map(Value::from)),
            ("train.max_epochs", self.max_epochs.map(Value::from)),
            ("train.rl_epochs", self.rl_epochs.map(Value::from)),
            ("decode.beam", self.beam.map(Value::from)),
        ];
        for (key, v) in shorthands {
            if let Some(v) = v {
                s.set(key, v)?;
            }
        }
        Ok(s)
    }
}

fn overlay(s: &mut Settings, section: &str, v: &Value) -> CliResult<()> {
    if let Value::Object(obj) = v {
        for (k, child) in obj {
            match child {
                Value::Object(inner) if !inner.is_empty() => {
                    // tagged enums are replaced whole
                    s.set(&format!("{section}.{k}"), Value::Null)?;
                    for (ik, iv) in inner {
                        s.set(&format!("{section}.{k}.{ik}"), iv.clone())?;
                    }
                }
                _ => s.set(&format!("{section}.{k}"), child.clone())?,
            }
        }
    }
    Ok(())
}

/// `LATGEO_THREADS`, defaulting to one thread.
pub fn threads() -> CliResult<usize> {
    match std::env::var("LATGEO_THREADS") {
        Err(_) => Ok(1),
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(n),
            _ => Err(CliError::Input(format!("LATGEO_THREADS must be a positive integer, got `{v}`"))),
        },
    }
}

pub fn scenes(path: &Path) -> CliResult<Vec<Scene>> {
    if !path.exists() {
        return Err(CliError::io(path, std::io::Error::from(std::io::ErrorKind::NotFound)));
    }
    load_proposals(path).map_err(|e| match e {
        latgeo_core::Error::Io(source) => CliError::io(path, source),
        other => CliError::Input(format!("{}: {other}", path.display())),
    })
}

pub fn checkpoint(path: &Path) -> CliResult<Checkpoint> {
    if !path.exists() {
        return Err(CliError::io(path, std::io::Error::from(std::io::ErrorKind::NotFound)));
    }
    load_checkpoint(path).map_err(|e| match e {
        latgeo_core::Error::Io(source) => CliError::io(path, source),
        other => CliError::Input(format!("{}: {other}", path.display())),
    })
}

pub fn create_dir(dir: &Path) -> CliResult<()> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}

