use std::path::{Path, PathBuf};

use serde::Serialize;

/// Everything needed to rerun a command: resolved settings, seed, inputs and outputs.
#[derive(Debug, Clone, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub version: String,
    pub config: serde_json::Value,
    pub config_hash: String,
    pub seed: Option<u64>,
    pub started: String,
    pub finished: String,
    pub inputs: Vec<PathBuf>,
    pub outputs: Vec<PathBuf>,
}

impl RunManifest {
    pub fn start(command: &str, config: serde_json::Value, seed: Option<u64>) -> Self {
        let config_hash = mde_core::digest(config.to_string().as_bytes());
        Self {
            command: command.to_string(),
            version: version_string(),
            config,
            config_hash,
            seed,
            started: now(),
            finished: String::new(),
            inputs: Vec::new(),
            outputs: Vec::new(),
        }
    }

    pub fn input(&mut self, p: impl AsRef<Path>) {
        self.inputs.push(p.as_ref().to_path_buf());
    }

    pub fn output(&mut self, p: impl AsRef<Path>) {
        self.outputs.push(p.as_ref().to_path_buf());
    }

    pub fn write(mut self, path: &Path) -> std::io::Result<()> {
        self.finished = now();
        std::fs::write(path, serde_json::to_string_pretty(&self).expect("manifest serializes"))
    }
}

fn now() -> String {
    chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Millis, true)
}

pub fn version_string() -> String {
    match option_env!("MDE_GIT_REV") {
        Some(rev) => format!("{} ({rev})", env!("CARGO_PKG_VERSION")),
        None => env!("CARGO_PKG_VERSION").to_string(),
    }
}
