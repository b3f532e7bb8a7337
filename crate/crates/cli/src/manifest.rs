//! Record of one command invocation, written next to its outputs.

use std::collections::BTreeMap;
use std::path::PathBuf;

use anyhow::{Context, Result};
use serde::Serialize;

#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub tool_version: &'static str,
    pub command: &'static str,
    /// Every effective setting, including defaults and seeds.
    pub config: serde_json::Value,
    pub inputs: Vec<PathBuf>,
    pub outputs: Vec<PathBuf>,
    /// 0 means the runtime default.
    pub threads: usize,
    pub timings: BTreeMap<String, f64>,
    #[serde(skip)]
    path: PathBuf,
}

impl RunManifest {
    pub fn new(command: &'static str, config: serde_json::Value, path: PathBuf) -> Self {
        Self {
            tool_version: env!("CARGO_PKG_VERSION"),
            command,
            config,
            inputs: Vec::new(),
            outputs: Vec::new(),
            threads: 0,
            timings: BTreeMap::new(),
            path,
        }
    }

    pub fn write(&self) -> Result<()> {
        let text = serde_json::to_string_pretty(self)? + "\n";
        std::fs::write(&self.path, text).with_context(|| format!("writing {}", self.path.display()))
    }
}
