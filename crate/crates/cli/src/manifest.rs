use std::path::Path;

use anyhow::Context;
use serde::{Deserialize, Serialize};

use crate::Command;

pub const MANIFEST_FILE: &str = "manifest.json";

/// Written next to every run's outputs; `tracegrad replay` re-executes it.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunManifest {
    pub subcommand: String,
    pub version: String,
    pub seed: u64,
    pub threads: usize,
    /// Fully resolved arguments, including loaded spec and config files.
    pub command: Command,
    pub outputs: Vec<String>,
    pub pass: bool,
}

impl RunManifest {
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let path = if path.is_dir() { path.join(MANIFEST_FILE) } else { path.to_path_buf() };
        let text = std::fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
    }

    pub fn write(&self, dir: &Path) -> anyhow::Result<()> {
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        std::fs::write(dir.join(MANIFEST_FILE), text)?;
        Ok(())
    }
}
