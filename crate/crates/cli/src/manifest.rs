//! Per-run manifest: the fully resolved configuration plus SHA-256 digests
//! of every input and output, so a run can be reproduced and its artifacts
//! verified.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use sha2::{Digest, Sha256};

use crate::config::Config;

pub struct RunManifest {
    subcommand: String,
    config: BTreeMap<String, String>,
    inputs: BTreeMap<String, String>,
    outputs: BTreeMap<String, String>,
}

fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).with_context(|| format!("hashing {}", path.display()))?;
    Ok(format!("{:x}", Sha256::digest(&bytes)))
}

impl RunManifest {
    pub fn new(subcommand: &str, config: &Config) -> Self {
        RunManifest {
            subcommand: subcommand.to_string(),
            config: config.entries().clone(),
            inputs: BTreeMap::new(),
            outputs: BTreeMap::new(),
        }
    }

    pub fn record_input(&mut self, path: &Path) -> Result<()> {
        self.inputs
            .insert(path.display().to_string(), sha256_file(path)?);
        Ok(())
    }

    pub fn record_output(&mut self, path: &Path) -> Result<()> {
        self.outputs
            .insert(path.display().to_string(), sha256_file(path)?);
        Ok(())
    }

    /// Writes to `explicit` if given, otherwise next to the primary output
    /// (`<output>.manifest.json`); stdout-only commands write no manifest
    /// unless one is requested.
    pub fn write(
        &self,
        explicit: Option<&Path>,
        primary_output: Option<&Path>,
    ) -> Result<Option<PathBuf>> {
        let path = match (explicit, primary_output) {
            (Some(p), _) => p.to_path_buf(),
            (None, Some(out)) => {
                let mut name = out.as_os_str().to_owned();
                name.push(".manifest.json");
                PathBuf::from(name)
            }
            (None, None) => return Ok(None),
        };
        let body = serde_json::json!({
            "tool": "bhasha",
            "version": env!("CARGO_PKG_VERSION"),
            "subcommand": self.subcommand,
            "config": self.config,
            "inputs": self.inputs,
            "outputs": self.outputs,
        });
        std::fs::write(&path, serde_json::to_string_pretty(&body)? + "\n")
            .with_context(|| format!("writing manifest {}", path.display()))?;
        Ok(Some(path))
    }
}
