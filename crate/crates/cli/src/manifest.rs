use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

/// Record of one CLI run; written as `<output-dir>/manifest.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config: serde_json::Value,
    /// SHA-256 of every input file, keyed by the path as given.
    pub input_digests: BTreeMap<String, String>,
    /// Emitted files, relative to the output directory.
    pub outputs: Vec<String>,
    pub seed: Option<u64>,
}

/// Collects inputs and outputs while a command runs.
pub struct RunRecorder {
    dir: PathBuf,
    manifest: RunManifest,
}

impl RunRecorder {
    pub fn new(command: &str, config: &impl Serialize, dir: &Path, seed: Option<u64>) -> Result<Self> {
        fs::create_dir_all(dir)
            .with_context(|| format!("cannot create output directory {}", dir.display()))?;
        Ok(Self {
            dir: dir.to_path_buf(),
            manifest: RunManifest {
                command: command.to_owned(),
                config: serde_json::to_value(config)?,
                input_digests: BTreeMap::new(),
                outputs: Vec::new(),
                seed,
            },
        })
    }

    pub fn input(&mut self, path: &Path) -> Result<()> {
        let bytes =
            fs::read(path).with_context(|| format!("cannot read {}", path.display()))?;
        self.manifest
            .input_digests
            .insert(path.display().to_string(), hex::encode(Sha256::digest(&bytes)));
        Ok(())
    }

    /// Path for a new output file, registered in the manifest.
    pub fn output(&mut self, name: &str) -> PathBuf {
        self.manifest.outputs.push(name.to_owned());
        self.dir.join(name)
    }

    pub fn write_json(&mut self, name: &str, value: &impl Serialize) -> Result<()> {
        let path = self.output(name);
        write_json(&path, value)
    }

    pub fn finish(self) -> Result<RunManifest> {
        write_json(&self.dir.join("manifest.json"), &self.manifest)?;
        Ok(self.manifest)
    }
}

pub fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("cannot write {}", path.display()))
}
