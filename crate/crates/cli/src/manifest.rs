//! Output directory bookkeeping and the run manifest.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use saywf::train::content_hash;
use saywf::{Error, Result};
use serde::Serialize;

use crate::settings::Settings;

/// Writes files under one directory and records their content hashes.
pub struct OutputDir {
    root: PathBuf,
    outputs: BTreeMap<String, String>,
    inputs: BTreeMap<String, String>,
}

impl OutputDir {
    pub fn create(root: &Path) -> Result<Self> {
        std::fs::create_dir_all(root).map_err(|e| Error::Data(format!("{}: {e}", root.display())))?;
        Ok(OutputDir {
            root: root.to_path_buf(),
            outputs: BTreeMap::new(),
            inputs: BTreeMap::new(),
        })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    pub fn put(&mut self, name: &str, bytes: &[u8]) -> Result<PathBuf> {
        let p = self.path(name);
        std::fs::write(&p, bytes).map_err(|e| Error::Data(format!("{}: {e}", p.display())))?;
        self.outputs.insert(name.to_string(), content_hash(bytes));
        Ok(p)
    }

    /// Records a file some library call already wrote under the directory.
    pub fn record(&mut self, name: &str) -> Result<()> {
        let p = self.path(name);
        let bytes = std::fs::read(&p).map_err(|e| Error::Data(format!("{}: {e}", p.display())))?;
        self.outputs.insert(name.to_string(), content_hash(&bytes));
        Ok(())
    }

    pub fn input(&mut self, path: &Path) -> Result<()> {
        let bytes = std::fs::read(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
        self.inputs.insert(path.display().to_string(), content_hash(&bytes));
        Ok(())
    }

    /// Writes `manifest-<command>.json` and returns its path.
    pub fn finish(self, command: &str, settings: &Settings, extra: serde_json::Value) -> Result<PathBuf> {
        let m = Manifest {
            command,
            version: env!("CARGO_PKG_VERSION"),
            seed: settings.seed,
            threads: settings.threads,
            settings,
            parameters: extra,
            inputs: &self.inputs,
            outputs: &self.outputs,
        };
        let p = self.root.join(format!("manifest-{command}.json"));
        let text = serde_json::to_string_pretty(&m)?;
        std::fs::write(&p, text + "\n").map_err(|e| Error::Data(format!("{}: {e}", p.display())))?;
        Ok(p)
    }
}

#[derive(Serialize)]
struct Manifest<'a> {
    command: &'a str,
    version: &'a str,
    seed: u64,
    threads: usize,
    settings: &'a Settings,
    parameters: serde_json::Value,
    inputs: &'a BTreeMap<String, String>,
    outputs: &'a BTreeMap<String, String>,
}
