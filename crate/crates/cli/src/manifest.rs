//! Per-command manifests: resolved settings, seeds, and content hashes of
//! every input and output. No timestamps, so reruns give identical files.

use std::collections::BTreeMap;
use std::path::Path;

use orderhint::util::sha256_hex;
use orderhint::{Error, Result};
use serde::Serialize;
use serde_json::Value;

#[derive(Debug, Serialize)]
pub struct Manifest {
    pub command: String,
    pub version: String,
    pub settings: Value,
    pub seeds: BTreeMap<String, u64>,
    pub inputs: BTreeMap<String, Hashed>,
    pub outputs: BTreeMap<String, String>,
}

#[derive(Debug, Serialize)]
pub struct Hashed {
    pub path: String,
    pub sha256: String,
}

pub fn file_hash(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(sha256_hex(&bytes))
}

impl Manifest {
    pub fn new(command: &str, settings: impl Serialize) -> Self {
        Manifest {
            command: command.into(),
            version: env!("CARGO_PKG_VERSION").into(),
            settings: serde_json::to_value(settings).expect("settings serialize"),
            seeds: BTreeMap::new(),
            inputs: BTreeMap::new(),
            outputs: BTreeMap::new(),
        }
    }

    pub fn seed(&mut self, name: &str, value: u64) -> &mut Self {
        self.seeds.insert(name.into(), value);
        self
    }

    pub fn input(&mut self, role: &str, path: &Path) -> Result<&mut Self> {
        let sha256 = file_hash(path)?;
        self.inputs.insert(
            role.into(),
            Hashed {
                path: path.display().to_string(),
                sha256,
            },
        );
        Ok(self)
    }

    /// Records an output under its file name.
    pub fn output(&mut self, path: &Path) -> Result<&mut Self> {
        let name = path
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_else(|| path.display().to_string());
        self.outputs.insert(name, file_hash(path)?);
        Ok(self)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).expect("manifest serializes") + "\n";
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}
