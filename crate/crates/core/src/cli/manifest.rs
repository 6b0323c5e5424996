use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::interventions::ExperimentSpec;
use crate::model::ModelConfig;
use crate::training::TrainConfig;

pub const MANIFEST_FILE: &str = "manifest.json";

/// What produced an output directory, with checksums of every file in it.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool: String,
    pub version: String,
    pub command: String,
    pub seed: u64,
    pub output_dir: String,
    pub model: Option<ModelConfig>,
    pub train: Option<TrainConfig>,
    pub experiments: BTreeMap<String, ExperimentSpec>,
    /// Free-form settings such as sample counts and input paths.
    pub settings: BTreeMap<String, String>,
    /// File name to SHA-256 hex digest.
    pub files: BTreeMap<String, String>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

/// An output directory whose manifest is written first and refreshed after
/// every file.
pub struct OutputDir {
    path: PathBuf,
    pub manifest: RunManifest,
}

impl OutputDir {
    pub fn create(path: &Path, command: &str, seed: u64) -> Result<Self> {
        fs::create_dir_all(path).map_err(|e| Error::io(path, e))?;
        let manifest = RunManifest {
            tool: "mhc".into(),
            version: env!("CARGO_PKG_VERSION").into(),
            command: command.into(),
            seed,
            output_dir: path.display().to_string(),
            ..RunManifest::default()
        };
        Ok(Self {
            path: path.to_path_buf(),
            manifest,
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    /// Persist the manifest as it stands.
    pub fn save_manifest(&self) -> Result<()> {
        let path = self.path.join(MANIFEST_FILE);
        let mut text = serde_json::to_string_pretty(&self.manifest)
            .map_err(|e| Error::Format(e.to_string()))?;
        text.push('\n');
        fs::write(&path, text).map_err(|e| Error::io(path, e))
    }

    pub fn write(&mut self, name: &str, bytes: &[u8]) -> Result<()> {
        let path = self.path.join(name);
        fs::write(&path, bytes).map_err(|e| Error::io(path, e))?;
        self.manifest
            .files
            .insert(name.to_string(), sha256_hex(bytes));
        self.save_manifest()
    }
}
