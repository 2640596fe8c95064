//! Provenance manifest tying pipeline artifacts to the config that made them.

use std::path::Path;

use debias_core::digest::sha256_hex;
use debias_core::{Error, Result};
use serde::{Deserialize, Serialize};

use crate::config::PipelineConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Status {
    Partial,
    Complete,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Artifact {
    pub name: String,
    /// Relative to the output directory.
    pub path: String,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub status: Status,
    pub config_digest: String,
    pub config: PipelineConfig,
    pub stages_completed: Vec<String>,
    pub outputs: Vec<Artifact>,
    /// Secondary files (group listing, sidecars, plots).
    pub auxiliary: Vec<Artifact>,
}

impl Manifest {
    pub fn new(config: &PipelineConfig) -> Self {
        Manifest {
            status: Status::Partial,
            config_digest: config.digest(),
            config: config.recorded(),
            stages_completed: Vec::new(),
            outputs: Vec::new(),
            auxiliary: Vec::new(),
        }
    }

    pub fn artifact(out: &Path, name: &str, rel: &str) -> Result<Artifact> {
        let path = out.join(rel);
        let bytes = std::fs::read(&path).map_err(|e| Error::Io { path, source: e })?;
        Ok(Artifact {
            name: name.to_string(),
            path: rel.to_string(),
            sha256: sha256_hex(&bytes),
        })
    }

    pub fn write(&self, out: &Path) -> Result<()> {
        crate::write_json(&out.join(MANIFEST_FILE), self)
    }

    pub fn read(out: &Path) -> Result<Self> {
        let path = out.join(MANIFEST_FILE);
        let text = std::fs::read_to_string(&path).map_err(|e| Error::Io {
            path: path.clone(),
            source: e,
        })?;
        serde_json::from_str(&text).map_err(|e| Error::Parse {
            offset: 0,
            message: format!("{}: {e}", path.display()),
        })
    }
}

pub const MANIFEST_FILE: &str = "manifest.json";
