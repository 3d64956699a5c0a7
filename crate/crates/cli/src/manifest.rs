//! Run manifests.
//!
//! The manifest hash covers the command, configuration, input fingerprints
//! and seeds. Timestamps, the raw command line and output locations are
//! recorded but left out of the hash, so identical runs into different
//! directories embed the same hash and produce identical artifacts.

use std::collections::BTreeMap;
use std::path::Path;

use anyhow::Context;
use serde::Serialize;
use serde_json::Value;
use sha2::{Digest, Sha256};

#[derive(Debug, Clone, Serialize)]
pub struct RunManifest {
    pub tool: String,
    pub version: String,
    pub command: String,
    pub config: Value,
    pub inputs: BTreeMap<String, String>,
    pub seeds: BTreeMap<String, u64>,
    pub outputs: BTreeMap<String, String>,
    pub command_line: Vec<String>,
    pub created_at: String,
    pub manifest_hash: String,
}

#[derive(Serialize)]
struct Hashed<'a> {
    tool: &'a str,
    version: &'a str,
    command: &'a str,
    config: &'a Value,
    inputs: &'a BTreeMap<String, String>,
    seeds: &'a BTreeMap<String, u64>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn file_sha256(path: &Path) -> anyhow::Result<String> {
    let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(sha256_hex(&bytes))
}

impl RunManifest {
    pub fn new(command: &str, config: Value) -> Self {
        RunManifest {
            tool: "scbm".into(),
            version: env!("CARGO_PKG_VERSION").into(),
            command: command.into(),
            config,
            inputs: BTreeMap::new(),
            seeds: BTreeMap::new(),
            outputs: BTreeMap::new(),
            command_line: std::env::args().collect(),
            created_at: chrono::Utc::now().to_rfc3339(),
            manifest_hash: String::new(),
        }
    }

    pub fn input(&mut self, name: &str, fingerprint: &str) -> &mut Self {
        self.inputs.insert(name.into(), fingerprint.into());
        self
    }

    /// Fingerprint an input file by content.
    pub fn input_file(&mut self, name: &str, path: &Path) -> anyhow::Result<&mut Self> {
        let fp = file_sha256(path)?;
        Ok(self.input(name, &fp))
    }

    pub fn seed(&mut self, name: &str, seed: u64) -> &mut Self {
        self.seeds.insert(name.into(), seed);
        self
    }

    /// Hash over the reproducibility-relevant fields.
    pub fn hash(&self) -> String {
        let h = Hashed {
            tool: &self.tool,
            version: &self.version,
            command: &self.command,
            config: &self.config,
            inputs: &self.inputs,
            seeds: &self.seeds,
        };
        sha256_hex(&serde_json::to_vec(&h).expect("serializable"))
    }

    /// Record an artifact by file name and content hash.
    pub fn output(&mut self, path: &Path) -> anyhow::Result<()> {
        let name = path
            .file_name()
            .map_or_else(|| path.display().to_string(), |n| n.to_string_lossy().into_owned());
        self.outputs.insert(name, file_sha256(path)?);
        Ok(())
    }

    pub fn write(&mut self, path: &Path) -> anyhow::Result<()> {
        self.manifest_hash = self.hash();
        let json = serde_json::to_vec_pretty(self)?;
        scbm_core::container::atomic_write(path, &json)?;
        Ok(())
    }
}
