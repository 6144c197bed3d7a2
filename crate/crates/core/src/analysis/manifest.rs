//! Run-directory manifest: configuration echo, seeds and input hashes.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::config::{DatasetChoice, RunConfig};
use crate::data::find_idx_files;
use crate::error::{Error, Result};

pub const MANIFEST_SCHEMA: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InputDigest {
    pub name: String,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub schema_version: u32,
    pub command: String,
    pub package_version: String,
    pub config: BTreeMap<String, String>,
    pub seeds: Vec<u64>,
    pub inputs: Vec<InputDigest>,
    /// Digest over all input digests, in order.
    pub input_hash: String,
    /// Files written by the command, relative to the run directory.
    pub outputs: Vec<String>,
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Git-style object hash: `sha256("blob <len>\0" || content)`.
pub fn blob_hash(content: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", content.len()).as_bytes());
    h.update(content);
    hex(&h.finalize())
}

fn file_digest(name: String, path: &Path) -> Result<InputDigest> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(InputDigest { name, sha256: blob_hash(&bytes) })
}

impl Manifest {
    /// Inputs hashed: the canonical config text, the teacher checkpoint
    /// when one is reused, and IDX data files when used.
    pub fn new(command: &str, cfg: &RunConfig, outputs: Vec<String>) -> Result<Self> {
        let mut inputs = vec![InputDigest { name: "config".into(), sha256: blob_hash(cfg.to_text().as_bytes()) }];
        if let Some(t) = &cfg.teacher {
            inputs.push(file_digest(format!("teacher:{}", t.display()), t)?);
        }
        if let DatasetChoice::Idx(dir) = &cfg.dataset {
            if let Some(files) = find_idx_files(dir) {
                for f in files {
                    let name = f.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
                    inputs.push(file_digest(format!("data:{name}"), &f)?);
                }
            }
        }
        let mut h = Sha256::new();
        for d in &inputs {
            h.update(d.name.as_bytes());
            h.update([0]);
            h.update(d.sha256.as_bytes());
            h.update([b'\n']);
        }
        Ok(Self {
            schema_version: MANIFEST_SCHEMA,
            command: command.into(),
            package_version: env!("CARGO_PKG_VERSION").into(),
            config: cfg.echo(),
            seeds: cfg.seeds.clone(),
            inputs,
            input_hash: hex(&h.finalize()),
            outputs,
        })
    }

    pub fn write(&self, dir: &Path) -> Result<PathBuf> {
        let path = dir.join(MANIFEST_FILE);
        std::fs::write(&path, serde_json::to_string_pretty(self)? + "\n").map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let m: Self = serde_json::from_str(&text)?;
        if m.schema_version != MANIFEST_SCHEMA {
            return Err(Error::Format {
                file: path,
                offset: 0,
                message: format!("manifest schema {} unsupported", m.schema_version),
            });
        }
        Ok(m)
    }

    /// The run configuration recorded in the echo.
    pub fn run_config(&self) -> Result<RunConfig> {
        let text: String = self.config.iter().map(|(k, v)| format!("{k} = {v}\n")).collect();
        RunConfig::parse(&text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn blob_hash_matches_git_framing() {
        // sha256 of "blob 0\0"
        assert_eq!(blob_hash(b""), "473a0f4c3be8a93681a267e3b1e9a7dcda1185436fe141f7749120a303721813");
    }

    #[test]
    fn manifest_round_trip_recovers_config() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = RunConfig::parse("shots = 75\nseeds = 4,5\n").unwrap();
        let m = Manifest::new("train-pqkd", &cfg, vec!["metrics.csv".into()]).unwrap();
        m.write(dir.path()).unwrap();
        let back = Manifest::read(dir.path()).unwrap();
        assert_eq!(back, m);
        assert_eq!(back.run_config().unwrap(), cfg);
        assert_eq!(back.seeds, vec![4, 5]);
        let other = Manifest::new("train-pqkd", &RunConfig::parse("shots = 76\nseeds = 4,5\n").unwrap(), vec![]).unwrap();
        assert_ne!(other.input_hash, m.input_hash);
    }
}
