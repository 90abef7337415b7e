//! Per-command run manifests.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn file_sha256(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(sha256_hex(&bytes))
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileHash {
    pub path: String,
    pub sha256: String,
}

/// What a command read, wrote and measured. Output paths are relative to the
/// command's `--out` directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub version: String,
    /// Effective configuration after command-line overrides.
    pub config: serde_json::Value,
    /// Command options that are not part of the config file.
    pub options: BTreeMap<String, String>,
    pub seeds: BTreeMap<String, u64>,
    pub inputs: Vec<FileHash>,
    pub outputs: Vec<FileHash>,
    pub metrics: BTreeMap<String, f64>,
    pub wall_time_secs: f64,
}

impl RunManifest {
    pub fn new(command: &str, config: serde_json::Value) -> Self {
        Self {
            command: command.into(),
            version: env!("CARGO_PKG_VERSION").into(),
            config,
            options: BTreeMap::new(),
            seeds: BTreeMap::new(),
            inputs: Vec::new(),
            outputs: Vec::new(),
            metrics: BTreeMap::new(),
            wall_time_secs: 0.0,
        }
    }

    pub fn add_input(&mut self, path: &Path) -> Result<()> {
        let sha256 = file_sha256(path)?;
        self.inputs.push(FileHash { path: path.display().to_string(), sha256 });
        Ok(())
    }

    /// Records a file this command wrote, by path relative to `out`.
    pub fn add_output(&mut self, out: &Path, rel: &str) -> Result<()> {
        let sha256 = file_sha256(&out.join(rel))?;
        self.outputs.push(FileHash { path: rel.into(), sha256 });
        Ok(())
    }

    /// Sorts outputs and writes `manifest_<command>.json` into `out`.
    pub fn write(&mut self, out: &Path) -> Result<std::path::PathBuf> {
        self.outputs.sort_by(|a, b| a.path.cmp(&b.path));
        let path = out.join(Self::file_name(&self.command));
        let text = serde_json::to_string_pretty(self)? + "\n";
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }

    pub fn file_name(command: &str) -> String {
        format!("manifest_{command}.json")
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn output(&self, rel: &str) -> Option<&FileHash> {
        self.outputs.iter().find(|f| f.path == rel)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn known_digest() {
        assert_eq!(sha256_hex(b"abc"), "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
    }

    #[test]
    fn outputs_sorted_and_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::create_dir(dir.path().join("sub")).unwrap();
        std::fs::write(dir.path().join("b.txt"), "b").unwrap();
        std::fs::write(dir.path().join("sub/a.txt"), "a").unwrap();
        let mut m = RunManifest::new("x", serde_json::json!({"k": 1}));
        m.add_output(dir.path(), "sub/a.txt").unwrap();
        m.add_output(dir.path(), "b.txt").unwrap();
        let path = m.write(dir.path()).unwrap();
        assert!(path.ends_with("manifest_x.json"));
        let paths: Vec<&str> = m.outputs.iter().map(|f| f.path.as_str()).collect();
        assert_eq!(paths, ["b.txt", "sub/a.txt"]);
        assert_eq!(m.output("sub/a.txt").unwrap().sha256, sha256_hex(b"a"));
        assert_eq!(RunManifest::read(&path).unwrap(), m);
        assert!(m.add_output(dir.path(), "missing").is_err());
    }
}
