//! Per-stage record of configuration and file hashes, used to skip stages
//! whose inputs and outputs are unchanged.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::Read;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CliError, Result};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub config_hash: String,
    /// Input file path (relative to the output directory when inside it) to SHA-256.
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub stages: BTreeMap<String, StageRecord>,
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let mut f = File::open(path).map_err(|e| CliError::io(path, e))?;
    let mut h = Sha256::new();
    let mut buf = [0u8; 1 << 16];
    loop {
        let n = f.read(&mut buf).map_err(|e| CliError::io(path, e))?;
        if n == 0 {
            break;
        }
        h.update(&buf[..n]);
    }
    Ok(hex::encode(h.finalize()))
}

impl Manifest {
    pub fn load(out: &Path) -> Result<Self> {
        let path = out.join(MANIFEST_FILE);
        if !path.exists() {
            return Ok(Self::default());
        }
        let text = std::fs::read_to_string(&path).map_err(|e| CliError::io(&path, e))?;
        serde_json::from_str(&text).map_err(|e| CliError::Stage {
            stage: "manifest".into(),
            source: e.into(),
        })
    }

    pub fn save(&self, out: &Path) -> Result<()> {
        let path = out.join(MANIFEST_FILE);
        let mut text = serde_json::to_string_pretty(self).expect("manifest serializes");
        text.push('\n');
        std::fs::write(&path, text).map_err(|e| CliError::io(&path, e))
    }
}

/// Key under which a file is recorded: relative to `out` when inside it.
pub fn file_key(out: &Path, path: &Path) -> String {
    path.strip_prefix(out)
        .map(|p| p.to_string_lossy().replace('\\', "/"))
        .unwrap_or_else(|_| path.to_string_lossy().into_owned())
}

pub fn hash_files(out: &Path, files: &[PathBuf]) -> Result<BTreeMap<String, String>> {
    files
        .iter()
        .map(|p| Ok((file_key(out, p), sha256_file(p)?)))
        .collect()
}

impl StageRecord {
    /// True when the recorded configuration and inputs match and every
    /// recorded output still exists with its recorded hash.
    pub fn is_current(&self, out: &Path, config_hash: &str, inputs: &BTreeMap<String, String>) -> bool {
        if self.config_hash != config_hash || &self.inputs != inputs || self.outputs.is_empty() {
            return false;
        }
        self.outputs.iter().all(|(key, hash)| {
            let p = out.join(key);
            p.exists() && sha256_file(&p).map(|h| &h == hash).unwrap_or(false)
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn current_only_when_everything_matches() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path();
        let a = out.join("a.txt");
        std::fs::write(&a, "hello").unwrap();
        let outputs = hash_files(out, std::slice::from_ref(&a)).unwrap();
        assert_eq!(outputs.keys().next().unwrap(), "a.txt");
        let rec = StageRecord {
            config_hash: "c".into(),
            inputs: BTreeMap::new(),
            outputs,
        };
        assert!(rec.is_current(out, "c", &BTreeMap::new()));
        assert!(!rec.is_current(out, "d", &BTreeMap::new()));
        std::fs::write(&a, "changed").unwrap();
        assert!(!rec.is_current(out, "c", &BTreeMap::new()));
    }

    #[test]
    fn manifest_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut m = Manifest::default();
        m.stages.insert("synth".into(), StageRecord::default());
        m.save(dir.path()).unwrap();
        assert_eq!(Manifest::load(dir.path()).unwrap(), m);
    }
}
