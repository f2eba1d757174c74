use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use chrono::{SecondsFormat, Utc};
use serde::Serialize;
use sha2::{Digest, Sha256};

pub const DIGEST_ALGORITHM: &str = "sha256";

/// Writes `bytes` to a hidden sibling file, syncs it, then renames it over
/// `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = temp_sibling(path);
    let mut f = fs::File::create(&tmp).with_context(|| format!("creating {}", tmp.display()))?;
    f.write_all(bytes)
        .with_context(|| format!("writing {}", tmp.display()))?;
    f.sync_all().with_context(|| format!("syncing {}", tmp.display()))?;
    fs::rename(&tmp, path).with_context(|| format!("renaming onto {}", path.display()))
}

pub fn temp_sibling(path: &Path) -> PathBuf {
    let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("out");
    path.with_file_name(format!(".{name}.tmp"))
}

pub fn file_digest(path: &Path) -> Result<String> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

fn now() -> String {
    Utc::now().to_rfc3339_opts(SecondsFormat::Millis, true)
}

#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub config: BTreeMap<String, serde_json::Value>,
    pub seed: Option<u64>,
    pub digest_algorithm: &'static str,
    pub input_hashes: BTreeMap<String, String>,
    pub outputs: Vec<String>,
    /// Values decided during the run, such as the best epoch.
    pub results: BTreeMap<String, serde_json::Value>,
    pub started: String,
    pub finished: Option<String>,
}

impl RunManifest {
    pub fn start(command: &str, config: &impl Serialize, seed: Option<u64>) -> Result<Self> {
        let config = match serde_json::to_value(config)? {
            serde_json::Value::Object(map) => map.into_iter().collect(),
            other => BTreeMap::from([("value".to_string(), other)]),
        };
        Ok(RunManifest {
            command: command.to_string(),
            config,
            seed,
            digest_algorithm: DIGEST_ALGORITHM,
            input_hashes: BTreeMap::new(),
            outputs: Vec::new(),
            results: BTreeMap::new(),
            started: now(),
            finished: None,
        })
    }

    pub fn input(&mut self, path: &Path) -> Result<()> {
        let digest = file_digest(path)?;
        self.input_hashes.insert(path.display().to_string(), digest);
        Ok(())
    }

    pub fn output(&mut self, path: &Path) {
        self.outputs.push(path.display().to_string());
    }

    pub fn finish(mut self, path: &Path) -> Result<()> {
        self.finished = Some(now());
        let mut text = serde_json::to_string_pretty(&self)?;
        text.push('\n');
        write_atomic(path, text.as_bytes())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn atomic_write_replaces_and_leaves_no_temp() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("out.txt");
        write_atomic(&path, b"first").unwrap();
        write_atomic(&path, b"second").unwrap();
        assert_eq!(fs::read_to_string(&path).unwrap(), "second");
        assert!(!temp_sibling(&path).exists());
    }

    #[test]
    fn digest_of_known_bytes() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("abc");
        fs::write(&path, b"abc").unwrap();
        assert_eq!(
            file_digest(&path).unwrap(),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }

    #[test]
    fn manifest_records_inputs() {
        #[derive(Serialize)]
        struct Cfg {
            k: usize,
        }
        let dir = tempfile::tempdir().unwrap();
        let input = dir.path().join("in");
        fs::write(&input, b"abc").unwrap();
        let mut m = RunManifest::start("stats", &Cfg { k: 3 }, Some(7)).unwrap();
        m.input(&input).unwrap();
        let out = dir.path().join("manifest.json");
        m.finish(&out).unwrap();
        let v: serde_json::Value = serde_json::from_str(&fs::read_to_string(&out).unwrap()).unwrap();
        assert_eq!(v["command"], "stats");
        assert_eq!(v["config"]["k"], 3);
        assert_eq!(v["seed"], 7);
        assert_eq!(v["digest_algorithm"], "sha256");
        assert!(v["finished"].is_string());
        assert_eq!(v["input_hashes"].as_object().unwrap().len(), 1);
    }
}
