//! Run manifests: one JSON file per command next to its primary output.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use mpo_core::{Error, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileDigest {
    pub path: String,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub artifact_version: String,
    pub config_hash: Option<String>,
    pub seed: Option<u64>,
    pub inputs: Vec<FileDigest>,
    pub outputs: Vec<FileDigest>,
    /// Command-specific facts, e.g. the held-out digest of an evaluation.
    pub notes: BTreeMap<String, String>,
    pub started_unix: u64,
    pub finished_unix: u64,
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect())
}

pub fn manifest_path(primary: &Path) -> PathBuf {
    let mut s = primary.as_os_str().to_owned();
    s.push(".manifest.json");
    PathBuf::from(s)
}

pub fn now_unix() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs())
}

pub fn load(path: &Path) -> Result<RunManifest> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))
}

/// Digest of an input file. When the file was produced by an earlier
/// command its manifest must agree with the bytes on disk.
pub fn check_input(path: &Path) -> Result<FileDigest> {
    let sha256 = sha256_file(path)?;
    let mpath = manifest_path(path);
    if mpath.exists() {
        let m = load(&mpath)?;
        let name = path.file_name();
        let listed = m.outputs.iter().find(|o| Path::new(&o.path).file_name() == name);
        if let Some(o) = listed {
            if o.sha256 != sha256 {
                return Err(Error::format(path, format!("digest does not match {}", mpath.display())));
            }
        }
    }
    Ok(FileDigest {
        path: path.display().to_string(),
        sha256,
    })
}

/// Collects inputs and outputs of one command and writes the manifest.
pub struct Recorder {
    m: RunManifest,
}

impl Recorder {
    pub fn start(command: &str, seed: Option<u64>) -> Self {
        Recorder {
            m: RunManifest {
                command: command.into(),
                artifact_version: env!("CARGO_PKG_VERSION").into(),
                config_hash: None,
                seed,
                inputs: Vec::new(),
                outputs: Vec::new(),
                notes: BTreeMap::new(),
                started_unix: now_unix(),
                finished_unix: 0,
            },
        }
    }

    pub fn config_hash(&mut self, h: String) {
        self.m.config_hash = Some(h);
    }

    pub fn note(&mut self, k: &str, v: impl ToString) {
        self.m.notes.insert(k.into(), v.to_string());
    }

    pub fn input(&mut self, path: &Path) -> Result<()> {
        let d = check_input(path)?;
        self.m.inputs.push(d);
        Ok(())
    }

    pub fn output(&mut self, path: &Path) -> Result<()> {
        self.m.outputs.push(FileDigest {
            path: path.display().to_string(),
            sha256: sha256_file(path)?,
        });
        Ok(())
    }

    /// Writes `<primary>.manifest.json`; `primary` is the first output.
    pub fn finish(mut self) -> Result<PathBuf> {
        self.m.finished_unix = now_unix();
        let primary = self.m.outputs.first().map(|o| PathBuf::from(&o.path)).expect("at least one output");
        let path = manifest_path(&primary);
        let text = serde_json::to_string_pretty(&self.m).expect("manifest serializes");
        fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }
}
