use std::fs;
use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{Context, Result};
use serde::Serialize;
use sha2::{Digest, Sha256};
use tbnet::config::{AblationFlags, TrainConfig};

pub const MANIFEST_FILE: &str = "manifest.json";

/// What a run was asked to do and on which bytes.
#[derive(Serialize)]
pub struct RunManifest {
    pub command: String,
    pub args: Vec<String>,
    pub config: TrainConfig,
    pub flags: AblationFlags,
    /// SHA-256 over every file under the data path, in sorted path order.
    pub dataset_sha256: String,
    pub version: String,
    pub started_unix: u64,
    pub finished_unix: Option<u64>,
}

fn now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs())
}

fn collect(dir: &Path, out: &mut Vec<std::path::PathBuf>) -> Result<()> {
    for e in fs::read_dir(dir).with_context(|| format!("reading {}", dir.display()))? {
        let p = e?.path();
        if p.is_dir() {
            collect(&p, out)?;
        } else {
            out.push(p);
        }
    }
    Ok(())
}

/// Hash of relative paths and contents of every file below `root` (or of `root` itself when it is a file).
pub fn fingerprint(root: &Path) -> Result<String> {
    let mut files = Vec::new();
    if root.is_dir() {
        collect(root, &mut files)?;
    } else {
        files.push(root.to_path_buf());
    }
    files.sort();
    let mut h = Sha256::new();
    for f in files {
        let rel = f.strip_prefix(root).unwrap_or(&f);
        h.update(rel.to_string_lossy().as_bytes());
        h.update([0]);
        let bytes = fs::read(&f).with_context(|| format!("reading {}", f.display()))?;
        h.update((bytes.len() as u64).to_le_bytes());
        h.update(&bytes);
    }
    Ok(hex::encode(h.finalize()))
}

impl RunManifest {
    pub fn new(command: &str, config: &TrainConfig, flags: &AblationFlags, data: &Path) -> Result<Self> {
        Ok(Self {
            command: command.into(),
            args: std::env::args().skip(1).collect(),
            config: config.clone(),
            flags: *flags,
            dataset_sha256: fingerprint(data)?,
            version: env!("CARGO_PKG_VERSION").into(),
            started_unix: now(),
            finished_unix: None,
        })
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        let p = dir.join(MANIFEST_FILE);
        let json = serde_json::to_string_pretty(self).expect("manifest serializes");
        fs::write(&p, json + "\n").with_context(|| format!("writing {}", p.display()))
    }

    pub fn finish(&mut self, dir: &Path) -> Result<()> {
        self.finished_unix = Some(now());
        self.write(dir)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fingerprint_tracks_content_and_names() {
        let d = tempfile::tempdir().unwrap();
        fs::create_dir(d.path().join("a")).unwrap();
        fs::write(d.path().join("a/x"), b"one").unwrap();
        let f1 = fingerprint(d.path()).unwrap();
        assert_eq!(f1, fingerprint(d.path()).unwrap());
        fs::write(d.path().join("a/x"), b"two").unwrap();
        let f2 = fingerprint(d.path()).unwrap();
        assert_ne!(f1, f2);
        fs::rename(d.path().join("a/x"), d.path().join("a/y")).unwrap();
        assert_ne!(f2, fingerprint(d.path()).unwrap());
    }
}
