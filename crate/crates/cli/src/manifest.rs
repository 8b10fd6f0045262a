//! Run manifest and atomic file output.

use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::Context;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Artifact {
    /// Relative to the output directory.
    pub path: String,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config_path: Option<String>,
    pub out_dir: String,
    pub seed: u64,
    /// Seconds since the Unix epoch at the end of the run.
    pub timestamp: u64,
    pub artifacts: Vec<Artifact>,
}

pub const MANIFEST: &str = "manifest.json";

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Writes through a sibling temporary file and a rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> anyhow::Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).with_context(|| format!("cannot create {}", parent.display()))?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    std::fs::write(&tmp, bytes).with_context(|| format!("cannot write {}", tmp.display()))?;
    std::fs::rename(&tmp, path).with_context(|| format!("cannot move {} into place", path.display()))?;
    Ok(())
}

/// Collects the files a command emits so the manifest can checksum them.
pub struct Outputs {
    root: PathBuf,
    written: Vec<Artifact>,
}

impl Outputs {
    pub fn new(root: &Path) -> anyhow::Result<Self> {
        std::fs::create_dir_all(root).with_context(|| format!("cannot create output directory {}", root.display()))?;
        Ok(Self { root: root.to_path_buf(), written: Vec::new() })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn write(&mut self, relative: &str, contents: impl AsRef<[u8]>) -> anyhow::Result<()> {
        let bytes = contents.as_ref();
        write_atomic(&self.root.join(relative), bytes)?;
        self.written.retain(|a| a.path != relative);
        self.written.push(Artifact { path: relative.to_string(), sha256: sha256_hex(bytes) });
        Ok(())
    }

    pub fn finish(self, command: &str, config_path: Option<&Path>, seed: u64) -> anyhow::Result<RunManifest> {
        let timestamp = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0);
        let manifest = RunManifest {
            command: command.to_string(),
            config_path: config_path.map(|p| p.display().to_string()),
            out_dir: self.root.display().to_string(),
            seed,
            timestamp,
            artifacts: self.written,
        };
        let text = serde_json::to_string_pretty(&manifest)? + "\n";
        write_atomic(&self.root.join(MANIFEST), text.as_bytes())?;
        Ok(manifest)
    }
}

/// Recomputes every checksum; returns the paths that no longer match.
#[cfg(test)]
pub fn verify(root: &Path, manifest: &RunManifest) -> anyhow::Result<Vec<String>> {
    let mut bad = Vec::new();
    for a in &manifest.artifacts {
        let bytes = std::fs::read(root.join(&a.path)).with_context(|| format!("cannot read {}", a.path))?;
        if sha256_hex(&bytes) != a.sha256 {
            bad.push(a.path.clone());
        }
    }
    Ok(bad)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn known_digest() {
        assert_eq!(sha256_hex(b"abc"), "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
    }

    #[test]
    fn manifest_checksums_match_files() {
        let dir = tempfile::tempdir().unwrap();
        let mut out = Outputs::new(dir.path()).unwrap();
        out.write("a.csv", "x,y\n1,2\n").unwrap();
        out.write("sub/b.svg", "<svg/>").unwrap();
        let m = out.finish("test", None, 4).unwrap();
        assert_eq!(m.artifacts.len(), 2);
        assert!(verify(dir.path(), &m).unwrap().is_empty());
        std::fs::write(dir.path().join("a.csv"), "changed").unwrap();
        assert_eq!(verify(dir.path(), &m).unwrap(), vec!["a.csv".to_string()]);
        let text = std::fs::read_to_string(dir.path().join(MANIFEST)).unwrap();
        assert_eq!(serde_json::from_str::<RunManifest>(&text).unwrap(), m);
        assert!(!dir.path().join("manifest.json.tmp").exists());
    }
}
