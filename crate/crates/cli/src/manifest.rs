use std::fs::{self, OpenOptions};
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{bail, Result};
use serde::{Deserialize, Serialize};

pub const MANIFEST: &str = "manifest.json";

#[derive(Debug, Clone, Default, Serialize, Deserialize, PartialEq)]
pub struct ParamCounts {
    pub with_tbm: usize,
    pub without_tbm: usize,
    pub tbm: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

/// Everything needed to re-run a command and locate its outputs.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    /// Fully resolved config in the flat `key = value` format.
    pub config: String,
    pub seeds: Vec<u64>,
    pub code_version: String,
    pub started_unix: u64,
    pub finished_unix: Option<u64>,
    pub status: String,
    /// Paths relative to the output directory.
    pub artifacts: Vec<String>,
    pub param_counts: Option<ParamCounts>,
    #[serde(default)]
    pub parameters: Vec<ParamEntry>,
    #[serde(default)]
    pub extra: serde_json::Value,
}

pub fn now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs())
}

impl RunManifest {
    pub fn new(command: &str, config: String, seeds: Vec<u64>) -> Self {
        Self {
            command: command.into(),
            config,
            seeds,
            code_version: format!("token-boost {}", env!("CARGO_PKG_VERSION")),
            started_unix: now(),
            finished_unix: None,
            status: "running".into(),
            artifacts: Vec::new(),
            param_counts: None,
            parameters: Vec::new(),
            extra: serde_json::Value::Null,
        }
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        let p = dir.join(MANIFEST);
        let tmp = dir.join(".manifest.json.tmp");
        fs::write(&tmp, serde_json::to_string_pretty(self)?)?;
        fs::rename(&tmp, &p)?;
        Ok(())
    }

    pub fn add_artifact(&mut self, dir: &Path, path: &Path) {
        let rel = path.strip_prefix(dir).unwrap_or(path).display().to_string();
        if !self.artifacts.contains(&rel) {
            self.artifacts.push(rel);
        }
    }

    /// Mark finished; on success every listed artifact must exist.
    pub fn finish(&mut self, dir: &Path, ok: bool) -> Result<()> {
        self.finished_unix = Some(now());
        self.status = if ok { "ok".into() } else { "failed".into() };
        if ok {
            let missing: Vec<&String> = self.artifacts.iter().filter(|a| !dir.join(a).exists()).collect();
            if !missing.is_empty() {
                self.status = "failed".into();
                self.write(dir)?;
                bail!("artifacts missing after run: {missing:?}");
            }
        }
        self.write(dir)
    }
}

/// Exclusive ownership of an output directory for the life of the value.
pub struct DirLock {
    path: PathBuf,
}

impl DirLock {
    pub fn acquire(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir)?;
        let path = dir.join(".lock");
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(_) => {
                fs::write(&path, std::process::id().to_string())?;
                Ok(Self { path })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                bail!("output directory {} is locked by another process ({})", dir.display(), path.display())
            }
            Err(e) => Err(e.into()),
        }
    }
}

impl Drop for DirLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lock_is_exclusive() {
        let d = tempfile::tempdir().unwrap();
        let a = DirLock::acquire(d.path()).unwrap();
        assert!(DirLock::acquire(d.path()).is_err());
        drop(a);
        assert!(DirLock::acquire(d.path()).is_ok());
    }

    #[test]
    fn finish_checks_artifacts() {
        let d = tempfile::tempdir().unwrap();
        let mut m = RunManifest::new("x", String::new(), vec![0]);
        m.add_artifact(d.path(), &d.path().join("missing.csv"));
        assert!(m.finish(d.path(), true).is_err());
        let back: RunManifest = serde_json::from_str(&fs::read_to_string(d.path().join(MANIFEST)).unwrap()).unwrap();
        assert_eq!(back.status, "failed");
    }
}
