//! Run directory layout, atomic writes and run manifests.

use std::collections::BTreeMap;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::time::Duration;

use conceptdr::synthgen::SetMode;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::hex;

#[derive(Debug, thiserror::Error)]
#[error("missing {what} at {path}; run `conceptdr {producer}` first")]
pub struct MissingArtifact {
    pub what: String,
    pub path: PathBuf,
    pub producer: String,
}

#[derive(Debug, Clone)]
pub struct RunDir {
    pub root: PathBuf,
}

fn mode_suffix(mode: SetMode) -> &'static str {
    match mode {
        SetMode::Full => "",
        SetMode::Masked => "_masked",
    }
}

impl RunDir {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn dataset(&self) -> PathBuf {
        self.root.join("dataset")
    }

    pub fn grader(&self) -> PathBuf {
        self.root.join("grader.tnet")
    }

    pub fn cavs(&self, mode: SetMode) -> PathBuf {
        self.root.join(format!("cavs{}.json", mode_suffix(mode)))
    }

    pub fn tcav_report(&self, mode: SetMode) -> PathBuf {
        self.root.join(format!("tcav_report{}.json", mode_suffix(mode)))
    }

    /// Stem of the bottleneck checkpoint; `.tnet` and `.json` sit beside it.
    pub fn cbm(&self, n_concepts: usize) -> PathBuf {
        self.root.join(format!("cbm{n_concepts}"))
    }

    pub fn metrics(&self, name: &str) -> PathBuf {
        self.root.join(format!("metrics_{name}.json"))
    }

    pub fn ranking(&self) -> PathBuf {
        self.root.join("tti_ranking.json")
    }

    pub fn curve(&self) -> PathBuf {
        self.root.join("tti_curve.json")
    }

    pub fn interventions(&self) -> PathBuf {
        self.root.join("interventions")
    }

    pub fn report(&self) -> PathBuf {
        self.root.join("report.csv")
    }

    pub fn manifest(&self, command: &str) -> PathBuf {
        self.root.join("manifests").join(format!("{command}.json"))
    }

    /// Returns `path` if it exists, or an error naming the command that
    /// creates it.
    pub fn require(&self, path: PathBuf, what: &str, producer: impl Into<String>) -> Result<PathBuf, MissingArtifact> {
        if path.exists() {
            Ok(path)
        } else {
            Err(MissingArtifact {
                what: what.to_string(),
                path,
                producer: producer.into(),
            })
        }
    }
}

fn staging_path(path: &Path) -> PathBuf {
    let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    path.with_file_name(format!(".{name}.partial"))
}

/// Lets `write` produce a file or directory at a staging path, then renames
/// it over `path`.
pub fn commit_with<E>(path: &Path, write: impl FnOnce(&Path) -> Result<(), E>) -> Result<(), E>
where
    E: From<io::Error>,
{
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    let staging = staging_path(path);
    remove_any(&staging)?;
    if let Err(e) = write(&staging) {
        let _ = remove_any(&staging);
        return Err(e);
    }
    if path.is_dir() {
        fs::remove_dir_all(path)?;
    }
    fs::rename(&staging, path)?;
    Ok(())
}

pub fn write_atomic(path: &Path, bytes: &[u8]) -> io::Result<()> {
    commit_with(path, |tmp| fs::write(tmp, bytes))
}

pub fn write_json_atomic<T: Serialize>(path: &Path, value: &T) -> io::Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value).map_err(io::Error::other)?;
    bytes.push(b'\n');
    write_atomic(path, &bytes)
}

fn remove_any(path: &Path) -> io::Result<()> {
    match fs::symlink_metadata(path) {
        Ok(m) if m.is_dir() => fs::remove_dir_all(path),
        Ok(_) => fs::remove_file(path),
        Err(e) if e.kind() == io::ErrorKind::NotFound => Ok(()),
        Err(e) => Err(e),
    }
}

/// SHA-256 of a file, or of every file under a directory in path order.
pub fn content_hash(path: &Path) -> io::Result<String> {
    let mut hasher = Sha256::new();
    if path.is_dir() {
        let mut files = Vec::new();
        collect_files(path, &mut files)?;
        files.sort();
        for f in files {
            hasher.update(f.strip_prefix(path).unwrap_or(&f).to_string_lossy().as_bytes());
            hasher.update([0]);
            hasher.update(fs::read(&f)?);
        }
    } else {
        hasher.update(fs::read(path)?);
    }
    Ok(hex(&hasher.finalize()))
}

fn collect_files(dir: &Path, out: &mut Vec<PathBuf>) -> io::Result<()> {
    for entry in fs::read_dir(dir)? {
        let p = entry?.path();
        if p.is_dir() {
            collect_files(&p, out)?;
        } else {
            out.push(p);
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub config_hash: String,
    pub seed: u64,
    pub duration_secs: f64,
    /// Artifact path relative to the run directory, mapped to its content hash.
    pub artifacts: BTreeMap<String, String>,
}

impl Manifest {
    pub fn write(
        run: &RunDir,
        command: &str,
        config_hash: &str,
        seed: u64,
        duration: Duration,
        artifacts: &[PathBuf],
    ) -> io::Result<Manifest> {
        let mut hashes = BTreeMap::new();
        for a in artifacts {
            let rel = a.strip_prefix(&run.root).unwrap_or(a).to_string_lossy().into_owned();
            hashes.insert(rel, content_hash(a)?);
        }
        let manifest = Manifest {
            command: command.to_string(),
            config_hash: config_hash.to_string(),
            seed,
            duration_secs: duration.as_secs_f64(),
            artifacts: hashes,
        };
        write_json_atomic(&run.manifest(command), &manifest)?;
        Ok(manifest)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn atomic_write_replaces_and_leaves_no_staging() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.json");
        write_atomic(&p, b"one").unwrap();
        write_atomic(&p, b"two").unwrap();
        assert_eq!(fs::read(&p).unwrap(), b"two");
        let names: Vec<_> = fs::read_dir(dir.path()).unwrap().map(|e| e.unwrap().file_name()).collect();
        assert_eq!(names.len(), 1);
    }

    #[test]
    fn failed_write_keeps_the_old_artifact() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d");
        commit_with(&p, |tmp| {
            fs::create_dir(tmp)?;
            fs::write(tmp.join("x"), b"1")
        })
        .unwrap();
        let r: io::Result<()> = commit_with(&p, |tmp| {
            fs::create_dir(tmp)?;
            Err(io::Error::other("boom"))
        });
        assert!(r.is_err());
        assert_eq!(fs::read(p.join("x")).unwrap(), b"1");
        assert!(!staging_path(&p).exists());
    }

    #[test]
    fn directory_hash_depends_on_names_and_bytes() {
        let dir = tempfile::tempdir().unwrap();
        let d = dir.path().join("d");
        fs::create_dir_all(d.join("sub")).unwrap();
        fs::write(d.join("sub/a"), b"x").unwrap();
        let h1 = content_hash(&d).unwrap();
        fs::rename(d.join("sub/a"), d.join("sub/b")).unwrap();
        assert_ne!(h1, content_hash(&d).unwrap());
    }

    #[test]
    fn missing_artifact_names_producer() {
        let run = RunDir::new("/nowhere");
        let err = run.require(run.grader(), "grader checkpoint", "train-grader").unwrap_err();
        assert!(err.to_string().contains("`conceptdr train-grader`"));
    }
}
