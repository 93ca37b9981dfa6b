//! Provenance records written next to every stage output.

use std::collections::BTreeMap;
use std::fs::File;
use std::io;
use std::path::{Path, PathBuf};

use log::warn;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::config::hex;
use crate::error::{Error, Result};
use crate::util::write_atomic;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub stage: String,
    pub config_hash: String,
    /// Path → SHA-256 of every file read.
    pub inputs: BTreeMap<String, String>,
    /// Path → SHA-256 of every file written.
    pub outputs: BTreeMap<String, String>,
}

pub fn file_hash(path: &Path) -> Result<String> {
    let mut f = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut h = Sha256::new();
    io::copy(&mut f, &mut h).map_err(|e| Error::io(path, e))?;
    Ok(hex(&h.finalize()))
}

pub fn hash_files<'a>(paths: impl IntoIterator<Item = &'a PathBuf>) -> Result<BTreeMap<String, String>> {
    paths
        .into_iter()
        .map(|p| Ok((p.display().to_string(), file_hash(p)?)))
        .collect()
}

/// `<dir>/manifest.json` for directories, `<file>.manifest.json` otherwise.
pub fn manifest_path(artifact: &Path) -> PathBuf {
    if artifact.is_dir() {
        artifact.join("manifest.json")
    } else {
        let mut name = artifact.file_name().unwrap_or_default().to_os_string();
        name.push(".manifest.json");
        artifact.with_file_name(name)
    }
}

pub fn write_manifest(path: &Path, m: &Manifest) -> Result<()> {
    let mut text = serde_json::to_string_pretty(m).expect("manifest serializes");
    text.push('\n');
    write_atomic(path, text.as_bytes())
}

pub fn read_manifest(path: &Path) -> Result<Option<Manifest>> {
    if !path.exists() {
        return Ok(None);
    }
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map(Some).map_err(|e| Error::Parse {
        line: e.line(),
        message: format!("{}: {e}", path.display()),
    })
}

/// Checks an upstream artifact against the hash of the settings the current run expects.
/// Artifacts without a manifest are accepted with a warning.
pub fn verify_upstream(artifact: &Path, stage: &str, expected_config_hash: &str) -> Result<()> {
    let mpath = manifest_path(artifact);
    let Some(m) = read_manifest(&mpath)? else {
        warn!("{} has no manifest; provenance not checked", artifact.display());
        return Ok(());
    };
    if m.stage != stage {
        return Err(Error::StaleArtifact(format!(
            "{} was written by stage {:?}, expected {stage:?}",
            artifact.display(),
            m.stage
        )));
    }
    if m.config_hash != expected_config_hash {
        return Err(Error::StaleArtifact(format!(
            "{} was produced with different {stage} settings; rerun {stage}",
            artifact.display()
        )));
    }
    for (path, hash) in &m.outputs {
        let p = Path::new(path);
        if !p.exists() {
            return Err(Error::MissingFiles(vec![p.to_path_buf()]));
        }
        if &file_hash(p)? != hash {
            return Err(Error::StaleArtifact(format!("{path} changed after {stage} wrote it")));
        }
    }
    Ok(())
}

/// True when `mpath` records the same settings and inputs and every output is intact.
pub fn is_up_to_date(mpath: &Path, config_hash: &str, inputs: &BTreeMap<String, String>) -> Result<bool> {
    let Some(m) = read_manifest(mpath)? else {
        return Ok(false);
    };
    if m.config_hash != config_hash || &m.inputs != inputs {
        return Ok(false);
    }
    for (path, hash) in &m.outputs {
        let p = Path::new(path);
        if !p.exists() || &file_hash(p)? != hash {
            return Ok(false);
        }
    }
    Ok(true)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sha256_known_value() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("abc");
        std::fs::write(&p, b"abc").unwrap();
        assert_eq!(file_hash(&p).unwrap(), "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
    }

    #[test]
    fn upstream_checks() {
        let dir = tempfile::tempdir().unwrap();
        let art = dir.path().join("patches.bin");
        std::fs::write(&art, b"payload").unwrap();
        verify_upstream(&art, "extract", "h1").unwrap();
        let m = Manifest {
            stage: "extract".into(),
            config_hash: "h1".into(),
            inputs: BTreeMap::new(),
            outputs: hash_files([&art]).unwrap(),
        };
        write_manifest(&manifest_path(&art), &m).unwrap();
        verify_upstream(&art, "extract", "h1").unwrap();
        assert!(is_up_to_date(&manifest_path(&art), "h1", &BTreeMap::new()).unwrap());
        assert!(!is_up_to_date(&manifest_path(&art), "h2", &BTreeMap::new()).unwrap());
        assert!(matches!(verify_upstream(&art, "extract", "h2"), Err(Error::StaleArtifact(_))));
        assert!(matches!(verify_upstream(&art, "train", "h1"), Err(Error::StaleArtifact(_))));
        std::fs::write(&art, b"tampered").unwrap();
        assert!(matches!(verify_upstream(&art, "extract", "h1"), Err(Error::StaleArtifact(_))));
        assert!(!is_up_to_date(&manifest_path(&art), "h1", &BTreeMap::new()).unwrap());
    }
}
