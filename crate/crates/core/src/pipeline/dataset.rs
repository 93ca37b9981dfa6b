//! `<root>/{training,test}/{images,mask,1st_manual}` with files paired by numeric prefix.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

pub const IMAGES_DIR: &str = "images";
pub const MASK_DIR: &str = "mask";
pub const MANUAL_DIR: &str = "1st_manual";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Sample {
    pub id: u32,
    pub image: PathBuf,
    pub mask: PathBuf,
    /// Absent only when the split was scanned without annotations.
    pub manual: Option<PathBuf>,
}

/// Leading decimal digits of a file name, e.g. `21_training.png` → 21.
pub fn numeric_prefix(name: &str) -> Option<u32> {
    let digits: String = name.chars().take_while(|c| c.is_ascii_digit()).collect();
    digits.parse().ok()
}

/// Accepts either a split directory (containing `images/`) or a dataset root plus split name.
pub fn resolve_split(path: &Path, split: &str) -> PathBuf {
    if path.join(IMAGES_DIR).is_dir() {
        path.to_path_buf()
    } else {
        path.join(split)
    }
}

fn index_dir(dir: &Path) -> Result<BTreeMap<u32, PathBuf>> {
    let entries = fs::read_dir(dir).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingFiles(vec![dir.to_path_buf()]),
        _ => Error::io(dir, e),
    })?;
    let mut out = BTreeMap::new();
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        if !entry.file_type().map_err(|e| Error::io(dir, e))?.is_file() {
            continue;
        }
        let name = entry.file_name();
        let Some(id) = numeric_prefix(&name.to_string_lossy()) else {
            continue;
        };
        if let Some(prev) = out.insert(id, entry.path()) {
            return Err(Error::Config(format!(
                "two files with prefix {id} in {}: {} and {}",
                dir.display(),
                prev.display(),
                entry.path().display()
            )));
        }
    }
    Ok(out)
}

/// Pairs every image with its mask (and manual annotation when `with_manual`), sorted by id.
/// Any missing counterpart is reported as `MissingFiles`, naming `<dir>/<id>_*`.
pub fn scan_split(split_dir: &Path, with_manual: bool) -> Result<Vec<Sample>> {
    let images = index_dir(&split_dir.join(IMAGES_DIR))?;
    let masks = index_dir(&split_dir.join(MASK_DIR))?;
    let manual = if with_manual {
        Some(index_dir(&split_dir.join(MANUAL_DIR))?)
    } else {
        None
    };
    if images.is_empty() {
        return Err(Error::MissingFiles(vec![split_dir.join(IMAGES_DIR).join("<id>_*")]));
    }
    let mut missing = Vec::new();
    let mut samples = Vec::with_capacity(images.len());
    for (&id, image) in &images {
        let mask = masks.get(&id).cloned();
        if mask.is_none() {
            missing.push(split_dir.join(MASK_DIR).join(format!("{id}_*")));
        }
        let man = manual.as_ref().map(|m| m.get(&id).cloned());
        if let Some(None) = man {
            missing.push(split_dir.join(MANUAL_DIR).join(format!("{id}_*")));
        }
        if let Some(mask) = mask {
            samples.push(Sample {
                id,
                image: image.clone(),
                mask,
                manual: man.flatten(),
            });
        }
    }
    if !missing.is_empty() {
        return Err(Error::MissingFiles(missing));
    }
    Ok(samples)
}
