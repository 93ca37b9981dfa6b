use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::metrics::{EvalOptions, DEFAULT_THRESHOLD};
use crate::nn::ModelSpec;
use crate::preprocess::PreprocessConfig;
use crate::raster::DEFAULT_MASK_THRESHOLD;
use crate::train::TrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PatchingConfig {
    pub n_per_image: usize,
    pub size: usize,
    /// Test-time grid stride.
    pub stride: i64,
    pub seed: u64,
    /// Mask and manual-annotation binarization: `pixel > threshold`.
    pub mask_threshold: u8,
}

impl Default for PatchingConfig {
    fn default() -> Self {
        Self {
            n_per_image: 9500,
            size: 48,
            stride: 5,
            seed: 0,
            mask_threshold: DEFAULT_MASK_THRESHOLD,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub threshold: f32,
    pub fov_only: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            threshold: DEFAULT_THRESHOLD,
            fov_only: true,
        }
    }
}

/// Everything a run depends on. `training.patch_size` and `training.patches_per_image`
/// must agree with the `patching` section.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub dataset_root: Option<PathBuf>,
    pub preprocess: PreprocessConfig,
    pub patching: PatchingConfig,
    pub model: ModelSpec,
    pub training: TrainConfig,
    pub evaluation: EvalConfig,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Config(format!("config line {}: {e}", e.line())))?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.preprocess.clahe.validate()?;
        if self.preprocess.se_radius == 0 {
            return Err(Error::InvalidElement("structuring element radius must be at least 1".into()));
        }
        if self.patching.stride <= 0 {
            return Err(Error::InvalidStride(self.patching.stride));
        }
        if self.patching.n_per_image == 0 {
            return Err(Error::Config("patching.n_per_image must be at least 1".into()));
        }
        if self.training.patch_size != self.patching.size {
            return Err(Error::Config(format!(
                "training.patch_size {} disagrees with patching.size {}",
                self.training.patch_size, self.patching.size
            )));
        }
        if self.training.patches_per_image != self.patching.n_per_image {
            return Err(Error::Config(format!(
                "training.patches_per_image {} disagrees with patching.n_per_image {}",
                self.training.patches_per_image, self.patching.n_per_image
            )));
        }
        if !(0.0..=1.0).contains(&self.evaluation.threshold) {
            return Err(Error::Config(format!("evaluation.threshold {} outside [0, 1]", self.evaluation.threshold)));
        }
        self.model.validate()?;
        self.training.validate()
    }

    pub fn set_patch_size(&mut self, size: usize) {
        self.patching.size = size;
        self.training.patch_size = size;
    }

    pub fn set_patches_per_image(&mut self, n: usize) {
        self.patching.n_per_image = n;
        self.training.patches_per_image = n;
    }

    pub fn eval_options(&self) -> EvalOptions {
        EvalOptions {
            threshold: self.evaluation.threshold,
            include_border: !self.evaluation.fov_only,
            ..EvalOptions::default()
        }
    }

    /// Hash of the settings that shape preprocessed images.
    pub fn preprocess_hash(&self) -> String {
        section_hash(&[&self.preprocess])
    }

    /// Hash of the settings that shape a patch file.
    pub fn extract_hash(&self) -> String {
        section_hash(&[&self.preprocess, &self.patching.n_per_image, &self.patching.size, &self.patching.seed, &self.patching.mask_threshold])
    }

    /// Hash of the settings that shape trained weights (given the patch file).
    pub fn train_hash(&self) -> String {
        section_hash(&[&self.model, &self.training])
    }

    /// Like [`train_hash`](Self::train_hash) but blind to the epoch count, so a run can be extended.
    pub fn resume_hash(&self) -> String {
        let training = TrainConfig { epochs: 0, ..self.training.clone() };
        section_hash(&[&self.model, &training])
    }

    /// Hash of the settings that shape probability maps and reports (given the weights).
    pub fn predict_hash(&self) -> String {
        section_hash(&[&self.preprocess, &self.patching.size, &self.patching.stride, &self.patching.mask_threshold, &self.evaluation])
    }
}

fn section_hash(parts: &[&dyn erased::Json]) -> String {
    let mut h = Sha256::new();
    for p in parts {
        h.update(p.json().as_bytes());
        h.update([0u8]);
    }
    hex(&h.finalize())
}

mod erased {
    pub trait Json {
        fn json(&self) -> String;
    }

    impl<T: serde::Serialize> Json for T {
        fn json(&self) -> String {
            serde_json::to_string(self).expect("config section serializes")
        }
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}
