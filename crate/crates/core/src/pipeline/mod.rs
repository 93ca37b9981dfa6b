//! Stage orchestration: run configuration, dataset layout, provenance
//! manifests, the preprocess/extract/train/predict/evaluate stages and plots.

mod config;
mod dataset;
mod manifest;
mod plot;
mod stages;

use std::path::Path;

pub use config::{EvalConfig, PatchingConfig, RunConfig};
pub use dataset::{numeric_prefix, resolve_split, scan_split, Sample, IMAGES_DIR, MANUAL_DIR, MASK_DIR};
pub use manifest::{file_hash, manifest_path, read_manifest, verify_upstream, Manifest};
pub use plot::{history_svg, parse_report, plot_file, roc_svg};
pub use stages::{cmd_evaluate, cmd_extract, cmd_predict, cmd_preprocess, cmd_train, EvaluateArgs, TrainArgs, TEST, TRAINING};

use crate::error::{Error, Result};
use crate::nn::{param_count, ModelSpec};
use crate::train::TrainConfig;

/// Reads a run configuration. A document holding only training fields is
/// accepted too and placed under `training`.
pub fn load_config(path: &Path) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    match RunConfig::from_json(&text) {
        Ok(cfg) => Ok(cfg),
        Err(run_err) => match serde_json::from_str::<TrainConfig>(&text) {
            Ok(training) => {
                let mut cfg = RunConfig::default();
                cfg.set_patch_size(training.patch_size);
                cfg.set_patches_per_image(training.patches_per_image);
                cfg.training = training;
                Ok(cfg)
            }
            Err(_) => Err(run_err),
        },
    }
}

/// Trainable parameters of the network described by `spec`.
pub fn cmd_paramcount(spec: &ModelSpec) -> Result<usize> {
    spec.validate()?;
    Ok(param_count(spec))
}
