use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use log::info;
use serde::{Deserialize, Serialize};

use super::config::RunConfig;
use super::dataset::{resolve_split, scan_split, Sample};
use super::manifest::{file_hash, hash_files, is_up_to_date, manifest_path, verify_upstream, write_manifest, Manifest};
use crate::error::{Error, Result};
use crate::metrics::{evaluate_scored, predict_image, DatasetReport, ScoredImage};
use crate::nn::{read_params, ModelParams};
use crate::patch::{load_patch_set, sample_train_patches, save_patch_set, PatchSet, ProbabilityMap};
use crate::preprocess::preprocess_any;
use crate::raster::{load_mask, load_raster, save_raster, FovMask, Raster};
use crate::train::{fit, resume_path, FitOptions, FitOutcome};
use crate::util::write_atomic;

pub const TRAINING: &str = "training";
pub const TEST: &str = "test";

fn require(paths: &[&Path]) -> Result<()> {
    let missing: Vec<PathBuf> = paths.iter().filter(|p| !p.exists()).map(|p| p.to_path_buf()).collect();
    if missing.is_empty() {
        Ok(())
    } else {
        Err(Error::MissingFiles(missing))
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn split_name(split_dir: &Path, default: &str) -> String {
    split_dir
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| default.to_string())
}

/// `<prep>/<split>` when present, else `prep` itself.
fn prep_split_dir(prep: &Path, split: &str) -> PathBuf {
    let sub = prep.join(split);
    if sub.is_dir() {
        sub
    } else {
        prep.to_path_buf()
    }
}

fn preprocessed_name(id: u32) -> String {
    format!("{id:02}.pgm")
}

/// The network input for `sample`: read from a preprocess output directory, or computed.
fn network_input(cfg: &RunConfig, sample: &Sample, prep_dir: Option<&Path>) -> Result<Raster> {
    match prep_dir {
        Some(dir) => {
            let path = dir.join(preprocessed_name(sample.id));
            require(&[&path])?;
            load_raster(&path)
        }
        None => preprocess_any(&load_raster(&sample.image)?, &cfg.preprocess),
    }
}

fn checked_prep_dir(cfg: &RunConfig, prep: Option<&Path>, split: &str) -> Result<Option<PathBuf>> {
    let Some(prep) = prep else { return Ok(None) };
    let dir = prep_split_dir(prep, split);
    require(&[&dir])?;
    verify_upstream(&dir, "preprocess", &cfg.preprocess_hash())?;
    Ok(Some(dir))
}

fn load_masks(cfg: &RunConfig, sample: &Sample, image: &Raster) -> Result<(FovMask, Option<FovMask>)> {
    let thr = cfg.patching.mask_threshold;
    let fov = load_mask(&sample.mask, thr)?;
    let gt = sample.manual.as_ref().map(|p| load_mask(p, thr)).transpose()?;
    let dims = (image.width(), image.height());
    for (what, m) in std::iter::once(("mask", &fov)).chain(gt.as_ref().map(|g| ("manual annotation", g))) {
        if (m.width(), m.height()) != dims {
            return Err(Error::DimensionMismatch(format!(
                "image {} is {}x{} but its {what} is {}x{}",
                sample.id,
                dims.0,
                dims.1,
                m.width(),
                m.height()
            )));
        }
    }
    Ok((fov, gt))
}

fn sample_inputs(samples: &[Sample]) -> Vec<PathBuf> {
    samples
        .iter()
        .flat_map(|s| [Some(s.image.clone()), Some(s.mask.clone()), s.manual.clone()])
        .flatten()
        .collect()
}

/// Writes `<out>/<split>/<id>.pgm` for every image of the requested splits.
/// `data` may be the dataset root (both splits) or a single split directory.
pub fn cmd_preprocess(cfg: &RunConfig, data: &Path, out: &Path) -> Result<Vec<PathBuf>> {
    cfg.validate()?;
    let splits: Vec<(PathBuf, String)> = if data.join("images").is_dir() {
        vec![(data.to_path_buf(), split_name(data, TRAINING))]
    } else {
        [TRAINING, TEST]
            .iter()
            .map(|s| (data.join(s), s.to_string()))
            .filter(|(d, _)| d.is_dir())
            .collect()
    };
    if splits.is_empty() {
        return Err(Error::MissingFiles(vec![data.join(TRAINING), data.join(TEST)]));
    }
    let mut written = Vec::new();
    for (split_dir, name) in splits {
        let samples = scan_split(&split_dir, name == TRAINING)?;
        let out_dir = out.join(&name);
        create_dir(&out_dir)?;
        let inputs = hash_files(&sample_inputs(&samples))?;
        let mpath = out_dir.join("manifest.json");
        let outputs: Vec<PathBuf> = samples.iter().map(|s| out_dir.join(preprocessed_name(s.id))).collect();
        if is_up_to_date(&mpath, &cfg.preprocess_hash(), &inputs)? {
            info!("{}: up to date", out_dir.display());
            written.extend(outputs);
            continue;
        }
        for (s, dst) in samples.iter().zip(&outputs) {
            let img = load_raster(&s.image)?;
            let enhanced = preprocess_any(&img, &cfg.preprocess)?;
            save_raster(&enhanced, dst)?;
            info!("preprocessed {} -> {}", s.image.display(), dst.display());
        }
        write_manifest(
            &mpath,
            &Manifest {
                stage: "preprocess".into(),
                config_hash: cfg.preprocess_hash(),
                inputs,
                outputs: hash_files(&outputs)?,
            },
        )?;
        written.extend(outputs);
    }
    Ok(written)
}

/// Samples `n_per_image` training patches from every training image into one patch file.
pub fn cmd_extract(cfg: &RunConfig, data: &Path, prep: Option<&Path>, out: &Path) -> Result<usize> {
    cfg.validate()?;
    let split_dir = resolve_split(data, TRAINING);
    let samples = scan_split(&split_dir, true)?;
    let prep_dir = checked_prep_dir(cfg, prep, TRAINING)?;
    let mut input_paths = sample_inputs(&samples);
    if let Some(dir) = &prep_dir {
        input_paths.extend(samples.iter().map(|s| dir.join(preprocessed_name(s.id))));
    }
    let inputs = hash_files(&input_paths)?;
    let mpath = manifest_path(out);
    if is_up_to_date(&mpath, &cfg.extract_hash(), &inputs)? {
        info!("{}: up to date", out.display());
        return Ok(load_patch_set(out)?.len());
    }
    let p = &cfg.patching;
    let mut set = PatchSet::empty(p.size);
    for s in &samples {
        let image = network_input(cfg, s, prep_dir.as_deref())?;
        let (fov, gt) = load_masks(cfg, s, &image)?;
        let gt = gt.expect("training samples carry annotations");
        let seed = p.seed.wrapping_add(s.id as u64);
        set.extend(sample_train_patches(&image, &fov, &gt, p.n_per_image, p.size, seed, s.id)?)?;
        info!("image {}: {} patches", s.id, p.n_per_image);
    }
    save_patch_set(&set, out)?;
    write_manifest(
        &mpath,
        &Manifest {
            stage: "extract".into(),
            config_hash: cfg.extract_hash(),
            inputs,
            outputs: hash_files([&out.to_path_buf()])?,
        },
    )?;
    Ok(set.len())
}

#[derive(Debug, Clone, Default)]
pub struct TrainArgs {
    pub history: Option<PathBuf>,
    pub resume: bool,
    pub save_optimizer: bool,
}

#[derive(Serialize, Deserialize, PartialEq)]
struct ResumeGuard {
    config_hash: String,
    input_hash: String,
}

fn guard_path(out: &Path) -> PathBuf {
    let mut p = resume_path(out).into_os_string();
    p.push(".json");
    PathBuf::from(p)
}

/// Trains on a patch file; writes the best-validation weights to `out`.
pub fn cmd_train(cfg: &RunConfig, data: &Path, out: &Path, args: &TrainArgs) -> Result<FitOutcome> {
    cfg.validate()?;
    require(&[data])?;
    verify_upstream(data, "extract", &cfg.extract_hash())?;
    let set = load_patch_set(data)?;
    if set.patch_dims() != (cfg.patching.size, cfg.patching.size) {
        return Err(Error::StaleArtifact(format!(
            "{} holds {:?} patches, config expects {}",
            data.display(),
            set.patch_dims(),
            cfg.patching.size
        )));
    }
    let guard = ResumeGuard {
        config_hash: cfg.resume_hash(),
        input_hash: file_hash(data)?,
    };
    let gpath = guard_path(out);
    if args.resume && resume_path(out).exists() {
        let stored: Option<ResumeGuard> = fs::read_to_string(&gpath).ok().and_then(|t| serde_json::from_str(&t).ok());
        if stored.as_ref() != Some(&guard) {
            return Err(Error::StaleArtifact(format!(
                "{} belongs to a different configuration or patch file",
                resume_path(out).display()
            )));
        }
    }
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    write_atomic(&gpath, serde_json::to_string(&guard).expect("guard serializes").as_bytes())?;
    let outcome = fit(
        &cfg.training,
        &cfg.model,
        &set,
        &FitOptions {
            checkpoint: Some(out.to_path_buf()),
            history: args.history.clone(),
            resume: args.resume,
            save_optimizer: args.save_optimizer,
            init_seed: None,
        },
    )?;
    info!("best epoch {} (validation loss {:.5})", outcome.best_epoch, outcome.best_val_loss);
    let mut outputs = vec![out.to_path_buf()];
    outputs.extend(args.history.clone());
    write_manifest(
        &manifest_path(out),
        &Manifest {
            stage: "train".into(),
            config_hash: cfg.train_hash(),
            inputs: BTreeMap::from([(data.display().to_string(), guard.input_hash)]),
            outputs: hash_files(&outputs)?,
        },
    )?;
    Ok(outcome)
}

fn load_model(model: &Path) -> Result<ModelParams<f32>> {
    require(&[model])?;
    read_params(model, None)
}

fn save_maps(dir: &Path, id: u32, probs: &ProbabilityMap, threshold: f32) -> Result<[PathBuf; 2]> {
    let prob = dir.join(format!("{id:02}_prob.pgm"));
    let bin = dir.join(format!("{id:02}_bin.pgm"));
    save_raster(&probs.to_raster(), &prob)?;
    save_raster(&probs.binarize(threshold), &bin)?;
    Ok([prob, bin])
}

fn write_map_manifest(dir: &Path, cfg: &RunConfig, stage: &str, inputs: BTreeMap<String, String>, outputs: &[PathBuf]) -> Result<()> {
    write_manifest(
        &dir.join("manifest.json"),
        &Manifest {
            stage: stage.into(),
            config_hash: cfg.predict_hash(),
            inputs,
            outputs: hash_files(outputs)?,
        },
    )
}

/// Probability and binarized maps (`<id>_prob.pgm`, `<id>_bin.pgm`) for every image of a split.
pub fn cmd_predict(cfg: &RunConfig, model: &Path, data: &Path, prep: Option<&Path>, maps: &Path) -> Result<Vec<PathBuf>> {
    cfg.validate()?;
    let params = load_model(model)?;
    let split_dir = resolve_split(data, TEST);
    let samples = scan_split(&split_dir, false)?;
    let name = split_name(&split_dir, TEST);
    let prep_dir = checked_prep_dir(cfg, prep, &name)?;
    create_dir(maps)?;
    let mut input_paths = vec![model.to_path_buf()];
    input_paths.extend(samples.iter().map(|s| s.image.clone()));
    let mut written = Vec::new();
    for s in &samples {
        let image = network_input(cfg, s, prep_dir.as_deref())?;
        let probs = predict_image(&image, &params, cfg.patching.size, cfg.patching.stride)?;
        written.extend(save_maps(maps, s.id, &probs, cfg.evaluation.threshold)?);
        info!("predicted image {}", s.id);
    }
    write_map_manifest(maps, cfg, "predict", hash_files(&input_paths)?, &written)?;
    Ok(written)
}

#[derive(Debug, Clone, Default)]
pub struct EvaluateArgs {
    pub maps: Option<PathBuf>,
}

/// Predicts every annotated image of a split and writes per-image plus pooled metrics.
pub fn cmd_evaluate(cfg: &RunConfig, model: &Path, data: &Path, prep: Option<&Path>, report: &Path, args: &EvaluateArgs) -> Result<DatasetReport> {
    cfg.validate()?;
    let params = load_model(model)?;
    let split_dir = resolve_split(data, TEST);
    let samples = scan_split(&split_dir, true)?;
    let name = split_name(&split_dir, TEST);
    let prep_dir = checked_prep_dir(cfg, prep, &name)?;
    if let Some(dir) = &args.maps {
        create_dir(dir)?;
    }
    let mut items = Vec::with_capacity(samples.len());
    let mut maps_written = Vec::new();
    for s in &samples {
        let image = network_input(cfg, s, prep_dir.as_deref())?;
        let (fov, gt) = load_masks(cfg, s, &image)?;
        let probs = predict_image(&image, &params, cfg.patching.size, cfg.patching.stride)?;
        if let Some(dir) = &args.maps {
            maps_written.extend(save_maps(dir, s.id, &probs, cfg.evaluation.threshold)?);
        }
        info!("predicted image {}", s.id);
        items.push(ScoredImage {
            name: s.id.to_string(),
            probs,
            gt: gt.expect("scanned with annotations"),
            fov,
        });
    }
    let rep = evaluate_scored(&items, &cfg.eval_options())?;
    info!(
        "pooled: AUC {:.4}, accuracy {:.4}, sensitivity {:.4}, specificity {:.4}",
        rep.pooled.auc, rep.pooled.accuracy, rep.pooled.sensitivity, rep.pooled.specificity
    );
    if let Some(parent) = report.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    let mut text = serde_json::to_string_pretty(&rep).expect("report serializes");
    text.push('\n');
    write_atomic(report, text.as_bytes())?;

    let mut input_paths = vec![model.to_path_buf()];
    input_paths.extend(sample_inputs(&samples));
    let inputs = hash_files(&input_paths)?;
    if let Some(dir) = &args.maps {
        write_map_manifest(dir, cfg, "evaluate", inputs.clone(), &maps_written)?;
    }
    write_manifest(
        &manifest_path(report),
        &Manifest {
            stage: "evaluate".into(),
            config_hash: cfg.predict_hash(),
            inputs,
            outputs: hash_files([&report.to_path_buf()])?,
        },
    )?;
    Ok(rep)
}
