//! Training loop: seeded split, shuffled mini-batches, ADAM updates,
//! per-epoch validation and best-validation-loss checkpointing.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use log::{debug, info};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{
    init_params, model_backward, model_forward, read_weight_file, sigmoid_bce_loss, write_weight_file, ModelParams,
    ModelSpec, WeightEntry, WeightFile,
};
use crate::optim::{adam_step, lr_at, AdamState, LrSchedule};
use crate::patch::PatchSet;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub val_fraction: f64,
    pub schedule: LrSchedule,
    pub seed: u64,
    pub patches_per_image: usize,
    pub patch_size: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: 32,
            val_fraction: 0.10,
            schedule: LrSchedule::default(),
            seed: 0,
            patches_per_image: 9500,
            patch_size: 48,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return Err(Error::Config(format!("val_fraction {} must lie in (0, 1)", self.val_fraction)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if self.patch_size == 0 || !self.patch_size.is_multiple_of(4) {
            return Err(Error::Config(format!("patch_size {} must be a positive multiple of 4", self.patch_size)));
        }
        self.schedule.validate()
    }
}

/// One completed epoch. `epoch` counts from 1.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub train_acc: f64,
    pub val_loss: f64,
    pub val_acc: f64,
}

/// Loss and pixel accuracy averaged over every pixel seen.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochStats {
    pub loss: f64,
    pub accuracy: f64,
    pub batches: usize,
}

/// `round(n · fraction)` (at least 1) validation indices after a seeded shuffle; the rest train.
pub fn split_indices(n: usize, val_fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(val_fraction > 0.0 && val_fraction < 1.0) {
        return Err(Error::Config(format!("val_fraction {val_fraction} must lie in (0, 1)")));
    }
    let val_count = ((n as f64 * val_fraction).round() as usize).max(1);
    if val_count >= n {
        return Err(Error::TooFewPatches(format!(
            "{n} patches leave no training data at validation fraction {val_fraction}"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let val = order[..val_count].to_vec();
    let train = order[val_count..].to_vec();
    Ok((train, val))
}

/// Disjoint, exhaustive `(train, val)` split.
pub fn split_train_val(set: &PatchSet, val_fraction: f64, seed: u64) -> Result<(PatchSet, PatchSet)> {
    let (train, val) = split_indices(set.len(), val_fraction, seed)?;
    Ok((set.select(&train), set.select(&val)))
}

fn count_correct(probs: &[f32], labels: &[f32]) -> usize {
    probs
        .iter()
        .zip(labels)
        .filter(|(&p, &y)| (p >= 0.5) == (y >= 0.5))
        .count()
}

/// Per-epoch shuffle; stream `epoch` of the run seed keeps epochs independent and resumable.
fn epoch_order(train: &[usize], seed: u64, epoch: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64 + 1);
    let mut order = train.to_vec();
    order.shuffle(&mut rng);
    order
}

/// One pass over `indices` in batches of `batch_size` (the last batch may be short).
/// `epoch` is zero-based and selects the learning rate.
pub fn train_epoch(
    params: &mut ModelParams<f32>,
    state: &mut AdamState,
    set: &PatchSet,
    indices: &[usize],
    cfg: &TrainConfig,
    epoch: usize,
) -> Result<EpochStats> {
    let lr = lr_at(&cfg.schedule, epoch);
    let order = epoch_order(indices, cfg.seed, epoch);
    let mut loss_sum = 0.0;
    let mut correct = 0usize;
    let mut pixels = 0usize;
    let mut batches = 0;
    for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
        let x = set.patches().select(chunk);
        let y = set.label_tensor(chunk);
        let (probs, mut cache) = model_forward(&x, params).map_err(|e| match e {
            Error::NonFinite(_) => Error::NonFiniteLoss { epoch: epoch + 1, batch: b },
            other => other,
        })?;
        let (loss, grad) = sigmoid_bce_loss(cache.logits(), &y)?;
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss { epoch: epoch + 1, batch: b });
        }
        let grads = model_backward(&mut cache, params, &grad)?;
        adam_step(params, &grads, state, lr)?;
        loss_sum += loss * y.len() as f64;
        correct += count_correct(probs.data(), y.data());
        pixels += y.len();
        batches += 1;
        if b % 50 == 0 {
            debug!("epoch {} batch {b}: loss {loss:.5}", epoch + 1);
        }
    }
    if pixels == 0 {
        return Err(Error::TooFewPatches("empty training set".into()));
    }
    Ok(EpochStats {
        loss: loss_sum / pixels as f64,
        accuracy: correct as f64 / pixels as f64,
        batches,
    })
}

/// Loss and accuracy without updating anything.
pub fn evaluate_patches(params: &ModelParams<f32>, set: &PatchSet, indices: &[usize], batch_size: usize) -> Result<EpochStats> {
    let mut loss_sum = 0.0;
    let mut correct = 0usize;
    let mut pixels = 0usize;
    let mut batches = 0;
    for chunk in indices.chunks(batch_size.max(1)) {
        let x = set.patches().select(chunk);
        let y = set.label_tensor(chunk);
        let (probs, cache) = model_forward(&x, params)?;
        let (loss, _) = sigmoid_bce_loss(cache.logits(), &y)?;
        loss_sum += loss * y.len() as f64;
        correct += count_correct(probs.data(), y.data());
        pixels += y.len();
        batches += 1;
    }
    if pixels == 0 {
        return Err(Error::TooFewPatches("empty evaluation set".into()));
    }
    Ok(EpochStats {
        loss: loss_sum / pixels as f64,
        accuracy: correct as f64 / pixels as f64,
        batches,
    })
}

/// Keeps the parameters with the lowest validation loss; ties keep the earlier epoch.
#[derive(Debug, Clone)]
pub struct BestCheckpoint {
    pub epoch: usize,
    pub val_loss: f64,
    pub params: ModelParams<f32>,
}

impl BestCheckpoint {
    /// Returns true when `val_loss` beats the current best (or there is none yet).
    pub fn offer(best: &mut Option<BestCheckpoint>, epoch: usize, val_loss: f64, params: &ModelParams<f32>) -> bool {
        let better = best.as_ref().is_none_or(|b| val_loss < b.val_loss);
        if better {
            *best = Some(BestCheckpoint {
                epoch,
                val_loss,
                params: params.clone(),
            });
        }
        better
    }
}

/// Where `fit` persists its progress. All writes are atomic.
#[derive(Debug, Clone, Default)]
pub struct FitOptions {
    /// Best-validation weights.
    pub checkpoint: Option<PathBuf>,
    /// History CSV, rewritten after every epoch.
    pub history: Option<PathBuf>,
    /// Continue from `<checkpoint>.resume` when present.
    pub resume: bool,
    /// Append the optimizer state to the best-weight file.
    pub save_optimizer: bool,
    /// Seed for weight initialization; defaults to the training seed.
    pub init_seed: Option<u64>,
}

#[derive(Debug, Clone)]
pub struct FitOutcome {
    pub best: ModelParams<f32>,
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub history: Vec<EpochRecord>,
}

pub fn resume_path(checkpoint: &Path) -> PathBuf {
    let mut name = checkpoint.file_name().unwrap_or_default().to_os_string();
    name.push(".resume");
    checkpoint.with_file_name(name)
}

struct ResumeState {
    params: ModelParams<f32>,
    adam: AdamState,
    next_epoch: usize,
    best: Option<BestCheckpoint>,
}

fn save_resume(path: &Path, s: &ResumeState, seed: u64) -> Result<()> {
    let mut file = WeightFile::from_params(&s.params);
    file.entries.extend(s.adam.to_entries());
    file.entries.push(WeightEntry::scalar("train.next_epoch", s.next_epoch as f32));
    // seeds are compared, not reconstructed, so the split halves are enough
    file.entries.push(WeightEntry {
        name: "train.seed".into(),
        dims: vec![4],
        data: (0..4).map(|k| ((seed >> (16 * k)) & 0xFFFF) as f32).collect(),
    });
    if let Some(b) = &s.best {
        file.entries.push(WeightEntry::scalar("train.best_epoch", b.epoch as f32));
        file.entries.push(WeightEntry {
            name: "train.best_val_loss".into(),
            dims: vec![1],
            data: vec![b.val_loss as f32],
        });
    }
    write_weight_file(path, &file)
}

fn load_resume(path: &Path, checkpoint: &Path, spec: &ModelSpec, seed: u64) -> Result<ResumeState> {
    let file = read_weight_file(path)?;
    let stored_seed = file
        .get("train.seed")
        .filter(|e| e.data.len() == 4)
        .map(|e| e.data.iter().enumerate().fold(0u64, |acc, (k, &v)| acc | ((v as u64) << (16 * k))))
        .ok_or_else(|| Error::format("SUNW weight", "resume file lacks train.seed"))?;
    if stored_seed != seed {
        return Err(Error::StaleArtifact(format!(
            "{} was written by a run with seed {stored_seed}, current seed is {seed}",
            path.display()
        )));
    }
    let params = file.params(spec)?;
    let adam = AdamState::from_weight_file(&file, spec)?;
    let next_epoch = file
        .scalar("train.next_epoch")
        .ok_or_else(|| Error::format("SUNW weight", "resume file lacks train.next_epoch"))? as usize;
    let best = match file.scalar("train.best_epoch") {
        Some(epoch) => {
            let best_file = read_weight_file(checkpoint)?;
            let val_loss = best_file
                .scalar("train.val_loss")
                .map(f64::from)
                .ok_or_else(|| Error::format("SUNW weight", "checkpoint lacks train.val_loss"))?;
            Some(BestCheckpoint {
                epoch: epoch as usize,
                val_loss,
                params: best_file.params(spec)?,
            })
        }
        None => None,
    };
    Ok(ResumeState {
        params,
        adam,
        next_epoch,
        best,
    })
}

fn write_best(path: &Path, best: &BestCheckpoint, adam: Option<&AdamState>) -> Result<()> {
    let mut file = WeightFile::from_params(&best.params);
    if let Some(adam) = adam {
        file.entries.extend(adam.to_entries());
    }
    file.entries.push(WeightEntry::scalar("train.epoch", best.epoch as f32));
    file.entries.push(WeightEntry {
        name: "train.val_loss".into(),
        dims: vec![1],
        data: vec![best.val_loss as f32],
    });
    write_weight_file(path, &file)
}

/// Trains from scratch (or resumes) and returns the best-validation weights.
pub fn fit(cfg: &TrainConfig, spec: &ModelSpec, set: &PatchSet, opts: &FitOptions) -> Result<FitOutcome> {
    cfg.validate()?;
    spec.validate()?;
    let (h, w) = set.patch_dims();
    spec.check_input([1, spec.in_channels, h, w])?;
    let (train_idx, val_idx) = split_indices(set.len(), cfg.val_fraction, cfg.seed)?;
    debug_assert!({
        let mut all: Vec<usize> = train_idx.iter().chain(&val_idx).copied().collect();
        all.sort_unstable();
        all.dedup();
        all.len() == set.len()
    });
    info!(
        "training on {} patches, validating on {} ({}x{}, base {} channels)",
        train_idx.len(),
        val_idx.len(),
        h,
        w,
        spec.base_channels
    );

    let resume_file = opts.checkpoint.as_deref().map(resume_path);
    let mut run = match (&resume_file, opts.resume) {
        (Some(rf), true) if rf.exists() => {
            let ckpt = opts.checkpoint.as_deref().unwrap();
            let state = load_resume(rf, ckpt, spec, cfg.seed)?;
            info!("resuming at epoch {}", state.next_epoch + 1);
            state
        }
        _ => ResumeState {
            params: init_params(spec, opts.init_seed.unwrap_or(cfg.seed))?,
            adam: AdamState::new(spec)?,
            next_epoch: 0,
            best: None,
        },
    };

    let mut history = match (&opts.history, run.next_epoch) {
        (Some(path), n) if n > 0 => {
            let mut rows = read_history(path)?;
            rows.retain(|r| r.epoch <= n);
            if rows.len() != n {
                return Err(Error::StaleArtifact(format!(
                    "history {} has {} rows, resume point expects {n}",
                    path.display(),
                    rows.len()
                )));
            }
            rows
        }
        _ => Vec::new(),
    };

    for epoch in run.next_epoch..cfg.epochs {
        let stats = train_epoch(&mut run.params, &mut run.adam, set, &train_idx, cfg, epoch)?;
        let val = evaluate_patches(&run.params, set, &val_idx, cfg.batch_size)?;
        if !val.loss.is_finite() {
            return Err(Error::NonFiniteLoss { epoch: epoch + 1, batch: 0 });
        }
        let record = EpochRecord {
            epoch: epoch + 1,
            lr: lr_at(&cfg.schedule, epoch),
            train_loss: stats.loss,
            train_acc: stats.accuracy,
            val_loss: val.loss,
            val_acc: val.accuracy,
        };
        info!(
            "epoch {:>3}: lr {:.3e} train loss {:.5} acc {:.4} | val loss {:.5} acc {:.4}",
            record.epoch, record.lr, record.train_loss, record.train_acc, record.val_loss, record.val_acc
        );
        history.push(record);

        let improved = BestCheckpoint::offer(&mut run.best, epoch + 1, val.loss, &run.params);
        if let (true, Some(path), Some(best)) = (improved, &opts.checkpoint, &run.best) {
            write_best(path, best, opts.save_optimizer.then_some(&run.adam))?;
        }
        if let Some(path) = &opts.history {
            write_history(path, &history)?;
        }
        run.next_epoch = epoch + 1;
        if let Some(rf) = &resume_file {
            save_resume(rf, &run, cfg.seed)?;
        }
    }

    let best = run
        .best
        .ok_or_else(|| Error::Config("no epochs were run (epochs = 0?)".into()))?;
    Ok(FitOutcome {
        best: best.params,
        best_epoch: best.epoch,
        best_val_loss: best.val_loss,
        history,
    })
}

pub const HISTORY_HEADER: &str = "epoch,lr,train_loss,train_acc,val_loss,val_acc";

pub fn format_history(rows: &[EpochRecord]) -> String {
    let mut out = String::from(HISTORY_HEADER);
    out.push('\n');
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{}",
            r.epoch, r.lr, r.train_loss, r.train_acc, r.val_loss, r.val_acc
        );
    }
    out
}

pub fn write_history(path: &Path, rows: &[EpochRecord]) -> Result<()> {
    crate::util::write_atomic(path, format_history(rows).as_bytes())
}

/// Parses a history CSV; errors carry 1-based line numbers.
pub fn parse_history(text: &str) -> Result<Vec<EpochRecord>> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, header)) if header.trim() == HISTORY_HEADER => {}
        Some((_, header)) => {
            return Err(Error::Parse {
                line: 1,
                message: format!("expected header {HISTORY_HEADER:?}, found {header:?}"),
            })
        }
        None => {
            return Err(Error::Parse {
                line: 1,
                message: "empty history".into(),
            })
        }
    }
    let mut rows = Vec::new();
    for (i, line) in lines {
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != 6 {
            return Err(Error::Parse {
                line: line_no,
                message: format!("expected 6 fields, found {}", fields.len()),
            });
        }
        let num = |k: usize| -> Result<f64> {
            fields[k].parse::<f64>().map_err(|_| Error::Parse {
                line: line_no,
                message: format!("field {} ({:?}) is not a number", k + 1, fields[k]),
            })
        };
        let epoch = fields[0].parse::<usize>().map_err(|_| Error::Parse {
            line: line_no,
            message: format!("epoch {:?} is not an integer", fields[0]),
        })?;
        rows.push(EpochRecord {
            epoch,
            lr: num(1)?,
            train_loss: num(2)?,
            train_acc: num(3)?,
            val_loss: num(4)?,
            val_acc: num(5)?,
        });
    }
    Ok(rows)
}

pub fn read_history(path: &Path) -> Result<Vec<EpochRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_history(&text)
}
