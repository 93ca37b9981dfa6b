use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::LevelFilter;

use vesselforge::pipeline::{
    cmd_evaluate, cmd_extract, cmd_paramcount, cmd_predict, cmd_preprocess, cmd_train, load_config, plot_file, EvaluateArgs,
    RunConfig, TrainArgs,
};
use vesselforge::preprocess::SeShape;
use vesselforge::{Error, Result};

const DATA_ENV: &str = "VESSELFORGE_DATA";

#[derive(Parser)]
#[command(name = "vesselforge", version, about = "Retinal vessel segmentation with a scaled U-net")]
struct Cli {
    /// Run configuration (JSON). Flags override individual fields.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Worker threads. Results do not depend on the count.
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,
    /// Only print warnings and errors.
    #[arg(short, long, global = true)]
    quiet: bool,
    #[command(flatten)]
    overrides: Overrides,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Default)]
struct Overrides {
    #[arg(long, global = true)]
    se_shape: Option<SeShape>,
    #[arg(long, global = true)]
    se_radius: Option<usize>,
    /// CLAHE tile grid, e.g. 8x8.
    #[arg(long, global = true, value_parser = parse_tiles)]
    clahe_tiles: Option<(usize, usize)>,
    #[arg(long, global = true)]
    clahe_clip: Option<f64>,
    #[arg(long, global = true)]
    n_per_image: Option<usize>,
    /// Patch side length in pixels.
    #[arg(long, global = true)]
    patch: Option<usize>,
    /// Test-time grid stride in pixels.
    #[arg(long, global = true, allow_negative_numbers = true)]
    stride: Option<i64>,
    /// Seed for patch sampling, the split, shuffling and initialization.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    base_channels: Option<usize>,
    #[arg(long, global = true)]
    epochs: Option<usize>,
    #[arg(long, global = true)]
    batch_size: Option<usize>,
    #[arg(long, global = true)]
    threshold: Option<f32>,
    /// Score every pixel instead of only the field of view.
    #[arg(long, global = true)]
    include_border: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Enhance every image (grayscale, negate, top-hat, CLAHE) into 8-bit PGMs.
    Preprocess {
        /// Dataset root or a single split directory.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Sample training patches into a patch file.
    Extract {
        #[arg(long)]
        data: Option<PathBuf>,
        /// Output of `preprocess`; images are enhanced on the fly when omitted.
        #[arg(long)]
        preprocessed: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train on a patch file and keep the best-validation weights.
    Train {
        /// Patch file written by `extract`.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        history: Option<PathBuf>,
        /// Continue from the last completed epoch of an interrupted run.
        #[arg(long)]
        resume: bool,
        /// Store ADAM moments alongside the weights.
        #[arg(long)]
        save_optimizer: bool,
    },
    /// Write probability and binarized maps for a split.
    Predict {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        preprocessed: Option<PathBuf>,
        #[arg(long)]
        maps: PathBuf,
    },
    /// Score a split against its manual annotations.
    Evaluate {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        preprocessed: Option<PathBuf>,
        #[arg(long)]
        report: PathBuf,
        #[arg(long)]
        maps: Option<PathBuf>,
    },
    /// Render a history CSV (loss/accuracy) or a report JSON (ROC) as SVG.
    Plot {
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print the number of trainable parameters.
    Paramcount,
}

fn parse_tiles(s: &str) -> std::result::Result<(usize, usize), String> {
    let (a, b) = s
        .split_once(['x', 'X'])
        .ok_or_else(|| format!("expected TXxTY, got {s:?}"))?;
    let parse = |v: &str| v.trim().parse::<usize>().map_err(|e| format!("{v:?}: {e}"));
    Ok((parse(a)?, parse(b)?))
}

fn apply(cfg: &mut RunConfig, o: &Overrides) {
    if let Some(v) = o.se_shape {
        cfg.preprocess.se_shape = v;
    }
    if let Some(v) = o.se_radius {
        cfg.preprocess.se_radius = v;
    }
    if let Some((tx, ty)) = o.clahe_tiles {
        cfg.preprocess.clahe.tiles_x = tx;
        cfg.preprocess.clahe.tiles_y = ty;
    }
    if let Some(v) = o.clahe_clip {
        cfg.preprocess.clahe.clip_limit = v;
    }
    if let Some(v) = o.n_per_image {
        cfg.set_patches_per_image(v);
    }
    if let Some(v) = o.patch {
        cfg.set_patch_size(v);
    }
    if let Some(v) = o.stride {
        cfg.patching.stride = v;
    }
    if let Some(v) = o.seed {
        cfg.patching.seed = v;
        cfg.training.seed = v;
    }
    if let Some(v) = o.base_channels {
        cfg.model.base_channels = v;
    }
    if let Some(v) = o.epochs {
        cfg.training.epochs = v;
    }
    if let Some(v) = o.batch_size {
        cfg.training.batch_size = v;
    }
    if let Some(v) = o.threshold {
        cfg.evaluation.threshold = v;
    }
    if o.include_border {
        cfg.evaluation.fov_only = false;
    }
}

/// `--data`, then `VESSELFORGE_DATA`, then `dataset_root` from the config.
fn dataset(flag: Option<PathBuf>, cfg: &RunConfig) -> Result<PathBuf> {
    flag.or_else(|| std::env::var_os(DATA_ENV).map(PathBuf::from))
        .or_else(|| cfg.dataset_root.clone())
        .ok_or_else(|| Error::Config(format!("no dataset: pass --data, set {DATA_ENV} or dataset_root")))
}

fn run(cli: Cli) -> Result<()> {
    if cli.threads == 0 {
        return Err(Error::Config("--threads must be at least 1".into()));
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(cli.threads)
        .build_global()
        .map_err(|e| Error::Config(e.to_string()))?;
    let mut cfg = match &cli.config {
        Some(path) => load_config(path)?,
        None => RunConfig::default(),
    };
    apply(&mut cfg, &cli.overrides);
    match cli.command {
        Command::Preprocess { data, out } => {
            let written = cmd_preprocess(&cfg, &dataset(data, &cfg)?, &out)?;
            println!("{} images preprocessed into {}", written.len(), out.display());
        }
        Command::Extract { data, preprocessed, out } => {
            let n = cmd_extract(&cfg, &dataset(data, &cfg)?, preprocessed.as_deref(), &out)?;
            println!("{n} patches written to {}", out.display());
        }
        Command::Train {
            data,
            out,
            history,
            resume,
            save_optimizer,
        } => {
            let outcome = cmd_train(&cfg, &data, &out, &TrainArgs { history, resume, save_optimizer })?;
            println!(
                "best epoch {} (validation loss {:.6}) written to {}",
                outcome.best_epoch,
                outcome.best_val_loss,
                out.display()
            );
        }
        Command::Predict {
            model,
            data,
            preprocessed,
            maps,
        } => {
            let written = cmd_predict(&cfg, &model, &dataset(data, &cfg)?, preprocessed.as_deref(), &maps)?;
            println!("{} maps written to {}", written.len(), maps.display());
        }
        Command::Evaluate {
            model,
            data,
            preprocessed,
            report,
            maps,
        } => {
            let rep = cmd_evaluate(&cfg, &model, &dataset(data, &cfg)?, preprocessed.as_deref(), &report, &EvaluateArgs { maps })?;
            let p = &rep.pooled;
            println!(
                "AUC {:.4}  accuracy {:.4}  sensitivity {:.4}  specificity {:.4}",
                p.auc, p.accuracy, p.sensitivity, p.specificity
            );
        }
        Command::Plot { input, out } => {
            plot_file(&input, &out)?;
            println!("{}", out.display());
        }
        Command::Paramcount => println!("{}", cmd_paramcount(&cfg.model)?),
    }
    Ok(())
}

fn init_logging(quiet: bool) {
    let level = if quiet { LevelFilter::Warn } else { LevelFilter::Info };
    env_logger::Builder::new()
        .filter_level(level)
        .parse_default_env()
        .format_timestamp(None)
        .init();
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    init_logging(cli.quiet);
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
