//! Retinal vessel segmentation with a scaled 3-level U-net.
//!
//! The pipeline runs in stages, each usable on its own:
//!
//! * [`raster`]: 8-bit image and field-of-view mask I/O (PNG, PGM, PPM).
//! * [`preprocess`]: grayscale, negative, white top-hat and CLAHE.
//! * [`patch`]: random training patches, the strided test grid and stitching.
//! * [`nn`]: tensors, layers with hand-written backward passes and the U-net.
//! * [`optim`]: ADAM with a step-decay learning-rate schedule.
//! * [`train`]: the epoch loop with best-validation checkpointing.
//! * [`metrics`]: whole-image inference, confusion counts, ROC and AUC.
//! * [`pipeline`]: run configuration, dataset layout, stage commands and plots.

pub mod error;
pub mod metrics;
pub mod nn;
pub mod optim;
pub mod patch;
pub mod pipeline;
pub mod preprocess;
pub mod raster;
pub mod train;

pub(crate) mod util;

pub use error::{Error, Result};
