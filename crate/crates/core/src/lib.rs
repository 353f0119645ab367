//! Per-pixel sea ice type segmentation learned from polygon-level ice chart
//! concentrations.
//!
//! The crate is organised bottom-up:
//!
//! - [`icechart`]: egg-code records, four-class regional label vectors and the
//!   dominant-class rule used by the fully supervised baseline.
//! - [`scene_io`]: the on-disk scene container plus downscaling,
//!   normalisation and patch sampling.
//! - [`autodiff`]: a small tape-based reverse-mode tensor engine with the
//!   convolutional operators the network needs.
//! - [`unet`]: the four-block encoder/decoder producing class probabilities.
//! - [`regionloss`]: polygon aggregation, the regional cross-entropy and the
//!   masked pixel loss of the baseline.
//! - [`trainer`]: SGD with momentum, cosine annealing with warm restarts,
//!   the training loop and checkpoints.
//! - [`evalmetrics`]: per-class polygon R² and pixel metrics.
//! - [`synthgen`]: synthetic scenes with hidden per-pixel truth.
//! - [`cli`]: the `floeberg` command line.

pub mod autodiff;
pub mod cli;
pub mod error;
pub mod evalmetrics;
pub mod icechart;
pub mod regionloss;
pub mod scene_io;
pub mod synthgen;
pub mod trainer;
pub mod unet;

pub use error::{Error, Result};

/// Number of stage-of-development classes: open water, young ice,
/// first-year ice and multiyear ice.
pub const NUM_CLASSES: usize = 4;
