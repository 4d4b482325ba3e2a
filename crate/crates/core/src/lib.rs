//! Layered synthetic video scenes with pixel-exact motion-boundary-sense (MBS)
//! and attended-surface (ASP) ground truth, plus the spatio-temporal
//! R(2+1)U-Net family trained on them.
//!
//! The crate is organised along the pipeline:
//!
//! * [`scenegen`] samples and renders layered scenes.
//! * [`groundtruth`] derives MBS and ASP label sequences from scene geometry.
//! * [`attention`] synthesises attention heatmaps that cue one target layer.
//! * [`datasetio`] stores scenes and manifests on disk and ingests external frames.
//! * [`network`] holds the tensor/autodiff kernels and the U-Net itself.
//! * [`training`] has the losses, schedule, optimizer and training loops.
//! * [`evaluation`] computes confusion matrices, ablation tables and overlays.

pub mod attention;
pub mod datasetio;
pub mod error;
pub mod evaluation;
pub mod groundtruth;
pub mod network;
pub mod raster;
pub mod scenegen;
pub mod seed;
pub mod training;

pub use error::{Error, ErrorKind, Result};
pub use raster::{Grid, Heatmap, LabelMap, Mask, RgbImage};
