//! Road-surface semantic segmentation over bird's-eye-view (BEV) rasters.
//!
//! The crate covers the full desk-scale pipeline:
//!
//! - [`kitti`] - KITTI-Road on-disk formats: Velodyne binaries, calibration
//!   text, ground-truth PNGs, dataset discovery, and output image encoders.
//! - [`bev`] - LiDAR point cloud to 800x400x3 BEV raster (occupancy, mean
//!   intensity, truncated mean height).
//! - [`warp`] - flat-ground projection of camera images and labels onto the
//!   same BEV grid.
//! - [`autodiff`] - minimal reverse-mode automatic differentiation with
//!   exactly the layer set the models need.
//! - [`model`] - the six encoder-decoder architecture variants (A-F).
//! - [`checkpoint`] - bit-exact parameter serialization.
//! - [`train`] - losses, optimizers, flip augmentation, k-fold
//!   cross-validation and grid search.
//! - [`metrics`] - threshold-swept pixel metrics: MaxF, AP, PRE/REC/FPR/FNR
//!   and BinaryIoU, pooled per scene category.
//! - [`synth`] - deterministic synthetic scene generator so the whole
//!   pipeline can run without the dataset.

pub mod autodiff;
pub mod bev;
pub mod checkpoint;
pub mod error;
pub mod kitti;
pub mod metrics;
pub mod model;
pub mod synth;
pub mod train;
pub mod warp;

pub use error::{Error, Result};
