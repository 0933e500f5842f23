//! Energy-based anomaly detection for video.
//!
//! Frames are cut into overlapping patches at several scales. Binary RBMs
//! (or a single clustering-reconstruction DBM) learn the normal appearance of
//! each scene region; at detection time the per-patch reconstruction error is
//! thresholded, turned into a voxel tensor and cleaned up with 3D connected
//! components. Region models can keep learning from the stream.
//!
//! Module map:
//!
//! - [`ingest`]: frame loading, rescaling, patch grids.
//! - [`rbm`]: binary RBM, CD-d training, exact-enumeration oracles.
//! - [`dbm`]: two-ended clustering-reconstruction DBM, mean-field, PCD.
//! - [`regions`]: cluster labels, region voting, cluster maps.
//! - [`detector`]: scoring, component filtering, multi-scale aggregation, streaming.
//! - [`eval`]: frame / pixel / dual-pixel ROC, AUC, EER.
//! - [`pipeline`]: configuration, model bundles and the commands behind the CLI.

pub mod container;
pub mod dbm;
pub mod detector;
pub mod error;
pub mod eval;
pub mod ingest;
pub mod math;
pub mod par;
pub mod pipeline;
pub mod rbm;
pub mod regions;
pub mod synth;

pub use error::{Error, Result};
