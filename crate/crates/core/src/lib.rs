//! Consistency check for 2D metal segmentations of cone-beam CT scans.
//!
//! Binarized per-view metal masks are back-projected into a visitor counter,
//! normalized by how many views can see each voxel, thresholded, and
//! re-projected so that every view agrees with one 3D metal set. The crate
//! also carries the simulation needed to exercise that: voxel phantoms, a
//! ray-driven projector, a synthetic segmenter with controllable errors,
//! metrics, file formats, and a staged experiment runner.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod consistency;
pub mod error;
pub mod geometry;
pub mod io;
pub mod metrics;
pub mod phantom;
pub mod pipeline;
pub mod projector;
pub mod segsim;

pub use consistency::{consistency_check, CCConfig, CCResult};
pub use error::{Error, Result};
pub use geometry::{DetectorCoord, ProjectionGeometry, VoxelGrid};
pub use metrics::{mask_metrics, roc_auc, ExperimentTable, MetricsReport};
pub use phantom::{Primitive, Scene, Shape};
pub use pipeline::{run_pipeline, ExperimentConfig, Profile, Runner};
pub use projector::{MaskStack, MaskVolume, ProjectionStack, Stack, Volume};
pub use segsim::{PerturbationConfig, SoftMaskStack};
