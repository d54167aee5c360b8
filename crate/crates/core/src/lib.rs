//! Core library for transformer-based 3D part assembly.
//!
//! Given a set of canonicalized part point clouds, the model predicts a
//! 6-DoF pose (unit quaternion + translation) for every part so that the
//! transformed parts assemble into a coherent shape. The crate provides:
//!
//! - [`geom`]: point clouds, poses, PCA canonicalization, farthest point
//!   sampling and Chamfer distance;
//! - [`encoding`]: instance codes that disambiguate geometrically
//!   equivalent parts;
//! - [`autodiff`]: a minimal reverse-mode tape over dense `f64` arrays;
//! - [`model`]: PointNet part features plus a transformer encoder/decoder
//!   with per-layer pose refinement;
//! - [`matching`] / [`loss`]: Hungarian matching of equivalent parts and
//!   the translation/rotation/shape training loss with min-of-n sampling;
//! - [`metrics`]: part accuracy, connectivity accuracy, shape Chamfer
//!   distance, diverse-sample selection and in-process evaluation;
//! - [`data`]: a procedural furniture generator with a versioned binary
//!   dataset format;
//! - [`train`]: AdamW, deterministic training/evaluation runs and
//!   checkpointing.
//!
//! Everything is deterministic given a single root seed; see [`rng`].

pub mod autodiff;
pub mod data;
pub mod encoding;
pub mod error;
pub mod geom;
pub mod loss;
pub mod matching;
pub mod metrics;
pub mod model;
pub mod rng;
pub mod train;

pub use error::{Error, Result};
pub use geom::{chamfer, fps, pca_canonicalize, Aabb, PartCloud, Pose, Quat, Shape};
