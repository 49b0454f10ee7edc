//! Non-learned algorithmic core of single-view panoptic 3D scene reconstruction.
//!
//! The crate is `no_std` and only needs `alloc`. It covers lifting a depth map
//! and 2D predictions into sparse frustum volumes, instance propagation,
//! coarse-to-fine sparse generation with pluggable per-level predictors,
//! panoptic surface assembly, ground-truth generation, loss evaluation, and
//! the PRQ/RSQ/RRQ evaluation protocol.
//!
//! File formats, the synthetic scene generator, and the `panrec` command line
//! live in the companion `panrec` crate.

#![no_std]

extern crate alloc;

#[cfg(test)]
extern crate std;

pub mod assembly;
pub mod categories;
pub mod clustering;
mod error;
pub mod geometry;
pub mod hierarchy;
pub mod lifting;
pub mod math;
pub mod metrics;
pub mod propagation;
pub mod rng;
pub mod supervision;
pub mod volume;

pub use categories::{Category, CategoryId, CategoryKind, CategoryTable, InstanceId, Label};
pub use error::{Error, Result};
pub use geometry::{CameraIntrinsics, DepthMap, Frustum, Raster, TriangleMesh};
pub use math::{RigidTransform, Vec3};
pub use volume::{GridSpec, PanopticVolume, PanopticVoxel, SparseVolume, VoxelCoord, VoxelMask};
