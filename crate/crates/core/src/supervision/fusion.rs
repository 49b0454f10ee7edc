//! Projective volumetric fusion of depth frames.

use alloc::format;
use alloc::vec::Vec;

#[cfg(feature = "serde")]
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::geometry::{CameraIntrinsics, DepthMap};
use crate::math::{round, RigidTransform};
use crate::volume::{GridSpec, SparseVolume};

/// Default fusion resolution in meters.
pub const DEFAULT_FUSION_VOXEL: f32 = 0.03;

#[derive(Clone, Debug, PartialEq)]
pub struct DepthFrame {
    pub depth: DepthMap,
    pub intrinsics: CameraIntrinsics,
    /// Camera-to-world transform.
    pub pose: RigidTransform,
    /// Pixels allowed to contribute; `None` allows every valid pixel.
    pub valid: Option<Vec<bool>>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
pub struct FusionConfig {
    /// World-space grid.
    pub spec: GridSpec,
    /// Truncation in voxel units.
    pub tau: f64,
}

impl FusionConfig {
    pub fn validate(&self) -> Result<()> {
        self.spec.validate()?;
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(invalid(format!("truncation {} must be positive", self.tau)));
        }
        Ok(())
    }
}

/// Per-frame projective distance of every grid voxel within `tau`, averaged
/// over the frames that observe it with unit weights.
pub fn volumetric_fuse_depths(frames: &[DepthFrame], cfg: &FusionConfig) -> Result<SparseVolume<f32>> {
    cfg.validate()?;
    if frames.is_empty() {
        return Err(invalid("fusion needs at least one frame"));
    }
    for (n, f) in frames.iter().enumerate() {
        f.intrinsics.validate()?;
        if !f.depth.matches(&f.intrinsics) {
            return Err(invalid(format!("frame {n}: depth size differs from the camera")));
        }
        if f.valid.as_ref().is_some_and(|v| v.len() != f.depth.values.len()) {
            return Err(invalid(format!(
                "frame {n}: validity mask size differs from the depth map"
            )));
        }
    }
    let spec = cfg.spec;
    let h = spec.size();
    let mut out = SparseVolume::new(spec);
    for c in spec.coords() {
        let world = spec.center(c);
        let (mut mean, mut weight) = (0.0f64, 0u32);
        for f in frames {
            let p = f.pose.apply_inverse(world);
            let Ok(proj) = f.intrinsics.project_point(p) else {
                continue;
            };
            let (u, v) = (round(proj.u), round(proj.v));
            if !f.intrinsics.contains_pixel(u, v) {
                continue;
            }
            let (u, v) = (u as u32, v as u32);
            if f.valid.as_ref().is_some_and(|m| !m[(v * f.depth.width + u) as usize]) {
                continue;
            }
            let Some(d) = f.depth.get(u, v) else { continue };
            let sdf = (d - proj.depth) / h;
            if sdf.abs() >= cfg.tau {
                continue;
            }
            weight += 1;
            mean += (sdf - mean) / weight as f64;
        }
        if weight > 0 {
            out.insert(c, mean as f32)?;
        }
    }
    Ok(out)
}
