//! Lifting a depth map and per-pixel 2D predictions into sparse volumes.
//!
//! Each valid pixel casts a ray through the pixel coordinate `(u, v)`. The ray
//! is sampled at half-voxel steps within the truncation band around the depth
//! sample, and every binned voxel whose center lies within `tau` voxels of the
//! surface along that ray records the pixel as a contributor. The distance of a
//! voxel is read along its own center ray, against the depth of the pixel its
//! center projects to (the nearest contributor when that pixel has no depth).
//! Voxels where this value leaves the band, or whose centers lie outside the
//! camera frustum, are dropped. Features and instance logits come from one
//! contributor drawn by a keyed sampler.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use hashbrown::HashMap;

#[cfg(feature = "serde")]
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::geometry::{CameraIntrinsics, DepthMap, Raster};
use crate::math::{round, Vec3};
use crate::propagation::InstanceChannelVolume;
use crate::rng::keyed_index;
use crate::volume::{GridSpec, SparseVolume, VoxelCoord};

pub const DEFAULT_TAU: f64 = 3.0;
pub const DEFAULT_MAX_INSTANCES: usize = 20;
/// Mask logit at or above which a pixel belongs to a detection.
pub const FOREGROUND_LOGIT: f32 = 0.0;

#[derive(Clone, Copy, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
pub struct TruncationConfig {
    /// Truncation distance in voxel units.
    pub tau: f64,
}

impl TruncationConfig {
    pub fn new(tau: f64) -> Result<Self> {
        if !(tau > 0.0 && tau.is_finite()) {
            return Err(invalid(format!("truncation {tau} must be positive")));
        }
        Ok(Self { tau })
    }
}

impl Default for TruncationConfig {
    fn default() -> Self {
        Self { tau: DEFAULT_TAU }
    }
}

/// The lifted feature volume `(F_d, F_f, F_i)`.
#[derive(Clone, Debug, PartialEq)]
pub struct LiftedVolumes {
    /// View-direction TSDF in voxel units.
    pub distance: SparseVolume<f32>,
    pub features: SparseVolume<Vec<f32>>,
    pub instances: InstanceChannelVolume,
}

impl LiftedVolumes {
    pub fn spec(&self) -> &GridSpec {
        self.distance.spec()
    }
}

struct Bin {
    value: f64,
    /// Pixels whose rays reach the voxel, in increasing pixel index.
    contributors: Vec<u32>,
}

/// Image pixel nearest to the projection of `p`, clamped into the image.
fn projected_pixel(k: &CameraIntrinsics, p: Vec3) -> Option<u32> {
    if p.z <= 0.0 {
        return None;
    }
    let u = round(k.fx * p.x / p.z + k.cx).clamp(0.0, (k.width - 1) as f64) as u32;
    let v = round(k.fy * p.y / p.z + k.cy).clamp(0.0, (k.height - 1) as f64) as u32;
    Some(v * k.width + u)
}

/// Contributor whose pixel lies nearest to the projection of `p`; ties go to
/// the lowest pixel index.
fn nearest_contributor(contributors: &[u32], k: &CameraIntrinsics, p: Vec3) -> u32 {
    if p.z <= 0.0 {
        return contributors[0];
    }
    let (uc, vc) = (k.fx * p.x / p.z + k.cx, k.fy * p.y / p.z + k.cy);
    let mut best = (f64::INFINITY, contributors[0]);
    for &px in contributors {
        let (du, dv) = ((px % k.width) as f64 - uc, (px / k.width) as f64 - vc);
        let d2 = du * du + dv * dv;
        if d2 < best.0 {
            best = (d2, px);
        }
    }
    best.1
}

/// Voxels reached by the truncation band of every valid pixel.
fn trace(depth: &DepthMap, k: &CameraIntrinsics, spec: &GridSpec, tau: f64) -> Result<SparseVolume<Bin>> {
    TruncationConfig::new(tau)?;
    if !depth.matches(k) {
        return Err(invalid(format!(
            "depth map is {}x{} but the camera is {}x{}",
            depth.width, depth.height, k.width, k.height
        )));
    }
    let h = spec.size();
    let steps = (4.0 * tau) as i64;
    let surface = |pixel: u32| {
        let (u, v) = (pixel % depth.width, pixel / depth.width);
        depth.get(u, v).map(|d| d * k.pixel_ray(u as f64, v as f64).norm())
    };
    let mut bins: HashMap<VoxelCoord, Vec<u32>> = HashMap::new();
    for v in 0..depth.height {
        for u in 0..depth.width {
            let pixel = v * depth.width + u;
            let Some(t_surface) = surface(pixel) else { continue };
            let dir = k.pixel_ray(u as f64, v as f64).normalized();
            for m in 0..=steps {
                let t = t_surface - tau * h + m as f64 * h / 2.0;
                if t <= 0.0 {
                    continue;
                }
                let c = spec.voxel_of(dir * t);
                if !spec.contains(c) || ((t_surface - spec.center(c).dot(dir)) / h).abs() >= tau {
                    continue;
                }
                let contributors = bins.entry(c).or_default();
                if contributors.last() != Some(&pixel) {
                    contributors.push(pixel);
                }
            }
        }
    }
    let frustum = k.frustum();
    let mut out = SparseVolume::new(*spec);
    for (c, contributors) in bins {
        let p = spec.center(c);
        if !frustum.contains(p) {
            continue;
        }
        let t_surface = projected_pixel(k, p)
            .and_then(surface)
            .or_else(|| surface(nearest_contributor(&contributors, k, p)))
            .expect("contributors are valid");
        let value = (t_surface - p.norm()) / h;
        if value.abs() < tau {
            out.insert(c, Bin { value, contributors })?;
        }
    }
    Ok(out)
}

fn check_raster(r: &Raster, depth: &DepthMap, what: &str) -> Result<()> {
    if !r.same_size(depth) {
        return Err(invalid(format!(
            "{what} raster is {}x{} but the depth map is {}x{}",
            r.width, r.height, depth.width, depth.height
        )));
    }
    Ok(())
}

/// Contributing pixel chosen for a voxel.
fn sample(bin: &Bin, seed: u64, c: VoxelCoord) -> usize {
    bin.contributors[keyed_index(seed, c, bin.contributors.len())] as usize
}

/// View-direction TSDF: positive in front of the surface, negative behind it.
pub fn backproject_depth_to_tsdf(
    depth: &DepthMap,
    k: &CameraIntrinsics,
    spec: &GridSpec,
    tau: f64,
) -> Result<SparseVolume<f32>> {
    Ok(trace(depth, k, spec, tau)?.map(|_, b| b.value as f32))
}

/// Per-pixel feature vectors copied along each ray's truncation band.
pub fn lift_features(
    depth: &DepthMap,
    k: &CameraIntrinsics,
    spec: &GridSpec,
    tau: f64,
    features: &Raster,
    seed: u64,
) -> Result<SparseVolume<Vec<f32>>> {
    check_raster(features, depth, "feature")?;
    let bins = trace(depth, k, spec, tau)?;
    Ok(bins.map(|c, b| features.pixel(sample(b, seed, c)).to_vec()))
}

fn instance_vector(masks: &Raster, pixel: usize) -> Vec<f32> {
    let logits = masks.pixel(pixel);
    let mut out = vec![0.0; logits.len() + 1];
    if logits.iter().all(|&l| l < FOREGROUND_LOGIT) {
        out[0] = 1.0;
    } else {
        out[1..].copy_from_slice(logits);
    }
    out
}

/// Lifts `N = masks.channels` detection logit rasters into an (N+1)-channel
/// volume; pixels outside every detection store one-hot channel 0.
pub fn lift_instance_logits(
    depth: &DepthMap,
    k: &CameraIntrinsics,
    spec: &GridSpec,
    tau: f64,
    masks: &Raster,
    max_instances: usize,
    seed: u64,
) -> Result<InstanceChannelVolume> {
    check_masks(masks, depth, max_instances)?;
    let bins = trace(depth, k, spec, tau)?;
    InstanceChannelVolume::from_parts(
        masks.channels as usize + 1,
        bins.map(|c, b| instance_vector(masks, sample(b, seed, c))),
    )
}

fn check_masks(masks: &Raster, depth: &DepthMap, max_instances: usize) -> Result<()> {
    if masks.channels as usize > max_instances {
        return Err(Error::Capacity {
            requested: masks.channels as usize,
            max: max_instances,
        });
    }
    check_raster(masks, depth, "mask")
}

/// All three volumes from one trace. Features and instance logits of a voxel
/// come from the same sampled pixel.
#[allow(clippy::too_many_arguments)]
pub fn lift(
    depth: &DepthMap,
    k: &CameraIntrinsics,
    spec: &GridSpec,
    tau: f64,
    features: &Raster,
    masks: &Raster,
    max_instances: usize,
    seed: u64,
) -> Result<LiftedVolumes> {
    check_raster(features, depth, "feature")?;
    check_masks(masks, depth, max_instances)?;
    let bins = trace(depth, k, spec, tau)?;
    let picks = bins.map(|c, b| sample(b, seed, c));
    Ok(LiftedVolumes {
        distance: bins.map(|_, b| b.value as f32),
        features: picks.map(|_, &p| features.pixel(p).to_vec()),
        instances: InstanceChannelVolume::from_parts(
            masks.channels as usize + 1,
            picks.map(|_, &p| instance_vector(masks, p)),
        )?,
    })
}
