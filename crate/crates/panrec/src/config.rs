//! Run configuration shared by every subcommand.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use panrec_core::assembly::DEFAULT_TAU_S;
use panrec_core::clustering::DEFAULT_RADIUS;
use panrec_core::hierarchy::{DEFAULT_LEVELS, DEFAULT_THETA_OCC};
use panrec_core::lifting::{DEFAULT_MAX_INSTANCES, DEFAULT_TAU};
use panrec_core::metrics::DEFAULT_MATCH_IOU;
use panrec_core::{CategoryKind, CategoryTable, GridSpec};

use crate::error::{Error, Result};

/// Dataset profile; fixes the evaluation voxel size and the category table.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Profile {
    /// Rendered indoor scenes: 3 cm voxels, nine things plus wall and floor.
    Synthetic,
    /// Real scans: 6 cm voxels, adds ceiling as stuff.
    Real,
}

impl Profile {
    pub fn voxel_size(self) -> f32 {
        match self {
            Profile::Synthetic => 0.03,
            Profile::Real => 0.06,
        }
    }

    pub fn categories(self) -> CategoryTable {
        match self {
            Profile::Synthetic => CategoryTable::synthetic(),
            Profile::Real => CategoryTable::real(),
        }
    }
}

/// Edge length of the default cubic grid, in voxels.
pub const DEFAULT_GRID_DIM: u32 = 128;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub profile: Profile,
    /// Voxel size in meters for ground truth, lifting and evaluation.
    pub voxel: f32,
    pub grid_dims: [u32; 3],
    /// Truncation of lifted and ground-truth distances, in voxels.
    pub tau: f64,
    /// Surface band of panoptic assembly, in voxels.
    pub tau_s: f64,
    pub theta_occ: f64,
    /// Segment IoU needed for a true positive.
    pub theta_iou: f64,
    pub max_instances: usize,
    pub seed: u64,
    /// Clustering radius in meters.
    pub radius: f64,
    pub levels: usize,
    pub categories: CategoryTable,
    #[serde(default)]
    pub inputs: Vec<PathBuf>,
    #[serde(default)]
    pub output: Option<PathBuf>,
}

impl RunConfig {
    pub fn for_profile(profile: Profile) -> Self {
        Self {
            profile,
            voxel: profile.voxel_size(),
            grid_dims: [DEFAULT_GRID_DIM; 3],
            tau: DEFAULT_TAU,
            tau_s: DEFAULT_TAU_S,
            theta_occ: DEFAULT_THETA_OCC,
            theta_iou: DEFAULT_MATCH_IOU,
            max_instances: DEFAULT_MAX_INSTANCES,
            seed: 0,
            radius: DEFAULT_RADIUS,
            levels: DEFAULT_LEVELS,
            categories: profile.categories(),
            inputs: Vec::new(),
            output: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::usage(msg));
        if !(self.voxel > 0.0 && self.voxel.is_finite()) {
            return bad(format!("voxel size {} must be positive", self.voxel));
        }
        if !(self.tau >= 1.0 && self.tau <= 16.0) {
            return bad(format!("tau {} is outside [1, 16] voxels", self.tau));
        }
        if !(self.tau_s > 0.0 && self.tau_s <= self.tau) {
            return bad(format!("tau_s {} must lie in (0, tau]", self.tau_s));
        }
        if !(self.theta_occ > 0.0 && self.theta_occ < 1.0) {
            return bad(format!("theta_occ {} is outside (0, 1)", self.theta_occ));
        }
        if !(self.theta_iou > 0.0 && self.theta_iou <= 1.0) {
            return bad(format!("theta_iou {} is outside (0, 1]", self.theta_iou));
        }
        if self.max_instances == 0 {
            return bad("max_instances must be at least 1".into());
        }
        if !(self.radius > 0.0 && self.radius.is_finite()) {
            return bad(format!("radius {} must be positive", self.radius));
        }
        if !(1..=8).contains(&self.levels) {
            return bad(format!("levels {} is outside 1..=8", self.levels));
        }
        let factor = 1u32 << (self.levels - 1);
        if self.grid_dims.iter().any(|&d| d == 0 || d % factor != 0) {
            return bad(format!(
                "grid dims {:?} must be positive multiples of {factor}",
                self.grid_dims
            ));
        }
        if self.categories.iter().all(|c| c.kind != CategoryKind::Things) {
            return bad("the category table has no things category".into());
        }
        Ok(())
    }

    /// Grid in front of the camera at the configured resolution.
    pub fn camera_grid(&self) -> Result<GridSpec> {
        Ok(GridSpec::camera_aligned(self.voxel, self.grid_dims)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn from_json(text: &str) -> std::result::Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::for_profile(Profile::Synthetic)
    }
}
