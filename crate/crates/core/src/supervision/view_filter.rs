//! View selection predicates of the data pipeline.

#[cfg(feature = "serde")]
use serde::{Deserialize, Serialize};

/// Filter thresholds. Defaults follow the published data preparation.
#[derive(Clone, Copy, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
pub struct ViewFilter {
    /// Camera height above the floor for sampled synthetic views.
    pub camera_height: f64,
    pub min_object_distance: f64,
    pub max_object_distance: f64,
    /// Smallest rendered footprint of any visible object, in pixels.
    pub min_object_pixels: usize,
    /// Smallest share of valid depth pixels for real views.
    pub min_valid_depth: f64,
    /// Smallest overlap between visible and complete geometry for real views.
    pub min_geometry_overlap: f64,
}

impl Default for ViewFilter {
    fn default() -> Self {
        Self {
            camera_height: 0.75,
            min_object_distance: 1.0,
            max_object_distance: 7.0,
            min_object_pixels: 200,
            min_valid_depth: 0.3,
            min_geometry_overlap: 0.2,
        }
    }
}

/// Summary of a rendered synthetic view.
#[derive(Clone, Debug, Default, PartialEq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
pub struct SyntheticView {
    /// Some object lies in the central region of the image.
    pub object_in_center: bool,
    /// Distance from the camera to every visible object, in meters.
    pub object_distances: alloc::vec::Vec<f64>,
    /// Rendered pixel count of every visible object.
    pub object_pixels: alloc::vec::Vec<usize>,
    /// The camera is inside or above an object.
    pub camera_in_object: bool,
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
pub struct RealView {
    pub valid_depth_fraction: f64,
    pub geometry_overlap: f64,
}

pub fn keep_synthetic_view(v: &SyntheticView, f: &ViewFilter) -> bool {
    let in_range = v
        .object_distances
        .iter()
        .any(|d| (f.min_object_distance..=f.max_object_distance).contains(d));
    v.object_in_center && in_range && !v.camera_in_object && v.object_pixels.iter().all(|&p| p >= f.min_object_pixels)
}

pub fn keep_real_view(v: &RealView, f: &ViewFilter) -> bool {
    v.valid_depth_fraction >= f.min_valid_depth && v.geometry_overlap >= f.min_geometry_overlap
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn good() -> SyntheticView {
        SyntheticView {
            object_in_center: true,
            object_distances: vec![2.5, 9.0],
            object_pixels: vec![500, 201],
            camera_in_object: false,
        }
    }

    #[test]
    fn synthetic_rules() {
        let f = ViewFilter::default();
        assert!(keep_synthetic_view(&good(), &f));
        assert!(!keep_synthetic_view(
            &SyntheticView {
                object_in_center: false,
                ..good()
            },
            &f
        ));
        assert!(!keep_synthetic_view(
            &SyntheticView {
                object_distances: vec![0.5, 7.5],
                ..good()
            },
            &f
        ));
        assert!(!keep_synthetic_view(
            &SyntheticView {
                object_pixels: vec![500, 199],
                ..good()
            },
            &f
        ));
        assert!(!keep_synthetic_view(
            &SyntheticView {
                camera_in_object: true,
                ..good()
            },
            &f
        ));
    }

    #[test]
    fn real_rules() {
        let f = ViewFilter::default();
        assert!(keep_real_view(
            &RealView {
                valid_depth_fraction: 0.3,
                geometry_overlap: 0.5
            },
            &f
        ));
        assert!(!keep_real_view(
            &RealView {
                valid_depth_fraction: 0.29,
                geometry_overlap: 0.5
            },
            &f
        ));
        assert!(!keep_real_view(
            &RealView {
                valid_depth_fraction: 0.9,
                geometry_overlap: 0.1
            },
            &f
        ));
    }
}
