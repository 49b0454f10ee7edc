//! Pinhole camera model, view frustum, depth rasters and triangle meshes.
//!
//! Camera space is +z forward, +x right and +y down, matching image
//! coordinates, so unprojection needs no sign flips.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

#[cfg(feature = "serde")]
use serde::{Deserialize, Serialize};

use crate::categories::Label;
use crate::error::{invalid, Error, Result};
use crate::math::Vec3;

/// Half-space tolerance of the frustum planes, in meters.
pub const PLANE_EPSILON: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
    pub z_near: f64,
    pub z_far: f64,
}

/// Image-plane projection of a camera-space point.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Projection {
    pub u: f64,
    pub v: f64,
    pub depth: f64,
}

impl CameraIntrinsics {
    #[allow(clippy::too_many_arguments)]
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: u32, height: u32, z_near: f64, z_far: f64) -> Result<Self> {
        let k = Self {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
            z_near,
            z_far,
        };
        k.validate()?;
        Ok(k)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(invalid("focal lengths must be positive"));
        }
        if !(self.cx >= 0.0 && self.cx < self.width as f64) {
            return Err(invalid("cx must lie inside [0, width)"));
        }
        if !(self.cy >= 0.0 && self.cy < self.height as f64) {
            return Err(invalid("cy must lie inside [0, height)"));
        }
        if !(self.z_near > 0.0 && self.z_near < self.z_far) {
            return Err(invalid("depth range must satisfy 0 < z_near < z_far"));
        }
        Ok(())
    }

    pub fn contains_pixel(&self, u: f64, v: f64) -> bool {
        u >= 0.0 && v >= 0.0 && u < self.width as f64 && v < self.height as f64
    }

    /// Ray through pixel `(u, v)` scaled so that its z component is 1.
    pub fn pixel_ray(&self, u: f64, v: f64) -> Vec3 {
        Vec3::new((u - self.cx) / self.fx, (v - self.cy) / self.fy, 1.0)
    }

    pub fn unproject_pixel(&self, u: f64, v: f64, depth: f64) -> Result<Vec3> {
        if !self.contains_pixel(u, v) {
            return Err(invalid(format!("pixel ({u}, {v}) lies outside the image")));
        }
        if !(depth > 0.0 && depth.is_finite()) {
            return Err(invalid(format!("depth {depth} is not a positive finite value")));
        }
        Ok(self.pixel_ray(u, v) * depth)
    }

    pub fn project_point(&self, p: Vec3) -> Result<Projection> {
        if p.z.is_nan() || p.z <= 0.0 {
            return Err(Error::BehindCamera { z: p.z });
        }
        Ok(Projection {
            u: self.fx * p.x / p.z + self.cx,
            v: self.fy * p.y / p.z + self.cy,
            depth: p.z,
        })
    }

    pub fn frustum(&self) -> Frustum {
        Frustum::from_intrinsics(self)
    }
}

/// Oriented plane `normal . p + offset >= 0` on the inside.
#[derive(Clone, Copy, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
pub struct Plane {
    pub normal: Vec3,
    pub offset: f64,
}

impl Plane {
    fn through_origin(normal: Vec3) -> Self {
        Self {
            normal: normal.normalized(),
            offset: 0.0,
        }
    }

    pub fn signed_distance(&self, p: Vec3) -> f64 {
        self.normal.dot(p) + self.offset
    }
}

/// Camera view frustum as six inward-facing planes in camera space.
#[derive(Clone, Copy, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
pub struct Frustum {
    pub planes: [Plane; 6],
}

impl Frustum {
    pub fn from_intrinsics(k: &CameraIntrinsics) -> Self {
        let (w, h) = (k.width as f64, k.height as f64);
        Self {
            planes: [
                Plane {
                    normal: Vec3::new(0.0, 0.0, 1.0),
                    offset: -k.z_near,
                },
                Plane {
                    normal: Vec3::new(0.0, 0.0, -1.0),
                    offset: k.z_far,
                },
                // u >= 0
                Plane::through_origin(Vec3::new(k.fx, 0.0, k.cx)),
                // u <= width
                Plane::through_origin(Vec3::new(-k.fx, 0.0, w - k.cx)),
                // v >= 0
                Plane::through_origin(Vec3::new(0.0, k.fy, k.cy)),
                // v <= height
                Plane::through_origin(Vec3::new(0.0, -k.fy, h - k.cy)),
            ],
        }
    }

    pub fn contains(&self, p: Vec3) -> bool {
        self.planes.iter().all(|pl| pl.signed_distance(p) >= -PLANE_EPSILON)
    }

    /// Conservative box test: false only when one plane has all eight corners
    /// of the box outside it.
    pub fn may_intersect_box(&self, min: Vec3, max: Vec3) -> bool {
        self.planes.iter().all(|pl| {
            // Corner furthest along the plane normal.
            let far = Vec3::new(
                if pl.normal.x >= 0.0 { max.x } else { min.x },
                if pl.normal.y >= 0.0 { max.y } else { min.y },
                if pl.normal.z >= 0.0 { max.z } else { min.z },
            );
            pl.signed_distance(far) >= -PLANE_EPSILON
        })
    }
}

/// `frustum_contains` as a free function.
pub fn frustum_contains(f: &Frustum, p: Vec3) -> bool {
    f.contains(p)
}

/// Per-pixel metric depth. Zero, negative and non-finite values are invalid.
#[derive(Clone, Debug, PartialEq)]
pub struct DepthMap {
    pub width: u32,
    pub height: u32,
    pub values: Vec<f32>,
}

impl DepthMap {
    pub const INVALID: f32 = 0.0;

    pub fn new(width: u32, height: u32, values: Vec<f32>) -> Result<Self> {
        if values.len() != width as usize * height as usize {
            return Err(invalid(format!(
                "depth map has {} values for {width}x{height} pixels",
                values.len()
            )));
        }
        Ok(Self { width, height, values })
    }

    pub fn invalid(width: u32, height: u32) -> Self {
        Self {
            width,
            height,
            values: vec![Self::INVALID; width as usize * height as usize],
        }
    }

    pub fn is_valid_depth(d: f32) -> bool {
        d.is_finite() && d > 0.0
    }

    pub fn get(&self, u: u32, v: u32) -> Option<f64> {
        let d = *self.values.get((v * self.width + u) as usize)?;
        Self::is_valid_depth(d).then_some(d as f64)
    }

    pub fn set(&mut self, u: u32, v: u32, d: f32) {
        let i = (v * self.width + u) as usize;
        self.values[i] = d;
    }

    pub fn matches(&self, k: &CameraIntrinsics) -> bool {
        self.width == k.width && self.height == k.height
    }

    pub fn valid_count(&self) -> usize {
        self.values.iter().filter(|d| Self::is_valid_depth(**d)).count()
    }
}

/// Multi-channel `f32` image, pixel-major (`data[(v * width + u) * channels + c]`).
#[derive(Clone, Debug, PartialEq)]
pub struct Raster {
    pub width: u32,
    pub height: u32,
    pub channels: u32,
    pub data: Vec<f32>,
}

impl Raster {
    pub fn new(width: u32, height: u32, channels: u32, data: Vec<f32>) -> Result<Self> {
        if data.len() != width as usize * height as usize * channels as usize {
            return Err(invalid(format!(
                "raster has {} values for {width}x{height}x{channels}",
                data.len()
            )));
        }
        Ok(Self {
            width,
            height,
            channels,
            data,
        })
    }

    pub fn zeros(width: u32, height: u32, channels: u32) -> Self {
        Self {
            width,
            height,
            channels,
            data: vec![0.0; width as usize * height as usize * channels as usize],
        }
    }

    pub fn pixel(&self, index: usize) -> &[f32] {
        let c = self.channels as usize;
        &self.data[index * c..(index + 1) * c]
    }

    pub fn pixel_mut(&mut self, index: usize) -> &mut [f32] {
        let c = self.channels as usize;
        &mut self.data[index * c..(index + 1) * c]
    }

    pub fn same_size(&self, d: &DepthMap) -> bool {
        self.width == d.width && self.height == d.height
    }
}

/// Indexed triangle mesh with optional per-triangle labels.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TriangleMesh {
    pub vertices: Vec<Vec3>,
    pub triangles: Vec<[u32; 3]>,
    pub labels: Option<Vec<Label>>,
}

impl TriangleMesh {
    pub fn new(vertices: Vec<Vec3>, triangles: Vec<[u32; 3]>, labels: Option<Vec<Label>>) -> Result<Self> {
        let m = Self {
            vertices,
            triangles,
            labels,
        };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.vertices.len() as u32;
        if let Some(t) = self.triangles.iter().find(|t| t.iter().any(|&i| i >= n)) {
            return Err(invalid(format!("triangle {t:?} indexes past {n} vertices")));
        }
        if let Some(l) = &self.labels {
            if l.len() != self.triangles.len() {
                return Err(invalid("label count differs from triangle count"));
            }
        }
        Ok(())
    }

    pub fn is_empty(&self) -> bool {
        self.triangles.is_empty()
    }

    pub fn triangle(&self, t: usize) -> [Vec3; 3] {
        let [a, b, c] = self.triangles[t];
        [
            self.vertices[a as usize],
            self.vertices[b as usize],
            self.vertices[c as usize],
        ]
    }

    pub fn label(&self, t: usize) -> Option<Label> {
        self.labels.as_ref().map(|l| l[t])
    }

    /// Twice the triangle area, zero for degenerate triangles.
    pub fn double_area(&self, t: usize) -> f64 {
        let [a, b, c] = self.triangle(t);
        (b - a).cross(c - a).norm()
    }

    /// Append another mesh. Labels are kept only if both meshes carry them
    /// (an empty mesh adopts the other's labels).
    pub fn append(&mut self, other: &TriangleMesh) {
        let base = self.vertices.len() as u32;
        let was_empty = self.triangles.is_empty();
        self.vertices.extend_from_slice(&other.vertices);
        self.triangles
            .extend(other.triangles.iter().map(|t| [t[0] + base, t[1] + base, t[2] + base]));
        self.labels = match (self.labels.take(), &other.labels) {
            (Some(mut a), Some(b)) => {
                a.extend_from_slice(b);
                Some(a)
            }
            (None, Some(b)) if was_empty => Some(b.clone()),
            _ => None,
        };
    }

    /// Closed axis-aligned box with outward-facing (counter-clockwise) triangles.
    pub fn axis_aligned_box(min: Vec3, max: Vec3, label: Option<Label>) -> Self {
        let vertices = (0..8)
            .map(|n| {
                Vec3::new(
                    if n & 1 == 0 { min.x } else { max.x },
                    if n & 2 == 0 { min.y } else { max.y },
                    if n & 4 == 0 { min.z } else { max.z },
                )
            })
            .collect();
        let quads: [[u32; 4]; 6] = [
            [0, 4, 6, 2], // -x
            [1, 3, 7, 5], // +x
            [0, 1, 5, 4], // -y
            [2, 6, 7, 3], // +y
            [0, 2, 3, 1], // -z
            [4, 5, 7, 6], // +z
        ];
        let triangles: Vec<[u32; 3]> = quads
            .iter()
            .flat_map(|q| [[q[0], q[1], q[2]], [q[0], q[2], q[3]]])
            .collect();
        let labels = label.map(|l| vec![l; triangles.len()]);
        Self {
            vertices,
            triangles,
            labels,
        }
    }
}

/// Per triangle: does any vertex lie inside the frustum.
pub(crate) fn in_view(mesh: &TriangleMesh, frustum: &Frustum) -> Vec<bool> {
    let inside: Vec<bool> = mesh.vertices.iter().map(|&p| frustum.contains(p)).collect();
    mesh.triangles
        .iter()
        .map(|tri| tri.iter().any(|&i| inside[i as usize]))
        .collect()
}

/// Keep every triangle with at least one vertex inside the frustum; drop
/// zero-area triangles. Vertex storage is left untouched.
pub fn cull_mesh_to_frustum(mesh: &TriangleMesh, frustum: &Frustum) -> TriangleMesh {
    let flags = in_view(mesh, frustum);
    let keep: Vec<usize> = (0..mesh.triangles.len())
        .filter(|&t| flags[t] && mesh.double_area(t) > 0.0)
        .collect();
    TriangleMesh {
        vertices: mesh.vertices.clone(),
        triangles: keep.iter().map(|&t| mesh.triangles[t]).collect(),
        labels: mesh.labels.as_ref().map(|l| keep.iter().map(|&t| l[t]).collect()),
    }
}
