//! Truncated signed distance ground truth from a labeled triangle mesh.
//!
//! The magnitude is the exact distance from a voxel center to the nearest
//! triangle. The sign comes from the angle-weighted pseudo-normal of the
//! closest feature (face, edge or vertex), which classifies inside and outside
//! correctly for closed meshes even at edges and corners.

use alloc::vec;
use alloc::vec::Vec;

use hashbrown::HashMap;

use crate::categories::Label;
use crate::error::{invalid, Result};
use crate::geometry::{in_view, CameraIntrinsics, TriangleMesh};
use crate::math::{acos, ceil, floor, Vec3};
use crate::volume::{GridSpec, PanopticVolume, PanopticVoxel, SparseVolume, VoxelCoord};

/// Feature of a triangle that holds the closest point, by local vertex index.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TriangleRegion {
    Face,
    Edge(usize, usize),
    Vertex(usize),
}

/// Closest point of triangle `abc` to `p` and the feature it lies on.
pub fn closest_point_on_triangle(p: Vec3, a: Vec3, b: Vec3, c: Vec3) -> (Vec3, TriangleRegion) {
    let ab = b - a;
    let ac = c - a;
    let ap = p - a;
    let d1 = ab.dot(ap);
    let d2 = ac.dot(ap);
    if d1 <= 0.0 && d2 <= 0.0 {
        return (a, TriangleRegion::Vertex(0));
    }
    let bp = p - b;
    let d3 = ab.dot(bp);
    let d4 = ac.dot(bp);
    if d3 >= 0.0 && d4 <= d3 {
        return (b, TriangleRegion::Vertex(1));
    }
    let vc = d1 * d4 - d3 * d2;
    if vc <= 0.0 && d1 >= 0.0 && d3 <= 0.0 {
        let v = d1 / (d1 - d3);
        return (a + ab * v, TriangleRegion::Edge(0, 1));
    }
    let cp = p - c;
    let d5 = ab.dot(cp);
    let d6 = ac.dot(cp);
    if d6 >= 0.0 && d5 <= d6 {
        return (c, TriangleRegion::Vertex(2));
    }
    let vb = d5 * d2 - d1 * d6;
    if vb <= 0.0 && d2 >= 0.0 && d6 <= 0.0 {
        let w = d2 / (d2 - d6);
        return (a + ac * w, TriangleRegion::Edge(0, 2));
    }
    let va = d3 * d6 - d5 * d4;
    if va <= 0.0 && (d4 - d3) >= 0.0 && (d5 - d6) >= 0.0 {
        let w = (d4 - d3) / ((d4 - d3) + (d5 - d6));
        return (b + (c - b) * w, TriangleRegion::Edge(1, 2));
    }
    let denom = 1.0 / (va + vb + vc);
    let v = vb * denom;
    let w = vc * denom;
    (a + ab * v + ac * w, TriangleRegion::Face)
}

fn key(p: Vec3) -> [u64; 3] {
    // +0.0 and -0.0 weld together.
    [p.x + 0.0, p.y + 0.0, p.z + 0.0].map(f64::to_bits)
}

/// Face, edge and vertex pseudo-normals over position-welded vertices.
struct PseudoNormals {
    /// Welded vertex id of every mesh vertex.
    weld: Vec<usize>,
    face: Vec<Vec3>,
    edge: HashMap<(usize, usize), Vec3>,
    vertex: Vec<Vec3>,
}

impl PseudoNormals {
    fn new(mesh: &TriangleMesh) -> Self {
        let mut ids: HashMap<[u64; 3], usize> = HashMap::new();
        let weld: Vec<usize> = mesh
            .vertices
            .iter()
            .map(|&p| {
                let n = ids.len();
                *ids.entry(key(p)).or_insert(n)
            })
            .collect();
        let mut face = Vec::with_capacity(mesh.triangles.len());
        let mut edge: HashMap<(usize, usize), Vec3> = HashMap::new();
        let mut vertex = vec![Vec3::ZERO; ids.len()];
        for (t, tri) in mesh.triangles.iter().enumerate() {
            let p = mesh.triangle(t);
            let n = (p[1] - p[0]).cross(p[2] - p[0]).normalized();
            face.push(n);
            for e in 0..3 {
                let (i, j) = (weld[tri[e] as usize], weld[tri[(e + 1) % 3] as usize]);
                *edge.entry((i.min(j), i.max(j))).or_insert(Vec3::ZERO) += n;
                let u = (p[(e + 1) % 3] - p[e]).normalized();
                let v = (p[(e + 2) % 3] - p[e]).normalized();
                let angle = acos(u.dot(v).clamp(-1.0, 1.0));
                vertex[weld[tri[e] as usize]] += n * angle;
            }
        }
        Self {
            weld,
            face,
            edge,
            vertex,
        }
    }

    fn normal(&self, mesh: &TriangleMesh, t: usize, region: TriangleRegion) -> Vec3 {
        let w = |local: usize| self.weld[mesh.triangles[t][local] as usize];
        match region {
            TriangleRegion::Face => self.face[t],
            TriangleRegion::Edge(a, b) => {
                let (i, j) = (w(a), w(b));
                self.edge[&(i.min(j), i.max(j))]
            }
            TriangleRegion::Vertex(a) => self.vertex[w(a)],
        }
    }
}

#[derive(Clone, Copy)]
struct Nearest {
    distance: f64,
    triangle: usize,
    point: Vec3,
    region: TriangleRegion,
}

/// Signed distance volume of a labeled mesh in camera space. Voxels whose
/// centers lie in the frustum and within `tau` voxels of the frustum-culled
/// mesh are stored with the distance to that mesh in voxel units and the label
/// of its nearest triangle (lowest index on ties). The sign comes from the
/// nearest feature of the whole mesh, so culling never opens a closed surface.
pub fn mesh_to_tsdf_gt(mesh: &TriangleMesh, k: &CameraIntrinsics, spec: &GridSpec, tau: f64) -> Result<PanopticVolume> {
    if tau.is_nan() || tau <= 0.0 {
        return Err(invalid("truncation must be positive"));
    }
    if mesh.triangles.is_empty() {
        return Ok(SparseVolume::new(*spec));
    }
    if mesh.labels.is_none() {
        return Err(invalid("ground-truth mesh has no triangle labels"));
    }
    mesh.validate()?;
    let frustum = k.frustum();
    let solid: Vec<usize> = (0..mesh.triangles.len())
        .filter(|&t| mesh.double_area(t) > 0.0)
        .collect();
    let mesh = TriangleMesh {
        vertices: mesh.vertices.clone(),
        triangles: solid.iter().map(|&t| mesh.triangles[t]).collect(),
        labels: mesh.labels.as_ref().map(|l| solid.iter().map(|&t| l[t]).collect()),
    };
    let visible = in_view(&mesh, &frustum);
    let normals = PseudoNormals::new(&mesh);
    let h = spec.size();
    let band = tau * h;

    // Nearest visible triangle, and nearest triangle of the whole mesh.
    let mut best: HashMap<VoxelCoord, (Nearest, Nearest)> = HashMap::new();
    let mut inside: HashMap<VoxelCoord, bool> = HashMap::new();
    for (t, &in_sight) in visible.iter().enumerate() {
        let [a, b, c] = mesh.triangle(t);
        let lo = spec.to_grid(a.min(b).min(c) - Vec3::splat(band));
        let hi = spec.to_grid(a.max(b).max(c) + Vec3::splat(band));
        // Centers sit at index + 0.5.
        let range = |l: f64, u: f64, d: u32| {
            let first = (ceil(l - 0.5) as i64).max(0);
            let last = (floor(u - 0.5) as i64).min(d as i64 - 1);
            first..=last
        };
        for kk in range(lo.z, hi.z, spec.dims[2]) {
            for j in range(lo.y, hi.y, spec.dims[1]) {
                for i in range(lo.x, hi.x, spec.dims[0]) {
                    let v = VoxelCoord::new(i as i32, j as i32, kk as i32);
                    let p = spec.center(v);
                    if !*inside.entry(v).or_insert_with(|| frustum.contains(p)) {
                        continue;
                    }
                    let (q, region) = closest_point_on_triangle(p, a, b, c);
                    let distance = (p - q).norm();
                    if distance >= band {
                        continue;
                    }
                    let cand = Nearest {
                        distance,
                        triangle: t,
                        point: q,
                        region,
                    };
                    let far = Nearest {
                        distance: f64::INFINITY,
                        ..cand
                    };
                    let (seen, any) = best.entry(v).or_insert((far, far));
                    if in_sight && distance < seen.distance {
                        *seen = cand;
                    }
                    if distance < any.distance {
                        *any = cand;
                    }
                }
            }
        }
    }

    let labels = mesh.labels.as_ref().expect("checked above");
    let mut out = SparseVolume::new(*spec);
    for (v, (seen, any)) in best {
        if !seen.distance.is_finite() {
            continue;
        }
        let p = spec.center(v);
        let side = (p - any.point).dot(normals.normal(&mesh, any.triangle, any.region));
        let magnitude = seen.distance / h;
        let sdf = if seen.distance == 0.0 {
            0.0
        } else if side < 0.0 {
            -magnitude
        } else {
            magnitude
        };
        let label: Label = labels[seen.triangle];
        out.insert(v, PanopticVoxel::new(sdf.clamp(-tau, tau) as f32, label))?;
    }
    Ok(out)
}
