//! Conservative mesh voxelization with a separating-axis triangle/cube test.
//!
//! All tests run in continuous grid coordinates, where voxel `(i, j, k)` is
//! the unit cube `[i, i + 1] x [j, j + 1] x [k, k + 1]`. A triangle occupies a
//! voxel when it meets the open cube. Triangles that lie exactly in a voxel
//! boundary plane meet no open cube; they occupy the voxels behind them (on the
//! side opposite their normal) whose face they overlap with positive area. This
//! makes re-voxelizing a blocky surface reproduce its voxel set exactly.

use crate::categories::Label;
use crate::geometry::TriangleMesh;
use crate::math::{ceil, floor, round, Vec3};

use super::{GridSpec, SparseVolume, VoxelCoord};

/// Grid coordinates closer than this to an integer are snapped onto it.
const SNAP: f64 = 1e-7;

fn snap(x: f64) -> f64 {
    let r = round(x);
    if (x - r).abs() < SNAP {
        r
    } else {
        x
    }
}

fn to_grid(spec: &GridSpec, p: Vec3) -> Vec3 {
    let g = spec.to_grid(p);
    Vec3::new(snap(g.x), snap(g.y), snap(g.z))
}

/// Whether the triangle `tri` (grid coordinates) meets the open unit cube of
/// voxel `c`.
fn overlaps_open_cube(tri: &[Vec3; 3], c: VoxelCoord) -> bool {
    let center = Vec3::new(c.i as f64 + 0.5, c.j as f64 + 0.5, c.k as f64 + 0.5);
    let v = [tri[0] - center, tri[1] - center, tri[2] - center];
    let half = 0.5;

    // Projections that only touch count as separated, which makes every test
    // below a test against the open cube.
    let separated = |axis: Vec3| -> bool {
        if axis.x == 0.0 && axis.y == 0.0 && axis.z == 0.0 {
            return false;
        }
        let p = [axis.dot(v[0]), axis.dot(v[1]), axis.dot(v[2])];
        let lo = p[0].min(p[1]).min(p[2]);
        let hi = p[0].max(p[1]).max(p[2]);
        let r = half * (axis.x.abs() + axis.y.abs() + axis.z.abs());
        lo >= r || hi <= -r
    };

    for a in 0..3 {
        if separated(Vec3::axis(a)) {
            return false;
        }
    }
    let edges = [v[1] - v[0], v[2] - v[1], v[0] - v[2]];
    if separated(edges[0].cross(edges[1])) {
        return false;
    }
    for e in edges {
        for a in 0..3 {
            if separated(Vec3::axis(a).cross(e)) {
                return false;
            }
        }
    }
    true
}

/// Whether a 2D triangle overlaps the unit square at `(a, b)` with positive area.
fn overlaps_open_square(tri: &[(f64, f64); 3], a: i32, b: i32) -> bool {
    let (ca, cb) = (a as f64 + 0.5, b as f64 + 0.5);
    let v: [(f64, f64); 3] = tri.map(|(x, y)| (x - ca, y - cb));
    let separated = |ax: (f64, f64)| -> bool {
        if ax.0 == 0.0 && ax.1 == 0.0 {
            return false;
        }
        let p = v.map(|(x, y)| ax.0 * x + ax.1 * y);
        let lo = p[0].min(p[1]).min(p[2]);
        let hi = p[0].max(p[1]).max(p[2]);
        let r = 0.5 * (ax.0.abs() + ax.1.abs());
        lo >= r || hi <= -r
    };
    if separated((1.0, 0.0)) || separated((0.0, 1.0)) {
        return false;
    }
    for n in 0..3 {
        let (p, q) = (v[n], v[(n + 1) % 3]);
        if separated((q.1 - p.1, p.0 - q.0)) {
            return false;
        }
    }
    true
}

/// Voxel index range `[lo, hi]` of cells whose open interval meets `[min, max]`.
fn cell_range(min: f64, max: f64, dim: u32) -> Option<(i32, i32)> {
    let lo = (floor(min) as i64).max(0);
    let hi = ((ceil(max) as i64) - 1).min(dim as i64 - 1);
    (lo <= hi).then_some((lo as i32, hi as i32))
}

/// Occupied voxels of one triangle, in grid coordinates.
fn triangle_voxels(tri: &[Vec3; 3], spec: &GridSpec, mut emit: impl FnMut(VoxelCoord)) {
    let normal = (tri[1] - tri[0]).cross(tri[2] - tri[0]);
    if normal.norm_squared() == 0.0 {
        return;
    }
    let lo = tri[0].min(tri[1]).min(tri[2]);
    let hi = tri[0].max(tri[1]).max(tri[2]);

    // Triangle in a voxel boundary plane.
    for a in 0..3 {
        if lo[a] == hi[a] && lo[a] == round(lo[a]) {
            let plane = lo[a] as i64;
            let layer = if normal[a] > 0.0 { plane - 1 } else { plane };
            if layer < 0 || layer >= spec.dims[a] as i64 {
                return;
            }
            let (u, w) = ((a + 1) % 3, (a + 2) % 3);
            let flat = tri.map(|p| (p[u], p[w]));
            let (Some((u0, u1)), Some((w0, w1))) = (
                cell_range(lo[u], hi[u], spec.dims[u]),
                cell_range(lo[w], hi[w], spec.dims[w]),
            ) else {
                return;
            };
            for cw in w0..=w1 {
                for cu in u0..=u1 {
                    if overlaps_open_square(&flat, cu, cw) {
                        let mut idx = [0i32; 3];
                        idx[a] = layer as i32;
                        idx[u] = cu;
                        idx[w] = cw;
                        emit(idx.into());
                    }
                }
            }
            return;
        }
    }

    let ranges = [
        cell_range(lo.x, hi.x, spec.dims[0]),
        cell_range(lo.y, hi.y, spec.dims[1]),
        cell_range(lo.z, hi.z, spec.dims[2]),
    ];
    let [Some((i0, i1)), Some((j0, j1)), Some((k0, k1))] = ranges else {
        return;
    };
    for k in k0..=k1 {
        for j in j0..=j1 {
            for i in i0..=i1 {
                let c = VoxelCoord::new(i, j, k);
                if overlaps_open_cube(tri, c) {
                    emit(c);
                }
            }
        }
    }
}

/// Whether triangle `t` of `mesh` occupies voxel `c` under the voxelization rule.
pub fn triangle_overlaps_voxel(mesh: &TriangleMesh, t: usize, spec: &GridSpec, c: VoxelCoord) -> bool {
    let tri = mesh.triangle(t).map(|p| to_grid(spec, p));
    let mut hit = false;
    triangle_voxels(&tri, spec, |v| hit |= v == c);
    hit
}

/// Voxelize a mesh given in the grid's frame. Each occupied voxel carries the
/// label of its lowest-index intersecting triangle (the default label for
/// unlabeled meshes). Zero-area triangles are ignored.
pub fn voxelize_mesh(mesh: &TriangleMesh, spec: &GridSpec) -> SparseVolume<Label> {
    let mut out = SparseVolume::new(*spec);
    for t in 0..mesh.triangles.len() {
        let tri = mesh.triangle(t).map(|p| to_grid(spec, p));
        let label = mesh.label(t).unwrap_or_default();
        triangle_voxels(&tri, spec, |c| {
            out.entry(c).or_insert(label);
        });
    }
    out
}
