use alloc::vec::Vec;

use hashbrown::HashMap;

use crate::geometry::TriangleMesh;

use super::{PanopticVolume, VoxelCoord};

const DIRECTIONS: [(usize, i32); 6] = [(0, 1), (0, -1), (1, 1), (1, -1), (2, 1), (2, -1)];

/// Blocky surface of the voxel set `{|sdf| < tau_s}`: two outward-facing
/// triangles per face shared with a voxel outside the set. Faces inherit the
/// voxel's label; lattice corners are shared between faces.
pub fn extract_surface_mesh(v: &PanopticVolume, tau_s: f64) -> TriangleMesh {
    let inside = |c: VoxelCoord| v.get(c).is_some_and(|p| (p.sdf as f64).abs() < tau_s);
    let spec = v.spec();
    let mut mesh = TriangleMesh {
        labels: Some(Vec::new()),
        ..TriangleMesh::default()
    };
    let mut corners: HashMap<[i32; 3], u32> = HashMap::new();
    let mut corner = |mesh: &mut TriangleMesh, c: [i32; 3]| -> u32 {
        *corners.entry(c).or_insert_with(|| {
            mesh.vertices.push(spec.corner(c.into()));
            mesh.vertices.len() as u32 - 1
        })
    };

    for (c, p) in v.iter() {
        if !inside(c) {
            continue;
        }
        for (axis, sign) in DIRECTIONS {
            let mut step = [0; 3];
            step[axis] = sign;
            if inside(c.offset(step[0], step[1], step[2])) {
                continue;
            }
            let (u, w) = ((axis + 1) % 3, (axis + 2) % 3);
            let mut base = c.to_array();
            if sign > 0 {
                base[axis] += 1;
            }
            let mut quad = [base; 4];
            quad[1][u] += 1;
            quad[2][u] += 1;
            quad[2][w] += 1;
            quad[3][w] += 1;
            if sign < 0 {
                quad.swap(1, 3);
            }
            let ids = quad.map(|q| corner(&mut mesh, q));
            mesh.triangles.push([ids[0], ids[1], ids[2]]);
            mesh.triangles.push([ids[0], ids[2], ids[3]]);
            let labels = mesh.labels.as_mut().expect("labels initialized");
            labels.push(p.label());
            labels.push(p.label());
        }
    }
    mesh
}
