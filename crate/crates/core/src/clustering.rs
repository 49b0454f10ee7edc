//! Bottom-up instance grouping of labeled surface locations.
//!
//! A cluster grows breadth-first: a location joins when it lies within `r` of
//! any member with the same category, and every location left over seeds a new
//! cluster. This is exactly the connected components of the same-category
//! graph with edges at distance `<= r`.

use alloc::collections::{BTreeSet, VecDeque};
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use hashbrown::HashMap;

use crate::categories::{CategoryId, CategoryTable, InstanceId};
use crate::error::{invalid, Result};
use crate::math::{floor, Vec3};
use crate::metrics::Segment;
use crate::volume::GridSpec;

/// Growth radius in meters.
pub const DEFAULT_RADIUS: f64 = 0.02;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SurfacePoint {
    pub position: Vec3,
    pub category: CategoryId,
    /// Semantic probability in `[0, 1]`.
    pub probability: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct InstanceCluster {
    pub category: CategoryId,
    /// Indices into the input points, ascending.
    pub members: Vec<usize>,
    pub confidence: f64,
}

type Cell = (CategoryId, i64, i64, i64);

fn cell_of(category: CategoryId, p: Vec3, r: f64) -> Cell {
    (
        category,
        floor(p.x / r) as i64,
        floor(p.y / r) as i64,
        floor(p.z / r) as i64,
    )
}

/// Arithmetic mean of the member probabilities.
pub fn cluster_confidence(probabilities: &[f64]) -> Result<f64> {
    if probabilities.is_empty() {
        return Err(invalid("confidence of an empty cluster"));
    }
    Ok(probabilities.iter().sum::<f64>() / probabilities.len() as f64)
}

/// Clusters the things-labeled points; stuff and unknown categories are
/// skipped. Clusters are ordered by their smallest member index.
pub fn cluster_instances(points: &[SurfacePoint], r: f64, categories: &CategoryTable) -> Result<Vec<InstanceCluster>> {
    if !(r > 0.0 && r.is_finite()) {
        return Err(invalid(format!("cluster radius {r} must be positive")));
    }
    for (n, p) in points.iter().enumerate() {
        if !p.position.is_finite() || !(0.0..=1.0).contains(&p.probability) {
            return Err(invalid(format!(
                "surface point {n} has a non-finite position or bad probability"
            )));
        }
    }
    let mut grid: HashMap<Cell, Vec<usize>> = HashMap::new();
    for (n, p) in points.iter().enumerate() {
        if categories.is_things(p.category) {
            grid.entry(cell_of(p.category, p.position, r)).or_default().push(n);
        }
    }

    let r2 = r * r;
    let mut visited = vec![false; points.len()];
    let mut clusters = Vec::new();
    let mut queue = VecDeque::new();
    for seed in 0..points.len() {
        if visited[seed] || !categories.is_things(points[seed].category) {
            continue;
        }
        let category = points[seed].category;
        visited[seed] = true;
        queue.push_back(seed);
        let mut members = Vec::new();
        while let Some(m) = queue.pop_front() {
            members.push(m);
            let p = points[m].position;
            let (_, ci, cj, ck) = cell_of(category, p, r);
            for dk in -1..=1 {
                for dj in -1..=1 {
                    for di in -1..=1 {
                        let Some(bucket) = grid.get(&(category, ci + di, cj + dj, ck + dk)) else {
                            continue;
                        };
                        for &n in bucket {
                            if !visited[n] && (points[n].position - p).norm_squared() <= r2 {
                                visited[n] = true;
                                queue.push_back(n);
                            }
                        }
                    }
                }
            }
        }
        members.sort_unstable();
        let probs: Vec<f64> = members.iter().map(|&m| points[m].probability).collect();
        clusters.push(InstanceCluster {
            category,
            confidence: cluster_confidence(&probs)?,
            members,
        });
    }
    Ok(clusters)
}

/// Voxelized segments of the clusters, ids numbered from 1 in cluster order.
pub fn clusters_to_segments(points: &[SurfacePoint], clusters: &[InstanceCluster], spec: &GridSpec) -> Vec<Segment> {
    clusters
        .iter()
        .zip(1..)
        .map(|(c, id): (&InstanceCluster, InstanceId)| Segment {
            category: c.category,
            instance: Some(id),
            voxels: c
                .members
                .iter()
                .map(|&m| spec.voxel_of(points[m].position))
                .filter(|v| spec.contains(*v))
                .collect::<BTreeSet<_>>(),
            confidence: Some(c.confidence),
        })
        .filter(|s| !s.voxels.is_empty())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::categories::WALL;
    use proptest::prelude::*;

    const CHAIR: CategoryId = 3;

    fn pt(x: f64, category: CategoryId, probability: f64) -> SurfacePoint {
        SurfacePoint {
            position: Vec3::new(x, 0.0, 0.0),
            category,
            probability,
        }
    }

    fn run(points: &[SurfacePoint]) -> Vec<InstanceCluster> {
        cluster_instances(points, DEFAULT_RADIUS, &CategoryTable::synthetic()).unwrap()
    }

    #[test]
    fn merge_and_split_examples() {
        assert_eq!(run(&[pt(0.0, CHAIR, 1.0), pt(0.01, CHAIR, 1.0)]).len(), 1);
        assert_eq!(run(&[pt(0.0, CHAIR, 1.0), pt(0.03, CHAIR, 1.0)]).len(), 2);
        // Inclusive radius.
        let edge = [pt(0.0, CHAIR, 1.0), pt(0.015625, CHAIR, 1.0)];
        assert_eq!(
            cluster_instances(&edge, 0.015625, &CategoryTable::synthetic())
                .unwrap()
                .len(),
            1
        );
    }

    #[test]
    fn chain_spanning_a_meter_is_one_cluster() {
        let chain: Vec<_> = (0..=66).map(|n| pt(n as f64 * 0.015, CHAIR, 0.5)).collect();
        let c = run(&chain);
        assert_eq!(c.len(), 1);
        assert_eq!(c[0].members.len(), 67);
    }

    #[test]
    fn stuff_and_other_categories_stay_apart() {
        let c = run(&[
            pt(0.0, CHAIR, 0.8),
            pt(0.005, 5, 0.4),
            pt(0.01, WALL, 1.0),
            pt(0.012, CHAIR, 0.6),
        ]);
        assert_eq!(c.len(), 2);
        assert_eq!(c[0].members, [0, 3]);
        assert!((c[0].confidence - 0.7).abs() < 1e-12);
        assert_eq!(c[1].category, 5);
    }

    #[test]
    fn confidence_examples() {
        assert!((cluster_confidence(&[0.8, 0.6]).unwrap() - 0.7).abs() < 1e-12);
        assert_eq!(cluster_confidence(&[0.9]).unwrap(), 0.9);
        assert_eq!(cluster_confidence(&[1.0, 0.0, 0.5]).unwrap(), 0.5);
        assert!(cluster_confidence(&[]).is_err());
    }

    fn union_find(points: &[SurfacePoint], r: f64, cats: &CategoryTable) -> BTreeSet<Vec<usize>> {
        let mut parent: Vec<usize> = (0..points.len()).collect();
        fn find(p: &mut [usize], mut x: usize) -> usize {
            while p[x] != x {
                p[x] = p[p[x]];
                x = p[x];
            }
            x
        }
        for a in 0..points.len() {
            for b in a + 1..points.len() {
                if points[a].category == points[b].category && (points[a].position - points[b].position).norm() <= r {
                    let (ra, rb) = (find(&mut parent, a), find(&mut parent, b));
                    parent[ra] = rb;
                }
            }
        }
        let mut groups: HashMap<usize, Vec<usize>> = HashMap::new();
        for (n, point) in points.iter().enumerate() {
            if cats.is_things(point.category) {
                let root = find(&mut parent, n);
                groups.entry(root).or_default().push(n);
            }
        }
        groups.into_values().collect()
    }

    proptest! {
        #[test]
        fn equals_connected_components(
            raw in proptest::collection::vec(((0.0f64..0.2, 0.0f64..0.2, 0.0f64..0.1), 1u32..12, 0.0f64..=1.0), 0..300)
        ) {
            let cats = CategoryTable::synthetic();
            let points: Vec<_> = raw
                .into_iter()
                .map(|((x, y, z), category, probability)| SurfacePoint { position: Vec3::new(x, y, z), category, probability })
                .collect();
            let got = cluster_instances(&points, DEFAULT_RADIUS, &cats).unwrap();
            let sets: BTreeSet<Vec<usize>> = got.iter().map(|c| c.members.clone()).collect();
            prop_assert_eq!(sets, union_find(&points, DEFAULT_RADIUS, &cats));
            for c in &got {
                prop_assert!(c.members.iter().all(|&m| points[m].category == c.category));
            }
        }
    }
}
