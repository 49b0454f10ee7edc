//! Panoptic surface assembly from the level-0 heads.
//!
//! Surface voxels (`|sdf| < tau_s`) take the stuff label of the semantic head
//! when its argmax is stuff. Otherwise they take the instance id of the
//! instance head and the majority things category over that instance's
//! voxels. Whatever is still unlabeled copies the labels of the nearest
//! labeled voxel.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::vec::Vec;

use hashbrown::HashMap;

#[cfg(feature = "serde")]
use serde::{Deserialize, Serialize};

use crate::categories::{CategoryId, CategoryKind, CategoryTable, InstanceId, Label};
use crate::error::{invalid, Result};
use crate::propagation::argmax;
use crate::volume::{PanopticVolume, PanopticVoxel, SparseVolume, VoxelCoord};

/// Surface band half-width in voxel units.
pub const DEFAULT_TAU_S: f64 = 1.0;

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
pub struct AssemblyConfig {
    pub tau_s: f64,
    pub categories: CategoryTable,
}

impl AssemblyConfig {
    pub fn new(tau_s: f64, categories: CategoryTable) -> Result<Self> {
        if !(tau_s > 0.0 && tau_s.is_finite()) {
            return Err(invalid(format!("surface threshold {tau_s} must be positive")));
        }
        Ok(Self { tau_s, categories })
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
pub struct AssemblyStats {
    pub surface: usize,
    pub stuff: usize,
    pub instance: usize,
    /// Voxels labeled by the nearest-label fill.
    pub filled: usize,
    /// Things voxels whose own argmax differs from their instance's category.
    pub disagreements: usize,
}

/// Majority things category per instance; ties go to the smaller id.
fn instance_categories(
    surface: &[(VoxelCoord, Option<CategoryId>, Option<InstanceId>)],
    categories: &CategoryTable,
) -> BTreeMap<InstanceId, CategoryId> {
    let mut votes: BTreeMap<InstanceId, BTreeMap<CategoryId, usize>> = BTreeMap::new();
    for &(_, cat, inst) in surface {
        if let (Some(cat), Some(id)) = (cat, inst) {
            if categories.is_things(cat) {
                *votes.entry(id).or_default().entry(cat).or_default() += 1;
            }
        }
    }
    votes
        .into_iter()
        .map(|(id, v)| {
            let mut best = (0, 0);
            for (cat, n) in v {
                if n > best.1 {
                    best = (cat, n);
                }
            }
            (id, best.0)
        })
        .collect()
}

/// Nearest labeled voxel by center distance, ties broken by canonical order.
fn nearest_label(c: VoxelCoord, labeled: &HashMap<VoxelCoord, Label>, reach: i32) -> Option<Label> {
    let mut best: Option<(i64, VoxelCoord, Label)> = None;
    for r in 0..=reach {
        let rr = r as i64;
        if let Some((d2, _, _)) = best {
            if d2 < rr * rr {
                break;
            }
        }
        for dk in -r..=r {
            for dj in -r..=r {
                let on_face = dk.abs() == r || dj.abs() == r;
                let step = if on_face || r == 0 { 1 } else { 2 * r };
                let mut di = -r;
                while di <= r {
                    let n = c.offset(di, dj, dk);
                    if let Some(&l) = labeled.get(&n) {
                        let d2 = c.distance_squared(n);
                        if best.is_none_or(|(b, bc, _)| d2 < b || (d2 == b && n < bc)) {
                            best = Some((d2, n, l));
                        }
                    }
                    di += step;
                }
            }
        }
    }
    best.map(|(_, _, l)| l)
}

pub fn assemble_panoptic_surface(
    sdf: &SparseVolume<f32>,
    semantic: &SparseVolume<Vec<f32>>,
    instances: &SparseVolume<Option<InstanceId>>,
    cfg: &AssemblyConfig,
) -> Result<(PanopticVolume, AssemblyStats)> {
    if semantic.spec() != sdf.spec() || instances.spec() != sdf.spec() {
        return Err(invalid("assembly inputs must share one grid"));
    }
    let cats = &cfg.categories;
    let mut surface = Vec::new();
    for (c, &d) in sdf.iter() {
        if (d as f64).abs() >= cfg.tau_s {
            continue;
        }
        let cat = match semantic.get(c) {
            Some(logits) if logits.len() != cats.len() => {
                return Err(invalid(format!(
                    "{} semantic logits at {c:?} for {} categories",
                    logits.len(),
                    cats.len()
                )))
            }
            Some(logits) => cats.id_at(argmax(logits)),
            None => None,
        };
        surface.push((c, cat, instances.get(c).copied().flatten()));
    }

    let majority = instance_categories(&surface, cats);
    let mut stats = AssemblyStats {
        surface: surface.len(),
        ..Default::default()
    };
    let mut labeled: HashMap<VoxelCoord, Label> = HashMap::new();
    for &(c, cat, inst) in &surface {
        let label = match (cat.and_then(|x| cats.kind(x)), inst) {
            (Some(CategoryKind::Stuff), _) => {
                stats.stuff += 1;
                Some(Label::stuff(cat.unwrap()))
            }
            (_, Some(id)) => majority.get(&id).map(|&m| {
                stats.instance += 1;
                if cat.is_some_and(|x| cats.is_things(x) && x != m) {
                    stats.disagreements += 1;
                }
                Label::thing(m, id)
            }),
            _ => None,
        };
        if let Some(l) = label {
            labeled.insert(c, l);
        }
    }
    if stats.disagreements > 0 {
        log::debug!(
            "{} things voxels disagree with their instance's majority category",
            stats.disagreements
        );
    }

    let reach = sdf.spec().dims.iter().copied().max().unwrap_or(0) as i32;
    let fallback = Label::stuff(cats.freespace());
    let mut out = SparseVolume::new(*sdf.spec());
    for &(c, _, _) in &surface {
        let label = match labeled.get(&c) {
            Some(&l) => l,
            None => {
                stats.filled += 1;
                if labeled.is_empty() {
                    fallback
                } else {
                    nearest_label(c, &labeled, reach).unwrap_or(fallback)
                }
            }
        };
        out.insert(c, PanopticVoxel::new(*sdf.get(c).expect("surface voxel"), label))?;
    }
    Ok((out, stats))
}
