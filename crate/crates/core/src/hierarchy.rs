//! Coarse-to-fine sparse generation with pluggable per-level predictors.
//!
//! Level 0 is the finest grid and level `h` is coarser by `2^h`. The coarsest
//! level is evaluated densely; at every other level the sites are the children
//! of the sites accepted by the occupancy head one level up. Level 0 also
//! carries a distance head, and its accepted sites form the output volume.

use alloc::collections::BTreeSet;
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::categories::{CategoryTable, InstanceId, Label};
use crate::error::{contract, invalid, Result};
use crate::geometry::Frustum;
use crate::lifting::LiftedVolumes;
use crate::math::Vec3;
use crate::propagation::argmax;
use crate::volume::{GridSpec, PanopticVolume, PanopticVoxel, SparseVolume, VoxelCoord};

pub const DEFAULT_LEVELS: usize = 3;
pub const DEFAULT_THETA_OCC: f64 = 0.5;
/// Resolution ratio between consecutive levels.
pub const LEVEL_FACTOR: i32 = 2;

/// Head outputs at one site.
#[derive(Clone, Debug, PartialEq)]
pub struct SiteOutput {
    /// Occupancy probability in `[0, 1]`.
    pub occupancy: f32,
    /// Semantic logits, one per category table entry.
    pub semantic: Vec<f32>,
    /// Instance channel logits, channel 0 meaning no instance.
    pub instance: Vec<f32>,
    /// Signed distance in voxel units; required on accepted level-0 sites.
    pub distance: Option<f32>,
}

pub struct LevelRequest<'a> {
    pub level: usize,
    pub spec: GridSpec,
    pub sites: &'a BTreeSet<VoxelCoord>,
    pub seed: &'a LiftedVolumes,
}

/// Per-level evaluator; must answer exactly on the requested sites.
pub trait LevelPredictor {
    fn predict(&mut self, request: &LevelRequest<'_>) -> Result<SparseVolume<SiteOutput>>;
}

impl<P: LevelPredictor + ?Sized> LevelPredictor for &mut P {
    fn predict(&mut self, request: &LevelRequest<'_>) -> Result<SparseVolume<SiteOutput>> {
        (**self).predict(request)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct HierarchyConfig {
    pub levels: usize,
    pub theta_occ: f64,
    /// Restricts the dense coarsest level to voxels that may touch the frustum.
    pub frustum: Option<Frustum>,
    pub categories: CategoryTable,
}

impl HierarchyConfig {
    pub fn new(categories: CategoryTable) -> Self {
        Self {
            levels: DEFAULT_LEVELS,
            theta_occ: DEFAULT_THETA_OCC,
            frustum: None,
            categories,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.levels == 0 {
            return Err(invalid("the hierarchy needs at least one level"));
        }
        if !(self.theta_occ > 0.0 && self.theta_occ < 1.0) {
            return Err(invalid(format!(
                "occupancy threshold {} is outside (0, 1)",
                self.theta_occ
            )));
        }
        Ok(())
    }

    /// Grid factor of level `h` relative to level 0.
    pub fn factor(level: usize) -> u32 {
        1 << level
    }
}

/// Outputs of one level.
#[derive(Clone, Debug, PartialEq)]
pub struct LevelTrace {
    pub level: usize,
    pub spec: GridSpec,
    pub outputs: SparseVolume<SiteOutput>,
}

/// Level-0 heads restricted to accepted sites, the input of surface assembly.
#[derive(Clone, Debug, PartialEq)]
pub struct FinalHeads {
    pub distance: SparseVolume<f32>,
    pub semantic: SparseVolume<Vec<f32>>,
    pub instances: SparseVolume<Option<InstanceId>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct HierarchyResult {
    pub panoptic: PanopticVolume,
    /// Indexed by level; `levels[0]` is the finest.
    pub levels: Vec<LevelTrace>,
    pub heads: FinalHeads,
}

/// Sites with occupancy at or above `theta`, each expanded to its 8 children.
pub fn occupancy_to_sites(occ: &SparseVolume<f32>, theta: f64) -> BTreeSet<VoxelCoord> {
    occ.iter()
        .filter(|(_, &p)| p as f64 >= theta)
        .flat_map(|(c, _)| c.children(LEVEL_FACTOR))
        .collect()
}

/// Dense coarsest level plus the downsampled seed support.
fn coarsest_sites(
    seed: &LiftedVolumes,
    spec: &GridSpec,
    factor: u32,
    frustum: Option<&Frustum>,
) -> BTreeSet<VoxelCoord> {
    let h = spec.size();
    let mut sites: BTreeSet<VoxelCoord> = spec
        .coords()
        .filter(|&c| match frustum {
            Some(f) => {
                let lo = spec.corner(c);
                f.may_intersect_box(lo, lo + Vec3::splat(h))
            }
            None => true,
        })
        .collect();
    sites.extend(seed.distance.coords().map(|c| c.coarsen(factor as i32)));
    sites
}

fn checked_outputs(
    out: SparseVolume<SiteOutput>,
    spec: &GridSpec,
    sites: &BTreeSet<VoxelCoord>,
    level: usize,
) -> Result<SparseVolume<SiteOutput>> {
    if out.spec() != spec {
        return Err(contract(format!(
            "level {level} predictor answered on a different grid"
        )));
    }
    if out.len() != sites.len() || !out.coords().eq(sites.iter().copied()) {
        return Err(contract(format!(
            "level {level} predictor answered on {} sites, {} requested",
            out.len(),
            sites.len()
        )));
    }
    if let Some((c, _)) = out.iter().find(|(_, o)| !(0.0..=1.0).contains(&o.occupancy)) {
        return Err(contract(format!("occupancy outside [0, 1] at {c:?} on level {level}")));
    }
    Ok(out)
}

fn final_heads(out: &SparseVolume<SiteOutput>, theta: f64) -> Result<FinalHeads> {
    let spec = *out.spec();
    let mut heads = FinalHeads {
        distance: SparseVolume::new(spec),
        semantic: SparseVolume::new(spec),
        instances: SparseVolume::new(spec),
    };
    for (c, o) in out.iter() {
        if (o.occupancy as f64) < theta {
            continue;
        }
        let d = o
            .distance
            .ok_or_else(|| contract(format!("accepted level-0 site {c:?} has no distance")))?;
        heads.distance.insert(c, d)?;
        heads.semantic.insert(c, o.semantic.clone())?;
        let id = match argmax(&o.instance) {
            0 => None,
            ch => Some(ch as InstanceId),
        };
        heads.instances.insert(c, id)?;
    }
    Ok(heads)
}

fn panoptic_from_heads(heads: &FinalHeads, categories: &CategoryTable) -> Result<PanopticVolume> {
    let mut out = SparseVolume::new(*heads.distance.spec());
    for (c, &d) in heads.distance.iter() {
        let logits = heads.semantic.get(c).expect("heads share support");
        if logits.len() != categories.len() {
            return Err(contract(format!(
                "{} semantic logits at {c:?} for {} categories",
                logits.len(),
                categories.len()
            )));
        }
        let category = categories.id_at(argmax(logits)).expect("channel within table");
        let instance = *heads.instances.get(c).expect("heads share support");
        out.insert(c, PanopticVoxel::new(d, Label::new(category, instance)))?;
    }
    Ok(out)
}

/// Runs the predictor coarse to fine over the grid of `seed`.
pub fn run_coarse_to_fine(
    seed: &LiftedVolumes,
    predictor: &mut dyn LevelPredictor,
    cfg: &HierarchyConfig,
) -> Result<HierarchyResult> {
    cfg.validate()?;
    let finest = *seed.spec();
    let top = cfg.levels - 1;
    let top_factor = HierarchyConfig::factor(top);
    let top_spec = finest.coarsen(top_factor)?;
    let mut sites = coarsest_sites(seed, &top_spec, top_factor, cfg.frustum.as_ref());

    let mut traces = Vec::with_capacity(cfg.levels);
    for level in (0..cfg.levels).rev() {
        let spec = if level == 0 {
            finest
        } else {
            finest.coarsen(HierarchyConfig::factor(level))?
        };
        let request = LevelRequest {
            level,
            spec,
            sites: &sites,
            seed,
        };
        let outputs = checked_outputs(predictor.predict(&request)?, &spec, &sites, level)?;
        if level > 0 {
            let occ = outputs.map(|_, o| o.occupancy);
            sites = occupancy_to_sites(&occ, cfg.theta_occ);
        }
        traces.push(LevelTrace { level, spec, outputs });
    }
    traces.reverse();

    let heads = final_heads(&traces[0].outputs, cfg.theta_occ)?;
    let panoptic = panoptic_from_heads(&heads, &cfg.categories)?;
    Ok(HierarchyResult {
        panoptic,
        levels: traces,
        heads,
    })
}

/// Every site below the top level has a parent accepted one level up.
pub fn is_monotone_sparse(levels: &[LevelTrace], theta: f64) -> bool {
    levels.windows(2).all(|w| {
        let (fine, coarse) = (&w[0], &w[1]);
        fine.outputs.coords().all(|c| {
            coarse
                .outputs
                .get(c.coarsen(LEVEL_FACTOR))
                .is_some_and(|o| o.occupancy as f64 >= theta)
        })
    })
}

/// Stored per-level outputs, e.g. a ground-truth hierarchy. Requested sites
/// without a stored output answer with zero occupancy.
#[derive(Clone, Debug, PartialEq)]
pub struct ReplayPredictor {
    levels: Vec<SparseVolume<SiteOutput>>,
    semantic_channels: usize,
    instance_channels: usize,
}

impl ReplayPredictor {
    pub fn new(levels: Vec<SparseVolume<SiteOutput>>) -> Result<Self> {
        let first = levels.iter().flat_map(|l| l.iter()).next().map(|(_, o)| o);
        let semantic_channels = first.map_or(1, |o| o.semantic.len());
        let instance_channels = first.map_or(1, |o| o.instance.len());
        for l in &levels {
            if l.iter()
                .any(|(_, o)| o.semantic.len() != semantic_channels || o.instance.len() != instance_channels)
            {
                return Err(invalid("replay outputs must share channel counts"));
            }
        }
        Ok(Self {
            levels,
            semantic_channels,
            instance_channels,
        })
    }

    /// Hierarchy whose level-0 heads encode `gt` one-hot: the semantic channel
    /// of the category and instance channel = instance id (0 for none).
    /// Coarser levels mark the downsampled support as occupied.
    pub fn from_ground_truth(gt: &PanopticVolume, categories: &CategoryTable, levels: usize) -> Result<Self> {
        if levels == 0 {
            return Err(invalid("the hierarchy needs at least one level"));
        }
        let semantic_channels = categories.len();
        let instance_channels = gt
            .iter()
            .filter_map(|(_, v)| v.instance)
            .max()
            .map_or(1, |m| m as usize + 1);
        let mut out = Vec::with_capacity(levels);
        let mut level0 = SparseVolume::new(*gt.spec());
        for (c, v) in gt.iter() {
            let channel = categories
                .channel_of(v.semantic)
                .ok_or_else(|| invalid(format!("category {} is not in the table", v.semantic)))?;
            let mut semantic = vec![0.0; semantic_channels];
            semantic[channel] = 1.0;
            let mut instance = vec![0.0; instance_channels];
            instance[v.instance.unwrap_or(0) as usize] = 1.0;
            level0.insert(
                c,
                SiteOutput {
                    occupancy: 1.0,
                    semantic,
                    instance,
                    distance: Some(v.sdf),
                },
            )?;
        }
        out.push(level0);
        for level in 1..levels {
            let spec = gt.spec().coarsen(HierarchyConfig::factor(level))?;
            let mut vol = SparseVolume::new(spec);
            for c in gt.coords() {
                let parent = c.coarsen(HierarchyConfig::factor(level) as i32);
                if !vol.contains(parent) {
                    vol.insert(
                        parent,
                        SiteOutput {
                            occupancy: 1.0,
                            semantic: vec![0.0; semantic_channels],
                            instance: vec![0.0; instance_channels],
                            distance: None,
                        },
                    )?;
                }
            }
            out.push(vol);
        }
        Ok(Self {
            levels: out,
            semantic_channels,
            instance_channels,
        })
    }

    pub fn levels(&self) -> &[SparseVolume<SiteOutput>] {
        &self.levels
    }
}

impl LevelPredictor for ReplayPredictor {
    fn predict(&mut self, request: &LevelRequest<'_>) -> Result<SparseVolume<SiteOutput>> {
        let stored = self
            .levels
            .get(request.level)
            .ok_or_else(|| invalid(format!("no replay data for level {}", request.level)))?;
        if stored.spec() != &request.spec {
            return Err(invalid(format!(
                "replay grid of level {} differs from the request",
                request.level
            )));
        }
        let mut out = SparseVolume::new(request.spec);
        for &c in request.sites {
            let o = stored.get(c).cloned().unwrap_or_else(|| SiteOutput {
                occupancy: 0.0,
                semantic: vec![0.0; self.semantic_channels],
                instance: vec![0.0; self.instance_channels],
                distance: None,
            });
            out.insert(c, o)?;
        }
        Ok(out)
    }
}

/// Answers every site with the same output.
#[derive(Clone, Debug, PartialEq)]
pub struct ConstantPredictor(pub SiteOutput);

impl LevelPredictor for ConstantPredictor {
    fn predict(&mut self, request: &LevelRequest<'_>) -> Result<SparseVolume<SiteOutput>> {
        let mut out = SparseVolume::new(request.spec);
        for &c in request.sites {
            out.insert(c, self.0.clone())?;
        }
        Ok(out)
    }
}
