//! Per-level predictor outputs stored as a directory of sparse volumes.
//!
//! `occ_<h>.spvl` holds the occupancy of level `h`. Level 0 additionally has
//! `sdf_0.spvl` (distance), `sem_0.spvl` and `inst_0.spvl`. The last two hold
//! either raw logits or channel indices, which expand to one-hot logits.
//! `hierarchy.json` records the level count and channel widths.

use std::path::Path;

use serde::{Deserialize, Serialize};

use panrec_core::hierarchy::{ReplayPredictor, SiteOutput};
use panrec_core::{CategoryTable, InstanceId, PanopticVolume, SparseVolume};

use crate::error::{Error, Result};
use crate::formats::spvl::{self, PayloadKind};
use crate::formats::{read_json, write_json};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct HierarchyInfo {
    pub levels: usize,
    pub semantic_channels: usize,
    pub instance_channels: usize,
}

const INFO: &str = "hierarchy.json";

fn occ(h: usize) -> String {
    format!("occ_{h}.spvl")
}

/// Writes the ground-truth hierarchy of `gt` in compact channel form.
pub fn write_gt_hierarchy(
    dir: &Path,
    gt: &PanopticVolume,
    categories: &CategoryTable,
    levels: usize,
) -> Result<HierarchyInfo> {
    let replay = ReplayPredictor::from_ground_truth(gt, categories, levels)?;
    let mut info = HierarchyInfo {
        levels,
        semantic_channels: categories.len(),
        instance_channels: 1,
    };
    for (h, level) in replay.levels().iter().enumerate() {
        spvl::write_as(
            &dir.join(occ(h)),
            &level.map(|_, o| o.occupancy),
            PayloadKind::Occupancy,
        )?;
        if h == 0 {
            if let Some((_, o)) = level.iter().next() {
                info.instance_channels = o.instance.len();
            }
            let sem = level.map(|_, o| panrec_core::propagation::argmax(&o.semantic) as u32);
            let inst = level.map(|_, o| match panrec_core::propagation::argmax(&o.instance) {
                0 => None,
                c => Some(c as InstanceId),
            });
            let sdf = level.filter_map(|_, o| o.distance);
            spvl::write(&dir.join("sem_0.spvl"), &sem)?;
            spvl::write(&dir.join("inst_0.spvl"), &inst)?;
            spvl::write(&dir.join("sdf_0.spvl"), &sdf)?;
        }
    }
    write_json(&dir.join(INFO), &info)?;
    Ok(info)
}

fn one_hot(index: usize, width: usize, path: &Path) -> Result<Vec<f32>> {
    if index >= width {
        return Err(Error::format(path, format!("channel {index} exceeds width {width}")));
    }
    let mut v = vec![0.0; width];
    v[index] = 1.0;
    Ok(v)
}

fn channel_logits(path: &Path, width: usize, instances: bool) -> Result<SparseVolume<Vec<f32>>> {
    let header = spvl::read_header(path)?;
    match header.kind {
        PayloadKind::Logits => {
            let v: SparseVolume<Vec<f32>> = spvl::read(path)?;
            if v.iter().any(|(_, l)| l.len() != width) {
                return Err(Error::format(path, format!("logits must have {width} channels")));
            }
            Ok(v)
        }
        PayloadKind::Channel if !instances => {
            let v: SparseVolume<u32> = spvl::read(path)?;
            let mut out = SparseVolume::new(*v.spec());
            for (c, &i) in v.iter() {
                out.insert(c, one_hot(i as usize, width, path)?)?;
            }
            Ok(out)
        }
        PayloadKind::Instance if instances => {
            let v: SparseVolume<Option<InstanceId>> = spvl::read(path)?;
            let mut out = SparseVolume::new(*v.spec());
            for (c, &i) in v.iter() {
                out.insert(c, one_hot(i.unwrap_or(0) as usize, width, path)?)?;
            }
            Ok(out)
        }
        k => Err(Error::format(path, format!("unexpected {} payload", k.name()))),
    }
}

pub fn read_replay(dir: &Path) -> Result<ReplayPredictor> {
    let info: HierarchyInfo = read_json(&dir.join(INFO))?;
    if info.levels == 0 {
        return Err(Error::format(&dir.join(INFO), "a hierarchy needs at least one level"));
    }
    let mut levels = Vec::with_capacity(info.levels);
    for h in 0..info.levels {
        let occ_path = dir.join(occ(h));
        let occupancy: SparseVolume<f32> = spvl::read(&occ_path)?;
        if h > 0 {
            levels.push(occupancy.map(|_, &p| SiteOutput {
                occupancy: p,
                semantic: vec![0.0; info.semantic_channels],
                instance: vec![0.0; info.instance_channels],
                distance: None,
            }));
            continue;
        }
        let sem = channel_logits(&dir.join("sem_0.spvl"), info.semantic_channels, false)?;
        let inst = channel_logits(&dir.join("inst_0.spvl"), info.instance_channels, true)?;
        let sdf: SparseVolume<f32> = spvl::read(&dir.join("sdf_0.spvl"))?;
        let mut level = SparseVolume::new(*occupancy.spec());
        for (c, &p) in occupancy.iter() {
            let missing = || Error::format(dir, format!("level 0 site {c:?} lacks semantic or instance outputs"));
            level.insert(
                c,
                SiteOutput {
                    occupancy: p,
                    semantic: sem.get(c).cloned().ok_or_else(missing)?,
                    instance: inst.get(c).cloned().ok_or_else(missing)?,
                    distance: sdf.get(c).copied(),
                },
            )?;
        }
        levels.push(level);
    }
    Ok(ReplayPredictor::new(levels)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use panrec_core::{GridSpec, Label, PanopticVoxel, VoxelCoord};

    #[test]
    fn stored_hierarchy_equals_in_memory() {
        let spec = GridSpec::camera_aligned(0.03, [16; 3]).unwrap();
        let cells = [
            (VoxelCoord::new(1, 2, 3), PanopticVoxel::new(0.25, Label::stuff(10))),
            (VoxelCoord::new(5, 5, 5), PanopticVoxel::new(-0.5, Label::thing(3, 2))),
            (VoxelCoord::new(15, 0, 9), PanopticVoxel::new(2.0, Label::thing(4, 7))),
        ];
        let gt = SparseVolume::from_cells(spec, cells).unwrap();
        let cats = CategoryTable::synthetic();
        let dir = tempfile::tempdir().unwrap();
        write_gt_hierarchy(dir.path(), &gt, &cats, 3).unwrap();
        let loaded = read_replay(dir.path()).unwrap();
        let expected = ReplayPredictor::from_ground_truth(&gt, &cats, 3).unwrap();
        assert_eq!(loaded, expected);
    }
}
