//! Instance propagation from 2D detections to an (N+1)-channel 3D volume.
//!
//! Predicted 2D masks are matched to ground-truth masks, every prediction is
//! given a channel, and matched ground-truth instances inherit the channel of
//! their prediction. Channel 0 is reserved for "no instance".

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

#[cfg(feature = "serde")]
use serde::{Deserialize, Serialize};

use crate::categories::{CategoryId, InstanceId};
use crate::error::{invalid, Result};
use crate::rng::KeyedStream;
use crate::volume::{GridSpec, PanopticVolume, SparseVolume, VoxelCoord};

/// Pixel IoU above which a prediction may be matched to a ground-truth mask.
pub const MATCH_IOU: f64 = 0.5;

#[derive(Clone, Debug, PartialEq)]
pub struct Mask2D {
    /// Instance id for ground-truth masks; free-form for predictions.
    pub id: InstanceId,
    pub category: CategoryId,
    pub score: f32,
    /// Row-major foreground flags.
    pub pixels: Vec<bool>,
}

impl Mask2D {
    pub fn area(&self) -> usize {
        self.pixels.iter().filter(|p| **p).count()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MaskSet2D {
    pub width: u32,
    pub height: u32,
    pub masks: Vec<Mask2D>,
}

impl MaskSet2D {
    pub fn new(width: u32, height: u32) -> Self {
        Self {
            width,
            height,
            masks: Vec::new(),
        }
    }

    pub fn push(&mut self, mask: Mask2D) -> Result<()> {
        if mask.pixels.len() != self.width as usize * self.height as usize {
            return Err(invalid("mask size differs from the image size"));
        }
        if mask.area() == 0 {
            return Err(invalid(format!("mask {} is empty", mask.id)));
        }
        self.masks.push(mask);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.masks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.masks.is_empty()
    }
}

pub fn mask_iou(a: &Mask2D, b: &Mask2D) -> f64 {
    let (mut inter, mut union) = (0usize, 0usize);
    for (&x, &y) in a.pixels.iter().zip(&b.pixels) {
        inter += (x && y) as usize;
        union += (x || y) as usize;
    }
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

/// Channel ids (1..=N) given to predicted masks and to matched GT instances.
#[derive(Clone, Debug, Default, PartialEq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
pub struct ChannelAssignment {
    /// Channel of each predicted mask, by prediction index.
    pub pred_channels: Vec<u32>,
    /// Channel of each matched ground-truth instance.
    pub gt_channels: BTreeMap<InstanceId, u32>,
    /// Matched `(pred index, gt index, IoU)` triples in match order.
    pub matches: Vec<(usize, usize, f64)>,
}

impl ChannelAssignment {
    /// Number of instance channels N (the volume has N + 1 channels).
    pub fn channel_count(&self) -> usize {
        self.pred_channels.len()
    }

    /// Relabel channels by a seeded permutation of `1..=N`.
    pub fn permuted(&self, seed: u64) -> Self {
        let n = self.channel_count();
        let mut perm: Vec<u32> = (1..=n as u32).collect();
        let mut rng = KeyedStream::new(seed);
        for i in (1..n).rev() {
            let j = rng.index(i + 1);
            perm.swap(i, j);
        }
        let map = |c: u32| perm[c as usize - 1];
        Self {
            pred_channels: self.pred_channels.iter().map(|&c| map(c)).collect(),
            gt_channels: self.gt_channels.iter().map(|(&g, &c)| (g, map(c))).collect(),
            matches: self.matches.clone(),
        }
    }
}

/// Greedy one-to-one matching in descending pixel IoU; a pair qualifies when
/// its IoU exceeds 0.5. Matched predictions take channels in match order,
/// unmatched predictions take the remaining channels in index order.
pub fn match_masks_2d(pred: &MaskSet2D, gt: &MaskSet2D) -> Result<ChannelAssignment> {
    if (pred.width, pred.height) != (gt.width, gt.height) {
        return Err(invalid("prediction and ground-truth masks differ in image size"));
    }
    let mut candidates = Vec::new();
    for (p, pm) in pred.masks.iter().enumerate() {
        for (g, gm) in gt.masks.iter().enumerate() {
            let iou = mask_iou(pm, gm);
            if iou > MATCH_IOU {
                candidates.push((iou, p, g));
            }
        }
    }
    candidates.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));

    let mut pred_channels = vec![0u32; pred.len()];
    let mut gt_taken = vec![false; gt.len()];
    let mut out = ChannelAssignment::default();
    let mut next = 1u32;
    for (iou, p, g) in candidates {
        if pred_channels[p] != 0 || gt_taken[g] {
            continue;
        }
        pred_channels[p] = next;
        gt_taken[g] = true;
        out.gt_channels.insert(gt.masks[g].id, next);
        out.matches.push((p, g, iou));
        next += 1;
    }
    for c in pred_channels.iter_mut().filter(|c| **c == 0) {
        *c = next;
        next += 1;
    }
    out.pred_channels = pred_channels;
    Ok(out)
}

/// Sparse volume of (N+1)-vectors of instance logits.
#[derive(Clone, Debug, PartialEq)]
pub struct InstanceChannelVolume {
    channels: usize,
    volume: SparseVolume<Vec<f32>>,
}

impl InstanceChannelVolume {
    /// Empty volume for `detections` instance channels plus channel 0.
    pub fn new(spec: GridSpec, detections: usize) -> Self {
        Self {
            channels: detections + 1,
            volume: SparseVolume::new(spec),
        }
    }

    pub fn from_volume(volume: SparseVolume<Vec<f32>>) -> Result<Self> {
        let channels = volume.iter().next().map_or(1, |(_, v)| v.len());
        if channels == 0 || volume.iter().any(|(_, v)| v.len() != channels) {
            return Err(invalid("instance logit vectors must share one non-zero length"));
        }
        Ok(Self { channels, volume })
    }

    pub(crate) fn from_parts(channels: usize, volume: SparseVolume<Vec<f32>>) -> Result<Self> {
        if volume.iter().any(|(_, v)| v.len() != channels) {
            return Err(invalid(format!("instance logit vectors must have {channels} channels")));
        }
        Ok(Self { channels, volume })
    }

    /// Total channel count N + 1.
    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn insert(&mut self, c: VoxelCoord, logits: Vec<f32>) -> Result<()> {
        if logits.len() != self.channels {
            return Err(invalid(format!(
                "expected {} instance channels, got {}",
                self.channels,
                logits.len()
            )));
        }
        self.volume.insert(c, logits)?;
        Ok(())
    }

    pub fn volume(&self) -> &SparseVolume<Vec<f32>> {
        &self.volume
    }

    pub fn into_volume(self) -> SparseVolume<Vec<f32>> {
        self.volume
    }

    /// One-hot logits of a channel-id volume.
    pub fn one_hot(targets: &SparseVolume<u32>, channels: usize) -> Result<Self> {
        let mut out = Self {
            channels,
            volume: SparseVolume::new(*targets.spec()),
        };
        for (c, &t) in targets.iter() {
            if t as usize >= channels {
                return Err(invalid(format!("channel {t} exceeds {channels} channels")));
            }
            let mut v = vec![0.0; channels];
            v[t as usize] = 1.0;
            out.volume.insert(c, v)?;
        }
        Ok(out)
    }
}

/// Per-voxel training target: the channel of the voxel's GT instance when that
/// instance was matched, channel 0 otherwise (stuff, unmatched instances).
pub fn build_3d_instance_targets(gt: &PanopticVolume, assign: &ChannelAssignment) -> Result<SparseVolume<u32>> {
    let mut present = BTreeMap::new();
    for (_, v) in gt.iter() {
        if let Some(id) = v.instance {
            present.insert(id, ());
        }
    }
    if let Some(id) = assign.gt_channels.keys().find(|id| !present.contains_key(id)) {
        return Err(invalid(format!(
            "assignment references GT instance {id} absent from the volume"
        )));
    }
    Ok(gt.map(|_, v| {
        v.instance
            .and_then(|id| assign.gt_channels.get(&id).copied())
            .unwrap_or(0)
    }))
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(values: &[f32]) -> usize {
    let mut best = 0;
    for (n, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = n;
        }
    }
    best
}

/// Per-voxel argmax channel; channel 0 decodes to no instance.
pub fn decode_instance_channels(v: &InstanceChannelVolume) -> SparseVolume<Option<InstanceId>> {
    v.volume.map(|_, logits| match argmax(logits) {
        0 => None,
        c => Some(c as InstanceId),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::categories::Label;
    use crate::volume::PanopticVoxel;

    fn mask(id: u32, w: usize, range: core::ops::Range<usize>) -> Mask2D {
        let mut pixels = vec![false; w];
        for p in range {
            pixels[p] = true;
        }
        Mask2D {
            id,
            category: 3,
            score: 1.0,
            pixels,
        }
    }

    fn set(masks: Vec<Mask2D>) -> MaskSet2D {
        let mut s = MaskSet2D::new(100, 1);
        for m in masks {
            s.push(m).unwrap();
        }
        s
    }

    #[test]
    fn identical_masks_all_match() {
        let gt = set(vec![mask(4, 100, 0..10), mask(9, 100, 20..40), mask(2, 100, 50..55)]);
        let a = match_masks_2d(&gt, &gt).unwrap();
        assert_eq!(a.pred_channels, [1, 2, 3]);
        assert_eq!(a.gt_channels.len(), 3);
        assert_eq!(a.gt_channels[&4], 1);
    }

    #[test]
    fn low_iou_prediction_gets_own_channel() {
        // IoU = 4 / 10 against the only GT mask.
        let pred = set(vec![mask(1, 100, 0..4)]);
        let gt = set(vec![mask(5, 100, 0..10)]);
        let a = match_masks_2d(&pred, &gt).unwrap();
        assert_eq!(a.pred_channels, [1]);
        assert!(a.gt_channels.is_empty());
    }

    /// Exhaustive one-to-one matching maximizing the total IoU of pairs above 0.5.
    fn best_total(pred: &MaskSet2D, gt: &MaskSet2D) -> (f64, Vec<(usize, usize)>) {
        fn go(
            p: usize,
            pred: &MaskSet2D,
            gt: &MaskSet2D,
            used: &mut Vec<bool>,
            cur: &mut Vec<(usize, usize)>,
            best: &mut (f64, Vec<(usize, usize)>),
        ) {
            if p == pred.len() {
                let total: f64 = cur.iter().map(|&(a, b)| mask_iou(&pred.masks[a], &gt.masks[b])).sum();
                if total > best.0 {
                    *best = (total, cur.clone());
                }
                return;
            }
            go(p + 1, pred, gt, used, cur, best);
            for g in 0..gt.len() {
                if !used[g] && mask_iou(&pred.masks[p], &gt.masks[g]) > MATCH_IOU {
                    used[g] = true;
                    cur.push((p, g));
                    go(p + 1, pred, gt, used, cur, best);
                    cur.pop();
                    used[g] = false;
                }
            }
        }
        let mut best = (0.0, Vec::new());
        go(0, pred, gt, &mut vec![false; gt.len()], &mut Vec::new(), &mut best);
        best
    }

    #[test]
    fn higher_iou_prediction_wins_a_contested_gt() {
        let gt = set(vec![mask(7, 100, 0..10)]);
        // IoU 0.9 and 0.6 with the same GT mask.
        let pred = set(vec![mask(1, 100, 0..6), mask(2, 100, 0..9)]);
        let a = match_masks_2d(&pred, &gt).unwrap();
        let (_, oracle) = best_total(&pred, &gt);
        assert_eq!(oracle, [(1, 0)]);
        assert_eq!(a.matches.iter().map(|m| (m.0, m.1)).collect::<Vec<_>>(), oracle);
        assert_eq!(a.pred_channels, [2, 1]);
        assert_eq!(a.gt_channels[&7], 1);
    }

    #[test]
    fn size_mismatch_is_rejected() {
        let a = MaskSet2D::new(4, 4);
        let b = MaskSet2D::new(4, 5);
        assert!(match_masks_2d(&a, &b).is_err());
        let mut s = MaskSet2D::new(2, 2);
        assert!(s.push(mask(1, 3, 0..1)).is_err());
        assert!(s.push(mask(1, 4, 0..0)).is_err());
    }

    fn gt_volume() -> PanopticVolume {
        let spec = GridSpec::new(0.03, [0.0; 3], [8; 3]).unwrap();
        let cells = [
            ([0, 0, 0], Label::stuff(11)),
            ([1, 0, 0], Label::thing(3, 10)),
            ([2, 0, 0], Label::thing(3, 10)),
            ([3, 0, 0], Label::thing(5, 20)),
            ([4, 0, 0], Label::stuff(10)),
        ];
        SparseVolume::from_cells(
            spec,
            cells
                .iter()
                .map(|(c, l)| (VoxelCoord::from(*c), PanopticVoxel::new(0.0, *l))),
        )
        .unwrap()
    }

    #[test]
    fn targets_follow_the_assignment() {
        let gt = gt_volume();
        let mut a = ChannelAssignment {
            pred_channels: vec![1, 2, 3],
            ..Default::default()
        };
        a.gt_channels.insert(10, 3);
        let t = build_3d_instance_targets(&gt, &a).unwrap();
        // Direct scan: exactly instance 10's voxels carry channel 3.
        for (c, v) in gt.iter() {
            assert_eq!(*t.get(c).unwrap() == 3, v.instance == Some(10));
        }
        assert_eq!(t.iter().filter(|(_, &x)| x == 0).count(), 3);

        a.gt_channels.insert(20, 1);
        let t = build_3d_instance_targets(&gt, &a).unwrap();
        for (c, v) in gt.iter() {
            assert_eq!(*t.get(c).unwrap() == 0, v.instance.is_none());
        }

        let none = build_3d_instance_targets(&gt, &ChannelAssignment::default()).unwrap();
        assert!(none.iter().all(|(_, &x)| x == 0));

        a.gt_channels.insert(99, 2);
        assert!(build_3d_instance_targets(&gt, &a).is_err());
    }

    #[test]
    fn decode_examples() {
        let spec = GridSpec::new(0.03, [0.0; 3], [4; 3]).unwrap();
        let mut v = InstanceChannelVolume::new(spec, 2);
        v.insert(VoxelCoord::new(0, 0, 0), vec![1.0, 0.0, 0.0]).unwrap();
        v.insert(VoxelCoord::new(1, 0, 0), vec![0.1, 2.0, -1.0]).unwrap();
        v.insert(VoxelCoord::new(2, 0, 0), vec![0.0, 3.0, 3.0]).unwrap();
        assert!(v.insert(VoxelCoord::new(3, 0, 0), vec![0.0]).is_err());
        let d = decode_instance_channels(&v);
        assert_eq!(d.get(VoxelCoord::new(0, 0, 0)), Some(&None));
        assert_eq!(d.get(VoxelCoord::new(1, 0, 0)), Some(&Some(1)));
        assert_eq!(d.get(VoxelCoord::new(2, 0, 0)), Some(&Some(1)));
    }

    #[test]
    fn permutation_equivariance_of_decode() {
        let gt = set(vec![mask(4, 100, 0..10), mask(9, 100, 20..40), mask(2, 100, 50..55)]);
        let a = match_masks_2d(&gt, &gt).unwrap();
        let b = a.permuted(17);
        let vol = gt_volume();
        let mut assign = a.clone();
        assign.gt_channels = [(10, 1), (20, 3)].into_iter().collect();
        let perm = assign.permuted(17);
        let ta = build_3d_instance_targets(&vol, &assign).unwrap();
        let tb = build_3d_instance_targets(&vol, &perm).unwrap();
        let da = decode_instance_channels(&InstanceChannelVolume::one_hot(&ta, 4).unwrap());
        let db = decode_instance_channels(&InstanceChannelVolume::one_hot(&tb, 4).unwrap());
        // Same relabelling maps one decode onto the other.
        let relabel: BTreeMap<u32, u32> = a
            .pred_channels
            .iter()
            .zip(&b.pred_channels)
            .map(|(&x, &y)| (x, y))
            .collect();
        for (c, x) in da.iter() {
            assert_eq!(x.map(|x| relabel[&x]), *db.get(c).unwrap());
        }
        let mut sorted = b.pred_channels.clone();
        sorted.sort();
        assert_eq!(sorted, [1, 2, 3]);
    }
}
