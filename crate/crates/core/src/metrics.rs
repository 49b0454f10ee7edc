//! Segment matching and the PRQ / RSQ / RRQ reconstruction quality metrics.
//!
//! Per category, predicted and ground-truth segments are matched greedily by
//! descending voxel IoU with a minimum overlap of 0.25. With `TP`, `FP` and
//! `FN` the matched pairs, unmatched predictions and unmatched ground truth:
//!
//! ```text
//! RSQ = sum IoU / |TP|
//! RRQ = |TP| / (|TP| + |FP| / 2 + |FN| / 2)
//! PRQ = sum IoU / (|TP| + |FP| / 2 + |FN| / 2) = RSQ * RRQ
//! ```
//!
//! All three are reported in percent.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::vec::Vec;

#[cfg(feature = "serde")]
use serde::{Deserialize, Serialize};

use crate::categories::{CategoryId, CategoryKind, CategoryTable, InstanceId, Label};
use crate::volume::{SparseVolume, VoxelCoord, VoxelMask};

pub const DEFAULT_MATCH_IOU: f64 = 0.25;

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
pub struct Segment {
    pub category: CategoryId,
    /// `None` for stuff.
    pub instance: Option<InstanceId>,
    pub voxels: BTreeSet<VoxelCoord>,
    /// Carried through, never used for matching.
    #[cfg_attr(feature = "serde", serde(default, skip_serializing_if = "Option::is_none"))]
    pub confidence: Option<f64>,
}

/// Groups masked voxels into segments: things by `(category, instance)`, stuff
/// by category. Freespace, unknown categories and things voxels without an
/// instance id are dropped. Output is ordered by `(category, instance)`.
pub fn extract_segments(labels: &SparseVolume<Label>, mask: &VoxelMask, categories: &CategoryTable) -> Vec<Segment> {
    let mut groups: BTreeMap<(CategoryId, Option<InstanceId>), BTreeSet<VoxelCoord>> = BTreeMap::new();
    for (c, l) in labels.iter() {
        if !mask.contains(c) {
            continue;
        }
        let key = match categories.kind(l.category) {
            Some(CategoryKind::Things) if l.instance.is_some() => (l.category, l.instance),
            Some(CategoryKind::Stuff) => (l.category, None),
            _ => continue,
        };
        groups.entry(key).or_default().insert(c);
    }
    groups
        .into_iter()
        .map(|((category, instance), voxels)| Segment {
            category,
            instance,
            voxels,
            confidence: None,
        })
        .collect()
}

/// Voxel IoU of two segments; 0 when both are empty.
pub fn segment_iou(a: &Segment, b: &Segment) -> f64 {
    let (small, large) = if a.voxels.len() <= b.voxels.len() {
        (&a.voxels, &b.voxels)
    } else {
        (&b.voxels, &a.voxels)
    };
    let inter = small.iter().filter(|c| large.contains(c)).count();
    let union = a.voxels.len() + b.voxels.len() - inter;
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
pub struct TruePositive {
    /// Index into the prediction list.
    pub pred: usize,
    /// Index into the ground-truth list.
    pub gt: usize,
    pub iou: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
pub struct CategoryMatch {
    pub true_positives: Vec<TruePositive>,
    pub false_positives: usize,
    pub false_negatives: usize,
}

#[derive(Clone, Debug, Default, PartialEq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
pub struct MatchResult {
    pub per_category: BTreeMap<CategoryId, CategoryMatch>,
}

/// Repeatedly matches the highest-IoU unmatched same-category pair with IoU at
/// least `theta`. IoU ties break by prediction index, then ground-truth index.
pub fn greedy_match(pred: &[Segment], gt: &[Segment], theta: f64) -> MatchResult {
    let mut candidates = Vec::new();
    for (p, ps) in pred.iter().enumerate() {
        for (g, gs) in gt.iter().enumerate() {
            if ps.category != gs.category {
                continue;
            }
            let iou = segment_iou(ps, gs);
            if iou >= theta && iou > 0.0 {
                candidates.push(TruePositive { pred: p, gt: g, iou });
            }
        }
    }
    candidates.sort_by(|a, b| b.iou.total_cmp(&a.iou).then(a.pred.cmp(&b.pred)).then(a.gt.cmp(&b.gt)));

    let mut pred_used = alloc::vec![false; pred.len()];
    let mut gt_used = alloc::vec![false; gt.len()];
    let mut out = MatchResult::default();
    for tp in candidates {
        if pred_used[tp.pred] || gt_used[tp.gt] {
            continue;
        }
        pred_used[tp.pred] = true;
        gt_used[tp.gt] = true;
        out.per_category
            .entry(pred[tp.pred].category)
            .or_default()
            .true_positives
            .push(tp);
    }
    for (p, s) in pred.iter().enumerate() {
        let entry = out.per_category.entry(s.category).or_default();
        if !pred_used[p] {
            entry.false_positives += 1;
        }
    }
    for (g, s) in gt.iter().enumerate() {
        let entry = out.per_category.entry(s.category).or_default();
        if !gt_used[g] {
            entry.false_negatives += 1;
        }
    }
    out
}

/// Sufficient statistics of one category.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
pub struct QualityCounts {
    pub tp: usize,
    pub fp: usize,
    #[cfg_attr(feature = "serde", serde(rename = "fn"))]
    pub fn_: usize,
    pub iou_sum: f64,
}

impl QualityCounts {
    pub fn from_match(m: &CategoryMatch) -> Self {
        Self {
            tp: m.true_positives.len(),
            fp: m.false_positives,
            fn_: m.false_negatives,
            iou_sum: m.true_positives.iter().map(|t| t.iou).sum(),
        }
    }

    pub fn add(&mut self, o: &QualityCounts) {
        self.tp += o.tp;
        self.fp += o.fp;
        self.fn_ += o.fn_;
        self.iou_sum += o.iou_sum;
    }

    pub fn is_empty(&self) -> bool {
        self.tp + self.fp + self.fn_ == 0
    }

    pub fn quality(&self) -> Quality {
        let denom = self.tp as f64 + 0.5 * self.fp as f64 + 0.5 * self.fn_ as f64;
        if self.tp == 0 {
            return Quality::default();
        }
        Quality {
            prq: 100.0 * self.iou_sum / denom,
            rsq: 100.0 * self.iou_sum / self.tp as f64,
            rrq: 100.0 * self.tp as f64 / denom,
        }
    }
}

/// Percent-scaled quality triple.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
pub struct Quality {
    pub prq: f64,
    pub rsq: f64,
    pub rrq: f64,
}

impl Quality {
    fn mean<'a>(items: impl Iterator<Item = &'a Quality>) -> Option<Quality> {
        let (mut sum, mut n) = (Quality::default(), 0usize);
        for q in items {
            sum.prq += q.prq;
            sum.rsq += q.rsq;
            sum.rrq += q.rrq;
            n += 1;
        }
        (n > 0).then(|| Quality {
            prq: sum.prq / n as f64,
            rsq: sum.rsq / n as f64,
            rrq: sum.rrq / n as f64,
        })
    }
}

/// Per-category counts pooled over any number of scenes.
#[derive(Clone, Debug, Default, PartialEq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
pub struct PooledCounts {
    pub per_category: BTreeMap<CategoryId, QualityCounts>,
}

impl PooledCounts {
    pub fn from_match(m: &MatchResult) -> Self {
        let mut out = Self::default();
        out.add_match(m);
        out
    }

    pub fn add_match(&mut self, m: &MatchResult) {
        for (&c, cm) in &m.per_category {
            self.per_category
                .entry(c)
                .or_default()
                .add(&QualityCounts::from_match(cm));
        }
    }

    pub fn merge(&mut self, o: &PooledCounts) {
        for (&c, q) in &o.per_category {
            self.per_category.entry(c).or_default().add(q);
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
pub struct ClassReport {
    pub per_category: BTreeMap<CategoryId, Quality>,
    pub all: Option<Quality>,
    pub things: Option<Quality>,
    pub stuff: Option<Quality>,
}

impl ClassReport {
    /// Report over the categories with at least one segment on either side.
    pub fn from_counts(counts: &PooledCounts, categories: &CategoryTable) -> Self {
        let per_category: BTreeMap<_, _> = counts
            .per_category
            .iter()
            .filter(|(_, q)| !q.is_empty())
            .map(|(&c, q)| (c, q.quality()))
            .collect();
        Self::with_aggregates(per_category, categories)
    }

    fn with_aggregates(per_category: BTreeMap<CategoryId, Quality>, categories: &CategoryTable) -> Self {
        let of_kind = |kind: CategoryKind| {
            Quality::mean(
                per_category
                    .iter()
                    .filter(|(&c, _)| categories.kind(c) == Some(kind))
                    .map(|(_, q)| q),
            )
        };
        Self {
            all: Quality::mean(per_category.values()),
            things: of_kind(CategoryKind::Things),
            stuff: of_kind(CategoryKind::Stuff),
            per_category,
        }
    }

    /// Per-category mean over the scenes where the category occurs, with
    /// aggregates recomputed from those means.
    pub fn macro_average(reports: &[ClassReport], categories: &CategoryTable) -> Self {
        let mut by_cat: BTreeMap<CategoryId, Vec<Quality>> = BTreeMap::new();
        for r in reports {
            for (&c, &q) in &r.per_category {
                by_cat.entry(c).or_default().push(q);
            }
        }
        let per_category = by_cat
            .into_iter()
            .map(|(c, qs)| (c, Quality::mean(qs.iter()).expect("non-empty")))
            .collect();
        Self::with_aggregates(per_category, categories)
    }
}

/// Per-category PRQ / RSQ / RRQ of one match result.
pub fn prq_rsq_rrq(m: &MatchResult, categories: &CategoryTable) -> ClassReport {
    ClassReport::from_counts(&PooledCounts::from_match(m), categories)
}

/// Extracts segments of both label volumes under `mask` and matches them.
pub fn match_volumes(
    pred: &SparseVolume<Label>,
    gt: &SparseVolume<Label>,
    mask: &VoxelMask,
    categories: &CategoryTable,
    theta: f64,
) -> MatchResult {
    let p = extract_segments(pred, mask, categories);
    let g = extract_segments(gt, mask, categories);
    greedy_match(&p, &g, theta)
}
